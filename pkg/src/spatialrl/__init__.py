"""Vision-based manipulation learning with deep spatial autoencoders.

Subpackages:

* ``sim2d``    planar pushing world and software rasterizer
* ``dsae``     spatial autoencoder producing feature points
* ``featsel``  feature presence, Kalman filtering, pruning and ranking
* ``dynfit``   time-varying linear-Gaussian dynamics with a GMM prior
* ``lqrctl``   cost model, LQR, KL-constrained controller updates
* ``pipeline`` end-to-end experiment orchestration and CLI
"""

__version__ = "0.1.0"


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or non-finite input."""
