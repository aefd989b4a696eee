"""Deep spatial autoencoder.

conv(64, 7x7, /2) -> BN -> ReLU -> conv(32, 5x5) -> BN -> ReLU -> conv(16, 5x5)
-> BN -> ReLU -> spatial softmax (learned temperature) -> expected (x, y) per
channel -> linear decoder to a downsampled grayscale image.

Feature points live in normalised map coordinates ``[-1, 1]^2``; ``x`` indexes
map columns and ``y`` rows, so ``(-1, -1)`` is the top-left map cell.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import InvalidInputError
from .archive import config_hash, load_tensors, save_tensors

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DsaeArch:
    image_size: int = 64
    channels: tuple[int, ...] = (64, 32, 16)
    kernels: tuple[int, ...] = (7, 5, 5)
    strides: tuple[int, ...] = (2, 1, 1)
    downsample: int | None = None        # decoder output side D; image_size // 4 by default
    bn_eps: float = 1e-5
    conv_pool: bool = False              # conv+pool baseline bottleneck instead of spatial softmax
    pool_hidden: int = 512

    @property
    def D(self) -> int:
        return self.downsample or self.image_size // 4

    @property
    def n_points(self) -> int:
        return self.channels[-1]

    def map_size(self) -> int:
        s = self.image_size
        for k, st in zip(self.kernels, self.strides):
            s = (s + 2 * (k // 2) - k) // st + 1
            if self.conv_pool:
                s //= 2
        return s


@dataclass
class TrainHyper:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64          # frames per minibatch
    window: int = 8               # consecutive frames per window inside a batch
    epochs: int = 10
    slowness_weight: float = 1.0
    temperature_lr_scale: float = 1.0
    weight_decay: float = 0.0
    initial_temperature: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.initial_temperature <= 0:
            raise InvalidInputError("initial_temperature must be positive")
        if self.window < 3 or self.batch_size % self.window:
            raise InvalidInputError("batch_size must be a multiple of window >= 3")


# ---------------------------------------------------------------------------
# functional pieces


def spatial_softmax(activations: torch.Tensor, alpha) -> torch.Tensor:
    """Softmax over the last two (spatial) dims of ``activations / alpha``."""
    alpha_t = torch.as_tensor(alpha, dtype=activations.dtype)
    if torch.any(alpha_t <= 0):
        raise InvalidInputError("temperature must be positive")
    if not torch.all(torch.isfinite(activations)):
        raise InvalidInputError("activations must be finite")
    shape = activations.shape
    flat = (activations / alpha_t).reshape(*shape[:-2], -1)
    flat = flat - flat.max(dim=-1, keepdim=True).values.detach()
    return torch.softmax(flat, dim=-1).reshape(shape)


def grid_coords(h: int, w: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype) if w > 1 else torch.zeros(1, dtype=dtype)
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype) if h > 1 else torch.zeros(1, dtype=dtype)
    return xs, ys


def expected_points(prob: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Expected ``(x, y)`` of each probability map; output shape ``prob.shape[:-2] + (2,)``."""
    if check:
        sums = prob.sum(dim=(-2, -1))
        if torch.any((sums - 1).abs() > 1e-6):
            raise InvalidInputError("probability map must sum to 1")
    h, w = prob.shape[-2:]
    xs, ys = grid_coords(h, w, prob.dtype)
    ex = (prob.sum(dim=-2) * xs).sum(dim=-1)
    ey = (prob.sum(dim=-1) * ys).sum(dim=-1)
    return torch.stack([ex, ey], dim=-1)


def point_to_cell(point, h: int, w: int) -> tuple[int, int]:
    """Nearest map cell (row, col) of a normalised feature point."""
    x, y = float(point[0]), float(point[1])
    col = int(np.clip(np.rint((x + 1) / 2 * (w - 1)), 0, w - 1))
    row = int(np.clip(np.rint((y + 1) / 2 * (h - 1)), 0, h - 1))
    return row, col


def feature_presence(prob_map, cell: tuple[int, int]) -> float:
    """Probability mass in the 3x3 window around ``cell`` (row, col), clipped at borders."""
    p = np.asarray(prob_map)
    r, c = cell
    return float(min(p[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2].sum(), 1.0))


def presence_batch(probs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Vectorised presence for ``probs`` (..., C, H, W) and ``points`` (..., C, 2)."""
    probs = np.asarray(probs)
    h, w = probs.shape[-2:]
    lead = probs.shape[:-2]
    flat_p = probs.reshape(-1, h, w)
    flat_pts = np.asarray(points).reshape(-1, 2)
    cols = np.clip(np.rint((flat_pts[:, 0] + 1) / 2 * (w - 1)).astype(int), 0, w - 1)
    rows = np.clip(np.rint((flat_pts[:, 1] + 1) / 2 * (h - 1)).astype(int), 0, h - 1)
    padded = np.pad(flat_p, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros(len(flat_p))
    idx = np.arange(len(flat_p))
    for dr in range(3):
        for dc in range(3):
            out += padded[idx, rows + dr, cols + dc]
    return np.minimum(out, 1.0).reshape(lead)


def grayscale_downsample(images: torch.Tensor, D: int) -> torch.Tensor:
    """(B, 3, H, W) in [0, 1] -> (B, D, D) luminance averaged over blocks."""
    w = torch.tensor(LUMA, dtype=images.dtype).view(1, 3, 1, 1)
    gray = (images * w).sum(dim=1, keepdim=True)
    return F.adaptive_avg_pool2d(gray, D)[:, 0]


# ---------------------------------------------------------------------------
# model


class SpatialAutoencoder(nn.Module):
    def __init__(self, arch: DsaeArch = DsaeArch()):
        super().__init__()
        self.arch = arch
        convs, bns = [], []
        c_in = 3
        for c, k, s in zip(arch.channels, arch.kernels, arch.strides):
            convs.append(nn.Conv2d(c_in, c, k, stride=s, padding=k // 2))
            bns.append(nn.BatchNorm2d(c, eps=arch.bn_eps))
            c_in = c
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns)
        self.log_temperature = nn.Parameter(torch.zeros(()))
        n_feat = 2 * arch.n_points
        if arch.conv_pool:
            side = arch.map_size()
            self.fc = nn.Sequential(nn.Linear(c_in * side * side, arch.pool_hidden), nn.ReLU(),
                                    nn.Linear(arch.pool_hidden, n_feat))
        self.decoder = nn.Linear(n_feat, arch.D * arch.D)
        self.register_buffer("pixel_mean", torch.full((3,), 0.5))
        self.register_buffer("pixel_std", torch.full((3,), 0.25))

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(self.log_temperature)

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * np.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            for bn in self.bns:
                bn.reset_parameters()
                bn.reset_running_stats()
            if self.arch.conv_pool:
                for layer in self.fc:
                    if isinstance(layer, nn.Linear):
                        layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator)
                                           * np.sqrt(2.0 / layer.in_features))
                        layer.bias.zero_()
            self.decoder.weight.copy_(torch.randn(self.decoder.weight.shape, generator=generator) * 0.01)
            self.decoder.bias.zero_()
            self.log_temperature.zero_()

    def conv_features(self, images: torch.Tensor) -> torch.Tensor:
        """Normalised (B, 3, H, W) images in [0, 1] -> conv3 activations after BN and ReLU."""
        x = (images - self.pixel_mean.view(1, 3, 1, 1)) / self.pixel_std.view(1, 3, 1, 1)
        for conv, bn in zip(self.convs, self.bns):
            x = F.relu(bn(conv(x)))
            if self.arch.conv_pool:
                x = F.max_pool2d(x, 2)
        return x

    def encode(self, images: torch.Tensor) -> tuple[torch.Tensor | None, torch.Tensor]:
        """Returns (softmax maps (B, C, H', W') or None, points (B, C, 2))."""
        a = self.conv_features(images)
        if self.arch.conv_pool:
            z = torch.tanh(self.fc(a.flatten(1)))
            return None, z.view(len(z), -1, 2)
        probs = spatial_softmax(a, self.temperature)
        return probs, expected_points(probs, check=False)

    def decode(self, points: torch.Tensor) -> torch.Tensor:
        out = self.decoder(points.reshape(len(points), -1))
        return out.view(len(points), self.arch.D, self.arch.D)

    def forward(self, images):
        probs, points = self.encode(images)
        return probs, points, self.decode(points)


def new_model(arch: DsaeArch = DsaeArch(), seed: int = 0, dtype=torch.float32) -> SpatialAutoencoder:
    gen = torch.Generator().manual_seed(seed)
    model = SpatialAutoencoder(arch)
    model.reset_parameters(gen)
    return model.to(dtype)


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) or (H, W, 3) numpy images -> (B, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError(f"expected (B, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


# ---------------------------------------------------------------------------
# loss


def slowness_penalty(points: torch.Tensor, seq_ids: torch.Tensor) -> torch.Tensor:
    """Sum of ``|(f_{t+1} - f_t) - (f_t - f_{t-1})|^2`` over triples within one sequence.

    ``points`` is (B, C, 2) ordered in time within each sequence; ``seq_ids``
    (B,) labels the sequence of each frame.
    """
    if len(points) < 3:
        return points.sum() * 0.0
    valid = (seq_ids[:-2] == seq_ids[1:-1]) & (seq_ids[1:-1] == seq_ids[2:])
    acc = points[2:] - 2 * points[1:-1] + points[:-2]
    return (acc.pow(2).sum(dim=(1, 2)) * valid.to(points.dtype)).sum()


def dsae_loss(model: SpatialAutoencoder, images: torch.Tensor, seq_ids: torch.Tensor,
              slowness_weight: float = 1.0, parts: bool = False):
    """Reconstruction error against downsampled grayscale targets plus the slowness term (sums)."""
    if images.shape[-1] != model.arch.image_size or images.shape[-2] != model.arch.image_size:
        raise InvalidInputError("image size does not match the model")
    target = grayscale_downsample(images, model.arch.D)
    _, points, recon = model(images)
    rec = (recon - target).pow(2).sum()
    slow = slowness_penalty(points, seq_ids)
    total = rec + slowness_weight * slow
    if parts:
        return total, rec.detach(), slow.detach()
    return total


# ---------------------------------------------------------------------------
# training


def _windows(lengths: Sequence[int], window: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    out = []
    for s, n in enumerate(lengths):
        if n < window:
            out.append((s, 0))
            continue
        off = int(rng.integers(0, window)) if n > window else 0
        starts = list(range(off, n - window + 1, window))
        if off > 0:
            starts.insert(0, 0)
        out.extend((s, st) for st in starts)
    return out


def _stack_batch(sequences, wins, window):
    imgs, ids = [], []
    for j, (s, st) in enumerate(wins):
        chunk = sequences[s][st:st + window]
        imgs.append(chunk)
        ids.extend([j] * len(chunk))
    return np.concatenate(imgs), torch.tensor(ids)


@dataclass
class TrainResult:
    model: SpatialAutoencoder
    history: list[dict] = field(default_factory=list)


def _set_deterministic():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@torch.no_grad()
def recalibrate_batchnorm(model: SpatialAutoencoder, sequences, batch: int = 128) -> None:
    """Replace running BN statistics by exact averages over the whole dataset."""
    for bn in model.bns:
        bn.reset_running_stats()
        bn.momentum = None
    model.train()
    frames = np.concatenate(list(sequences))
    for i in range(0, len(frames), batch):
        model.conv_features(to_tensor(frames[i:i + batch], model.decoder.weight.dtype))
    for bn in model.bns:
        bn.momentum = 0.1
    model.eval()


@torch.no_grad()
def evaluate_loss(model: SpatialAutoencoder, sequences, slowness_weight: float, batch: int = 128) -> dict:
    model.eval()
    rec = slow = 0.0
    count = 0
    dtype = model.decoder.weight.dtype
    for seq in sequences:
        seq = np.asarray(seq)
        pts = []
        for i in range(0, len(seq), batch):
            x = to_tensor(seq[i:i + batch], dtype)
            _, p, r = model(x)
            rec += float((r - grayscale_downsample(x, model.arch.D)).pow(2).sum())
            pts.append(p)
        pts = torch.cat(pts)
        slow += float(slowness_penalty(pts, torch.zeros(len(pts), dtype=torch.long)))
        count += len(seq)
    return {"recon": rec / count, "slow": slow / count, "total": (rec + slowness_weight * slow) / count}


def train_dsae(sequences: Sequence[np.ndarray], hyper: TrainHyper = TrainHyper(),
               arch: DsaeArch = DsaeArch(), seed: int = 0, eval_every: int = 0,
               init: SpatialAutoencoder | None = None) -> TrainResult:
    """Train by SGD with momentum on windows of consecutive frames.

    ``sequences`` is a list of (T_k, H, W, 3) float arrays in [0, 1]. Training is
    deterministic given ``seed``. Batch-norm statistics are recomputed over the
    full dataset at the end and frozen (the model is returned in eval mode).
    """
    if len(sequences) < 2 or min(len(s) for s in sequences) < 3:
        raise InvalidInputError("need >= 2 sequences of >= 3 frames")
    _set_deterministic()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = init if init is not None else new_model(arch, seed)
    arch = model.arch

    frames = np.concatenate(list(sequences))
    with torch.no_grad():
        mean = frames.reshape(-1, 3).mean(axis=0)
        std = frames.reshape(-1, 3).std(axis=0) + 1e-3
        model.pixel_mean.copy_(torch.as_tensor(mean))
        model.pixel_std.copy_(torch.as_tensor(std))
        if init is None:
            tgt = torch.cat([grayscale_downsample(to_tensor(frames[i:i + 256]), arch.D)
                             for i in range(0, len(frames), 256)])
            model.decoder.bias.copy_(tgt.mean(dim=0).flatten())
            model.log_temperature.fill_(float(np.log(hyper.initial_temperature)))
    del frames

    temp_params = [model.log_temperature]
    other = [p for n, p in model.named_parameters() if n != "log_temperature"]
    opt = torch.optim.SGD([
        {"params": other},
        {"params": temp_params, "lr": hyper.learning_rate * hyper.temperature_lr_scale},
    ], lr=hyper.learning_rate, momentum=hyper.momentum, weight_decay=hyper.weight_decay)

    per_batch = hyper.batch_size // hyper.window
    lengths = [len(s) for s in sequences]
    history = []
    for epoch in range(hyper.epochs):
        model.train()
        wins = _windows(lengths, hyper.window, rng)
        order = rng.permutation(len(wins))
        tot = rec_sum = slow_sum = 0.0
        nfr = 0
        for b in range(0, len(order), per_batch):
            chosen = [wins[i] for i in order[b:b + per_batch]]
            imgs, ids = _stack_batch(sequences, chosen, hyper.window)
            x = to_tensor(imgs)
            loss, rec, slow = dsae_loss(model, x, ids, hyper.slowness_weight, parts=True)
            loss_per_frame = loss / len(x)
            if not torch.isfinite(loss_per_frame):
                raise DivergenceError(f"loss became non-finite in epoch {epoch} "
                                      f"(learning_rate={hyper.learning_rate:g})")
            opt.zero_grad()
            loss_per_frame.backward()
            opt.step()
            tot += float(loss.detach())
            rec_sum += float(rec)
            slow_sum += float(slow)
            nfr += len(x)
        rec_pf = rec_sum / nfr
        entry = {"epoch": epoch, "loss": tot / nfr, "recon": rec_pf, "slow": slow_sum / nfr,
                 "temperature": float(model.temperature.detach())}
        if eval_every and (epoch + 1) % eval_every == 0:
            recalibrate_batchnorm(model, sequences)
            entry["eval"] = evaluate_loss(model, sequences, hyper.slowness_weight)
        history.append(entry)
        log.info("dsae epoch %d loss %.4f recon %.4f slow %.5f alpha %.4f", epoch, entry["loss"],
                 rec_pf, entry["slow"], entry["temperature"])
    recalibrate_batchnorm(model, sequences)
    return TrainResult(model, history)


# ---------------------------------------------------------------------------
# inference helpers


@torch.no_grad()
def encode(model: SpatialAutoencoder, images, batch: int = 256) -> tuple[np.ndarray | None, np.ndarray]:
    """Numpy in, numpy out: (softmax maps or None, points (B, C, 2))."""
    model.eval()
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.shape[1] != model.arch.image_size or arr.shape[2] != model.arch.image_size:
        raise InvalidInputError(f"image shape {arr.shape[1:3]} does not match model input "
                                f"{model.arch.image_size}")
    dtype = model.decoder.weight.dtype
    probs, pts = [], []
    for i in range(0, len(arr), batch):
        p, f = model.encode(to_tensor(arr[i:i + batch], dtype))
        pts.append(f.double().numpy())
        if p is not None:
            probs.append(p.double().numpy())
    P = np.concatenate(probs) if probs else None
    Fp = np.concatenate(pts)
    if single:
        return (P[0] if P is not None else None), Fp[0]
    return P, Fp


def presence(model: SpatialAutoencoder, probs: np.ndarray | None, points: np.ndarray) -> np.ndarray:
    if probs is None:
        return np.ones(points.shape[:-1])
    return presence_batch(probs, points)


@torch.no_grad()
def decode(model: SpatialAutoencoder, points) -> np.ndarray:
    pts = torch.as_tensor(np.asarray(points), dtype=model.decoder.weight.dtype)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    if pts.shape[-2] * pts.shape[-1] != 2 * model.arch.n_points:
        raise InvalidInputError("feature vector length must be 2C")
    out = model.decode(pts).double().numpy()
    return out[0] if single else out


def points_to_pixels(points, arch: DsaeArch) -> np.ndarray:
    """Map normalised feature points to image pixel coordinates (column, row).

    Uses the receptive-field geometry of same-padded convolutions: map cell ``i``
    is centred on image pixel ``i * total_stride``.
    """
    stride = int(np.prod(arch.strides))
    side = arch.map_size()
    return (np.asarray(points) + 1.0) / 2.0 * (side - 1) * stride


# ---------------------------------------------------------------------------
# persistence


def save_model(model: SpatialAutoencoder, path: str | Path, extra: dict | None = None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "arch": asdict(model.arch),
        "arch_hash": config_hash(asdict(model.arch)),
        "temperature": float(model.temperature.detach()),
        "D": model.arch.D,
        "map_size": model.arch.map_size(),
        "normalization": {"mean": model.pixel_mean.tolist(), "std": model.pixel_std.tolist()},
        "dtype": str(model.decoder.weight.dtype),
    }
    if extra:
        meta.update(extra)
    save_tensors(path, tensors, meta)


def load_model(path: str | Path) -> tuple[SpatialAutoencoder, dict]:
    tensors, meta = load_tensors(path)
    a = meta["arch"]
    arch = DsaeArch(**{k: tuple(v) if isinstance(v, list) else v for k, v in a.items()})
    model = SpatialAutoencoder(arch)
    dtype = torch.float64 if "float64" in meta.get("dtype", "") else torch.float32
    model = model.to(dtype)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, meta
