"""Three-stage pipeline: blind controller, spatial autoencoder, vision controller.

Stages talk to each other only through files, so each one can be rerun alone::

    blind/      controller.srla  curve.tsv  manifest.json
    dataset/    episode_0000/ ...  (sim2d recording format)  manifest.json
    ae/         model.srla  history.json  manifest.json
    features/   selection.json  kalman.srla  manifest.json
    vision/     controller.srla  curve.tsv  manifest.json
    eval/       report.json  report.txt  manifest.json

Every manifest carries the hash of the full experiment config and the seed.
Stage inputs are looked up in the run's own directory first, then in an
optional ``inputs`` directory (used by the ablations to share earlier stages).
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import InvalidInputError
from . import dsae
from .archive import config_hash, load_tensors, read_json, save_tensors, to_jsonable, write_json
from .featsel import (FeatureSelection, FeatureTracker, KalmanModel, kalman_em, predictiveness_rank,
                      select_by_presence)
from .lqrctl import (EnvironmentFailure, IterationRecord, LinearGaussianController, SampleBatch, TaskCost,
                     default_epsilon, init_pd_controller, rl_iterate, trajectory_costs)
from .sim2d import EpisodeConfig, RenderConfig, WorldState, observe, read_recording, step, write_recording

log = logging.getLogger(__name__)

STAGES = ("collect", "train-ae", "prune", "train-ctrl", "eval")
_STAGE_SEEDS = {"blind": 1, "ae": 2, "goal": 3, "vision": 4, "eval": 5, "holdout": 6, "rank": 7}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TaskConfig:
    gripper_start: tuple[float, float] = (0.35, 0.0)
    block_start: tuple[float, float] = (0.15, 0.0)
    block_goal: tuple[float, float] = (-0.15, 0.0)
    gripper_target: tuple[float, float] = (-0.15, 0.0)   # end-effector target of the blind stage
    goal_gripper: tuple[float, float] = (-0.04, 0.0)     # gripper in the goal scene, also the vision-stage target
    success_threshold: float = 0.1                       # metres, 10% of the workspace width


@dataclass
class ControlConfig:
    iters: int = 10
    samples: int = 5
    epsilon_base: float = 0.1
    kp: float = 2.0
    kd: float = 2.0
    noise_var: float = 1.0
    w_l2: float = 1e-3
    w_log: float = 1.0
    w_u: float = 1e-2
    alpha: float = 1e-5
    gmm_components: int = 8
    prior_strength: float = 1.0


@dataclass
class AutoencoderConfig:
    epochs: int = 15
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    window: int = 8
    slowness_weight: float = 1.0
    temperature_lr_scale: float = 1.0
    weight_decay: float = 0.0
    initial_temperature: float = 0.1
    channels: tuple[int, ...] = (64, 32, 16)
    kernels: tuple[int, ...] = (7, 5, 5)
    strides: tuple[int, ...] = (2, 1, 1)
    downsample: int | None = None
    conv_pool: bool = False

    def hyper(self) -> dsae.TrainHyper:
        return dsae.TrainHyper(self.learning_rate, self.momentum, self.batch_size, self.window, self.epochs,
                               self.slowness_weight, self.temperature_lr_scale, self.weight_decay,
                               self.initial_temperature)

    def arch(self, image_size: int) -> dsae.DsaeArch:
        return dsae.DsaeArch(image_size, tuple(self.channels), tuple(self.kernels), tuple(self.strides),
                             self.downsample, conv_pool=self.conv_pool)


@dataclass
class FeatureConfig:
    beta: float = 0.95
    goal_frames: int = 50
    prune: bool = True
    kalman_iters: int = 50
    point_scale: float = 0.5      # map units -> metres (the map spans the 1 m workspace)


@dataclass
class EvalConfig:
    trials: int = 10


@dataclass
class ExperimentConfig:
    task_name: str = "push"
    seed: int = 0
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    blind: ControlConfig = field(default_factory=lambda: ControlConfig(iters=9))
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    vision: ControlConfig = field(default_factory=lambda: ControlConfig(iters=15))
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return to_jsonable(self)

    def hash(self) -> str:
        return config_hash(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields replaced; nested sections accept dicts of overrides."""
        kw = {}
        for name, value in sections.items():
            cur = getattr(self, name)
            kw[name] = dataclasses.replace(cur, **value) if isinstance(value, dict) else value
        return dataclasses.replace(self, **kw)


def _build(cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidInputError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidInputError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kw = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kw[key] = _build(hint, value)
        elif isinstance(value, list):
            kw[key] = tuple(value)
        elif hint is float and isinstance(value, (int, str)) and not isinstance(value, bool):
            # YAML 1.1 reads exponents without a dot ("1e-05") as strings
            try:
                kw[key] = float(value)
            except ValueError:
                raise InvalidInputError(f"{cls.__name__}.{key} must be a number, got {value!r}") from None
        else:
            kw[key] = value
    return cls(**kw)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON, which is valid YAML) experiment config."""
    text = Path(path).read_text()
    return config_from_dict(yaml.safe_load(text) or {})


def default_config_path() -> Path:
    return Path(__file__).with_name("configs") / "push.yaml"


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def stage_rng(cfg: ExperimentConfig, stage: str, offset: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _STAGE_SEEDS[stage], offset])


def stage_seed(cfg: ExperimentConfig, stage: str) -> int:
    return int(stage_rng(cfg, stage).integers(2 ** 31))


# ---------------------------------------------------------------------------
# files


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    paths = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _write_manifest(directory: Path, stage: str, cfg: ExperimentConfig, inputs: dict[str, Path],
                    extra: dict | None = None) -> None:
    outputs = sorted(p.name for p in directory.iterdir() if p.name != "manifest.json")
    man = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {k: _digest(v) for k, v in sorted(inputs.items())},
        "outputs": {name: _digest(directory / name) for name in outputs},
    }
    if extra:
        man.update(extra)
    write_json(directory / "manifest.json", man)


def _locate(out: Path, inputs: Path | None, sub: str) -> Path:
    for base in (out, inputs):
        if base is not None and (base / sub).exists():
            return base / sub
    raise FileNotFoundError(f"stage output '{sub}' not found under {out}" +
                            (f" or {inputs}" if inputs else ""))


def save_controller(ctrl: LinearGaussianController, path: Path, meta: dict | None = None) -> None:
    save_tensors(path, {"K": ctrl.K, "k": ctrl.k, "cov": ctrl.cov}, meta or {})


def load_controller(path: Path) -> LinearGaussianController:
    t, _ = load_tensors(path)
    return LinearGaussianController(t["K"], t["k"], t["cov"])


def write_curve(path: Path, curve: Sequence[IterationRecord]) -> None:
    lines = ["iteration\tmean_cost\tkl\teta"]
    lines += [f"{r.iteration}\t{r.mean_cost!r}\t{r.kl!r}\t{r.eta!r}" for r in curve]
    path.write_text("\n".join(lines) + "\n")


def read_curve(path: Path) -> list[IterationRecord]:
    rows = path.read_text().strip().splitlines()[1:]
    out = []
    for row in rows:
        it, c, kl, eta = row.split("\t")
        out.append(IterationRecord(int(it), float(c), float(kl), float(eta)))
    return out


def save_kalman(models: Sequence[KalmanModel], path: Path, kept: Sequence[int]) -> None:
    keys = ("A", "H", "Q", "R", "mu0", "P0")
    tensors = {k: np.stack([getattr(m, k) for m in models]) for k in keys}
    save_tensors(path, tensors, {"kept_indices": list(map(int, kept)),
                                 "loglik_history": [m.loglik_history for m in models]})


def load_kalman(path: Path) -> list[KalmanModel]:
    t, meta = load_tensors(path)
    hist = meta.get("loglik_history", [[]] * len(t["A"]))
    return [KalmanModel(t["A"][i], t["H"][i], t["Q"][i], t["R"][i], t["mu0"][i], t["P0"][i], list(hist[i]))
            for i in range(len(t["A"]))]


# ---------------------------------------------------------------------------
# environments


def camera(state: WorldState, render: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    """Noisy 8-bit camera frame (H, W, 3) uint8."""
    return np.round(observe(state, render, rng) * 255).astype(np.uint8)


def block_distance(world: np.ndarray, goal) -> np.ndarray:
    """Block-to-goal distance from world-state vectors (..., 10)."""
    return np.linalg.norm(np.asarray(world)[..., 4:6] - np.asarray(goal), axis=-1)


def _advance(state: WorldState, u: np.ndarray, cfg: EpisodeConfig) -> WorldState:
    try:
        return step(state, u, cfg)
    except InvalidInputError as exc:
        raise EnvironmentFailure(str(exc)) from exc


class PushEnv:
    """The pushing task observed through the robot state ``[g, g_dot]`` only.

    Camera frames are recorded alongside (they become the autoencoder dataset)
    but never reach the controller.
    """

    def __init__(self, cfg: ExperimentConfig, record: bool = True):
        self.cfg = cfg
        self.record = record

    def initial_state(self) -> WorldState:
        return WorldState.at_rest(self.cfg.task.gripper_start, self.cfg.task.block_start)

    def run(self, controller: LinearGaussianController, n: int, rng: np.random.Generator,
            mean_actions: bool = False) -> SampleBatch:
        ep, rc = self.cfg.episode, self.cfg.render
        T = ep.T
        X = np.zeros((n, T, 4))
        U = np.zeros((n, T, 2))
        world = np.zeros((n, T + 1, 10))
        frames = np.zeros((n, T, rc.image_size, rc.image_size, 3), np.uint8) if self.record else None
        for i in range(n):
            s = self.initial_state()
            for t in range(T):
                if self.record:
                    frames[i, t] = camera(s, rc, rng)
                x = s.robot_state()
                u = controller.act(t, x, None if mean_actions else rng.standard_normal(2))
                X[i, t], U[i, t], world[i, t] = x, u, s.to_vector()
                s = _advance(s, u, ep)
            world[i, T] = s.to_vector()
        extra = {"world": world}
        if self.record:
            extra["frames"] = frames
        return SampleBatch(X, U, extra)

    def sample(self, controller, n, rng):
        return self.run(controller, n, rng)


class VisionEnv:
    """The pushing task observed through ``[g, g_dot, f, f_dot]``.

    Each step renders a camera frame, encodes it, and filters the kept feature
    points with their Kalman models. Rollouts advance in lockstep so the
    encoder runs once per timestep on the whole batch.
    """

    def __init__(self, cfg: ExperimentConfig, model: dsae.SpatialAutoencoder, selection: FeatureSelection,
                 kalman: Sequence[KalmanModel]):
        if len(kalman) != len(selection.kept_indices):
            raise InvalidInputError("one Kalman model per kept feature required")
        self.cfg, self.model, self.selection, self.kalman = cfg, model, selection, list(kalman)
        self.kept = np.asarray(selection.kept_indices, dtype=int)

    @property
    def state_dim(self) -> int:
        return 4 + 4 * len(self.kept)

    def initial_state(self) -> WorldState:
        return WorldState.at_rest(self.cfg.task.gripper_start, self.cfg.task.block_start)

    def run(self, controller: LinearGaussianController, n: int, rng: np.random.Generator,
            mean_actions: bool = False) -> SampleBatch:
        ep, rc = self.cfg.episode, self.cfg.render
        T, k = ep.T, len(self.kept)
        X = np.zeros((n, T, self.state_dim))
        U = np.zeros((n, T, 2))
        world = np.zeros((n, T + 1, 10))
        raw = np.zeros((n, T, self.model.arch.n_points, 2))
        states = [self.initial_state() for _ in range(n)]
        trackers = [FeatureTracker(self.kalman) for _ in range(n)]
        for t in range(T):
            imgs = np.stack([camera(s, rc, rng) for s in states]).astype(np.float32) / 255.0
            probs, pts = dsae.encode(self.model, imgs)
            present = dsae.presence(self.model, probs, pts) >= self.selection.beta
            for i in range(n):
                pos, vel = trackers[i].update(pts[i, self.kept], present[i, self.kept])
                x = np.concatenate([states[i].robot_state(), pos.ravel(), vel.ravel()])
                u = controller.act(t, x, None if mean_actions else rng.standard_normal(2))
                X[i, t], U[i, t], world[i, t], raw[i, t] = x, u, states[i].to_vector(), pts[i]
                states[i] = _advance(states[i], u, ep)
        for i in range(n):
            world[i, T] = states[i].to_vector()
        assert X.shape[2] == 4 + 4 * k
        return SampleBatch(X, U, {"world": world, "points": raw})

    def sample(self, controller, n, rng):
        return self.run(controller, n, rng)


# ---------------------------------------------------------------------------
# stage 1: blind controller and image collection


@dataclass
class BlindResult:
    controller: LinearGaussianController
    curve: list[IterationRecord]
    batches: list[SampleBatch]


def blind_cost(cfg: ExperimentConfig) -> TaskCost:
    c = cfg.blind
    return TaskCost([0, 1], np.asarray(cfg.task.gripper_target, float), w_l2=c.w_l2, w_log=c.w_log,
                    w_u=c.w_u, alpha=c.alpha)


def run_blind_phase(cfg: ExperimentConfig) -> BlindResult:
    """Train the exploration controller on the robot state; every rollout's frames are kept."""
    env = PushEnv(cfg, record=True)
    c = cfg.blind
    x0 = env.initial_state().robot_state()
    ctrl = init_pd_controller(x0, cfg.episode.T, 2, c.kp, c.kd, c.noise_var)
    res = rl_iterate(env, ctrl, blind_cost(cfg), N=c.samples,
                     epsilon=default_epsilon(cfg.episode.T, 2, c.epsilon_base), iters=c.iters,
                     seed=stage_seed(cfg, "blind"), gmm_components=c.gmm_components,
                     prior_strength=c.prior_strength)
    return BlindResult(res.controller, res.curve, res.batches)


def collect(cfg: ExperimentConfig, out: str | Path) -> BlindResult:
    """Stage ``collect``: blind controller plus the recorded image dataset."""
    out = Path(out)
    res = run_blind_phase(cfg)
    bdir = out / "blind"
    bdir.mkdir(parents=True, exist_ok=True)
    save_controller(res.controller, bdir / "controller.srla", {"state": "robot", "dims": [4, 2]})
    write_curve(bdir / "curve.tsv", res.curve)
    _write_manifest(bdir, "collect", cfg, {})

    ddir = out / "dataset"
    ddir.mkdir(parents=True, exist_ok=True)
    ep = 0
    for it, batch in enumerate(res.batches):
        for i in range(len(batch.X)):
            states = [WorldState.from_vector(v) for v in batch.extra["world"][i, :-1]]
            write_recording(ddir / f"episode_{ep:04d}", batch.extra["frames"][i] / 255.0, states,
                            batch.U[i], cfg.episode, cfg.render,
                            extra={"iteration": it, "robot_states": batch.X[i]})
            ep += 1
    _write_manifest(ddir, "collect", cfg, {}, {"episodes": ep, "frames": ep * cfg.episode.T})
    log.info("collected %d episodes (%d frames)", ep, ep * cfg.episode.T)
    return res


def load_dataset(directory: str | Path) -> tuple[list[np.ndarray], list[list[WorldState]], list[np.ndarray],
                                                 list[np.ndarray]]:
    """Frames (float32), world states, actions and robot states of every recorded episode."""
    frames, states, actions, robot = [], [], [], []
    for ep in sorted(Path(directory).glob("episode_*")):
        f, s, a, man = read_recording(ep)
        frames.append(f.astype(np.float32))
        states.append(s)
        actions.append(a)
        robot.append(np.asarray(man["robot_states"], float))
    if not frames:
        raise FileNotFoundError(f"no episodes in {directory}")
    return frames, states, actions, robot


# ---------------------------------------------------------------------------
# stage 2: autoencoder


def train_autoencoder(cfg: ExperimentConfig, out: str | Path, inputs: str | Path | None = None
                      ) -> dsae.TrainResult:
    out = Path(out)
    inputs = Path(inputs) if inputs else None
    data_dir = _locate(out, inputs, "dataset")
    frames, _, _, _ = load_dataset(data_dir)
    a = cfg.autoencoder
    res = dsae.train_dsae(frames, a.hyper(), a.arch(cfg.render.image_size), seed=stage_seed(cfg, "ae"))
    adir = out / "ae"
    adir.mkdir(parents=True, exist_ok=True)
    dsae.save_model(res.model, adir / "model.srla", {"seed": cfg.seed, "config_hash": cfg.hash()})
    write_json(adir / "history.json", res.history)
    _write_manifest(adir, "train-ae", cfg, {"dataset": data_dir})
    return res


# ---------------------------------------------------------------------------
# stage 3: pruning, goal and Kalman models


def goal_state(cfg: ExperimentConfig) -> WorldState:
    return WorldState.at_rest(cfg.task.goal_gripper, cfg.task.block_goal)


def goal_frames(cfg: ExperimentConfig) -> np.ndarray:
    """The configured number of noisy camera frames of the goal scene, float32 in [0, 1]."""
    rng = stage_rng(cfg, "goal")
    s = goal_state(cfg)
    return np.stack([camera(s, cfg.render, rng) for _ in range(cfg.features.goal_frames)]).astype(np.float32) / 255


def fit_feature_filters(model: dsae.SpatialAutoencoder, frames: Sequence[np.ndarray], kept: Sequence[int],
                        beta: float, dt: float, iters: int = 50) -> list[KalmanModel]:
    """EM-fit one Kalman model per kept feature on the dataset, low-presence frames masked."""
    tracks, masks = [], []
    for seq in frames:
        probs, pts = dsae.encode(model, seq)
        tracks.append(pts)
        masks.append(dsae.presence(model, probs, pts) >= beta)
    models = []
    for c in kept:
        obs = [t[:, c] for t in tracks]
        mk = [m[:, c] for m in masks]
        if max(int(m.sum()) for m in mk) < 3:
            mk = None   # never reliably present: fit on every frame rather than fail
        models.append(kalman_em(obs, mk, dt=dt, iters=iters))
    return models


def prune(cfg: ExperimentConfig, out: str | Path, inputs: str | Path | None = None
          ) -> tuple[FeatureSelection, list[KalmanModel]]:
    """Stage ``prune``: goal-image presence pruning, goal features and per-feature Kalman fits."""
    out = Path(out)
    inputs = Path(inputs) if inputs else None
    model_path = _locate(out, inputs, "ae") / "model.srla"
    data_dir = _locate(out, inputs, "dataset")
    model, _ = dsae.load_model(model_path)
    gf = goal_frames(cfg)
    probs, pts = dsae.encode(model, gf)
    pres = dsae.presence(model, probs, pts)
    sel = select_by_presence(pts, pres, cfg.features.beta, cfg.features.prune)
    frames, _, _, _ = load_dataset(data_dir)
    kalman = fit_feature_filters(model, frames, sel.kept_indices, cfg.features.beta, cfg.episode.dt,
                                 cfg.features.kalman_iters)
    fdir = out / "features"
    fdir.mkdir(parents=True, exist_ok=True)
    write_json(fdir / "selection.json", sel.to_dict())
    save_kalman(kalman, fdir / "kalman.srla", sel.kept_indices)
    _write_manifest(fdir, "prune", cfg, {"model": model_path, "dataset": data_dir},
                    {"kept": sel.kept_indices})
    log.info("kept features %s", sel.kept_indices)
    return sel, kalman


def define_goal(cfg: ExperimentConfig, selection: FeatureSelection) -> TaskCost:
    """Task cost over ``[g, f_kept]``: gripper target plus the averaged goal feature positions."""
    k = len(selection.kept_indices)
    c = cfg.vision
    idx = [0, 1] + list(range(4, 4 + 2 * k))
    targets = np.concatenate([np.asarray(cfg.task.goal_gripper, float),
                              selection.goal_positions[selection.kept_indices].ravel()])
    scale = np.concatenate([np.ones(2), np.full(2 * k, cfg.features.point_scale)])
    return TaskCost(idx, targets, w_l2=c.w_l2, w_log=c.w_log, w_u=c.w_u, alpha=c.alpha, point_scale=scale)


# ---------------------------------------------------------------------------
# stage 4: vision controller


@dataclass
class VisionResult:
    controller: LinearGaussianController
    curve: list[IterationRecord]
    cost: TaskCost
    env: VisionEnv
    batches: list[SampleBatch]


def extend_controller(ctrl: LinearGaussianController, n_state: int) -> LinearGaussianController:
    """Pad the gains with zeros for extra state dimensions."""
    T, m, n = ctrl.K.shape
    K = np.zeros((T, m, n_state))
    K[:, :, :n] = ctrl.K
    return LinearGaussianController(K, ctrl.k.copy(), ctrl.cov.copy())


def load_vision_setup(cfg: ExperimentConfig, out: Path, inputs: Path | None):
    model_path = _locate(out, inputs, "ae") / "model.srla"
    fdir = _locate(out, inputs, "features")
    model, _ = dsae.load_model(model_path)
    sel = FeatureSelection.from_dict(read_json(fdir / "selection.json"))
    kalman = load_kalman(fdir / "kalman.srla")
    return model, sel, kalman, {"model": model_path, "features": fdir}


def run_vision_phase(cfg: ExperimentConfig, blind: LinearGaussianController, model, selection, kalman
                     ) -> VisionResult:
    env = VisionEnv(cfg, model, selection, kalman)
    cost = define_goal(cfg, selection)
    c = cfg.vision
    res = rl_iterate(env, extend_controller(blind, env.state_dim), cost, N=c.samples,
                     epsilon=default_epsilon(cfg.episode.T, 2, c.epsilon_base), iters=c.iters,
                     seed=stage_seed(cfg, "vision"), gmm_components=c.gmm_components,
                     prior_strength=c.prior_strength)
    return VisionResult(res.controller, res.curve, cost, env, res.batches)


def train_controller(cfg: ExperimentConfig, out: str | Path, inputs: str | Path | None = None) -> VisionResult:
    """Stage ``train-ctrl``."""
    out = Path(out)
    inputs = Path(inputs) if inputs else None
    model, sel, kalman, used = load_vision_setup(cfg, out, inputs)
    bpath = _locate(out, inputs, "blind") / "controller.srla"
    res = run_vision_phase(cfg, load_controller(bpath), model, sel, kalman)
    vdir = out / "vision"
    vdir.mkdir(parents=True, exist_ok=True)
    save_controller(res.controller, vdir / "controller.srla",
                    {"state": "vision", "kept": sel.kept_indices, "dims": [res.env.state_dim, 2]})
    write_curve(vdir / "curve.tsv", res.curve)
    final = res.batches[-1]
    np.save(vdir / "final_world.npy", final.extra["world"], allow_pickle=False)
    np.save(vdir / "final_points.npy", final.extra["points"], allow_pickle=False)
    np.save(vdir / "final_states.npy", final.X, allow_pickle=False)
    np.save(vdir / "final_actions.npy", final.U, allow_pickle=False)
    _write_manifest(vdir, "train-ctrl", cfg, {**used, "blind": bpath})
    return res


# ---------------------------------------------------------------------------
# stage 5: evaluation


@dataclass
class EvalReport:
    name: str
    distances: list[float]
    threshold: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))

    @property
    def sd(self) -> float:
        return float(np.std(self.distances))

    @property
    def successes(self) -> int:
        return int(sum(d <= self.threshold for d in self.distances))

    def to_dict(self) -> dict:
        return {"name": self.name, "distances": self.distances, "mean": self.mean, "sd": self.sd,
                "successes": self.successes, "trials": len(self.distances), "threshold": self.threshold}


def evaluate(env, controller: LinearGaussianController, cfg: ExperimentConfig, name: str,
             trials: int | None = None) -> EvalReport:
    """Run ``trials`` rollouts with mean actions, each with a fresh camera-noise seed."""
    trials = trials or cfg.evaluation.trials
    dists = []
    for i in range(trials):
        batch = env.run(controller, 1, stage_rng(cfg, "eval", i), mean_actions=True)
        dists.append(float(block_distance(batch.extra["world"][0, -1], cfg.task.block_goal)))
    return EvalReport(name, dists, cfg.task.success_threshold)


def format_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'controller':<12}{'mean distance (cm)':>20}{'sd (cm)':>10}{'success':>10}"]
    for r in reports:
        lines.append(f"{r.name:<12}{100 * r.mean:>20.2f}{100 * r.sd:>10.2f}"
                     f"{f'{r.successes}/{len(r.distances)}':>10}")
    return "\n".join(lines) + "\n"


def run_evaluation(cfg: ExperimentConfig, out: str | Path, inputs: str | Path | None = None
                   ) -> dict[str, EvalReport]:
    """Stage ``eval``: blind and vision controllers over the configured trials."""
    out = Path(out)
    inputs = Path(inputs) if inputs else None
    bpath = _locate(out, inputs, "blind") / "controller.srla"
    blind = evaluate(PushEnv(cfg, record=False), load_controller(bpath), cfg, "blind")
    model, sel, kalman, used = load_vision_setup(cfg, out, inputs)
    vpath = _locate(out, inputs, "vision") / "controller.srla"
    vision = evaluate(VisionEnv(cfg, model, sel, kalman), load_controller(vpath), cfg, "vision")
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    write_json(edir / "report.json", {"blind": blind.to_dict(), "vision": vision.to_dict()})
    (edir / "report.txt").write_text(format_table([blind, vision]))
    _write_manifest(edir, "eval", cfg, {**used, "blind": bpath, "vision": vpath})
    return {"blind": blind, "vision": vision}


# ---------------------------------------------------------------------------
# diagnostics


def rank_features(cfg: ExperimentConfig, out: str | Path, inputs: str | Path | None = None,
                  all_features: bool = False) -> list[int]:
    """Predictiveness ranking of the kept (or all) features over the dataset, best first."""
    out = Path(out)
    inputs = Path(inputs) if inputs else None
    model, _ = dsae.load_model(_locate(out, inputs, "ae") / "model.srla")
    frames, _, actions, robot = load_dataset(_locate(out, inputs, "dataset"))
    if all_features:
        candidates = list(range(model.arch.n_points))
    else:
        candidates = FeatureSelection.from_dict(
            read_json(_locate(out, inputs, "features") / "selection.json")).kept_indices
    feats = np.stack([dsae.encode(model, f)[1][:, candidates] for f in frames])
    order = predictiveness_rank(np.stack(robot), np.stack(actions), feats, seed=stage_seed(cfg, "rank"))
    ranking = [int(candidates[i]) for i in order]
    fdir = out / "features"
    fdir.mkdir(parents=True, exist_ok=True)
    write_json(fdir / "ranking.json", {"ranking": ranking, "candidates": candidates})
    return ranking


def run_all(cfg: ExperimentConfig, out: str | Path, inputs: str | Path | None = None,
            start: str = "collect") -> dict[str, EvalReport]:
    """Run the stages from ``start`` onward."""
    if start not in STAGES:
        raise InvalidInputError(f"unknown stage {start!r}; choose from {', '.join(STAGES)}")
    todo = STAGES[STAGES.index(start):]
    reports = {}
    for stage in todo:
        log.info("stage %s", stage)
        if stage == "collect":
            collect(cfg, out)
        elif stage == "train-ae":
            train_autoencoder(cfg, out, inputs)
        elif stage == "prune":
            prune(cfg, out, inputs)
        elif stage == "train-ctrl":
            train_controller(cfg, out, inputs)
        else:
            reports = run_evaluation(cfg, out, inputs)
    return reports


def _colored_path(ax, xy: np.ndarray, **kw) -> None:
    from matplotlib.collections import LineCollection
    from matplotlib.colors import LinearSegmentedColormap

    cmap = LinearSegmentedColormap.from_list("red_green", ["red", "green"])
    segs = np.stack([xy[:-1], xy[1:]], axis=1)
    lc = LineCollection(segs, cmap=cmap, **kw)
    lc.set_array(np.linspace(0.0, 1.0, len(segs)))
    ax.add_collection(lc)


def plot_results(out: str | Path, inputs: str | Path | None = None) -> list[Path]:
    """Learning curves and kept-feature trajectories (red at the start, green at the end)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    inputs = Path(inputs) if inputs else None
    pdir = out / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for stage in ("blind", "vision"):
        try:
            curve = read_curve(_locate(out, inputs, stage) / "curve.tsv")
        except FileNotFoundError:
            continue
        ax.plot([r.iteration for r in curve], [r.mean_cost for r in curve], marker="o", label=stage)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean sampled cost")
    ax.legend()
    fig.tight_layout()
    fig.savefig(pdir / "learning_curves.png", dpi=100)
    plt.close(fig)
    written.append(pdir / "learning_curves.png")

    try:
        vdir = _locate(out, inputs, "vision")
        sel = FeatureSelection.from_dict(read_json(_locate(out, inputs, "features") / "selection.json"))
    except FileNotFoundError:
        return written
    raw = np.load(vdir / "final_points.npy")[0][:, sel.kept_indices]
    X = np.load(vdir / "final_states.npy")[0]
    k = len(sel.kept_indices)
    filt = X[:, 4:4 + 2 * k].reshape(len(X), k, 2)
    fig, axes = plt.subplots(1, 2, figsize=(8, 4), sharex=True, sharey=True)
    for ax, pts, title in ((axes[0], raw, "raw"), (axes[1], filt, "filtered")):
        for c in range(k):
            _colored_path(ax, pts[:, c], linewidths=1.5)
        ax.set_xlim(-1, 1)
        ax.set_ylim(1, -1)
        ax.set_aspect("equal")
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(pdir / "feature_trajectories.png", dpi=100)
    plt.close(fig)
    written.append(pdir / "feature_trajectories.png")
    return written


def final_cost(curve: Sequence[IterationRecord]) -> float:
    return curve[-1].mean_cost


def sampled_costs(cost: TaskCost, batch: SampleBatch) -> np.ndarray:
    return trajectory_costs(cost, batch.X, batch.U)
