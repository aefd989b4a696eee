import json

import numpy as np
import pytest

from spatialrl import InvalidInputError, dsae, pipeline
from spatialrl.cli import main
from spatialrl.featsel import select_by_presence
from spatialrl.lqrctl import SampleBatch, init_pd_controller
from spatialrl.sim2d import read_recording


def tiny_config(**over) -> pipeline.ExperimentConfig:
    cfg = pipeline.config_from_dict({
        "seed": 3,
        "episode": {"T": 8},
        "render": {"image_size": 16},
        "blind": {"iters": 1, "samples": 2, "gmm_components": 2},
        "vision": {"iters": 1, "samples": 2, "gmm_components": 2},
        "autoencoder": {"epochs": 1, "batch_size": 8, "window": 4, "channels": [4, 4, 3],
                        "kernels": [3, 3, 3], "strides": [2, 1, 1], "learning_rate": 0.01},
        "features": {"goal_frames": 4, "prune": False, "kalman_iters": 3},
        "evaluation": {"trials": 2},
    })
    return cfg.replace(**over) if over else cfg


def test_shipped_config_matches_defaults():
    assert pipeline.load_config(pipeline.default_config_path()) == pipeline.ExperimentConfig()


def test_config_roundtrip_yaml_and_json(tmp_path):
    cfg = tiny_config()
    pipeline.save_config(cfg, tmp_path / "c.yaml")
    assert pipeline.load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert pipeline.load_config(tmp_path / "c.json") == cfg
    assert pipeline.load_config(tmp_path / "c.json").hash() == cfg.hash()


def test_config_rejects_unknown_keys():
    with pytest.raises(InvalidInputError, match="bogus"):
        pipeline.config_from_dict({"features": {"bogus": 1}})
    with pytest.raises(InvalidInputError):
        pipeline.config_from_dict({"render": {"image_size": 10}})


def test_blind_phase_dataset_size():
    cfg = tiny_config()
    res = pipeline.run_blind_phase(cfg)
    # one batch per iteration plus the final batch
    assert len(res.batches) == 2
    for b in res.batches:
        assert b.extra["frames"].shape == (2, 8, 16, 16, 3)
        assert b.extra["frames"].dtype == np.uint8


def test_empty_iteration_config_returns_pd_controller():
    cfg = tiny_config(blind={"iters": 0})
    res = pipeline.run_blind_phase(cfg)
    x0 = pipeline.PushEnv(cfg).initial_state().robot_state()
    pd = init_pd_controller(x0, 8, 2, cfg.blind.kp, cfg.blind.kd, cfg.blind.noise_var)
    np.testing.assert_array_equal(res.controller.K, pd.K)
    np.testing.assert_array_equal(res.controller.k, pd.k)
    assert len(res.batches) == 1 and res.batches[0].extra["frames"].shape[:2] == (2, 8)


def test_recorded_frames_match_camera_frames(tmp_path):
    cfg = tiny_config()
    res = pipeline.collect(cfg, tmp_path)
    frames, states, actions, man = read_recording(tmp_path / "dataset" / "episode_0000")
    np.testing.assert_array_equal(np.round(frames * 255).astype(np.uint8), res.batches[0].extra["frames"][0])
    np.testing.assert_array_equal(actions, res.batches[0].U[0])
    assert len(list((tmp_path / "dataset").glob("episode_*"))) == 4


class Teleport:
    """Oracle environment that puts the block on the goal."""

    def __init__(self, cfg):
        self.cfg = cfg

    def run(self, controller, n, rng, mean_actions=False):
        world = np.zeros((n, self.cfg.episode.T + 1, 10))
        world[:, :, 4:6] = self.cfg.task.block_goal
        return SampleBatch(np.zeros((n, self.cfg.episode.T, 4)), np.zeros((n, self.cfg.episode.T, 2)),
                           {"world": world})


def test_evaluate_oracle_controller():
    cfg = pipeline.ExperimentConfig()
    ctrl = init_pd_controller(np.zeros(4), cfg.episode.T, 2)
    rep = pipeline.evaluate(Teleport(cfg), ctrl, cfg, "oracle")
    assert rep.mean == 0.0 and rep.successes == 10 and len(rep.distances) == 10


def test_evaluate_is_repeatable_and_table_layout():
    cfg = tiny_config(evaluation={"trials": 3})
    ctrl = init_pd_controller(pipeline.PushEnv(cfg).initial_state().robot_state(), 8, 2)
    env = pipeline.PushEnv(cfg, record=False)
    a = pipeline.evaluate(env, ctrl, cfg, "blind")
    b = pipeline.evaluate(env, ctrl, cfg, "blind")
    assert a.to_dict() == b.to_dict()
    table = pipeline.format_table([a, b]).splitlines()
    assert table[0].split()[0] == "controller" and "success" in table[0]
    assert table[1].split()[0] == "blind" and table[1].endswith("/3")


def test_identical_goal_frames_give_single_frame_encoding():
    cfg = tiny_config()
    model = dsae.new_model(cfg.autoencoder.arch(16), seed=0)
    frame = pipeline.goal_frames(cfg)[0]
    probs, pts = dsae.encode(model, np.repeat(frame[None], 5, axis=0))
    sel = select_by_presence(pts, dsae.presence(model, probs, pts), beta=0.0)
    _, single = dsae.encode(model, frame[None])
    np.testing.assert_allclose(sel.goal_positions, single[0], atol=1e-6)


def test_goal_feature_standard_error_shrinks_with_averaging():
    cfg = pipeline.ExperimentConfig()
    model = dsae.new_model(dsae.DsaeArch(), seed=1)
    _, pts = dsae.encode(model, pipeline.goal_frames(cfg))
    single_sd = pts.std(axis=0)
    # the averaged goal over 50 frames has standard error sd/sqrt(50)
    halves = [pts[:25].mean(0), pts[25:].mean(0)]
    assert np.all(np.abs(halves[0] - halves[1]) <= 4 * single_sd / np.sqrt(12.5) + 1e-7)


def test_extend_controller_pads_zero_gains():
    ctrl = init_pd_controller(np.array([0.1, 0.2, 0.0, 0.0]), 5, 2)
    ext = pipeline.extend_controller(ctrl, 12)
    assert ext.K.shape == (5, 2, 12)
    np.testing.assert_array_equal(ext.K[:, :, :4], ctrl.K)
    assert not ext.K[:, :, 4:].any()


def test_define_goal_cost_layout():
    cfg = pipeline.ExperimentConfig()
    pts = np.zeros((3, 4, 2))
    pts[:, 2] = [0.5, -0.25]
    pres = np.ones((3, 4))
    pres[:, [0, 3]] = 0.1
    sel = select_by_presence(pts, pres, beta=0.95)
    cost = pipeline.define_goal(cfg, sel)
    assert list(cost.idx) == [0, 1, 4, 5, 6, 7]
    np.testing.assert_allclose(cost.targets[0], [-0.04, 0.0, 0.0, 0.0, 0.5, -0.25])
    np.testing.assert_allclose(cost.point_scale, [1, 1, 0.5, 0.5, 0.5, 0.5])


def test_small_pipeline_end_to_end_is_deterministic(tmp_path):
    cfg = tiny_config()
    a, b = tmp_path / "a", tmp_path / "b"
    ra = pipeline.run_all(cfg, a)
    pipeline.run_all(cfg, b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files and files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    man = json.loads((a / "vision" / "manifest.json").read_text())
    assert man["seed"] == 3 and man["config_hash"] == cfg.hash()
    assert set(ra) == {"blind", "vision"}
    d = pipeline.VisionEnv(cfg, *pipeline.load_vision_setup(cfg, a, None)[:3]).state_dim
    assert np.load(a / "vision" / "final_states.npy").shape[2] == d


def test_stage_inputs_from_another_directory(tmp_path):
    cfg = tiny_config()
    base = tmp_path / "base"
    pipeline.run_all(cfg, base)
    other = tmp_path / "other"
    pipeline.run_all(cfg, other, inputs=base, start="prune")
    assert not (other / "dataset").exists()
    assert (other / "features" / "selection.json").read_bytes() == (base / "features" / "selection.json").read_bytes()
    with pytest.raises(InvalidInputError):
        pipeline.run_all(cfg, other, start="bogus")
    with pytest.raises(FileNotFoundError):
        pipeline.train_controller(cfg, tmp_path / "empty")


def test_cli_runs_and_plots(tmp_path, capsys):
    cfg = tiny_config()
    pipeline.save_config(cfg, tmp_path / "tiny.yaml")
    out = tmp_path / "run"
    assert main(["run", "--config", str(tmp_path / "tiny.yaml"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "blind" in text and "vision" in text
    assert (out / "plots" / "learning_curves.png").stat().st_size > 0
    assert (out / "plots" / "feature_trajectories.png").stat().st_size > 0
    assert main(["rank-features", "--config", str(tmp_path / "tiny.yaml"), "--out", str(out)]) == 0
    assert "ranking" in capsys.readouterr().out
    assert main(["eval", "--config", str(tmp_path / "tiny.yaml"), "--out", str(tmp_path / "nothing")]) == 2


def test_cli_ablation_flags(tmp_path):
    from spatialrl.cli import build_config, make_parser
    args = make_parser().parse_args(["train-ae", "--no-smooth", "--no-prune", "--baseline-ae", "--seed", "9"])
    cfg = build_config(args)
    assert cfg.autoencoder.slowness_weight == 0.0
    assert cfg.features.prune is False and cfg.autoencoder.conv_pool is True and cfg.seed == 9
