import json

import numpy as np
import pytest

from gatemppi import cli, config, sim
from gatemppi import neural_sdf as ns
from gatemppi import perception as pc

TINY = """
include = "desk"
name = "tiny"

[mppi]
num_rollouts = 64

[track]
n_gates = 1
laps = 1

[race]
speeds = [3.0]
position = []
yaw_deg = []
trials = 1

[camera]
width = 16
height = 16

[model]
latent = 8
hidden = 16
depth = 2

[data]
points = 64

[train]
epochs = 2
stage2_epochs = 1
batch_size = 4
points_per_image = 32
val_points = 32
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


# --- configuration ---------------------------------------------------------------------------


def test_profiles_load_and_differ():
    paper, desk = config.load(profile="paper"), config.load(profile="desk")
    assert paper.mppi.num_rollouts == 8192 and desk.mppi.num_rollouts == 1024
    assert paper.mppi.horizon == desk.mppi.horizon == 20 and paper.mppi.dt == 0.03
    assert paper.fingerprint() != desk.fingerprint()


def test_fingerprint_ignores_seed_and_name(tmp_path):
    a = config.load(profile="desk")
    b = config.load(profile="desk", overrides={"seed": 5, "name": "other"})
    c = config.load(profile="desk", overrides={"mppi": {"q_sdf": 3.0}})
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_config_rejects_bad_input(tmp_path):
    cases = ["bogus = 1", "[mppi]\nnum_rolouts = 5", "[scenario]\nprovider = 'x'", "[data]\nnoise = 'loud'",
             "quad = 'jet'", "seed = -1", "[mppi]\ntemperature = 0.0", "not toml ["]
    for i, text in enumerate(cases):
        p = tmp_path / f"c{i}.toml"
        p.write_text(text)
        with pytest.raises(config.ConfigError):
            config.load(p)


def test_include_cycle_detected(tmp_path):
    (tmp_path / "a.toml").write_text('include = "b.toml"')
    (tmp_path / "b.toml").write_text('include = "a.toml"')
    with pytest.raises(config.ConfigError):
        config.load(tmp_path / "a.toml")


def test_race_grid_cells():
    cfg = config.load(profile="paper")
    grid = cfg.race_grid(seed=1)
    assert [sc.cell()[1:] for sc in grid] == [("none", 0.0), ("position", 0.3), ("position", 0.9),
                                              ("yaw", np.deg2rad(30)), ("yaw", np.deg2rad(60))]
    assert grid[0].provider == "analytic" and all(sc.provider == "perturbed" for sc in grid[1:])


# --- gen-data ---------------------------------------------------------------------------------


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    assert run("gen-data", "--seed", 3, "--n", 1, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--seed", 3, "--n", 1, "--out", tmp_path / "b") == 0
    ds = pc.Dataset.load(tmp_path / "a")
    assert len(ds) == 1 and ds.points.shape[1] == 8192
    for name in ("depth_noisy.f32", "depth_clean.f32", "points.csv", "header.txt"):
        f = f"record_000000/{name}"
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    meta = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert meta["seed"] == 3 and meta["fingerprint"] == config.load(profile="desk").fingerprint()


def test_gen_data_zero_records_warns(tmp_path, capsys):
    assert run("gen-data", "--seed", 1, "--n", 0, "--out", tmp_path / "e") == 0
    assert "warning" in capsys.readouterr().err
    assert json.loads((tmp_path / "e" / "manifest.json").read_text())["records"] == 0


def test_seed_required(tmp_path, capsys):
    assert run("gen-data", "--n", 1, "--out", tmp_path / "x") == 1
    assert "seed" in capsys.readouterr().err
    assert run("gen-data", "--n", 1, "--run-id", "abc", "--out", tmp_path / "y", "--dry-run") == 0


def test_validation_errors_exit_1(tmp_path):
    assert run("gen-data", "--seed", 1, "--n", -1) == 1
    assert run("gen-data", "--seed", 1, "--profile", "nope") == 1
    assert run("race", "--seed", 1, "--jobs", 0) == 1
    assert run("frobnicate") == 1


# --- train / eval ------------------------------------------------------------------------------


def test_train_pipeline(tiny, tmp_path, capsys):
    assert run("gen-data", "--config", tiny, "--seed", 2, "--n", 10, "--out", tmp_path / "d") == 0
    assert run("train", "--config", tiny, "--seed", 2, "--stage", 2, "--dataset", tmp_path / "d",
               "--out", tmp_path / "none") == 1
    assert "encoder.w" in capsys.readouterr().err
    assert run("train", "--config", tiny, "--seed", 2, "--dataset", tmp_path / "d", "--out", tmp_path / "w") == 0
    hist = (tmp_path / "w" / "history_stage1.csv").read_text().strip().splitlines()
    assert len(hist) == 1 + 2
    dec = (tmp_path / "w" / "sdf_decoder.w").read_bytes()
    assert run("train", "--config", tiny, "--seed", 2, "--stage", 2, "--dataset", tmp_path / "d",
               "--weights", tmp_path / "w", "--out", tmp_path / "w2") == 0
    assert (tmp_path / "w2" / "sdf_decoder.w").read_bytes() == dec
    assert run("eval-sdf", "--config", tiny, "--seed", 2, "--weights", tmp_path / "w2", "--dataset", tmp_path / "d",
               "--out", tmp_path / "ev") == 0
    met = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    pred = np.load(tmp_path / "ev" / "predictions.npy")
    ds = pc.Dataset.load(tmp_path / "d")
    assert np.isclose(met["all"]["mean_l1"], np.abs(pred - ds.sdf).mean())
    slice_ = np.loadtxt(tmp_path / "ev" / "slices" / "slice_z+0.00.csv", delimiter=",")
    assert slice_.shape == (100, 100)


def test_train_zero_epochs_keeps_init(tiny, tmp_path):
    run("gen-data", "--config", tiny, "--seed", 2, "--n", 4, "--out", tmp_path / "d")
    zero = tmp_path / "zero.toml"
    zero.write_text(f'include = "{tiny}"\n[train]\nepochs = 0\n')
    assert run("train", "--config", zero, "--seed", 9, "--dataset", tmp_path / "d", "--out", tmp_path / "w") == 0
    assert (tmp_path / "w" / "history_stage1.csv").read_text().strip().count("\n") == 0
    init = ns.GateSdfModel.init(config.load(zero).architecture(), 9)
    back = ns.load_model(tmp_path / "w")
    assert back.encoder.digest() == init.encoder.digest()


def test_eval_analytic_is_exact(tiny, tmp_path):
    assert run("eval-sdf", "--config", tiny, "--seed", 4, "--analytic", "--n", 3, "--out", tmp_path / "ev") == 0
    met = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert met["all"]["mean_l1"] == 0.0 and met["near_surface"]["mean_l1"] == 0.0


def test_eval_needs_weights(tmp_path):
    assert run("eval-sdf", "--seed", 1) == 1
    assert run("eval-sdf", "--seed", 1, "--weights", tmp_path / "missing") == 1


# --- race / report -------------------------------------------------------------------------------


def test_race_single_trial(tiny, tmp_path):
    out = tmp_path / "r"
    assert run("race", "--config", tiny, "--seed", 1, "--out", out) == 0
    assert len(list(out.rglob("trial_*.csv"))) == 1
    assert (out / "summary.md").exists()
    summary = json.loads((out / "success_table.json").read_text())
    assert summary["fingerprint"] == config.load(tiny).fingerprint()
    assert json.loads((out / "race_manifest.json").read_text())["seed"] == 1


def test_race_grid_counts(tiny, tmp_path):
    grid = tmp_path / "grid.toml"
    grid.write_text(f'include = "{tiny}"\n[race]\nspeeds = [2.0, 3.0, 4.0]\nposition = [0.1, 0.2]\ntrials = 5\n'
                    '[mppi]\nnum_rollouts = 16\n')
    out = tmp_path / "g"
    assert run("race", "--config", grid, "--seed", 2, "--out", out) == 0
    assert len(list(out.rglob("trial_*.csv"))) == 45
    table = sim.SuccessTable.from_csv(out / "success_table.csv")
    assert len(table.cells) == 9 and all(n == 5 for _, n in table.cells.values())


def test_race_dry_run(tiny, tmp_path, capsys):
    assert run("race", "--config", tiny, "--seed", 1, "--dry-run", "--out", tmp_path / "dry") == 0
    assert "race plan" in capsys.readouterr().out
    assert not (tmp_path / "dry").exists()


def test_race_threshold_exit_3(tiny, tmp_path):
    strict = tmp_path / "strict.toml"
    strict.write_text(f'include = "{tiny}"\n[acceptance]\nmin_nominal_success = 1.5\n')
    assert run("race", "--config", strict, "--seed", 1, "--out", tmp_path / "r") == 3


def test_report_pooling(tiny, tmp_path, capsys):
    assert run("report", tmp_path / "empty") == 1
    root = tmp_path / "runs"
    for s in (1, 2):
        assert run("race", "--config", tiny, "--seed", s, "--out", root / f"s{s}") == 0
    assert run("report", root / "s1", "--out", tmp_path / "one") == 0
    assert (tmp_path / "one" / "report.csv").read_text() == (root / "s1" / "success_table.csv").read_text()
    assert run("report", root) == 0
    pooled = sim.SuccessTable.from_csv(root / "report.csv")
    a = sim.SuccessTable.from_csv(root / "s1" / "success_table.csv")
    b = sim.SuccessTable.from_csv(root / "s2" / "success_table.csv")
    assert pooled.cells == a.merge(b).cells
    other = tmp_path / "other.toml"
    other.write_text(f'include = "{tiny}"\n[mppi]\nq_sdf = 3.0\n')
    assert run("race", "--config", other, "--seed", 3, "--out", root / "s3") == 0
    assert run("report", root) == 1
    assert "fingerprint" in capsys.readouterr().err
    assert run("report", root, "--mixed") == 0
