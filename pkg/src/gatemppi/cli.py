"""Command-line entry point: ``gatemppi {gen-data,train,eval-sdf,race,report}``.

Exit status: 0 success, 1 invalid input or configuration, 2 runtime
failure, 3 a configured acceptance threshold was not met.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import neural_sdf, perception, sim
from .config import ConfigError
from .gate_sdf import GatePose, guide_sdf

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3


class ThresholdFailure(RuntimeError):
    pass


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _load_config(args) -> cfgmod.ExperimentConfig:
    if args.config is None and args.profile is None:
        args.profile = "desk"
    return cfgmod.load(args.config, args.profile)


def _seed(args, cfg) -> int:
    """Explicit ``--seed``, else the config's seed, else one derived from ``--run-id``."""
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        return args.seed
    if cfg.seed is not None:
        return cfg.seed
    if args.run_id:
        return int.from_bytes(hashlib.sha256(args.run_id.encode()).digest()[:4], "little")
    raise ConfigError("a seed is required: pass --seed, set `seed` in the config, or name the run with --run-id")


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    return out


def _write_manifest(out: Path, kind: str, cfg, seed, **extra):
    m = {"kind": kind, "fingerprint": cfg.fingerprint(), "seed": seed, "profile": cfg.name, "config": cfg.raw,
         "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}
    (out / f"{kind}_manifest.json").write_text(json.dumps(m, indent=2, default=list))


# --- gen-data --------------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    noise_name = cfg.data.finetune_noise if args.finetune else cfg.data.noise
    n = args.n if args.n is not None else (cfg.data.finetune_records if args.finetune else cfg.data.records)
    if n < 0:
        raise ConfigError("record count must be >= 0")
    cam, g = cfg.camera_model(), cfg.geometry()
    if args.dry_run:
        print(f"gen-data: {n} records x {cfg.data.points} points, noise={noise_name}, seed={seed}")
        return EXIT_OK
    out = _out(args, "data")
    if n == 0:
        _log("warning: zero records requested; writing an empty manifest")
    ds = perception.generate_dataset(n, seed, cam, perception.NOISE_PRESETS[noise_name], g, cfg.data.points,
                                     meta={"fingerprint": cfg.fingerprint(), "noise_preset": noise_name})
    ds.save(out)
    print(f"wrote {n} records to {out} (fingerprint {cfg.fingerprint()}, seed {seed})")
    return EXIT_OK


# --- train -----------------------------------------------------------------------------------


def cmd_train(args):
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    out = Path(args.out or "weights")
    tcfg = cfg.train_config(seed, args.stage)
    if args.stage == 2:
        src = Path(args.weights or out)
        for fname in neural_sdf.WEIGHT_FILES.values():
            if not (src / fname).exists():
                raise ConfigError(f"stage 2 needs stage-1 weights: missing {src / fname}")
    if args.dry_run:
        print(f"train stage {args.stage}: dataset={args.dataset} epochs={tcfg.epochs} out={out}")
        return EXIT_OK
    try:
        ds = perception.Dataset.load(args.dataset)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e
    train, val = ds.split(tcfg.val_fraction, seed)
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        _log("epoch {epoch}: train_sdf={train_sdf:.4f} val_sdf={val_sdf:.4f} val_recon={val_recon:.4f}".format(**row))

    if args.stage == 1:
        model = neural_sdf.GateSdfModel.init(cfg.architecture(), seed)
        model, hist = neural_sdf.train_stage1(train, val, tcfg, model=model, log=log)
        neural_sdf.save_model(model, out)
    else:
        model = neural_sdf.load_model(src)
        model, hist = neural_sdf.train_stage2(train, val, model, tcfg, log=log)
        if src.resolve() != out.resolve():
            for part in ("sdf_decoder", "depth_decoder"):
                shutil.copyfile(src / neural_sdf.WEIGHT_FILES[part], out / neural_sdf.WEIGHT_FILES[part])
            shutil.copyfile(src / "architecture.txt", out / "architecture.txt")
        neural_sdf.save_model(model, out, parts=("encoder",))
    hist.to_csv(out / f"history_stage{args.stage}.csv")
    _write_manifest(out, f"train_stage{args.stage}", cfg, seed, dataset=str(args.dataset),
                    dataset_fingerprint=ds.fingerprint(), epochs=len(hist))
    print(f"stage {args.stage}: {len(hist)} epochs, weights in {out}")
    return EXIT_OK


# --- eval-sdf --------------------------------------------------------------------------------


def _slice_maps(cfg, model, out: Path):
    """Horizontal slices through the gate; the learned field is conditioned on one on-axis view."""
    g, cam, e = cfg.geometry(), cfg.camera_model(), cfg.eval
    gate = GatePose()
    view = perception.body_pose((4.0, 0.0, 0.0), yaw=np.pi)
    cam_pose = cam.pose_from_body(view)
    z = None
    if model is not None:
        depth = perception.raycast_depth(gate, g, cam_pose, cam)
        z = model.encode(depth)
    d = out / "slices"
    d.mkdir(exist_ok=True)
    for h in e.slice_heights:
        pts = neural_sdf.slice_grid(e.slice_size, e.slice_cells, h)
        if model is None:
            vals = guide_sdf(pts, g)
        else:
            vals = model.decode(z, cam_pose.inverse().apply(pts.reshape(-1, 3))).reshape(pts.shape[:2])
        np.savetxt(d / f"slice_z{h:+.2f}.csv", vals, delimiter=",", fmt="%.6g")
    return d


def cmd_eval_sdf(args):
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    g, cam = cfg.geometry(), cfg.camera_model()
    if args.weights is None and not args.analytic:
        raise ConfigError("pass --weights DIR or --analytic")
    if args.dry_run:
        print(f"eval-sdf: weights={args.weights or 'analytic'} dataset={args.dataset or 'live'}")
        return EXIT_OK
    model = None
    if args.weights is not None:
        try:
            model = neural_sdf.load_model(args.weights)
        except FileNotFoundError as e:
            raise ConfigError(str(e)) from e
        if (model.arch.height, model.arch.width) != cam.shape:
            raise ConfigError("weights were trained for a different image size than the configured camera")
    if args.dataset is not None:
        ds = perception.Dataset.load(args.dataset)
        if len(ds) and ds.noisy.shape[1:] != cam.shape:
            raise ConfigError("dataset image size does not match the configured camera")
    else:
        n = args.n if args.n is not None else 50
        ds = perception.generate_dataset(n, seed, cam, perception.NOISE_PRESETS[cfg.data.noise], g, cfg.data.points)
    if model is None:
        pred = neural_sdf.analytic_predictions(ds, g)
    else:
        pred = neural_sdf.predict_dataset(neural_sdf.model_predictor(model), ds)
    metrics = neural_sdf.sdf_metrics(pred, ds, cam, g, cfg.eval.max_distance)
    out = _out(args, "eval")
    np.save(out / "predictions.npy", pred)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    with open(out / "metrics.csv", "w") as f:
        f.write("class,mean_l1,median_l1,points\n")
        for k, v in metrics.items():
            if isinstance(v, dict) and "mean_l1" in v:
                f.write(f"{k},{v['mean_l1']:.6g},{v['median_l1']:.6g},{v['points']}\n")
    _slice_maps(cfg, model, out)
    _write_manifest(out, "eval", cfg, seed, weights=str(args.weights), dataset=str(args.dataset))
    sa = metrics["sign_agreement"]
    print(f"mean L1 {metrics['all']['mean_l1']:.4f} m over {metrics['all']['points']} points; "
          f"near-surface sign agreement {sa['rate']:.3f} ({sa['points']} points)")
    thr = cfg.acceptance.min_sign_agreement
    if thr >= 0 and not sa["rate"] >= thr:
        raise ThresholdFailure(f"sign agreement {sa['rate']:.3f} below {thr}")
    return EXIT_OK


# --- race ------------------------------------------------------------------------------------


def _summary_md(table: sim.SuccessTable, by_cell, n_gates):
    lines = ["# Race summary", "", table.markdown(), "", "| cell | max speed (m/s) | mean lap time (s) | failures |",
             "|---|---|---|---|"]
    for cell, results in sorted(by_cell.items()):
        laps = [t for r in results if r.success for t in r.lap_times(n_gates)]
        fails = {}
        for r in results:
            if r.failure:
                fails[r.failure] = fails.get(r.failure, 0) + 1
        lap = f"{np.mean(laps):.2f}" if laps else "-"
        fail = ", ".join(f"{k}: {v}" for k, v in sorted(fails.items())) or "none"
        lines.append(f"| {sim.cell_name(cell)} | {max(r.max_speed for r in results):.2f} | {lap} | {fail} |")
    return "\n".join(lines) + "\n"


def cmd_race(args):
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    grid = cfg.race_grid(seed)
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        grid = [sim.ScenarioConfig(**{**sc.__dict__, "trials": args.trials}) for sc in grid]
    if not grid:
        raise ConfigError("the race grid is empty")
    track = cfg.make_track()
    model = None
    if any(sc.provider == "neural" for sc in grid):
        if args.weights is None:
            raise ConfigError("the neural provider needs --weights")
        try:
            model = neural_sdf.load_model(args.weights)
        except FileNotFoundError as e:
            raise ConfigError(str(e)) from e
    n_ep = sum(sc.trials for sc in grid)
    if args.dry_run:
        print(f"race plan: {len(grid)} cells, {n_ep} episodes, {track.n_gates} gates x {track.laps} laps, "
              f"M={cfg.mppi.num_rollouts}, seed={seed}, jobs={args.jobs}")
        for sc in grid:
            print(f"  {sim.cell_name(sc.cell())}: {sc.trials} trials, provider {sc.provider}")
        return EXIT_OK
    out = _out(args, "race")
    table, by_cell = sim.run_batch(track, grid, jobs=args.jobs, model=model, out_dir=out,
                                   fingerprint=cfg.fingerprint())
    (out / "summary.md").write_text(_summary_md(table, by_cell, track.n_gates))
    _write_manifest(out, "race", cfg, seed, cells=[list(sc.cell()) for sc in grid], episodes=n_ep)
    print(table.markdown())
    thr = cfg.acceptance.min_nominal_success
    if thr >= 0:
        for cell in table.cells:
            if cell[1] == "none" and table.rate(cell) < thr:
                raise ThresholdFailure(f"nominal success {table.rate(cell):.2f} below {thr} in {sim.cell_name(cell)}")
    return EXIT_OK


# --- report ----------------------------------------------------------------------------------


def cmd_report(args):
    root = Path(args.result_dir)
    manifests = sorted(root.rglob("race_manifest.json")) if root.is_dir() else []
    if not manifests:
        raise ConfigError(f"no race runs found under {root}")
    runs = []
    for m in manifests:
        meta = json.loads(m.read_text())
        runs.append((meta, sim.SuccessTable.from_csv(m.parent / "success_table.csv"), m.parent))
    prints = sorted({meta["fingerprint"] for meta, _, _ in runs})
    if len(prints) > 1 and not args.mixed:
        raise ConfigError(f"runs have different config fingerprints ({', '.join(prints)}); pass --mixed to pool")
    pooled = sim.SuccessTable()
    for _, t, _ in runs:
        pooled = pooled.merge(t)
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    pooled.to_csv(out / "report.csv")
    lines = ["# Success rates", "", f"Runs pooled: {len(runs)}; fingerprints: {', '.join(prints)}", "",
             pooled.markdown(), "", "## Runs", ""]
    lines += [f"- {d}: seed {meta['seed']}, fingerprint {meta['fingerprint']}" for meta, _, d in runs]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(pooled.markdown())
    return EXIT_OK


# --- entry point -----------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file (may `include` others)")
    common.add_argument("--profile", help=f"shipped base profile ({', '.join(cfgmod.profile_names())}); default desk")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--run-id", help="derive the seed from this name when none is given")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for episode batches")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan only")

    p = argparse.ArgumentParser(prog="gatemppi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("gen-data", parents=[common], help="render depth images and labelled SDF points")
    s.add_argument("--n", type=int, help="number of records (default from config)")
    s.add_argument("--finetune", action="store_true", help="use the harsher fine-tuning noise model")
    s.set_defaults(func=cmd_gen_data)
    s = sub.add_parser("train", parents=[common], help="train the learned SDF (stage 1 or encoder fine-tuning)")
    s.add_argument("--stage", type=int, choices=(1, 2), default=1)
    s.add_argument("--dataset", help="dataset directory from gen-data")
    s.add_argument("--weights", help="stage-1 weight directory (stage 2; default --out)")
    s.set_defaults(func=cmd_train)
    s = sub.add_parser("eval-sdf", parents=[common], help="score a learned (or the analytic) SDF")
    s.add_argument("--weights", help="weight directory")
    s.add_argument("--analytic", action="store_true", help="evaluate the analytic field against itself")
    s.add_argument("--dataset", help="held-out dataset (default: freshly rendered views)")
    s.add_argument("--n", type=int, help="number of live views when no dataset is given")
    s.set_defaults(func=cmd_eval_sdf)
    s = sub.add_parser("race", parents=[common], help="closed-loop episodes over the configured grid")
    s.add_argument("--trials", type=int, help="trials per cell (default from config)")
    s.add_argument("--weights", help="weights for the neural provider")
    s.set_defaults(func=cmd_race)
    s = sub.add_parser("report", help="pool race results into one table")
    s.add_argument("result_dir")
    s.add_argument("--out", help="where to write report.csv / report.md (default: result_dir)")
    s.add_argument("--mixed", action="store_true", help="allow pooling runs with different configs")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        _log("error: --jobs must be >= 1")
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as e:
        _log(f"error: {e}")
        return EXIT_INVALID
    except ThresholdFailure as e:
        _log(f"threshold not met: {e}")
        return EXIT_THRESHOLD
    except (neural_sdf.WeightFileError, ValueError) as e:
        _log(f"error: {e}")
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        _log(f"runtime failure: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
