"""Closed-loop racing harness: tracks, perturbation scenarios, episodes and
success tables.

The controller only ever sees nominal waypoints (and the nominal gate
orientation used to place a pass-through target). SDF information reaches it
through a provider built from the true gate, either directly (oracle modes)
or through the camera and latent cache (sensor modes).
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics, mppi, perception
from .dynamics import QuadParams, QuadState
from .gate_sdf import GateGeometry, GatePose, distance_to_frame
from .geometry import RigidTransform, RngStream, quat_from_axis_angle

PERTURBATIONS = ("none", "position", "yaw")
PROVIDERS = ("analytic", "perturbed", "cached", "neural")
FAILURE_MODES = ("collision", "timeout", "missed-gate")

# --- track ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Track:
    """Nominal gate placements, the true ones used by the simulator, and the lap count.

    Gates are flown through from their local +x side to the -x side.
    """

    nominal: tuple
    true: tuple
    geometry: GateGeometry = GateGeometry()
    laps: int = 3

    def __post_init__(self):
        if len(self.nominal) < 1:
            raise ValueError("a track needs at least one gate")
        if len(self.true) != len(self.nominal):
            raise ValueError("nominal and true gate lists differ in length")
        if self.laps < 1:
            raise ValueError("laps must be >= 1")
        if not all(np.all(np.isfinite(gp.position)) for gp in self.nominal + self.true):
            raise ValueError("gate positions must be finite")

    @property
    def n_gates(self):
        return len(self.nominal)

    @property
    def waypoints(self):
        return np.stack([gp.position for gp in self.nominal])

    def travel_direction(self, i):
        """Nominal flight direction through gate ``i`` (its local -x axis)."""
        return -self.nominal[i % self.n_gates].normal

    def lap_length(self):
        wp = self.waypoints
        if len(wp) == 1:
            return 0.0
        return float(np.sum(np.linalg.norm(np.roll(wp, -1, axis=0) - wp, axis=1)))


def circle_track(radius=5.0, height=1.5, n_gates=4, laps=3, geometry=GateGeometry()) -> Track:
    """Gates evenly spaced on a horizontal circle, tangent to it, flown counter-clockwise."""
    gates = []
    for i in range(n_gates):
        th = 2 * np.pi * i / n_gates
        tangent = np.array([-np.sin(th), np.cos(th)])
        gates.append(GatePose.at((radius * np.cos(th), radius * np.sin(th), height),
                                 yaw=float(np.arctan2(-tangent[1], -tangent[0]))))
    gates = tuple(gates)
    return Track(gates, gates, geometry, laps)


def perturb_track(track: Track, kind: str, magnitude: float, rng: RngStream) -> Track:
    """True gates displaced (per axis) or yawed from nominal by amounts uniform in +/- magnitude.

    With no perturbation the track's own true layout is kept.
    """
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}")
    if kind == "none" or magnitude == 0:
        return track
    out = []
    for gp in track.nominal:
        T = gp.transform
        if kind == "position":
            T = RigidTransform(T.rotation, T.translation + rng.uniform(-magnitude, magnitude, size=3))
        else:
            dq = RigidTransform(quat_from_axis_angle((0, 0, 1), rng.uniform(-magnitude, magnitude)))
            T = T.compose(dq)
        out.append(GatePose(T))
    return replace(track, true=tuple(out))


# --- events ---------------------------------------------------------------------------


def _plane_crossing(p_prev, p_cur, gate: GatePose):
    """Gate-frame crossing point if the segment goes from local +x to -x, else None."""
    a, b = gate.to_local(p_prev), gate.to_local(p_cur)
    if not (a[0] > 0.0 >= b[0]):
        return None
    s = a[0] / (a[0] - b[0])
    return a + s * (b - a)


def detect_gate_pass(p_prev, p_cur, gate: GatePose, g: GateGeometry) -> bool:
    c = _plane_crossing(np.asarray(p_prev, float), np.asarray(p_cur, float), gate)
    return c is not None and max(abs(c[1]), abs(c[2])) < g.c


def detect_collision(p_prev, p_cur, gate: GatePose, g: GateGeometry, inflation=0.1, max_substep=0.01) -> bool:
    """Segment comes within ``inflation`` of the frame solid (inclusive), checked every <= 1 cm."""
    a, b = gate.to_local(np.asarray(p_prev, float)), gate.to_local(np.asarray(p_cur, float))
    # cheap reject: both ends far from the frame's bounding box
    reach = g.outer_half_width + 0.5 * g.thickness + inflation
    if min(np.max(np.abs(a)), np.max(np.abs(b))) > reach + np.linalg.norm(b - a):
        return False
    n = max(1, int(np.ceil(np.linalg.norm(b - a) / max_substep)))
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    return bool(np.any(distance_to_frame(a + s * (b - a), g) <= inflation))


DONE = -1
# crossing a gate plane this close to the centre but outside the opening is a miss
MISS_REACH = 2.0


def waypoint_sequencer(p_prev, p_cur, track: Track, index: int, switch_radius=0.5):
    """Next waypoint index and the event that caused a change.

    ``index`` counts gate visits over all laps; :data:`DONE` follows the final
    visit. Returns ``(index, event)`` with event in {None, "pass", "radius"}.
    """
    total = track.n_gates * track.laps
    if index == DONE or index >= total:
        return DONE, None
    gi = index % track.n_gates
    if detect_gate_pass(p_prev, p_cur, track.true[gi], track.geometry):
        event = "pass"
    elif np.linalg.norm(np.asarray(p_cur, float) - track.nominal[gi].position) < switch_radius:
        event = "radius"
    else:
        return index, None
    index += 1
    return (DONE if index >= total else index), event


# --- scenario ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    perturbation: str = "none"
    magnitude: float = 0.0  # m (position) or rad (yaw)
    speed_cap: float = 4.0
    trials: int = 20
    seed: int = 0
    provider: str = "analytic"
    mppi: dict = field(default_factory=dict)  # MppiConfig overrides
    quad: str = "sim"
    # pass-through target placed this far beyond each nominal waypoint
    lookahead: float = 1.5
    switch_radius: float = 0.5
    timeout_factor: float = 3.0
    inflation: float = 0.1
    start_distance: float = 3.0
    # perturbed-oracle bias: uniform +/- (metres per axis, radians of yaw)
    estimate_error: tuple = (0.05, np.deg2rad(2.0))
    # sensor modes
    noise: str = "sim"
    min_valid_pixels: int = 20
    blackout_duration: float = 0.0  # s of forced sensor loss near each gate
    blackout_distance: float = 2.5  # triggered when first this close to the waypoint
    ground_z: float = 0.0
    log_states: bool = True

    def __post_init__(self):
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"perturbation must be one of {PERTURBATIONS}")
        if self.provider not in PROVIDERS:
            raise ValueError(f"provider must be one of {PROVIDERS}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.speed_cap <= 0:
            raise ValueError("speed_cap must be positive")
        if self.noise not in perception.NOISE_PRESETS:
            raise ValueError(f"unknown noise preset {self.noise!r}")
        fields = set(mppi.MppiConfig.__dataclass_fields__)
        bad = set(self.mppi) - fields
        if bad:
            raise ValueError(f"unknown MPPI settings: {sorted(bad)}")

    def mppi_config(self) -> mppi.MppiConfig:
        kw = dict(self.mppi)
        kw["speed_cap"] = self.speed_cap
        return mppi.MppiConfig(**kw)

    def cell(self):
        return (float(self.speed_cap), self.perturbation, float(self.magnitude))


LOG_COLUMNS = (["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz",
                "T1", "T2", "T3", "T4", "u1", "u2", "u3", "u4", "waypoint", "min_sdf"])


@dataclass
class EpisodeResult:
    success: bool
    failure: str | None
    pass_times: list
    max_speed: float
    min_sdf: float
    duration: float
    trial: int = 0
    seed: int = 0
    log: np.ndarray | None = None

    def summary(self):
        d = {k: v for k, v in asdict(self).items() if k != "log"}
        d["max_speed"] = float(d["max_speed"])
        d["min_sdf"] = float(d["min_sdf"])
        return d

    def lap_times(self, n_gates):
        t = self.pass_times
        return [t[i + n_gates - 1] - (t[i - 1] if i else 0.0) for i in range(0, len(t) - n_gates + 1, n_gates)]

    def write_log(self, path):
        if self.log is None:
            raise ValueError("episode was run without state logging")
        np.savetxt(path, self.log, delimiter=",", header=",".join(LOG_COLUMNS), comments="", fmt="%.17g")


def episode_seed(base_seed: int, trial: int) -> int:
    return int(RngStream(base_seed, 0xE915).spawn(trial).integers(0, 2**62))


class _Sensor:
    """Camera, noise and latent cache for the active gate."""

    def __init__(self, sc: ScenarioConfig, encoder, decoder, rng: RngStream, cam: perception.CameraModel):
        self.sc, self.encoder, self.cam, self.rng = sc, encoder, cam, rng
        self.noise = perception.NOISE_PRESETS[sc.noise]
        self.provider = perception.CachedProvider(decoder)

    def reset(self):
        self.provider.cache = None

    def tick(self, x, gate: GatePose, g: GateGeometry, t: float, blind: bool):
        body = RigidTransform(x[6:10], x[0:3])
        cam_pose = self.cam.pose_from_body(body)
        visible = (not blind) and perception.gate_visible(cam_pose, self.cam, gate, g)
        if not visible:
            return
        depth, mask = perception.raycast_depth(gate, g, cam_pose, self.cam, ground_z=self.sc.ground_z,
                                               return_mask=True)
        img = perception.apply_noise(depth, self.noise, self.rng, self.cam.max_range)
        self.provider.cache = perception.cache_update(self.provider.cache, img, cam_pose, self.encoder, True, t,
                                                      self.sc.min_valid_pixels, valid_mask=mask & (img > 0))


def _time_budget(track: Track, sc: ScenarioConfig):
    dist = sc.start_distance + track.laps * max(track.lap_length(), 1e-9)
    return sc.timeout_factor * dist / sc.speed_cap


def run_episode(track: Track, sc: ScenarioConfig, trial: int = 0, model=None) -> EpisodeResult:
    """One seeded closed-loop flight. ``model`` is a trained GateSdfModel for the neural provider."""
    seed = episode_seed(sc.seed, trial)
    root = RngStream(seed, 0)
    true_track = perturb_track(track, sc.perturbation, sc.magnitude, root.spawn(1))
    g = track.geometry
    params: QuadParams = dynamics.preset(sc.quad)
    cfg = sc.mppi_config()
    ctrl = mppi.MppiController(cfg, params, seed=seed)

    sensor = None
    if sc.provider in ("cached", "neural"):
        cam = perception.CameraModel()
        if sc.provider == "neural":
            if model is None:
                raise ValueError("the neural provider needs a trained model")
            enc, dec = model.as_encoder(), model.as_decoder()
        else:
            enc, dec = None, perception.AnalyticDecoder(g)
        sensor = _Sensor(sc, enc, dec, root.spawn(2), cam)
    err_rng = root.spawn(3)
    errors = []
    for _ in range(track.n_gates):
        dp = err_rng.uniform(-sc.estimate_error[0], sc.estimate_error[0], size=3)
        dyaw = err_rng.uniform(-sc.estimate_error[1], sc.estimate_error[1])
        errors.append(RigidTransform(quat_from_axis_angle((0, 0, 1), dyaw), dp))

    def provider_for(i):
        gate = true_track.true[i]
        if sc.provider == "analytic":
            return mppi.AnalyticOracle(gate, g)
        if sc.provider == "perturbed":
            return mppi.PerturbedOracle(gate, errors[i], g)
        if sc.provider == "cached":
            sensor.encoder = perception.PoseEncoder(gate, errors[i])
        sensor.reset()
        return sensor.provider

    d0 = track.travel_direction(0)
    start = track.nominal[0].position - sc.start_distance * d0
    x = QuadState.hover(params, start, yaw=float(np.arctan2(d0[1], d0[0]))).as_array()

    budget = _time_budget(true_track, sc)
    n_steps = int(np.ceil(budget / cfg.dt))
    total = track.n_gates * track.laps
    idx, passed = 0, 0  # waypoint index, confirmed gate passes
    provider = provider_for(0)
    pass_times, rows = [], []
    max_speed, min_sdf = 0.0, np.inf
    blackout_until, blackout_done = -1.0, set()
    failure = "timeout"
    t = 0.0
    for k in range(n_steps):
        t = k * cfg.dt
        wi = total if idx == DONE else idx  # after the last switch, head on as if lapping
        wp = track.nominal[wi % track.n_gates].position
        # the SDF field belongs to the next gate due, which trails the waypoint
        # only inside the switch radius
        di = passed % track.n_gates
        if sensor is not None:
            if (sc.blackout_duration > 0 and passed not in blackout_done
                    and np.linalg.norm(x[0:3] - track.nominal[di].position) < sc.blackout_distance):
                blackout_done.add(passed)
                blackout_until = t + sc.blackout_duration
            sensor.tick(x, true_track.true[di], g, t, blind=t < blackout_until)
        target = wp + sc.lookahead * track.travel_direction(wi)
        u = ctrl(x, target, target, provider)
        diag = ctrl.last
        if np.isfinite(diag.min_sdf):
            min_sdf = min(min_sdf, diag.min_sdf)
        x_new = dynamics.step_array(x, u, params, cfg.dt)
        if sc.log_states:
            rows.append(np.concatenate([[t], x, u, [wi, diag.min_sdf]]))
        p0, p1 = x[0:3], x_new[0:3]
        x = x_new
        max_speed = max(max_speed, float(np.linalg.norm(x[3:6])))
        if any(detect_collision(p0, p1, gp, g, sc.inflation) for gp in true_track.true) or p1[2] < sc.ground_z:
            failure = "collision"
            break
        # gates must be flown through in order, whatever the waypoint switching does
        due = true_track.true[passed % track.n_gates]
        if detect_gate_pass(p0, p1, due, g):
            passed += 1
            pass_times.append(t + cfg.dt)
            if passed == total:
                failure = None
                break
            provider = provider_for(passed % track.n_gates)
        else:
            crossing = _plane_crossing(p0, p1, due)
            if crossing is not None and max(abs(crossing[1]), abs(crossing[2])) < MISS_REACH:
                failure = "missed-gate"
                break
        new_idx, event = waypoint_sequencer(p0, p1, true_track, idx, sc.switch_radius)
        if event is None:
            continue
        if new_idx != DONE and new_idx - passed > 1:
            failure = "missed-gate"  # waypoint moved on twice without a pass
            break
        idx = new_idx
    success = failure is None
    log = np.array(rows) if sc.log_states else None
    return EpisodeResult(success, failure, pass_times, max_speed, float(min_sdf), float(t + cfg.dt),
                         trial, seed, log)


# --- batches ------------------------------------------------------------------------------


@dataclass
class SuccessTable:
    """(speed cap, perturbation, magnitude) -> [successes, trials]."""

    cells: dict = field(default_factory=dict)

    def add(self, cell, success: bool):
        s = self.cells.setdefault(tuple(cell), [0, 0])
        s[0] += int(success)
        s[1] += 1

    def rate(self, cell):
        s, n = self.cells[tuple(cell)]
        return s / n

    def merge(self, other: "SuccessTable"):
        out = SuccessTable({k: list(v) for k, v in self.cells.items()})
        for k, (s, n) in other.cells.items():
            c = out.cells.setdefault(k, [0, 0])
            c[0] += s
            c[1] += n
        return out

    def rows(self):
        for (cap, kind, mag), (s, n) in sorted(self.cells.items()):
            yield {"speed_cap": cap, "perturbation": kind, "magnitude": mag, "successes": s, "trials": n,
                   "rate": s / n}

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["speed_cap", "perturbation", "magnitude", "successes", "trials", "rate"])
            w.writeheader()
            for r in self.rows():
                w.writerow(r)

    @classmethod
    def from_csv(cls, path):
        t = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                t.cells[(float(r["speed_cap"]), r["perturbation"], float(r["magnitude"]))] = [
                    int(r["successes"]), int(r["trials"])]
        return t

    def to_json(self, fingerprint: str = "", seed: int | None = None):
        return json.dumps({"fingerprint": fingerprint, "seed": seed, "cells": list(self.rows())}, indent=2)

    def markdown(self):
        lines = ["| speed cap (m/s) | perturbation | magnitude | success | rate |", "|---|---|---|---|---|"]
        for r in self.rows():
            lines.append(f"| {r['speed_cap']:g} | {r['perturbation']} | {r['magnitude']:g} | "
                         f"{r['successes']}/{r['trials']} | {r['rate']:.2f} |")
        return "\n".join(lines)


def _run_one(args):
    track, sc, trial, model = args
    return run_episode(track, sc, trial, model)


def run_batch(track: Track, scenarios, trials: int | None = None, jobs: int = 1, model=None, out_dir=None,
              fingerprint: str = ""):
    """Run every scenario for ``trials`` (default: each scenario's own) seeded trials.

    Returns ``(table, results)`` with results keyed by cell. Episode outcomes
    do not depend on ``jobs``.
    """
    tasks = []
    for sc in scenarios:
        n = sc.trials if trials is None else trials
        if n < 1:
            raise ValueError("trials must be >= 1")
        tasks += [(track, sc, i, model) for i in range(n)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    table = SuccessTable()
    by_cell: dict = {}
    for (_, sc, _, _), r in zip(tasks, results):
        table.add(sc.cell(), r.success)
        by_cell.setdefault(sc.cell(), []).append(r)
    if out_dir is not None:
        save_batch(out_dir, table, by_cell, fingerprint, track.n_gates)
    return table, by_cell


def cell_name(cell):
    cap, kind, mag = cell
    return f"v{cap:g}_{kind}_{mag:g}"


def save_batch(out_dir, table: SuccessTable, by_cell, fingerprint="", n_gates=4):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "success_table.csv")
    (out / "success_table.json").write_text(table.to_json(fingerprint))
    episodes = []
    for cell, results in by_cell.items():
        d = out / "episodes" / cell_name(cell)
        d.mkdir(parents=True, exist_ok=True)
        for r in results:
            if r.log is not None:
                r.write_log(d / f"trial_{r.trial:03d}.csv")
            episodes.append(dict(r.summary(), cell=list(cell), lap_times=r.lap_times(n_gates)))
    (out / "episodes.json").write_text(json.dumps(episodes, indent=1))
    return out


def default_jobs():
    return max(1, (os.cpu_count() or 1))
