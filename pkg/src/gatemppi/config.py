"""Experiment configuration: TOML files with ``include``, a strict schema and
a fingerprint that identifies a configuration independently of seed and
output location.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import dynamics, mppi, perception, sim
from .gate_sdf import GateGeometry
from .neural_sdf import Architecture, TrainConfig

PROFILE_DIR = Path(__file__).parent / "profiles"


class ConfigError(ValueError):
    pass


def profile_names():
    return sorted(p.stem for p in PROFILE_DIR.glob("*.toml"))


def profile_path(name: str) -> Path:
    p = PROFILE_DIR / f"{name}.toml"
    if not p.exists():
        raise ConfigError(f"unknown profile {name!r} (available: {', '.join(profile_names())})")
    return p


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_raw(path, _seen=None) -> dict:
    """Parse a TOML file, resolving ``include`` (a path relative to the file, or a profile name)."""
    path = Path(path)
    seen = set() if _seen is None else _seen
    key = path.resolve()
    if key in seen:
        raise ConfigError(f"include cycle at {path}")
    seen.add(key)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    inc = raw.pop("include", [])
    base: dict = {}
    for item in [inc] if isinstance(inc, str) else inc:
        cand = path.parent / item
        src = cand if cand.exists() else profile_path(item)
        base = _merge(base, load_raw(src, seen))
    return _merge(base, raw)


# --- schema ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraSection:
    width: int = 64
    height: int = 48
    hfov_deg: float = 90.0
    max_range: float = 12.0


@dataclass(frozen=True)
class GateSection:
    inner_half_width: float = 0.5
    outer_half_width: float = 0.75
    thickness: float = 0.1
    cone_angle_deg: float = 20.0


@dataclass(frozen=True)
class TrackSection:
    radius: float = 5.0
    height: float = 1.5
    n_gates: int = 4
    laps: int = 3


@dataclass(frozen=True)
class DataSection:
    records: int = 2000
    points: int = 8192
    noise: str = "sim"
    finetune_noise: str = "harsh"
    finetune_records: int = 500


@dataclass(frozen=True)
class ModelSection:
    latent: int = 128
    hidden: int = 128
    depth: int = 4
    pe_bands: int = 4


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    stage2_epochs: int = 5
    lambda_recon: float = 1.0
    lambda_sdf: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    val_fraction: float = 0.1
    points_per_image: int = 512
    val_points: int = 2048
    huber_knee: float = 1e-3


@dataclass(frozen=True)
class RaceSection:
    speeds: tuple = (4.0,)
    position: tuple = ()  # displacement magnitudes (m)
    yaw_deg: tuple = ()  # yaw magnitudes (deg)
    nominal: bool = True
    trials: int = 20
    # SDF source for the perturbed cells; empty keeps the [scenario] provider
    perturbed_provider: str = "perturbed"


@dataclass(frozen=True)
class EvalSection:
    slice_heights: tuple = (-0.5, 0.0, 0.5)
    slice_size: float = 10.0
    slice_cells: int = 100
    near_surface_band: float = 0.05
    max_distance: float = 6.0


@dataclass(frozen=True)
class AcceptanceSection:
    # thresholds for exit status 3; negative disables a check
    min_nominal_success: float = -1.0
    min_sign_agreement: float = -1.0


SCENARIO_KEYS = {f.name for f in fields(sim.ScenarioConfig)} - {"perturbation", "magnitude", "speed_cap", "trials",
                                                                "seed", "mppi"}
SECTIONS = {
    "mppi": mppi.MppiConfig,
    "camera": CameraSection,
    "gate": GateSection,
    "track": TrackSection,
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "race": RaceSection,
    "eval": EvalSection,
    "acceptance": AcceptanceSection,
}
TOP_LEVEL = {"name", "quad", "seed", "scenario"} | set(SECTIONS)


def _build(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    bad = set(d) - names
    if bad:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(bad))}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}] {e}") from e


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    name: str = "unnamed"
    quad: str = "sim"
    seed: int | None = None
    mppi: mppi.MppiConfig = field(default_factory=mppi.MppiConfig)
    scenario: dict = field(default_factory=dict)
    camera: CameraSection = CameraSection()
    gate: GateSection = GateSection()
    track: TrackSection = TrackSection()
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    race: RaceSection = RaceSection()
    eval: EvalSection = EvalSection()
    acceptance: AcceptanceSection = AcceptanceSection()

    @classmethod
    def from_dict(cls, raw: dict):
        bad = set(raw) - TOP_LEVEL
        if bad:
            raise ConfigError(f"unknown top-level keys: {', '.join(sorted(bad))}")
        kw = {}
        for name, sec in SECTIONS.items():
            d = raw.get(name, {})
            if not isinstance(d, dict):
                raise ConfigError(f"[{name}] must be a table")
            kw[name] = _build(sec, d, name)
        scen = raw.get("scenario", {})
        bad = set(scen) - SCENARIO_KEYS
        if bad:
            raise ConfigError(f"[scenario] unknown keys: {', '.join(sorted(bad))}")
        quad = raw.get("quad", "sim")
        if quad not in dynamics.PRESETS:
            raise ConfigError(f"unknown quad preset {quad!r}")
        for key in ("noise", "finetune_noise"):
            if getattr(kw["data"], key) not in perception.NOISE_PRESETS:
                raise ConfigError(f"[data] unknown noise preset {getattr(kw['data'], key)!r}")
        seed = raw.get("seed")
        if seed is not None and (not isinstance(seed, int) or seed < 0):
            raise ConfigError("seed must be a non-negative integer")
        cfg = cls(raw=raw, name=str(raw.get("name", "unnamed")), quad=quad, seed=seed, scenario=dict(scen), **kw)
        cfg.scenario_for("none", 0.0, cfg.race.speeds[0] if cfg.race.speeds else 4.0, 0)  # validates
        return cfg

    # --- derived objects ---

    def geometry(self) -> GateGeometry:
        g = self.gate
        return GateGeometry(g.inner_half_width, g.outer_half_width, g.thickness, np.deg2rad(g.cone_angle_deg))

    def camera_model(self) -> perception.CameraModel:
        c = self.camera
        return perception.CameraModel.from_fov(c.width, c.height, c.hfov_deg, max_range=c.max_range)

    def architecture(self) -> Architecture:
        m = self.model
        return Architecture(height=self.camera.height, width=self.camera.width, latent=m.latent, hidden=m.hidden,
                            depth=m.depth, pe_bands=m.pe_bands, pe_scale=self.camera.max_range,
                            depth_scale=self.camera.max_range)

    def train_config(self, seed: int, stage: int = 1) -> TrainConfig:
        t = asdict(self.train)
        t.pop("stage2_epochs")
        if stage == 2:
            t["epochs"] = self.train.stage2_epochs
        return TrainConfig(seed=seed, **t)

    def make_track(self) -> sim.Track:
        t = self.track
        return sim.circle_track(t.radius, t.height, t.n_gates, t.laps, self.geometry())

    def scenario_for(self, kind: str, magnitude: float, speed: float, seed: int, trials=None) -> sim.ScenarioConfig:
        overrides = {k: v for k, v in asdict(self.mppi).items() if k != "speed_cap"}
        scen = {k: tuple(v) if isinstance(v, list) else v for k, v in self.scenario.items()}
        if kind != "none" and self.race.perturbed_provider:
            scen["provider"] = self.race.perturbed_provider
        try:
            return sim.ScenarioConfig(perturbation=kind, magnitude=float(magnitude), speed_cap=float(speed),
                                      trials=trials or self.race.trials, seed=seed, mppi=overrides, quad=self.quad,
                                      **scen)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[scenario] {e}") from e

    def race_grid(self, seed: int):
        r = self.race
        cells = []
        for v in r.speeds:
            if r.nominal:
                cells.append(("none", 0.0, v))
            cells += [("position", m, v) for m in r.position]
            cells += [("yaw", np.deg2rad(m), v) for m in r.yaw_deg]
        return [self.scenario_for(k, m, v, seed) for k, m, v in cells]

    def fingerprint(self) -> str:
        d = {k: v for k, v in self.raw.items() if k not in ("seed", "name")}
        # fully resolved sections, so defaults count too
        for name in SECTIONS:
            d[name] = asdict(getattr(self, name))
        d["quad"] = self.quad
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


def load(path=None, profile: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Profile first, then the file (which may include further files), then overrides."""
    raw: dict = {}
    if profile is not None:
        raw = load_raw(profile_path(profile))
    if path is not None:
        raw = _merge(raw, load_raw(path))
    if overrides:
        raw = _merge(raw, overrides)
    return ExperimentConfig.from_dict(raw)

