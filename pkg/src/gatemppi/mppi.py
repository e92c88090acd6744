"""Sampling-based MPPI controller for gate racing.

Per control cycle: perturb the nominal thrust-rate sequence with Gaussian
noise, roll every candidate through the quadrotor model, score it with the
gate-progress, yaw-alignment and SDF-clearance costs, and replace the
nominal sequence by the exponentially weighted average of the candidates.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from . import dynamics
from .dynamics import QuadParams, QuadState
from .gate_sdf import GateGeometry, GatePose, world_guide_sdf
from .geometry import RigidTransform, counter_normals, yaw_of

P_SLICE = slice(0, 3)

# Columns: collective, roll, pitch, yaw directions for rotor order FR, RL, FL, RR.
MIXER_BASIS = 0.5 * np.array([
    [1.0, -1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0, -1.0],
])
NOISE_BASES = {"rotor": np.eye(4), "mixer": MIXER_BASIS}


class ProviderNotReady(RuntimeError):
    """Raised by an SDF provider that has nothing to answer with yet."""


class SdfQueryProvider(Protocol):
    def query(self, points: np.ndarray) -> np.ndarray:
        """Batched SDF values (m) for world-frame points of shape (N, 3)."""


@dataclass
class AnalyticOracle:
    """Exact guidance field of a gate at a known pose."""

    pose: GatePose
    geometry: GateGeometry = field(default_factory=GateGeometry)

    def query(self, points):
        return world_guide_sdf(points, self.pose, self.geometry)


@dataclass
class PerturbedOracle:
    """Analytic field evaluated at a corrupted gate pose.

    ``error`` is a gate-local rigid offset: the believed gate frame is
    ``pose ∘ error``. Models a perception system with a fixed pose bias.
    """

    pose: GatePose
    error: RigidTransform
    geometry: GateGeometry = field(default_factory=GateGeometry)

    def query(self, points):
        believed = GatePose(self.pose.transform.compose(self.error))
        return world_guide_sdf(points, believed, self.geometry)


@dataclass(frozen=True)
class MppiConfig:
    num_rollouts: int = 1024
    horizon: int = 20
    dt: float = 0.03
    temperature: float = 0.05
    noise_std: tuple = (3.0, 3.0, 3.0, 3.0)
    # "rotor": noise_std is per-rotor (diagonal covariance).
    # "mixer": noise_std is (collective, roll, pitch, yaw) in an orthonormal
    # thrust-mixing basis, giving a full covariance in rotor space.
    noise_basis: str = "rotor"
    # 1: white rate noise per step. b > 1: the rotor-thrust perturbation is
    # piecewise linear between knots every b steps (pinned at 0 now), so the
    # rate noise is constant over each block. Blocks after the first have
    # marginal covariance Sigma; the first, anchored at 0, has Sigma / 2.
    noise_knot_interval: int = 1
    # how the step vacated by the receding-horizon shift is filled:
    # "repeat" copies the last rate command, "hold" uses a zero rate so the
    # last thrust level is held
    shift_fill: str = "repeat"
    q_gate: float = 1.0
    q_vis: float = 2.0
    q_sdf: float = 50.0
    d_safe: float = 1.0
    # soft speed limit: q_speed * sum_k max(0, |v_k| - speed_cap)^2
    speed_cap: float | None = None
    q_speed: float = 0.0
    # body-rate regulariser: q_rate * sum_k |omega_k|^2
    q_rate: float = 0.0
    # attitude regulariser: q_tilt * sum_k (1 - cos(tilt_k))
    q_tilt: float = 0.0
    parallel: bool = False

    def __post_init__(self):
        if self.num_rollouts < 1 or self.horizon < 1:
            raise ValueError("num_rollouts and horizon must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if len(self.noise_std) != 4 or min(self.noise_std) <= 0:
            raise ValueError("noise_std needs 4 positive entries")
        if self.noise_basis not in NOISE_BASES:
            raise ValueError(f"noise_basis must be one of {sorted(NOISE_BASES)}")
        if self.d_safe < 0:
            raise ValueError("d_safe must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.shift_fill not in ("repeat", "hold"):
            raise ValueError("shift_fill must be 'repeat' or 'hold'")
        if self.noise_knot_interval < 1:
            raise ValueError("noise_knot_interval must be >= 1")

    def noise_factor(self) -> np.ndarray:
        """Matrix ``L`` with ``Sigma = L L^T``; rotor noise is ``L @ eps``."""
        return NOISE_BASES[self.noise_basis] * np.asarray(self.noise_std, dtype=float)

    def covariance(self) -> np.ndarray:
        L = self.noise_factor()
        return L @ L.T


def _states(traj) -> np.ndarray:
    if isinstance(traj, (list, tuple)) and traj and isinstance(traj[0], QuadState):
        return np.stack([s.as_array() for s in traj])
    return np.asarray(traj, dtype=float)


# --- sampling -----------------------------------------------------------------


def sample_sequences(U_nom, cfg: MppiConfig, params: QuadParams, seed: int, cycle: int = 0) -> np.ndarray:
    """Candidate sequences ``clamp(U_nom + dU_m)`` of shape ``(M, K, 4)``.

    Rollout ``m`` draws its noise from counter stream ``m`` at an offset
    set by ``cycle``, so the batch depends only on ``(seed, cycle)``.
    Rollout 0 is the unperturbed nominal sequence.
    """
    U_nom = np.asarray(U_nom, dtype=float)
    M, K = cfg.num_rollouts, U_nom.shape[0]
    b = cfg.noise_knot_interval
    nk = -(-K // b)
    n = nk * 4
    offset = cycle * (n + (n & 1))
    noise = counter_normals(seed, np.arange(M), offset, n).reshape(M, nk, 4)
    if cfg.noise_basis == "rotor":
        noise *= np.asarray(cfg.noise_std, dtype=float)
    else:
        noise = noise @ cfg.noise_factor().T
    if b > 1:
        # knot offsets with std sigma*b*dt/sqrt(2); slopes between two free knots have std sigma
        knots = np.concatenate([np.zeros((M, 1, 4)), noise * (b * cfg.dt / np.sqrt(2.0))], axis=1)
        noise = np.repeat(np.diff(knots, axis=1) / (b * cfg.dt), b, axis=1)[:, :K]
    noise[0] = 0.0
    lim = params.thrust_rate_max
    return np.clip(U_nom[None] + noise, -lim, lim)


# --- costs --------------------------------------------------------------------


def gate_progress_cost(traj, wp) -> np.ndarray | float:
    """Summed per-step change of squared distance to the waypoint."""
    pos = _states(traj)[..., P_SLICE]
    d2 = np.sum((pos - np.asarray(wp, dtype=float)) ** 2, axis=-1)
    return np.sum(d2[..., 1:] - d2[..., :-1], axis=-1)


def gate_progress_cost_telescoped(traj, wp):
    pos = _states(traj)[..., P_SLICE]
    wp = np.asarray(wp, dtype=float)
    return np.sum((pos[..., -1, :] - wp) ** 2, axis=-1) - np.sum((pos[..., 0, :] - wp) ** 2, axis=-1)


def line_of_sight_yaw(pos, gate_center):
    d = np.asarray(gate_center, dtype=float) - pos
    return np.arctan2(d[..., 1], d[..., 0])


def perception_cost(traj, gate_center, return_flag=False):
    """Sum over k < K of ``1 - cos(yaw_k - line-of-sight yaw_k)``.

    Steps whose horizontal position coincides with the gate centre have no
    defined line of sight and contribute 0 (reported via ``return_flag``).
    """
    x = _states(traj)
    pos = x[..., :-1, 0:3]
    psi = yaw_of(x[..., :-1, 6:10])
    psi_gate = line_of_sight_yaw(pos, gate_center)
    gc = np.asarray(gate_center, dtype=float)
    degenerate = np.hypot(gc[0] - pos[..., 0], gc[1] - pos[..., 1]) == 0.0
    term = np.where(degenerate, 0.0, 1.0 - np.cos(psi - psi_gate))
    cost = np.sum(term, axis=-1)
    if return_flag:
        return cost, bool(np.any(degenerate))
    return cost


def sdf_cost(traj, provider: SdfQueryProvider, d_safe: float, return_info=False):
    """Sum over k < K of ``max(0, d_safe - s_k)``.

    When the provider is not ready the term is 0 and the warm-up flag set.
    ``return_info`` adds ``(warmup, min_sdf)``.
    """
    x = _states(traj)
    pos = x[..., :-1, 0:3]
    lead = pos.shape[:-1]
    try:
        s = np.asarray(provider.query(pos.reshape(-1, 3)), dtype=float).reshape(lead)
    except ProviderNotReady:
        cost = np.zeros(lead[:-1]) if len(lead) > 1 else 0.0
        return (cost, True, np.nan) if return_info else cost
    cost = np.sum(np.maximum(0.0, d_safe - s), axis=-1)
    if return_info:
        return cost, False, float(np.min(s)) if s.size else np.nan
    return cost


def speed_cost(traj, speed_cap):
    v = _states(traj)[..., :-1, 3:6]
    excess = np.maximum(np.linalg.norm(v, axis=-1) - speed_cap, 0.0)
    return np.sum(excess**2, axis=-1)


def rate_cost(traj):
    w = _states(traj)[..., :-1, 10:13]
    return np.sum(np.sum(w**2, axis=-1), axis=-1)


def tilt_cost(traj):
    q = _states(traj)[..., :-1, 6:10]
    return np.sum(2.0 * (q[..., 1] ** 2 + q[..., 2] ** 2), axis=-1)


def total_cost(traj, wp, gate_center, provider, cfg: MppiConfig, return_terms=False):
    """``q_gate J_gate + q_vis J_vis + q_sdf J_sdf`` (+ optional regularisers)."""
    x = _states(traj)
    j_gate = gate_progress_cost(x, wp)
    j_vis, vis_flag = perception_cost(x, gate_center, return_flag=True)
    j_sdf, warmup, min_sdf = sdf_cost(x, provider, cfg.d_safe, return_info=True)
    total = cfg.q_gate * j_gate + cfg.q_vis * j_vis + cfg.q_sdf * j_sdf
    terms = {"gate": j_gate, "vis": j_vis, "sdf": j_sdf}
    if cfg.speed_cap is not None and cfg.q_speed > 0:
        terms["speed"] = speed_cost(x, cfg.speed_cap)
        total = total + cfg.q_speed * terms["speed"]
    if cfg.q_rate > 0:
        terms["rate"] = rate_cost(x)
        total = total + cfg.q_rate * terms["rate"]
    if cfg.q_tilt > 0:
        terms["tilt"] = tilt_cost(x)
        total = total + cfg.q_tilt * terms["tilt"]
    if return_terms:
        flags = {"warmup": warmup, "los_degenerate": vis_flag, "min_sdf": min_sdf}
        return total, terms, flags
    return total


# --- update -------------------------------------------------------------------


def softmax_weights(costs, temperature: float) -> np.ndarray:
    """``exp(-J/lambda)`` normalised, with the minimum cost subtracted first.

    Non-finite costs get zero weight. Returns ``None`` if no cost is finite.
    """
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    if not finite.any():
        return None
    shifted = np.where(finite, costs - np.min(costs[finite]), np.inf)
    w = np.exp(-shifted / temperature)
    return w / np.sum(w)


def weighted_update(sequences, costs, temperature: float, return_info=False):
    """Cost-weighted average of candidate sequences.

    If every cost is non-finite the first (unperturbed) sequence is returned
    and the ``all_infinite`` flag is raised.
    """
    sequences = np.asarray(sequences, dtype=float)
    w = softmax_weights(costs, temperature)
    if w is None:
        out = sequences[0].copy()
        return (out, None, True) if return_info else out
    out = np.tensordot(w, sequences, axes=(0, 0))
    return (out, w, False) if return_info else out


def shift_sequence(U, fill="repeat"):
    """Drop the first action and repeat the last one (``fill="hold"``: append zeros)."""
    tail = U[-1:] if fill == "repeat" else np.zeros_like(U[-1:])
    return np.concatenate([U[1:], tail], axis=0)


@dataclass
class Diagnostics:
    cycle: int
    u0: list
    cost_min: float
    cost_mean: float
    ess: float
    terms: dict
    flags: dict
    solve_time: float
    min_sdf: float

    def to_json(self):
        return json.dumps(asdict(self), allow_nan=True)


def control_step(x, U_nom, wp, gate_center, provider, cfg: MppiConfig, params: QuadParams,
                 seed: int, cycle: int = 0, return_rollouts=False):
    """One MPPI cycle.

    Returns ``(u0, U_next, diagnostics)`` where ``u0`` is the first action of
    the updated sequence and ``U_next`` that sequence shifted by one step.
    """
    t0 = time.perf_counter()
    x0 = x.as_array() if isinstance(x, QuadState) else np.asarray(x, dtype=float)
    U_nom = np.asarray(U_nom, dtype=float)
    seqs = sample_sequences(U_nom, cfg, params, seed, cycle)
    states = dynamics.rollout_batch(x0, seqs, params, cfg.dt, parallel=cfg.parallel)
    costs, terms, flags = total_cost(states, wp, gate_center, provider, cfg, return_terms=True)
    U_new, w, all_inf = weighted_update(seqs, costs, cfg.temperature, return_info=True)
    flags = dict(flags, all_infinite=all_inf)
    if w is None:
        ess = 0.0
        term_means = {k: float("nan") for k in terms}
    else:
        ess = float(1.0 / np.sum(w**2))
        term_means = {k: float(np.dot(w, np.broadcast_to(v, w.shape))) for k, v in terms.items()}
    finite = costs[np.isfinite(costs)]
    diag = Diagnostics(
        cycle=cycle,
        u0=U_new[0].tolist(),
        cost_min=float(finite.min()) if finite.size else float("nan"),
        cost_mean=float(finite.mean()) if finite.size else float("nan"),
        ess=ess,
        terms=term_means,
        flags={k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in flags.items()},
        solve_time=time.perf_counter() - t0,
        min_sdf=float(flags["min_sdf"]),
    )
    out = (U_new[0].copy(), shift_sequence(U_new, cfg.shift_fill), diag)
    if return_rollouts:
        out = out + (states, costs)
    return out


class MppiController:
    """Stateful wrapper keeping the warm-started nominal sequence."""

    def __init__(self, cfg: MppiConfig, params: QuadParams, seed: int = 0, log=None):
        self.cfg = cfg
        self.params = params
        self.seed = seed
        self.cycle = 0
        self.U = np.zeros((cfg.horizon, 4))
        self.log = log
        self.last = None

    def reset(self):
        self.cycle = 0
        self.U = np.zeros((self.cfg.horizon, 4))

    def __call__(self, x, wp, gate_center, provider):
        u0, self.U, diag = control_step(x, self.U, wp, gate_center, provider, self.cfg, self.params,
                                        self.seed, self.cycle)
        self.cycle += 1
        self.last = diag
        if self.log is not None:
            self.log.write(diag.to_json() + "\n")
        return u0

