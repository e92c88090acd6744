"""Quadrotor rigid-body dynamics with per-rotor thrust states.

The input is the rate of change of each rotor thrust. State vectors are
flat float64 arrays with the layout below; :class:`QuadState` is a thin
view for callers that prefer named fields.

    0:3 position (world, m)      3:6 velocity (world, m/s)
    6:10 attitude quaternion     10:13 body rates (rad/s)
    13:17 rotor thrusts (N)

Rotors sit in an X layout; index order is front-right, rear-left,
front-left, rear-right. The first two spin one way and the last two the
other, so a diagonal-pair imbalance produces pure yaw torque.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import IDENTITY_QUAT, quat_from_yaw

STATE_DIM = 17
P, V, Q, W, T = slice(0, 3), slice(3, 6), slice(6, 10), slice(10, 13), slice(13, 17)


@dataclass(frozen=True)
class QuadParams:
    mass: float = 0.37
    inertia: tuple = (0.0009, 0.0009, 0.0016)
    arm_length: float = 0.08
    torque_coeff: float = 0.012
    gravity: float = 9.81
    thrust_max: float = 10.0
    thrust_rate_max: float = 10.0
    omega_max: float = 10.0

    def __post_init__(self):
        if self.mass <= 0 or min(self.inertia) <= 0:
            raise ValueError("mass and inertia must be positive")

    @property
    def hover_thrust(self):
        return self.mass * self.gravity / 4.0

    def as_array(self):
        return np.array([self.mass, *self.inertia, self.arm_length, self.torque_coeff, self.gravity,
                         self.thrust_max, self.thrust_rate_max, self.omega_max], dtype=np.float64)


def _hardware_thrust_max(mass=0.37, twr=3.0, g=9.81):
    return twr * mass * g / 4.0


# Table-style simulation limits and a 370 g / TWR 3 hardware-like profile.
PRESETS = {
    "sim": QuadParams(),
    "hardware": QuadParams(thrust_max=_hardware_thrust_max()),
}


def preset(name: str) -> QuadParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown quad preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass
class QuadState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    thrust: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def as_array(self):
        return np.concatenate([self.p, self.v, self.q, self.omega, self.thrust]).astype(np.float64)

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x[P].copy(), x[V].copy(), x[Q].copy(), x[W].copy(), x[T].copy())

    @classmethod
    def hover(cls, params: QuadParams, position=(0.0, 0.0, 0.0), yaw=0.0):
        return cls(p=np.array(position, dtype=float), q=quat_from_yaw(yaw),
                   thrust=np.full(4, params.hover_thrust))


# --- compiled kernels -------------------------------------------------------


@numba.njit(cache=True)
def _deriv(x, u, prm, out):
    m = prm[0]
    jx, jy, jz = prm[1], prm[2], prm[3]
    d = prm[4] / np.sqrt(2.0)
    kappa = prm[5]
    g = prm[6]
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    t0, t1, t2, t3 = x[13], x[14], x[15], x[16]

    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    a = (t0 + t1 + t2 + t3) / m
    out[3] = 2.0 * (qx * qz + qw * qy) * a
    out[4] = 2.0 * (qy * qz - qw * qx) * a
    out[5] = (1.0 - 2.0 * (qx * qx + qy * qy)) * a - g
    out[6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    # rotor positions: FR (+d,-d), RL (-d,+d), FL (+d,+d), RR (-d,-d)
    tau_x = d * (-t0 + t1 + t2 - t3)
    tau_y = -d * (t0 - t1 + t2 - t3)
    tau_z = kappa * (t0 + t1 - t2 - t3)
    out[10] = (tau_x - (wy * jz * wz - wz * jy * wy)) / jx
    out[11] = (tau_y - (wz * jx * wx - wx * jz * wz)) / jy
    out[12] = (tau_z - (wx * jy * wy - wy * jx * wx)) / jz
    out[13] = u[0]
    out[14] = u[1]
    out[15] = u[2]
    out[16] = u[3]


@numba.njit(cache=True)
def _step(x, u_raw, prm, dt, out):
    rate_max = prm[8]
    u = np.empty(4)
    for i in range(4):
        u[i] = min(max(u_raw[i], -rate_max), rate_max)
    k1 = np.empty(17)
    k2 = np.empty(17)
    k3 = np.empty(17)
    k4 = np.empty(17)
    tmp = np.empty(17)
    _deriv(x, u, prm, k1)
    for i in range(17):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _deriv(tmp, u, prm, k2)
    for i in range(17):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _deriv(tmp, u, prm, k3)
    for i in range(17):
        tmp[i] = x[i] + dt * k3[i]
    _deriv(tmp, u, prm, k4)
    for i in range(17):
        out[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    n = np.sqrt(out[6] * out[6] + out[7] * out[7] + out[8] * out[8] + out[9] * out[9])
    for i in range(6, 10):
        out[i] /= n
    w_max = prm[9]
    for i in range(10, 13):
        out[i] = min(max(out[i], -w_max), w_max)
    t_max = prm[7]
    for i in range(13, 17):
        out[i] = min(max(out[i], 0.0), t_max)


@numba.njit(cache=True)
def _rollout_one(x0, U, prm, dt, out):
    out[0, :] = x0
    for k in range(U.shape[0]):
        _step(out[k], U[k], prm, dt, out[k + 1])


@numba.njit(cache=True)
def _rollout_serial(x0, U, prm, dt, out):
    for m in range(U.shape[0]):
        _rollout_one(x0, U[m], prm, dt, out[m])


@numba.njit(cache=True, parallel=True)
def _rollout_parallel(x0, U, prm, dt, out):
    for m in numba.prange(U.shape[0]):
        _rollout_one(x0, U[m], prm, dt, out[m])


# --- public API ---------------------------------------------------------------


def _as_state_array(x):
    if isinstance(x, QuadState):
        return x.as_array()
    return np.ascontiguousarray(x, dtype=np.float64)


def derivative(x, u, params: QuadParams) -> np.ndarray:
    """Time derivative of the 17-element state for constant thrust rates ``u``."""
    out = np.empty(STATE_DIM)
    _deriv(_as_state_array(x), np.ascontiguousarray(u, dtype=np.float64), params.as_array(), out)
    return out


def step_array(x, u, params: QuadParams, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = np.empty(STATE_DIM)
    _step(_as_state_array(x), np.ascontiguousarray(u, dtype=np.float64), params.as_array(), float(dt), out)
    return out


def step(x: QuadState, u, params: QuadParams, dt: float) -> QuadState:
    """One RK4 step, then renormalise attitude and clamp thrusts and body rates."""
    return QuadState.from_array(step_array(x, u, params, dt))


def rollout_trajectory(x0: QuadState, U, params: QuadParams, dt: float) -> list[QuadState]:
    U = np.ascontiguousarray(U, dtype=np.float64).reshape(-1, 4)
    traj = np.empty((U.shape[0] + 1, STATE_DIM))
    _rollout_one(_as_state_array(x0), U, params.as_array(), float(dt), traj)
    return [QuadState.from_array(row) for row in traj]


def rollout_batch(x0, U, params: QuadParams, dt: float, parallel=False) -> np.ndarray:
    """Roll out ``M`` control sequences ``U`` of shape ``(M, K, 4)`` from ``x0``.

    Returns states of shape ``(M, K + 1, 17)``. Each rollout is computed by
    the same compiled step function as :func:`step`, so results match a
    sequential re-execution exactly, serial or parallel.
    """
    U = np.ascontiguousarray(U, dtype=np.float64)
    out = np.empty((U.shape[0], U.shape[1] + 1, STATE_DIM))
    kernel = _rollout_parallel if parallel else _rollout_serial
    kernel(_as_state_array(x0), U, params.as_array(), float(dt), out)
    return out
