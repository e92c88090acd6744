"""Shared 3D math: unit quaternions, rigid transforms, positional encoding
and reproducible random streams.

Quaternions are stored as ``[w, x, y, z]`` float arrays; every function here
accepts a single quaternion of shape ``(4,)`` or a batch ``(..., 4)``.
Points are ``(3,)`` or ``(..., 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

# Body x-axis horizontal component below this is treated as gimbal-degenerate.
GIMBAL_TOL = 1e-6


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_euler(roll=0.0, pitch=0.0, yaw=0.0):
    """Quaternion for intrinsic Z-Y-X (yaw, then pitch, then roll) angles."""
    qz = quat_from_axis_angle([0.0, 0.0, 1.0], yaw)
    qy = quat_from_axis_angle([0.0, 1.0, 0.0], pitch)
    qx = quat_from_axis_angle([1.0, 0.0, 0.0], roll)
    return quat_mul(quat_mul(qz, qy), qx)


def quat_from_yaw(yaw):
    return quat_from_axis_angle([0.0, 0.0, 1.0], yaw)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_matrix(m):
    """Unit quaternion (w >= 0) from a 3x3 rotation matrix."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def rotate(q, v):
    """Rotate vector(s) ``v`` by unit quaternion(s) ``q``.

    Uses ``v' = v + 2 w (u x v) + 2 u x (u x v)`` with ``u`` the vector part,
    which is cheaper than building the rotation matrix.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def yaw_of(q):
    """Yaw (ZYX convention, z up) in ``(-pi, pi]``.

    Equals the heading of the body x-axis projected onto the horizontal
    plane. When that projection vanishes (nose pointing straight up or down)
    the result is meaningless; check with :func:`yaw_is_degenerate`.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    psi = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return np.where(psi == -np.pi, np.pi, psi)


def yaw_is_degenerate(q, tol=GIMBAL_TOL):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    hx = 1.0 - 2.0 * (y * y + z * z)
    hy = 2.0 * (w * z + x * y)
    return np.hypot(hx, hy) < tol


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from a child frame into a parent frame: ``p_parent = R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = quat_normalize(np.asarray(self.rotation, dtype=float).reshape(4))
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    def apply(self, p):
        return rotate(self.rotation, p) + self.translation

    def apply_vector(self, v):
        return rotate(self.rotation, v)

    def inverse(self):
        qi = quat_conj(self.rotation)
        return RigidTransform(qi, -rotate(qi, self.translation))

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            quat_normalize(quat_mul(self.rotation, other.rotation)),
            self.apply(other.translation),
        )

    __matmul__ = compose

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def as_vector(self):
        """7-vector ``[qw, qx, qy, qz, tx, ty, tz]``."""
        return np.concatenate([self.rotation, self.translation])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:4], vec[4:7])


def transform_point(T: RigidTransform, p):
    return T.apply(p)


def positional_encoding(p, bands=4, include_input=True, scale=1.0):
    """Sinusoidal encoding ``[p, sin(2^0 pi p), cos(2^0 pi p), ...]``.

    ``p`` is divided by ``scale`` first, so with ``scale`` equal to the query
    volume half-extent every output entry stays in ``[-1, 1]``. The output
    has ``3 * 2 * bands`` entries, plus 3 when ``include_input`` is set.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    p = np.asarray(p) / scale
    out = [p] if include_input else []
    for k in range(bands):
        arg = (2.0**k * np.pi) * p
        out.append(np.sin(arg))
        out.append(np.cos(arg))
    return np.concatenate(out, axis=-1)


def encoding_size(bands=4, include_input=True):
    return 6 * bands + (3 if include_input else 0)


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream)``.

    Backed by numpy's counter-based Philox generator with the 128-bit key
    ``seed | stream << 64``, so distinct stream ids give independent
    sequences and no state is shared between workers.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))

    def spawn(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.generator.permutation(x)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


# --- counter-based normals for the rollout hot path ------------------------
#
# One Generator object per rollout is too slow to build every control cycle,
# so rollout noise comes from a stateless hash of (seed, stream, counter).
# Each value depends only on its own indices, never on evaluation order.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True, inline="always")
def _splitmix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def _unit(key, counter):
    # (0, 1), never exactly 0 so log() is safe
    h = _splitmix(key + _GOLDEN * (counter + np.uint64(1)))
    return (np.float64(h >> np.uint64(11)) + 0.5) * _INV_2_53


@numba.njit(cache=True)
def _stream_key(seed, stream):
    return _splitmix(_splitmix(seed) ^ (_GOLDEN * (stream + np.uint64(1))))


@numba.njit(cache=True)
def _fill_normals(seed, streams, offset, out):
    n = out.shape[1]
    for i in range(out.shape[0]):
        key = _stream_key(seed, streams[i])
        for j in range(0, n, 2):
            c = offset + np.uint64(j)
            u1 = _unit(key, c)
            u2 = _unit(key, c + np.uint64(1))
            r = np.sqrt(-2.0 * np.log(u1))
            out[i, j] = r * np.cos(_TWO_PI * u2)
            if j + 1 < n:
                out[i, j + 1] = r * np.sin(_TWO_PI * u2)


def counter_normals(seed: int, streams, offset: int, n: int) -> np.ndarray:
    """Standard normals, one row of ``n`` per stream id.

    Row ``i`` holds draws ``offset .. offset + n - 1`` of stream
    ``streams[i]``; ``offset`` should be even so Box-Muller pairs line up.
    """
    streams = np.asarray(streams, dtype=np.uint64).reshape(-1)
    out = np.empty((streams.size, n))
    _fill_normals(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), streams, np.uint64(offset), out)
    return out
