"""Analytical gate-shaped signed distance field and training-point sampling.

Gate-local frame: the gate plane is ``x = 0``, the opening is the square
``max(|y|, |z|) < c``. The guidance field is positive inside an hourglass
whose cross-section widens by ``tan(alpha)`` per meter away from the plane.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, RngStream, quat_from_euler


@dataclass(frozen=True)
class GateGeometry:
    inner_half_width: float = 0.5
    outer_half_width: float = 0.75
    thickness: float = 0.1
    cone_angle: float = np.deg2rad(20.0)

    def __post_init__(self):
        if not 0.0 < self.inner_half_width < self.outer_half_width:
            raise ValueError("need 0 < inner_half_width < outer_half_width")
        if self.thickness <= 0.0:
            raise ValueError("thickness must be positive")
        if not 0.0 < self.cone_angle < np.pi / 2:
            raise ValueError("cone_angle must lie in (0, pi/2)")

    @property
    def c(self):
        return self.inner_half_width


@dataclass(frozen=True)
class GatePose:
    """Placement of the gate-local frame in the world (local -> world)."""

    transform: RigidTransform = field(default_factory=RigidTransform)

    @classmethod
    def at(cls, position, yaw=0.0, pitch=0.0, roll=0.0):
        return cls(RigidTransform(quat_from_euler(roll, pitch, yaw), position))

    @property
    def position(self):
        return self.transform.translation

    @property
    def normal(self):
        """Gate-local +x axis in world coordinates."""
        return self.transform.apply_vector(np.array([1.0, 0.0, 0.0]))

    def to_local(self, p_world):
        return self.transform.inverse().apply(p_world)


class SampleClass(enum.IntEnum):
    NEAR_SURFACE = 0
    INTERIOR = 1
    COLLISION_PRONE = 2
    GLOBAL_UNIFORM = 3


def radial_distance(p):
    p = np.asarray(p, dtype=float)
    return np.maximum(np.abs(p[..., 1]), np.abs(p[..., 2]))


def guide_sdf(p, g: GateGeometry):
    """Guidance field ``c + |x| tan(alpha) - max(|y|, |z|)`` in the gate frame."""
    p = np.asarray(p, dtype=float)
    return g.inner_half_width + np.abs(p[..., 0]) * np.tan(g.cone_angle) - radial_distance(p)


def world_guide_sdf(p_world, pose: GatePose, g: GateGeometry):
    return guide_sdf(pose.to_local(p_world), g)


def frame_occupancy(p, g: GateGeometry):
    """True where ``p`` (gate frame) lies inside the solid square-annulus frame."""
    p = np.asarray(p, dtype=float)
    r = radial_distance(p)
    return (np.abs(p[..., 0]) <= 0.5 * g.thickness) & (r >= g.inner_half_width) & (r <= g.outer_half_width)


def distance_to_frame(p, g: GateGeometry):
    """Euclidean distance from gate-frame points to the frame solid (0 inside).

    The solid is the product of the slab ``|x| <= thickness/2`` with the 2-D
    square annulus, so the distance splits into an x part and a (y, z) part.
    """
    p = np.asarray(p, dtype=float)
    dx = np.maximum(np.abs(p[..., 0]) - 0.5 * g.thickness, 0.0)
    ay = np.abs(p[..., 1])
    az = np.abs(p[..., 2])
    r = np.maximum(ay, az)
    o = g.outer_half_width
    outside = np.hypot(np.maximum(ay - o, 0.0), np.maximum(az - o, 0.0))
    hole = np.maximum(g.inner_half_width - r, 0.0)
    d_yz = np.where(r > o, outside, hole)
    return np.hypot(dx, d_yz)


@dataclass
class LabeledPoints:
    """Structure-of-arrays batch of labelled query points."""

    points: np.ndarray  # (N, 3)
    sdf: np.ndarray  # (N,)
    cls: np.ndarray  # (N,) int8 SampleClass values

    def __len__(self):
        return len(self.sdf)

    def subset(self, idx):
        return LabeledPoints(self.points[idx], self.sdf[idx], self.cls[idx])

    @staticmethod
    def concat(parts):
        parts = list(parts)
        if not parts:
            return LabeledPoints(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int8))
        return LabeledPoints(
            np.concatenate([q.points for q in parts]),
            np.concatenate([q.sdf for q in parts]),
            np.concatenate([q.cls for q in parts]),
        )

    def to_csv(self, path):
        table = np.column_stack([self.cls.astype(float), self.points, self.sdf])
        np.savetxt(path, table, delimiter=",", header="class,x,y,z,s", comments="",
                   fmt=["%d", "%.9g", "%.9g", "%.9g", "%.9g"])

    @classmethod
    def from_csv(cls, path):
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(table[:, 1:4].copy(), table[:, 4].copy(), table[:, 0].astype(np.int8))


@dataclass(frozen=True)
class SamplingRegion:
    x_extent: float = 3.0  # |x| range for near-surface / interior samples
    eps_surface: float = 0.05
    collision_margin: float = 0.15
    box_low: tuple = (-6.0, -3.0, -3.0)
    box_high: tuple = (6.0, 3.0, 3.0)


def _point_on_square(r, rng: RngStream):
    n = len(r)
    side = rng.integers(0, 4, size=n)
    t = rng.uniform(-1.0, 1.0, size=n) * r
    sgn = np.where(side % 2 == 0, 1.0, -1.0)
    y = np.where(side < 2, sgn * r, t)
    z = np.where(side < 2, t, sgn * r)
    return y, z


def _near_surface(g, rng, n, region):
    out = []
    while sum(len(o) for o in out) < n:
        m = n - sum(len(o) for o in out)
        x = rng.uniform(-region.x_extent, region.x_extent, size=m)
        r = g.inner_half_width + np.abs(x) * np.tan(g.cone_angle) + rng.uniform(-region.eps_surface, region.eps_surface, size=m)
        y, z = _point_on_square(r, rng)
        p = np.column_stack([x, y, z])
        out.append(p[np.abs(guide_sdf(p, g)) < region.eps_surface])
    return np.concatenate(out)[:n]


def _interior(g, rng, n, region):
    out = []
    while sum(len(o) for o in out) < n:
        m = n - sum(len(o) for o in out)
        x = rng.uniform(-region.x_extent, region.x_extent, size=m)
        rmax = g.inner_half_width + np.abs(x) * np.tan(g.cone_angle)
        y = rng.uniform(-1.0, 1.0, size=m) * rmax
        z = rng.uniform(-1.0, 1.0, size=m) * rmax
        p = np.column_stack([x, y, z])
        out.append(p[guide_sdf(p, g) > 0.0])
    return np.concatenate(out)[:n]


def _collision_prone(g, rng, n, region):
    d = region.collision_margin
    hx = 0.5 * g.thickness + d
    hw = g.outer_half_width + d
    out = []
    while sum(len(o) for o in out) < n:
        m = 2 * (n - sum(len(o) for o in out)) + 8
        p = np.column_stack([
            rng.uniform(-hx, hx, size=m),
            rng.uniform(-hw, hw, size=m),
            rng.uniform(-hw, hw, size=m),
        ])
        out.append(p[distance_to_frame(p, g) <= d])
    return np.concatenate(out)[:n]


def _global(g, rng, n, region):
    lo = np.asarray(region.box_low, dtype=float)
    hi = np.asarray(region.box_high, dtype=float)
    return lo + (hi - lo) * rng.random(size=(n, 3))


_SAMPLERS = {
    SampleClass.NEAR_SURFACE: _near_surface,
    SampleClass.INTERIOR: _interior,
    SampleClass.COLLISION_PRONE: _collision_prone,
    SampleClass.GLOBAL_UNIFORM: _global,
}


def sample_training_points(g: GateGeometry, rng: RngStream, counts, region: SamplingRegion = SamplingRegion(),
                           global_sampler=None) -> LabeledPoints:
    """Hybrid four-class sampling in the gate frame.

    ``counts`` gives the number of points per class in ``SampleClass``
    order. ``global_sampler(rng, n)`` may replace the default uniform box
    (the dataset generator passes a camera-frustum sampler).
    """
    parts = []
    for cls, n in zip(SampleClass, counts):
        n = int(n)
        if n < 0:
            raise ValueError("class counts must be >= 0")
        if n == 0:
            continue
        if cls is SampleClass.GLOBAL_UNIFORM and global_sampler is not None:
            p = global_sampler(rng, n)
        else:
            p = _SAMPLERS[cls](g, rng, n, region)
        parts.append(LabeledPoints(p, guide_sdf(p, g), np.full(n, int(cls), dtype=np.int8)))
    return LabeledPoints.concat(parts)
