"""Synthetic depth sensing and the latent cache.

The camera uses the optical convention (x right, y down, z forward) and is
rigidly mounted on the body looking along body +x. Depth images store the
z-depth of the nearest return in meters with 0 marking "no return".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .gate_sdf import (GateGeometry, GatePose, LabeledPoints, SamplingRegion, guide_sdf,
                       sample_training_points)
from .geometry import RigidTransform, RngStream, quat_from_euler, quat_from_matrix

# Columns are the camera x, y, z axes expressed in the body frame.
CAMERA_IN_BODY = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def _default_mount():
    return RigidTransform(quat_from_matrix(CAMERA_IN_BODY), np.zeros(3))


@dataclass(frozen=True)
class CameraModel:
    width: int = 64
    height: int = 48
    fx: float = 32.0
    fy: float = 32.0
    cx: float = 31.5
    cy: float = 23.5
    max_range: float = 12.0
    body_to_camera: RigidTransform = field(default_factory=_default_mount)  # camera -> body

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise ValueError("principal point must lie inside the image")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @classmethod
    def from_fov(cls, width=64, height=48, hfov_deg=90.0, max_range=12.0):
        f = 0.5 * width / np.tan(0.5 * np.deg2rad(hfov_deg))
        return cls(width, height, f, f, 0.5 * (width - 1), 0.5 * (height - 1), max_range)

    @property
    def shape(self):
        return (self.height, self.width)

    def pose_from_body(self, body: RigidTransform) -> RigidTransform:
        """Camera-to-world transform for a body-to-world transform."""
        return body.compose(self.body_to_camera)

    def ray_directions(self):
        """Per-pixel camera-frame directions with unit z component, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def project(self, p_cam):
        """Pixel coordinates ``(u, v)`` and depth of camera-frame points."""
        p_cam = np.asarray(p_cam, dtype=float)
        z = p_cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p_cam[..., 0] / z + self.cx
            v = self.fy * p_cam[..., 1] / z + self.cy
        return u, v, z

    def in_frustum(self, p_cam, margin=0.5):
        u, v, z = self.project(p_cam)
        return ((z > 0) & (z <= self.max_range) & (u >= -margin) & (u <= self.width - 1 + margin)
                & (v >= -margin) & (v <= self.height - 1 + margin))

    def as_dict(self):
        return dict(width=self.width, height=self.height, fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    max_range=self.max_range, body_to_camera=self.body_to_camera.as_vector().tolist())


def body_pose(position, yaw=0.0, pitch=0.0, roll=0.0) -> RigidTransform:
    return RigidTransform(quat_from_euler(roll, pitch, yaw), position)


# --- raycasting -----------------------------------------------------------------


def _slab_interval(o, d, lo, hi):
    """Ray-parameter interval inside the axis-aligned box ``lo <= o + t d <= hi``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_a = (lo - o) * inv
        t_b = (hi - o) * inv
    # a zero direction component gives nan/inf; resolve by whether o is inside
    inside = (o >= lo) & (o <= hi)
    zero = d == 0.0
    t_near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t_a, t_b))
    t_far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t_a, t_b))
    return np.max(t_near, axis=-1), np.min(t_far, axis=-1)


def ray_frame_hit(origin, dirs, g: GateGeometry):
    """Nearest ray parameter ``t > 0`` where gate-frame rays enter the frame solid.

    ``origin`` (3,) and ``dirs`` (..., 3) are in the gate frame. Returns
    ``inf`` for misses. The solid is the outer box minus the open inner prism.
    """
    o = np.broadcast_to(np.asarray(origin, dtype=float), np.shape(dirs))
    d = np.asarray(dirs, dtype=float)
    h = 0.5 * g.thickness
    w = g.outer_half_width
    c = g.inner_half_width
    t0, t1 = _slab_interval(o, d, np.array([-h, -w, -w]), np.array([h, w, w]))
    s0, s1 = _slab_interval(o[..., 1:], d[..., 1:], np.array([-c, -c]), np.array([c, c]))
    entry = np.maximum(t0, 0.0)
    hit_box = t1 >= entry
    # the entry point lies in the open hole: skip to where the ray leaves the hole
    in_hole = (s0 < entry) & (entry < s1)
    cand = np.where(in_hole, s1, entry)
    ok = hit_box & (cand <= t1)
    return np.where(ok, cand, np.inf)


def raycast_depth(gate: GatePose, g: GateGeometry, cam_pose: RigidTransform, cam: CameraModel,
                  ground_z: float | None = None, return_mask=False):
    """Z-depth image of a single gate seen from ``cam_pose`` (camera -> world).

    ``ground_z`` adds a horizontal ground plane at that world height.
    ``return_mask`` also returns the boolean mask of gate returns.
    """
    dirs_cam = cam.ray_directions()
    dirs_world = cam_pose.apply_vector(dirs_cam)
    to_gate = gate.transform.inverse()
    o_gate = to_gate.apply(cam_pose.translation)
    d_gate = to_gate.apply_vector(dirs_world)
    t = ray_frame_hit(o_gate, d_gate, g)
    gate_hit = np.isfinite(t) & (t <= cam.max_range)
    if ground_z is not None:
        oz = cam_pose.translation[2]
        dz = dirs_world[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (ground_z - oz) / dz
        tg = np.where((dz < 0) & (tg > 0), tg, np.inf)
        gate_hit &= t <= tg
        t = np.minimum(t, tg)
    depth = np.where(np.isfinite(t) & (t <= cam.max_range), t, 0.0)
    if return_mask:
        return depth, gate_hit
    return depth


# --- noise ------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    additive_std: float = 0.0  # m
    relative_std: float = 0.0  # extra std per meter of depth
    dropout: float = 0.0
    erosion_radius: int = 0  # px
    edge_dropout: float = 1.0  # drop probability inside the eroded band
    edge_jump: float = 0.3  # m; depth step treated as a discontinuity
    quant_step: float = 0.0  # m

    def __post_init__(self):
        if not (0.0 <= self.dropout <= 1.0 and 0.0 <= self.edge_dropout <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if min(self.additive_std, self.relative_std, self.quant_step) < 0 or self.erosion_radius < 0:
            raise ValueError("noise parameters must be non-negative")

    @property
    def is_zero(self):
        return (self.additive_std == 0 and self.relative_std == 0 and self.dropout == 0
                and self.erosion_radius == 0 and self.quant_step == 0)


NOISE_PRESETS = {
    "none": NoiseModel(),
    # stage-1 "simulated hardware" noise
    "sim": NoiseModel(additive_std=0.01, relative_std=0.01, dropout=0.02, erosion_radius=1,
                      edge_dropout=0.3, quant_step=0.01),
    # harsher model standing in for real-sensor fine-tuning data
    "harsh": NoiseModel(additive_std=0.03, relative_std=0.03, dropout=0.1, erosion_radius=1,
                        edge_dropout=0.6, quant_step=0.02),
}


def _discontinuity_mask(img, valid, jump):
    pad = np.pad(img, 1, mode="edge")
    vpad = np.pad(valid, 1, mode="edge")
    edge = np.zeros_like(valid)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = pad[1 + dy:1 + dy + img.shape[0], 1 + dx:1 + dx + img.shape[1]]
        nbv = vpad[1 + dy:1 + dy + img.shape[0], 1 + dx:1 + dx + img.shape[1]]
        edge |= (nbv != valid) | (nbv & valid & (np.abs(nb - img) > jump))
    return edge & valid


def apply_noise(img, model: NoiseModel, rng: RngStream, max_range=np.inf):
    """Corrupt a depth image. Pixels that were 0 stay 0."""
    img = np.asarray(img)
    if model.is_zero:
        return img.copy()
    out = img.astype(np.float64)
    valid = out > 0
    if model.erosion_radius > 0:
        # pixels within the radius of a depth discontinuity, thinned at random
        edge = _discontinuity_mask(out, valid, model.edge_jump)
        k = 2 * model.erosion_radius + 1
        band = ndimage.binary_dilation(edge, structure=np.ones((k, k), bool)) & valid
        valid = valid & ~(band & (rng.random(size=out.shape) < model.edge_dropout))
    std = model.additive_std + model.relative_std * out
    noisy = out + std * rng.normal(size=out.shape)
    if model.dropout > 0:
        valid &= rng.random(size=out.shape) >= model.dropout
    if model.quant_step > 0:
        noisy = np.round(noisy / model.quant_step) * model.quant_step
    floor = model.quant_step if model.quant_step > 0 else 1e-3
    noisy = np.clip(noisy, floor, max_range)
    return np.where(valid, noisy, 0.0).astype(img.dtype)


# --- visibility and the latent cache ------------------------------------------------


def gate_visible(cam_pose: RigidTransform, cam: CameraModel, gate: GatePose, g: GateGeometry | None = None):
    """Gate centre projects inside the image (edges inclusive) in front of the camera."""
    p = cam_pose.inverse().apply(gate.position)
    u, v, z = cam.project(p)
    return bool(z > 0 and -0.5 <= u <= cam.width - 0.5 and -0.5 <= v <= cam.height - 0.5)


def gate_fully_visible(gate_in_cam: RigidTransform, cam: CameraModel, g: GateGeometry):
    """All four outer corners of the frame project inside the image, in front of the camera."""
    o = g.outer_half_width
    corners = np.array([[0.0, sy * o, sz * o] for sy in (-1, 1) for sz in (-1, 1)])
    u, v, z = cam.project(gate_in_cam.apply(corners))
    return bool(np.all(z > 0) and np.all((u >= -0.5) & (u <= cam.width - 0.5) & (v >= -0.5) & (v <= cam.height - 0.5)))


class CacheNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class LatentCache:
    z: np.ndarray
    world_to_camera: RigidTransform
    timestamp: float

    def __post_init__(self):
        z = np.array(self.z, dtype=float, copy=True)
        z.flags.writeable = False
        object.__setattr__(self, "z", z)


def cache_update(cache: LatentCache | None, img, cam_pose: RigidTransform, encoder, visible: bool,
                 timestamp: float, min_valid_pixels: int = 20, valid_mask=None):
    """Encode ``img`` and replace the cache if the gate is visible and well observed.

    ``encoder(img, cam_pose)`` returns the latent code. ``valid_mask`` marks
    gate returns; by default every nonzero pixel counts.
    """
    if cache is not None and timestamp < cache.timestamp:
        raise ValueError("cache timestamps must not go backwards")
    if not visible:
        return cache
    n_valid = int(np.count_nonzero(valid_mask if valid_mask is not None else np.asarray(img) > 0))
    if n_valid < min_valid_pixels:
        return cache
    return LatentCache(encoder(img, cam_pose), cam_pose.inverse(), float(timestamp))


def cached_query(cache: LatentCache | None, points, decoder):
    """SDF of world points through the cached latent and its capture-time camera frame."""
    if cache is None:
        raise CacheNotReady("no latent cached yet")
    p_cam = cache.world_to_camera.apply(np.asarray(points, dtype=float))
    return decoder(cache.z, p_cam)


class AnalyticDecoder:
    """Stand-in decoder whose latent is the gate pose in the camera frame (7-vector)."""

    def __init__(self, geometry: GateGeometry = GateGeometry()):
        self.geometry = geometry

    def __call__(self, z, p_cam):
        gate_in_cam = RigidTransform.from_vector(z)
        return guide_sdf(gate_in_cam.inverse().apply(p_cam), self.geometry)


class PoseEncoder:
    """Oracle "encoder" reporting the (possibly mis-estimated) gate pose in the camera frame.

    ``error`` is a gate-local rigid offset applied on top of the true pose.
    """

    def __init__(self, gate: GatePose, error: RigidTransform | None = None):
        believed = gate.transform if error is None else gate.transform.compose(error)
        self.believed = believed

    def __call__(self, img, cam_pose: RigidTransform):
        return cam_pose.inverse().compose(self.believed).as_vector()


class CachedProvider:
    """SDF provider answering through a :class:`LatentCache`.

    The owner refreshes ``cache``; queries before the first refresh raise
    the controller's not-ready signal.
    """

    def __init__(self, decoder, cache: LatentCache | None = None):
        self.decoder = decoder
        self.cache = cache

    def query(self, points):
        from .mppi import ProviderNotReady

        if self.cache is None:
            raise ProviderNotReady("latent cache empty")
        return cached_query(self.cache, points, self.decoder)


# --- dataset ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseSampler:
    """Random camera placements around a gate at the origin of its own frame."""

    min_dist: float = 1.5
    max_dist: float = 8.0
    max_azimuth: float = np.deg2rad(60.0)  # off the gate normal
    max_elevation: float = np.deg2rad(20.0)
    aim_jitter: float = np.deg2rad(25.0)
    max_roll: float = np.deg2rad(15.0)

    def sample(self, rng: RngStream, gate: GatePose, cam: CameraModel) -> RigidTransform:
        side = 1.0 if rng.random() < 0.5 else -1.0
        dist = rng.uniform(self.min_dist, self.max_dist)
        az = rng.uniform(-self.max_azimuth, self.max_azimuth)
        el = rng.uniform(-self.max_elevation, self.max_elevation)
        local = dist * np.array([side * np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        pos = gate.transform.apply(local)
        to_gate = gate.position - pos
        yaw = np.arctan2(to_gate[1], to_gate[0]) + rng.uniform(-self.aim_jitter, self.aim_jitter)
        pitch = -np.arctan2(to_gate[2], np.hypot(to_gate[0], to_gate[1])) + rng.uniform(-0.3, 0.3) * self.aim_jitter
        roll = rng.uniform(-self.max_roll, self.max_roll)
        return cam.pose_from_body(body_pose(pos, yaw, pitch, roll))


CLASS_FRACTIONS = (0.4, 0.2, 0.2, 0.2)


def class_counts(n, fractions=CLASS_FRACTIONS):
    counts = [int(np.floor(n * f)) for f in fractions[:-1]]
    return counts + [n - sum(counts)]


def frustum_sampler(cam: CameraModel, cam_to_gate: RigidTransform):
    """Uniform samples inside the camera frustum (to ``max_range``), returned in the gate frame."""

    def sample(rng: RngStream, n):
        # uniform in volume: depth density ~ z^2
        z = cam.max_range * rng.random(size=n) ** (1.0 / 3.0)
        u = rng.uniform(-0.5, cam.width - 0.5, size=n)
        v = rng.uniform(-0.5, cam.height - 0.5, size=n)
        p_cam = np.column_stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
        return cam_to_gate.apply(p_cam)

    return sample


@dataclass
class Dataset:
    """In-memory image/SDF records. Points are in each record's camera frame."""

    noisy: np.ndarray  # (N, H, W) float32
    clean: np.ndarray  # (N, H, W) float32
    points: np.ndarray  # (N, P, 3) float32
    sdf: np.ndarray  # (N, P) float32
    cls: np.ndarray  # (N, P) int8
    cam_pose: np.ndarray  # (N, 7) camera -> world
    gate_in_cam: np.ndarray  # (N, 7) gate -> camera
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.noisy)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.noisy[idx], self.clean[idx], self.points[idx], self.sdf[idx], self.cls[idx],
                       self.cam_pose[idx], self.gate_in_cam[idx], dict(self.meta))

    def split(self, val_fraction=0.1, seed=0):
        n = len(self)
        perm = RngStream(seed, 0xDA7A).permutation(n)
        n_val = int(round(n * val_fraction))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))

    @staticmethod
    def empty(cam: CameraModel, n_points=0):
        h, w = cam.shape
        return Dataset(np.zeros((0, h, w), np.float32), np.zeros((0, h, w), np.float32),
                       np.zeros((0, n_points, 3), np.float32), np.zeros((0, n_points), np.float32),
                       np.zeros((0, n_points), np.int8), np.zeros((0, 7)), np.zeros((0, 7)))

    # -- on-disk container: one directory per record plus manifest.json --

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        h, w = self.noisy.shape[1:] if len(self) else (0, 0)
        for i in range(len(self)):
            rec = root / f"record_{i:06d}"
            rec.mkdir(exist_ok=True)
            self.noisy[i].astype("<f4").tofile(rec / "depth_noisy.f32")
            self.clean[i].astype("<f4").tofile(rec / "depth_clean.f32")
            header = [f"width {w}", f"height {h}"]
            cam = self.meta.get("camera", {})
            for k in ("fx", "fy", "cx", "cy", "max_range"):
                if k in cam:
                    header.append(f"{k} {cam[k]!r}")
            header.append("cam_pose " + " ".join(repr(float(x)) for x in self.cam_pose[i]))
            header.append("gate_in_cam " + " ".join(repr(float(x)) for x in self.gate_in_cam[i]))
            (rec / "header.txt").write_text("\n".join(header) + "\n")
            LabeledPoints(self.points[i], self.sdf[i], self.cls[i]).to_csv(rec / "points.csv")
        manifest = dict(self.meta, records=len(self))
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, root):
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"{manifest_path} not found")
        meta = json.loads(manifest_path.read_text())
        n = int(meta.pop("records"))
        noisy, clean, pts, sdf, lab, poses, gic = [], [], [], [], [], [], []
        for i in range(n):
            rec = root / f"record_{i:06d}"
            hdr = {}
            for line in (rec / "header.txt").read_text().splitlines():
                key, *vals = line.split()
                hdr[key] = vals
            h, w = int(hdr["height"][0]), int(hdr["width"][0])
            for name, sink in (("depth_noisy.f32", noisy), ("depth_clean.f32", clean)):
                raw = np.fromfile(rec / name, dtype="<f4")
                if raw.size != h * w:
                    raise ValueError(f"{rec / name}: expected {h * w} values, found {raw.size}")
                sink.append(raw.reshape(h, w))
            lp = LabeledPoints.from_csv(rec / "points.csv")
            pts.append(lp.points.astype(np.float32))
            sdf.append(lp.sdf.astype(np.float32))
            lab.append(lp.cls)
            poses.append([float(x) for x in hdr["cam_pose"]])
            gic.append([float(x) for x in hdr["gate_in_cam"]])
        if n == 0:
            cam = meta.get("camera", {})
            ds = cls.empty(CameraModel(**{k: v for k, v in cam.items() if k != "body_to_camera"}) if cam else CameraModel())
            ds.meta = meta
            return ds
        return cls(np.stack(noisy), np.stack(clean), np.stack(pts), np.stack(sdf), np.stack(lab),
                   np.array(poses), np.array(gic), meta)

    def fingerprint(self):
        h = hashlib.sha256()
        for a in (self.noisy, self.clean, self.points, self.sdf, self.cls):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def generate_record(i, seed, cam: CameraModel, noise: NoiseModel, g: GateGeometry, n_points=8192,
                    pose_sampler: PoseSampler = PoseSampler(), region: SamplingRegion = SamplingRegion()):
    """One synthetic record: (noisy, clean, points, sdf, cls, cam_pose, gate_in_cam)."""
    rng = RngStream(seed, i)
    gate = GatePose()
    cam_pose = pose_sampler.sample(rng, gate, cam)
    clean = raycast_depth(gate, g, cam_pose, cam)
    noisy = apply_noise(clean, noise, rng.spawn(i + (1 << 32)), cam.max_range)
    cam_to_gate = gate.transform.inverse().compose(cam_pose)
    lp = sample_training_points(g, rng, class_counts(n_points), region,
                                global_sampler=frustum_sampler(cam, cam_to_gate))
    gate_in_cam = cam_to_gate.inverse().as_vector()
    # labels are recomputed from the stored float32 points so that they are
    # exactly the analytic field at what a consumer reads back
    p_cam = cam_to_gate.inverse().apply(lp.points).astype(np.float32)
    sdf = guide_sdf(RigidTransform.from_vector(gate_in_cam).inverse().apply(p_cam.astype(float)), g)
    return (noisy.astype(np.float32), clean.astype(np.float32), p_cam,
            sdf.astype(np.float32), lp.cls, cam_pose.as_vector(), gate_in_cam)


def generate_dataset(n, seed, cam: CameraModel = CameraModel(), noise: NoiseModel = NOISE_PRESETS["sim"],
                     g: GateGeometry = GateGeometry(), n_points=8192, pose_sampler: PoseSampler = PoseSampler(),
                     region: SamplingRegion = SamplingRegion(), meta=None) -> Dataset:
    """``n`` records; record ``i`` depends only on ``(seed, i)``."""
    if n == 0:
        ds = Dataset.empty(cam, n_points)
    else:
        recs = [generate_record(i, seed, cam, noise, g, n_points, pose_sampler, region) for i in range(n)]
        ds = Dataset(*(np.stack(col) for col in zip(*recs)))
    ds.meta = dict(meta or {}, seed=int(seed), camera=cam.as_dict(), noise=asdict(noise),
                   geometry=asdict(g), points_per_record=int(n_points))
    return ds
