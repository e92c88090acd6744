"""Learned Gate-SDF: depth encoder, positional-encoded MLP decoder and an
auxiliary depth decoder, trained in two stages with plain numpy backprop.

Layers keep their own forward caches, so a network is used as
``y = net.forward(x)`` followed by ``dx = net.backward(dy)``; gradients are
written into ``layer.grads`` alongside ``layer.params``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RngStream, encoding_size, positional_encoding

# --- layers -------------------------------------------------------------------------


ACTIVATIONS = ("relu", "linear")


def _check_act(act):
    if act not in ACTIVATIONS:
        raise ValueError(f"unknown activation {act!r}")
    return act


def _act_forward(layer, y):
    if layer.act == "linear":
        return y
    layer._mask = y > 0
    return y * layer._mask


def _act_backward(layer, dy):
    return dy if layer.act == "linear" else dy * layer._mask


def _he_std(fan_in, act):
    return np.sqrt((2.0 if act == "relu" else 1.0) / fan_in)


class Dense:
    kind = "dense"

    def __init__(self, n_in, n_out, act="relu", rng: RngStream | None = None, dtype=np.float32):
        self.n_in, self.n_out, self.act = n_in, n_out, _check_act(act)
        scale = _he_std(n_in, act)
        w = rng.normal(0.0, scale, size=(n_in, n_out)) if rng is not None else np.zeros((n_in, n_out))
        self.params = [w.astype(dtype), np.zeros(n_out, dtype)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def shapes(self):
        return [(self.n_in, self.n_out), (self.n_out,)]

    def spec(self):
        return f"dense {self.n_in} {self.n_out} {self.act}"

    def forward(self, x):
        self._x = x
        return _act_forward(self, x @ self.params[0] + self.params[1])

    def backward(self, dy):
        dy = _act_backward(self, dy)
        x2 = self._x.reshape(-1, self.n_in)
        d2 = dy.reshape(-1, self.n_out)
        self.grads[0] += x2.T @ d2
        self.grads[1] += d2.sum(axis=0)
        return dy @ self.params[0].T


def _im2col(xp, k, s, ho, wo):
    """Patches of a padded (B, C, H, W) array as (B, Ho, Wo, C, k, k)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _col2im(cols, shape, k, s):
    """Adjoint of :func:`_im2col`: scatter-add (B, Ho, Wo, C, k, k) into ``shape``."""
    out = np.zeros(shape, dtype=cols.dtype)
    ho, wo = cols.shape[1:3]
    c = cols.transpose(0, 3, 1, 2, 4, 5)  # B, C, Ho, Wo, k, k
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += c[..., i, j]
    return out


class Conv2d:
    """Square-kernel strided convolution (cross-correlation), NCHW."""

    kind = "conv2d"

    def __init__(self, c_in, c_out, k=4, stride=2, pad=1, act="relu", rng=None, dtype=np.float32):
        self.c_in, self.c_out, self.k, self.stride, self.pad, self.act = c_in, c_out, k, stride, pad, _check_act(act)
        fan_in = c_in * k * k
        w = rng.normal(0.0, _he_std(fan_in, act), size=(fan_in, c_out)) if rng is not None else np.zeros((fan_in, c_out))
        self.params = [w.astype(dtype), np.zeros(c_out, dtype)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def shapes(self):
        return [(self.c_in * self.k * self.k, self.c_out), (self.c_out,)]

    def spec(self):
        return f"conv2d {self.c_in} {self.c_out} {self.k} {self.stride} {self.pad} {self.act}"

    def out_hw(self, h, w):
        return (h + 2 * self.pad - self.k) // self.stride + 1, (w + 2 * self.pad - self.k) // self.stride + 1

    def forward(self, x):
        b, _, h, w = x.shape
        ho, wo = self.out_hw(h, w)
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, self.k, self.stride, ho, wo).reshape(b * ho * wo, -1)
        y = (cols @ self.params[0] + self.params[1]).reshape(b, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        self._cols, self._xshape, self._pshape = cols, x.shape, xp.shape
        return _act_forward(self, y)

    def backward(self, dy):
        dy = _act_backward(self, dy)
        b, _, ho, wo = dy.shape
        d2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.grads[0] += self._cols.T @ d2
        self.grads[1] += d2.sum(axis=0)
        dcols = (d2 @ self.params[0].T).reshape(b, ho, wo, self.c_in, self.k, self.k)
        dxp = _col2im(dcols, self._pshape, self.k, self.stride)
        p = self.pad
        return dxp[:, :, p:p + self._xshape[2], p:p + self._xshape[3]]


class ConvTranspose2d:
    """Transposed convolution, the adjoint of :class:`Conv2d` with the same hyper-parameters."""

    kind = "convT2d"

    def __init__(self, c_in, c_out, k=4, stride=2, pad=1, act="relu", rng=None, dtype=np.float32):
        self.c_in, self.c_out, self.k, self.stride, self.pad, self.act = c_in, c_out, k, stride, pad, _check_act(act)
        fan_in = c_in * k * k / (stride * stride)
        w = rng.normal(0.0, _he_std(fan_in, act), size=(c_in, c_out * k * k)) if rng is not None else np.zeros((c_in, c_out * k * k))
        self.params = [w.astype(dtype), np.zeros(c_out, dtype)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def shapes(self):
        return [(self.c_in, self.c_out * self.k * self.k), (self.c_out,)]

    def spec(self):
        return f"convT2d {self.c_in} {self.c_out} {self.k} {self.stride} {self.pad} {self.act}"

    def forward(self, x):
        b, _, h, w = x.shape
        s, k, p = self.stride, self.k, self.pad
        full = (b, self.c_out, (h - 1) * s + k, (w - 1) * s + k)
        x2 = x.transpose(0, 2, 3, 1).reshape(-1, self.c_in)
        cols = (x2 @ self.params[0]).reshape(b, h, w, self.c_out, k, k)
        y = _col2im(cols, full, k, s)
        ho, wo = (h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p
        y = y[:, :, p:p + ho, p:p + wo] + self.params[1][None, :, None, None]
        self._x2, self._in = x2, (b, h, w)
        return _act_forward(self, y)

    def backward(self, dy):
        dy = _act_backward(self, dy)
        b, h, w = self._in
        p = self.pad
        self.grads[1] += dy.sum(axis=(0, 2, 3))
        dyp = np.pad(dy, ((0, 0), (0, 0), (p, p), (p, p)))
        dcols = _im2col(dyp, self.k, self.stride, h, w).reshape(b * h * w, -1)
        self.grads[0] += self._x2.T @ dcols
        dx2 = dcols @ self.params[0].T
        return dx2.reshape(b, h, w, self.c_in).transpose(0, 3, 1, 2)


class Reshape:
    kind = "reshape"
    params: list = []
    grads: list = []

    def __init__(self, *shape):
        self.shape = tuple(int(s) for s in shape)
        self.params, self.grads = [], []

    def shapes(self):
        return []

    def spec(self):
        return "reshape " + " ".join(str(s) for s in self.shape)

    def forward(self, x):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._in)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0

    def digest(self):
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def copy_params(self):
        return [p.copy() for p in self.params]

    def set_params(self, values):
        for p, v in zip(self.params, values):
            p[...] = v


# --- architecture ------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    height: int = 48
    width: int = 64
    latent: int = 128
    channels: tuple = (8, 16, 32, 64)
    hidden: int = 128
    depth: int = 4
    pe_bands: int = 4
    pe_scale: float = 12.0  # query coordinates are divided by this before encoding
    depth_scale: float = 12.0  # depth images are divided by this before encoding

    def __post_init__(self):
        f = 2 ** len(self.channels)
        if self.height % f or self.width % f:
            raise ValueError(f"image size must be divisible by {f}")

    @property
    def bottleneck(self):
        f = 2 ** len(self.channels)
        return self.channels[-1], self.height // f, self.width // f


def build_encoder(arch: Architecture, rng: RngStream, dtype=np.float32) -> Sequential:
    layers, c = [], 1
    for co in arch.channels:
        layers.append(Conv2d(c, co, rng=rng, dtype=dtype))
        c = co
    cb, hb, wb = arch.bottleneck
    layers += [Reshape(cb * hb * wb), Dense(cb * hb * wb, arch.latent, act="linear", rng=rng, dtype=dtype)]
    return Sequential(layers)


def build_depth_decoder(arch: Architecture, rng: RngStream, dtype=np.float32) -> Sequential:
    cb, hb, wb = arch.bottleneck
    layers = [Dense(arch.latent, cb * hb * wb, rng=rng, dtype=dtype), Reshape(cb, hb, wb)]
    chans = list(arch.channels[::-1]) + [1]
    for i in range(len(chans) - 1):
        act = "relu" if i < len(chans) - 2 else "linear"
        layers.append(ConvTranspose2d(chans[i], chans[i + 1], act=act, rng=rng, dtype=dtype))
    return Sequential(layers)


def build_sdf_decoder(arch: Architecture, rng: RngStream, dtype=np.float32) -> Sequential:
    n = arch.latent + encoding_size(arch.pe_bands)
    layers = []
    for _ in range(arch.depth):
        layers.append(Dense(n, arch.hidden, rng=rng, dtype=dtype))
        n = arch.hidden
    layers.append(Dense(n, 1, act="linear", rng=rng, dtype=dtype))
    return Sequential(layers)


@dataclass
class GateSdfModel:
    arch: Architecture
    encoder: Sequential
    sdf_decoder: Sequential
    depth_decoder: Sequential

    @classmethod
    def init(cls, arch: Architecture = Architecture(), seed=0, dtype=np.float32):
        rng = RngStream(seed, 0x5DF)
        return cls(arch, build_encoder(arch, rng, dtype), build_sdf_decoder(arch, rng, dtype),
                   build_depth_decoder(arch, rng, dtype))

    def _prep(self, imgs):
        imgs = np.asarray(imgs)
        if imgs.ndim == 2:
            imgs = imgs[None]
        if imgs.shape[1:] != (self.arch.height, self.arch.width):
            raise ValueError(f"expected images of shape {(self.arch.height, self.arch.width)}, got {imgs.shape[1:]}")
        dtype = self.encoder.params[0].dtype
        return (imgs / self.arch.depth_scale).astype(dtype)[:, None]

    def encode(self, imgs):
        """Latent codes for one (H, W) image or a batch (B, H, W)."""
        single = np.ndim(imgs) == 2
        z = self.encoder.forward(self._prep(imgs))
        return z[0] if single else z

    def sdf_inputs(self, z, p_cam):
        """Decoder inputs: ``z`` broadcast against points, concatenated with PE(p)."""
        z = np.asarray(z)
        p_cam = np.asarray(p_cam)
        dtype = self.sdf_decoder.params[0].dtype
        pe = positional_encoding(p_cam, self.arch.pe_bands, scale=self.arch.pe_scale).astype(dtype)
        zz = np.broadcast_to(z[..., None, :] if z.ndim == pe.ndim - 1 else z, pe.shape[:-1] + (z.shape[-1],))
        return np.concatenate([zz.astype(dtype), pe], axis=-1)

    def decode(self, z, p_cam):
        """SDF at camera-frame points ``p_cam`` (..., 3) for latent ``z``."""
        return self.sdf_decoder.forward(self.sdf_inputs(z, p_cam))[..., 0]

    def reconstruct(self, z):
        single = np.ndim(z) == 1
        out = self.depth_decoder.forward(np.atleast_2d(z))[:, 0] * self.arch.depth_scale
        return out[0] if single else out

    # perception hooks: encoder(img, cam_pose) and decoder(z, p_cam)
    def as_encoder(self):
        return lambda img, cam_pose: self.encode(img).astype(np.float64)

    def as_decoder(self):
        return lambda z, p_cam: self.decode(z, p_cam).astype(np.float64)


# --- losses and optimiser -----------------------------------------------------------------


def smooth_l1(err, knee=1e-3):
    """Huber loss with a small knee: quadratic below ``knee``, |e| - knee/2 above."""
    a = np.abs(err)
    return np.where(a < knee, 0.5 * err * err / knee, a - 0.5 * knee)


def smooth_l1_grad(err, knee=1e-3):
    return np.where(np.abs(err) < knee, err / knee, np.sign(err))


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# --- training --------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    lambda_recon: float = 1.0
    lambda_sdf: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    val_fraction: float = 0.1
    points_per_image: int = 512
    val_points: int = 2048
    huber_knee: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.lambda_recon < 0 or self.lambda_sdf < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid optimiser settings")


HISTORY_FIELDS = ("epoch", "train_recon", "train_sdf", "val_recon", "val_sdf")


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({k: row.get(k, float("nan")) for k in HISTORY_FIELDS})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def __len__(self):
        return len(self.rows)


class TrainingDiverged(RuntimeError):
    pass


def evaluate(model: GateSdfModel, ds, n_points=None, batch=32, images="noisy"):
    """Mean absolute reconstruction error (m) and SDF error (m) over a dataset."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    rec_err, sdf_err, n_pix, n_pts = 0.0, 0.0, 0, 0
    src = ds.noisy if images == "noisy" else ds.clean
    for i in range(0, len(ds), batch):
        sl = slice(i, i + batch)
        z = model.encode(src[sl])
        rec = model.reconstruct(z)
        rec_err += float(np.abs(rec - ds.clean[sl]).sum())
        n_pix += rec.size
        pts = ds.points[sl] if n_points is None else ds.points[sl, :n_points]
        sdf = ds.sdf[sl] if n_points is None else ds.sdf[sl, :n_points]
        pred = model.decode(z, pts)
        sdf_err += float(np.abs(pred - sdf).sum())
        n_pts += pred.size
    return rec_err / n_pix, sdf_err / n_pts


def _val_subset(ds, n):
    """Fixed per-record point subset spanning every sampling class."""
    if n is None or n >= ds.points.shape[1]:
        return ds
    rng = RngStream(0, 0x7A1)
    idx = np.sort(rng.choice(ds.points.shape[1], size=n, replace=False))
    out = ds.subset(np.arange(len(ds)))
    out.points, out.sdf, out.cls = ds.points[:, idx], ds.sdf[:, idx], ds.cls[:, idx]
    return out


def _train_loop(model, train, val, cfg: TrainConfig, stage: int, log=None):
    if stage == 1:
        nets = [model.encoder, model.sdf_decoder, model.depth_decoder]
    else:
        nets = [model.encoder]
    params = [p for n in nets for p in n.params]
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    hist = History()
    rng = RngStream(cfg.seed, 0x7E + stage)
    val_small = _val_subset(val, cfg.val_points)
    lam_r = cfg.lambda_recon if stage == 1 else 0.0
    last_good = [n.copy_params() for n in nets]
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        tr_r, tr_s, nb = 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            b = len(idx)
            pick = np.stack([rng.choice(train.points.shape[1], size=cfg.points_per_image, replace=False)
                             for _ in range(b)])
            pts = np.take_along_axis(train.points[idx], pick[..., None], axis=1)
            tgt = np.take_along_axis(train.sdf[idx], pick, axis=1)
            for net in (model.encoder, model.sdf_decoder, model.depth_decoder):
                net.zero_grad()
            z = model.encoder.forward(model._prep(train.noisy[idx]))
            inp = model.sdf_inputs(z, pts)
            pred = model.sdf_decoder.forward(inp)[..., 0]
            e_s = pred - tgt
            loss_s = float(smooth_l1(e_s, cfg.huber_knee).mean())
            d_pred = (cfg.lambda_sdf * smooth_l1_grad(e_s, cfg.huber_knee) / e_s.size).astype(pred.dtype)
            d_inp = model.sdf_decoder.backward(d_pred[..., None])
            dz = d_inp[..., :model.arch.latent].sum(axis=1)
            loss_r = 0.0
            if lam_r > 0:
                rec = model.depth_decoder.forward(z)
                target = (train.clean[idx] / model.arch.depth_scale).astype(rec.dtype)[:, None]
                e_r = rec - target
                loss_r = float(smooth_l1(e_r, cfg.huber_knee).mean())
                d_rec = (lam_r * smooth_l1_grad(e_r, cfg.huber_knee) / e_r.size).astype(rec.dtype)
                dz = dz + model.depth_decoder.backward(d_rec)
            model.encoder.backward(dz)
            if not (np.isfinite(loss_s) and np.isfinite(loss_r)):
                for net, vals in zip(nets, last_good):
                    net.set_params(vals)
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}; restored last finite weights")
            opt.step([g for net in nets for g in net.grads])
            tr_r += loss_r
            tr_s += loss_s
            nb += 1
        if not all(np.all(np.isfinite(p)) for p in params):
            for net, vals in zip(nets, last_good):
                net.set_params(vals)
            raise TrainingDiverged(f"non-finite weights after epoch {epoch}; restored last finite weights")
        last_good = [net.copy_params() for net in nets]
        v_r, v_s = evaluate(model, val_small)
        hist.append(epoch=epoch, train_recon=tr_r / max(nb, 1) * model.arch.depth_scale if lam_r > 0 else float("nan"),
                    train_sdf=tr_s / max(nb, 1), val_recon=v_r if stage == 1 else float("nan"), val_sdf=v_s)
        if log is not None:
            log(hist.rows[-1])
    return hist


def train_stage1(train, val, cfg: TrainConfig = TrainConfig(), arch: Architecture = Architecture(),
                 model: GateSdfModel | None = None, log=None):
    """Joint denoising reconstruction + SDF regression. Returns ``(model, history)``."""
    if len(train) == 0:
        raise ValueError("empty training set")
    model = model or GateSdfModel.init(arch, cfg.seed)
    return model, _train_loop(model, train, val, cfg, 1, log)


def train_stage2(train, val, model: GateSdfModel, cfg: TrainConfig = TrainConfig(), log=None):
    """Encoder-only fine-tuning against a frozen SDF decoder (reconstruction dropped)."""
    if len(train) == 0:
        raise ValueError("empty training set")
    frozen = (model.sdf_decoder.digest(), model.depth_decoder.digest())
    hist = _train_loop(model, train, val, cfg, 2, log)
    if (model.sdf_decoder.digest(), model.depth_decoder.digest()) != frozen:
        raise AssertionError("decoder weights changed during stage 2")
    return model, hist


# --- weight files -----------------------------------------------------------------------------

MAGIC = "GATESDF-WEIGHTS"
VERSION = 1
_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "convT2d": ConvTranspose2d, "reshape": Reshape}


class WeightFileError(ValueError):
    pass


def save_network(net: Sequential, path, name: str, latent: int):
    lines = [f"{MAGIC} {VERSION}", f"name {name}", f"latent {latent}", f"layers {len(net.layers)}"]
    total = 0
    for layer in net.layers:
        lines.append("layer " + layer.spec())
        for shp in layer.shapes():
            lines.append("tensor " + " ".join(str(s) for s in shp))
            total += int(np.prod(shp))
    lines += [f"payload {total}", "end"]
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + payload)


def _parse_layer(tokens):
    kind, args = tokens[0], tokens[1:]
    if kind == "dense":
        return Dense(int(args[0]), int(args[1]), act=args[2])
    if kind in ("conv2d", "convT2d"):
        c_in, c_out, k, s, p = (int(a) for a in args[:5])
        return _LAYER_TYPES[kind](c_in, c_out, k, s, p, act=args[5])
    if kind == "reshape":
        return Reshape(*args)
    raise WeightFileError(f"unknown layer type {kind!r}")


def load_network(path, expect_name: str | None = None):
    """Returns ``(net, name, latent)``; rejects malformed or truncated files."""
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise WeightFileError(f"{path}: header terminator missing")
    header = raw[:cut].decode("ascii", errors="replace").splitlines()
    payload = raw[cut + len(marker):]
    if not header or header[0].split() != [MAGIC, str(VERSION)]:
        raise WeightFileError(f"{path}: not a version-{VERSION} weight file")
    fields = {}
    layers, declared = [], []
    for line in header[1:]:
        tok = line.split()
        if tok[0] == "layer":
            layers.append(_parse_layer(tok[1:]))
        elif tok[0] == "tensor":
            declared.append(tuple(int(t) for t in tok[1:]))
        else:
            fields[tok[0]] = tok[1:]
    name = fields.get("name", [""])[0]
    if expect_name is not None and name != expect_name:
        raise WeightFileError(f"{path}: holds {name!r}, expected {expect_name!r}")
    if int(fields["layers"][0]) != len(layers):
        raise WeightFileError(f"{path}: layer count mismatch")
    shapes = [tuple(s) for layer in layers for s in layer.shapes()]
    if shapes != declared:
        raise WeightFileError(f"{path}: tensor shapes do not match layer definitions")
    total = int(fields["payload"][0])
    if total != sum(int(np.prod(s)) for s in shapes):
        raise WeightFileError(f"{path}: declared payload size disagrees with tensor shapes")
    if len(payload) != 4 * total:
        raise WeightFileError(f"{path}: payload has {len(payload)} bytes, expected {4 * total}")
    flat = np.frombuffer(payload, dtype="<f4")
    net = Sequential(layers)
    off = 0
    values = []
    for shp in shapes:
        n = int(np.prod(shp))
        values.append(flat[off:off + n].reshape(shp).astype(np.float32))
        off += n
    if not all(np.all(np.isfinite(v)) for v in values):
        raise WeightFileError(f"{path}: non-finite parameters")
    for p_layer in layers:
        p_layer.params = [values.pop(0) for _ in p_layer.shapes()]
        p_layer.grads = [np.zeros_like(p) for p in p_layer.params]
    return net, name, int(fields["latent"][0])


WEIGHT_FILES = {"encoder": "encoder.w", "sdf_decoder": "sdf_decoder.w", "depth_decoder": "depth_decoder.w"}


def save_model(model: GateSdfModel, directory, parts=("encoder", "sdf_decoder", "depth_decoder")):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for part in parts:
        save_network(getattr(model, part), d / WEIGHT_FILES[part], part, model.arch.latent)
    (d / "architecture.txt").write_text("\n".join(f"{k} {v}" for k, v in asdict(model.arch).items()) + "\n")


def load_architecture(directory) -> Architecture:
    path = Path(directory) / "architecture.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    kw = {}
    for line in path.read_text().splitlines():
        key, val = line.split(" ", 1)
        if key == "channels":
            kw[key] = tuple(int(v) for v in val.strip("()").split(",") if v.strip())
        else:
            kw[key] = float(val) if "." in val else int(val)
    return Architecture(**kw)


def load_model(directory) -> GateSdfModel:
    d = Path(directory)
    arch = load_architecture(d)
    nets = {}
    for part, fname in WEIGHT_FILES.items():
        path = d / fname
        if not path.exists():
            raise FileNotFoundError(f"missing weight file {path}")
        net, _, latent = load_network(path, expect_name=part)
        if latent != arch.latent:
            raise WeightFileError(f"{path}: latent size {latent} does not match architecture ({arch.latent})")
        nets[part] = net
    return GateSdfModel(arch, nets["encoder"], nets["sdf_decoder"], nets["depth_decoder"])


# --- metrics and gradient check ---------------------------------------------------------------


def sign_agreement(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(np.mean(np.sign(pred) == np.sign(truth))) if pred.size else float("nan")


def gradient_check(n_in=6, hidden=16, layers=3, n_probes=100, n_samples=8, seed=0, eps=1e-6, knee=1e-3):
    """Analytic vs central-difference gradients of the smoothed-L1 loss of a toy MLP.

    Returns the array of relative errors over ``n_probes`` randomly chosen
    parameters. Runs in float64.
    """
    rng = RngStream(seed, 0x6C)
    dims = [n_in] + [hidden] * (layers - 1)
    net = Sequential([Dense(a, b, rng=rng, dtype=np.float64) for a, b in zip(dims[:-1], dims[1:])]
                     + [Dense(hidden, 1, act="linear", rng=rng, dtype=np.float64)])
    for p in net.params[1::2]:
        p[...] = rng.normal(0.0, 0.1, size=p.shape)
    x = rng.normal(size=(n_samples, n_in))
    y = rng.normal(size=(n_samples, 1))

    def loss():
        return float(smooth_l1(net.forward(x) - y, knee).mean())

    net.zero_grad()
    e = net.forward(x) - y
    net.backward(smooth_l1_grad(e, knee) / e.size)
    params, grads = net.params, [g.copy() for g in net.grads]
    errs = []
    for _ in range(n_probes):
        i = int(rng.integers(0, len(params)))
        j = int(rng.integers(0, params[i].size))
        flat = params[i].reshape(-1)
        old = flat[j]
        flat[j] = old + eps
        lp = loss()
        flat[j] = old - eps
        lm = loss()
        flat[j] = old
        fd = (lp - lm) / (2 * eps)
        an = grads[i].reshape(-1)[j]
        errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return np.array(errs)


# --- evaluation ---------------------------------------------------------------------------------


def predict_dataset(predict, ds, batch=32):
    """``predict(imgs, points) -> sdf`` applied record-batch by record-batch."""
    out = np.empty(ds.sdf.shape, dtype=np.float64)
    for i in range(0, len(ds), batch):
        sl = slice(i, i + batch)
        out[sl] = predict(ds.noisy[sl], ds.points[sl])
    return out


def model_predictor(model: GateSdfModel):
    return lambda imgs, pts: model.decode(model.encode(imgs), pts)


def analytic_predictions(ds, g):
    """Exact field from each record's true gate pose (an oracle self-test)."""
    from .gate_sdf import guide_sdf
    from .geometry import RigidTransform

    if len(ds) == 0:
        return np.zeros(ds.sdf.shape)
    return np.stack([guide_sdf(RigidTransform.from_vector(v).inverse().apply(p.astype(float)), g)
                     for v, p in zip(ds.gate_in_cam, ds.points)]).astype(np.float32).astype(float)


def eligible_records(ds, cam, g, max_distance=6.0):
    """Records whose gate is fully in view and no farther than ``max_distance``."""
    from .geometry import RigidTransform
    from .perception import gate_fully_visible

    ok = []
    for v in ds.gate_in_cam:
        T = RigidTransform.from_vector(v)
        ok.append(gate_fully_visible(T, cam, g) and np.linalg.norm(T.translation) <= max_distance)
    return np.array(ok, dtype=bool)


def sdf_metrics(pred, ds, cam, g, max_distance=6.0):
    """Per-class L1 statistics and near-surface sign agreement.

    Sign agreement is measured on near-surface points of records whose gate
    is fully visible within ``max_distance``.
    """
    from .gate_sdf import SampleClass

    pred = np.asarray(pred, dtype=float)
    err = np.abs(pred - ds.sdf)
    out = {"records": int(len(ds)), "all": {"mean_l1": float(err.mean()) if err.size else float("nan"),
                                           "median_l1": float(np.median(err)) if err.size else float("nan"),
                                           "points": int(err.size)}}
    for c in SampleClass:
        m = ds.cls == c
        out[c.name.lower()] = {"mean_l1": float(err[m].mean()) if m.any() else float("nan"),
                               "median_l1": float(np.median(err[m])) if m.any() else float("nan"),
                               "points": int(m.sum())}
    ok = eligible_records(ds, cam, g, max_distance) if len(ds) else np.zeros(0, bool)
    near = (ds.cls == SampleClass.NEAR_SURFACE) & ok[:, None]
    out["sign_agreement"] = {"rate": sign_agreement(pred[near], ds.sdf[near]), "points": int(near.sum()),
                             "records": int(ok.sum())}
    return out


def slice_grid(size=10.0, cells=100, height=0.0):
    """Cell-centre points of a horizontal ``cells x cells`` grid over a ``size`` m square (gate frame)."""
    c = (np.arange(cells) + 0.5) / cells * size - 0.5 * size
    X, Y = np.meshgrid(c, c, indexing="ij")
    return np.stack([X, Y, np.full_like(X, height)], axis=-1)
