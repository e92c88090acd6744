import numpy as np
import pytest

from gatemppi import neural_sdf as ns
from gatemppi import perception as pc
from gatemppi.gate_sdf import GateGeometry
from gatemppi.geometry import RngStream

SMALL = ns.Architecture(height=16, width=16, latent=8, channels=(4, 8), hidden=16, depth=2, pe_bands=2)
CAM16 = pc.CameraModel.from_fov(16, 16, 90.0)


@pytest.fixture(scope="module")
def tiny_data():
    return pc.generate_dataset(12, 3, CAM16, pc.NOISE_PRESETS["sim"], GateGeometry(), n_points=64)


def conv_oracle(x, w, b, k, s, p):
    """Direct loop cross-correlation, weights laid out as (c_in * k * k, c_out)."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1
    out = np.zeros((B, w.shape[1], ho, wo))
    wk = w.reshape(C, k, k, -1)
    for bi in range(B):
        for o in range(w.shape[1]):
            for i in range(ho):
                for j in range(wo):
                    out[bi, o, i, j] = np.sum(xp[bi, :, i * s:i * s + k, j * s:j * s + k] * wk[..., o]) + b[o]
    return out


def test_forward_matches_loop_oracle():
    rng = RngStream(0)
    conv = ns.Conv2d(2, 3, rng=rng, dtype=np.float64)
    conv.params[1][...] = rng.normal(size=3)
    dense = ns.Dense(3 * 4 * 4, 5, act="linear", rng=rng, dtype=np.float64)
    net = ns.Sequential([conv, ns.Reshape(48), dense])
    x = rng.normal(size=(2, 2, 8, 8))
    h = np.maximum(conv_oracle(x, conv.params[0], conv.params[1], 4, 2, 1), 0)
    ref = h.reshape(2, -1) @ dense.params[0] + dense.params[1]
    assert np.abs(net.forward(x) - ref).max() < 1e-6


def test_conv_transpose_is_adjoint_of_conv():
    rng = RngStream(1)
    conv = ns.Conv2d(3, 5, act="linear", rng=rng, dtype=np.float64)
    tconv = ns.ConvTranspose2d(5, 3, act="linear", dtype=np.float64)
    # same linear map: reorder (c_in*k*k, c_out) into (c_out, c_in*k*k)
    w = conv.params[0].reshape(3, 4, 4, 5)
    tconv.params[0][...] = w.transpose(3, 0, 1, 2).reshape(5, -1)
    x = rng.normal(size=(2, 3, 8, 8))
    y = rng.normal(size=(2, 5, 4, 4))
    assert np.isclose(np.sum(conv.forward(x) * y), np.sum(x * tconv.forward(y)), rtol=1e-12)


def test_layer_gradients_finite_difference():
    rng = RngStream(2)
    net = ns.Sequential([ns.Conv2d(1, 2, rng=rng, dtype=np.float64), ns.Reshape(2 * 4 * 4),
                         ns.Dense(32, 32, rng=rng, dtype=np.float64), ns.Reshape(2, 4, 4),
                         ns.ConvTranspose2d(2, 1, act="linear", rng=rng, dtype=np.float64)])
    x = rng.normal(size=(2, 1, 8, 8))
    t = rng.normal(size=(2, 1, 8, 8))

    def loss():
        return 0.5 * np.sum((net.forward(x) - t) ** 2)

    net.zero_grad()
    net.backward(net.forward(x) - t)
    grads = [g.copy() for g in net.grads]
    for pi, p in enumerate(net.params):
        flat = p.reshape(-1)
        for j in RngStream(3, pi).integers(0, flat.size, size=5):
            old = flat[j]
            flat[j] = old + 1e-6
            lp = loss()
            flat[j] = old - 1e-6
            lm = loss()
            flat[j] = old
            fd = (lp - lm) / 2e-6
            assert abs(fd - grads[pi].reshape(-1)[j]) <= 1e-5 * max(1.0, abs(fd))


def test_gradient_check_toy_network():
    assert ns.gradient_check().max() < 1e-3


def test_encode_determinism_and_finiteness():
    m = ns.GateSdfModel.init(SMALL, seed=0)
    z0 = m.encode(np.zeros((16, 16)))
    assert z0.shape == (8,) and np.all(np.isfinite(z0))
    assert np.array_equal(z0, ns.GateSdfModel.init(SMALL, seed=0).encode(np.zeros((16, 16))))
    img = np.random.default_rng(0).uniform(0, 5, (16, 16))
    assert np.array_equal(m.encode(img), m.encode(img.copy()))
    assert np.array_equal(m.encode(np.stack([img, img]))[0], m.encode(np.stack([img, img]))[1])
    with pytest.raises(ValueError):
        m.encode(np.zeros((8, 8)))


def test_decode_and_reconstruct():
    m = ns.GateSdfModel.init(SMALL, seed=1)
    z = m.encode(np.ones((16, 16)))
    p = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(m.decode(z, p), m.decode(z, p))
    assert m.decode(z, p).shape == (5,)
    r = m.reconstruct(z)
    assert r.shape == (16, 16) and np.all(np.isfinite(r))


def test_identity_weight_decoder_sums_inputs():
    d = ns.Dense(6, 1, act="linear", dtype=np.float64)
    d.params[0][...] = 1.0
    x = np.random.default_rng(2).normal(size=(4, 6))
    assert np.allclose(d.forward(x)[:, 0], x.sum(axis=1))


def test_smooth_l1():
    e = np.array([-2.0, -1e-4, 0.0, 1e-4, 3.0])
    assert np.allclose(ns.smooth_l1(e)[[0, 4]], [2.0 - 5e-4, 3.0 - 5e-4])
    assert np.all(ns.smooth_l1(e) >= 0)
    assert np.allclose(ns.smooth_l1_grad(e)[[0, 4]], [-1, 1])


def test_stage1_history_and_zero_epochs(tiny_data):
    tr, va = tiny_data.split(0.25, seed=0)
    m0 = ns.GateSdfModel.init(SMALL, seed=4)
    before = m0.encoder.digest(), m0.sdf_decoder.digest()
    m, h = ns.train_stage1(tr, va, ns.TrainConfig(epochs=0, points_per_image=32), model=m0)
    assert len(h) == 0 and (m.encoder.digest(), m.sdf_decoder.digest()) == before
    m, h = ns.train_stage1(tr, va, ns.TrainConfig(epochs=3, points_per_image=32, batch_size=4), model=m0)
    assert len(h) == 3 and list(h.column("epoch")) == [1, 2, 3]


def test_sdf_weight_zero_leaves_sdf_head(tiny_data):
    tr, va = tiny_data.split(0.25, seed=0)
    m = ns.GateSdfModel.init(SMALL, seed=5)
    digest = m.sdf_decoder.digest()
    ns.train_stage1(tr, va, ns.TrainConfig(epochs=2, lambda_sdf=0.0, points_per_image=32, batch_size=4), model=m)
    assert m.sdf_decoder.digest() == digest


def test_overfit_single_record(tiny_data):
    one = tiny_data.subset([0])
    m = ns.GateSdfModel.init(SMALL, seed=6)
    cfg = ns.TrainConfig(epochs=150, batch_size=1, lr=3e-3, points_per_image=64, lambda_recon=0.0)
    _, h = ns.train_stage1(one, one, cfg, model=m)
    sdf = h.column("train_sdf")
    assert sdf[-1] < 0.1 * sdf[0]


def test_stage2_freezes_decoders(tiny_data):
    tr, va = tiny_data.split(0.25, seed=0)
    m = ns.GateSdfModel.init(SMALL, seed=7)
    frozen = m.sdf_decoder.digest(), m.depth_decoder.digest()
    enc = m.encoder.digest()
    ns.train_stage2(tr, va, m, ns.TrainConfig(epochs=0))
    assert m.encoder.digest() == enc
    ns.train_stage2(tr, va, m, ns.TrainConfig(epochs=2, points_per_image=32, batch_size=4))
    assert (m.sdf_decoder.digest(), m.depth_decoder.digest()) == frozen
    assert m.encoder.digest() != enc


def test_weight_round_trip(tmp_path):
    m = ns.GateSdfModel.init(SMALL, seed=8)
    ns.save_model(m, tmp_path)
    back = ns.load_model(tmp_path)
    assert back.arch == SMALL
    rng = np.random.default_rng(3)
    for _ in range(100):
        img = rng.uniform(0, 8, (16, 16))
        p = rng.normal(size=(1, 3))
        assert np.array_equal(m.decode(m.encode(img), p), back.decode(back.encode(img), p))


def test_weight_file_errors(tmp_path):
    m = ns.GateSdfModel.init(SMALL, seed=9)
    path = tmp_path / "enc.w"
    ns.save_network(m.encoder, path, "encoder", SMALL.latent)
    raw = path.read_bytes()
    (tmp_path / "trunc.w").write_bytes(raw[:-10])
    with pytest.raises(ns.WeightFileError):
        ns.load_network(tmp_path / "trunc.w")
    cut = raw.find(b"payload ")
    line_end = raw.find(b"\n", cut)
    bad = raw[:cut] + b"payload 7" + raw[line_end:]
    (tmp_path / "bad.w").write_bytes(bad)
    with pytest.raises(ns.WeightFileError):
        ns.load_network(tmp_path / "bad.w")
    (tmp_path / "junk.w").write_bytes(b"hello\nend\n")
    with pytest.raises(ns.WeightFileError):
        ns.load_network(tmp_path / "junk.w")
    with pytest.raises(ns.WeightFileError):
        ns.load_network(path, expect_name="sdf_decoder")


def test_metrics_recomputed_independently(tiny_data):
    m = ns.GateSdfModel.init(SMALL, seed=10)
    pred = ns.predict_dataset(ns.model_predictor(m), tiny_data)
    met = ns.sdf_metrics(pred, tiny_data, CAM16, GateGeometry())
    err = np.abs(pred - tiny_data.sdf)
    assert np.isclose(met["all"]["mean_l1"], err.mean())
    assert np.isclose(met["near_surface"]["median_l1"], np.median(err[tiny_data.cls == 0]))
    zero = ns.sdf_metrics(ns.analytic_predictions(tiny_data, GateGeometry()), tiny_data, CAM16, GateGeometry())
    assert zero["all"]["mean_l1"] == 0.0


def test_sign_agreement():
    assert ns.sign_agreement([1, -1, 2], [3, -2, -1]) == pytest.approx(2 / 3)
    assert np.isnan(ns.sign_agreement([], []))
