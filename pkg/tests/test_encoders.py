import numpy as np
import pytest

from pointdistill.encoders import (
    EncoderParams,
    TeacherConfig,
    adapter_from_doc,
    adapter_to_doc,
    encoder_backward,
    encoder_forward,
    encoder_from_doc,
    encoder_to_doc,
    gamma_from_doc,
    gamma_to_doc,
    load_checkpoint,
    make_teacher,
    param_hash,
    save_checkpoint,
)
from pointdistill.graph import GammaParams
from pointdistill.numerics import LinearParams, grad_check


def test_encoder_shapes_and_widths():
    rng = np.random.default_rng(0)
    p = EncoderParams.create((8, 32, 16), rng)
    assert p.in_width == 8 and p.out_width == 16
    X = rng.normal(size=(10, 8))
    out, caches = encoder_forward(p, X, bn_mode="eval")
    assert out.shape == (10, 16)
    assert len(caches) == 2
    assert (out >= 0).all()


def test_encoder_rejects_short_widths():
    with pytest.raises(ValueError):
        EncoderParams.create((8,), np.random.default_rng(0))


@pytest.mark.parametrize("bn_mode", ["train", "eval"])
def test_encoder_backward_finite_difference(bn_mode):
    rng = np.random.default_rng(1)
    p = EncoderParams.create((5, 7, 6), rng)
    for layer in p.layers:
        layer.bn.running_mean[:] = rng.normal(size=layer.bn.gamma.shape) * 0.1
        layer.bn.running_var[:] = rng.uniform(0.5, 1.5, size=layer.bn.gamma.shape)
    X = rng.normal(size=(9, 5))
    T = rng.normal(size=(9, 6))

    def fn():
        out, caches = encoder_forward(p, X, bn_mode=bn_mode)
        diff = out - T
        loss = float((diff * diff).sum())
        dX, grads = encoder_backward(p, caches, 2.0 * diff)
        flat = [dX]
        for g in grads:
            flat += [g.dW, g.db, g.dgamma, g.dbeta]
        return loss, flat

    wrt = [X]
    for layer in p.layers:
        wrt += [layer.linear.W, layer.linear.b, layer.bn.gamma, layer.bn.beta]
    assert grad_check(fn, wrt, eps=1e-6) < 1e-6


def test_teacher_frozen_random_is_reproducible_and_frozen():
    cfg = TeacherConfig(widths=(8, 16, 16), mode="frozen_random", seed=3)
    a = make_teacher(cfg)
    b = make_teacher(cfg)
    assert param_hash(a.params) == param_hash(b.params)
    assert a.provenance["mode"] == "frozen_random"
    with pytest.raises(ValueError):
        a.params.layers[0].linear.W[0, 0] = 1.0
    # Frozen teachers always run with fixed statistics.
    assert all(layer.bn.mode == "eval" for layer in a.params.layers)


def test_teacher_seed_changes_hash():
    h3 = param_hash(make_teacher(TeacherConfig(widths=(8, 16, 16), seed=3)).params)
    h4 = param_hash(make_teacher(TeacherConfig(widths=(8, 16, 16), seed=4)).params)
    assert h3 != h4


def test_proxy_teacher_improves_its_regression_loss():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 8))
    y = np.log1p(rng.integers(1, 40, size=200).astype(np.float64))
    cfg = TeacherConfig(widths=(8, 24, 24), mode="proxy_trained", seed=1,
                        proxy_steps=200, proxy_lr=0.05)
    art = make_teacher(cfg, X, y)
    assert art.provenance["mode"] == "proxy_trained"
    assert art.provenance["proxy_loss_last"] < art.provenance["proxy_loss_first"]
    with pytest.raises(ValueError):
        art.params.layers[0].bn.gamma[0] = 2.0


def test_proxy_teacher_requires_data():
    with pytest.raises(ValueError):
        make_teacher(TeacherConfig(widths=(8, 16, 16), mode="proxy_trained"))


def test_encoder_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    p = EncoderParams.create((8, 12, 10), rng)
    p.layers[0].bn.running_mean[:] = rng.normal(size=12)
    path = tmp_path / "enc.json"
    save_checkpoint(path, encoder_to_doc(p, {"mode": "frozen_random", "seed": 6}))
    doc = load_checkpoint(path)
    q, provenance = encoder_from_doc(doc)
    assert provenance["seed"] == 6
    assert param_hash(p) == param_hash(q)
    X = rng.normal(size=(5, 8))
    a, _ = encoder_forward(p, X, bn_mode="eval")
    b, _ = encoder_forward(q, X, bn_mode="eval")
    assert np.array_equal(a, b)


def test_gamma_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    g = GammaParams.create(6, 9, rng, owner="teacher")
    path = tmp_path / "gamma.json"
    save_checkpoint(path, gamma_to_doc(g))
    back = gamma_from_doc(load_checkpoint(path))
    assert back.owner == "teacher"
    assert np.array_equal(back.linear.W, g.linear.W)
    assert np.array_equal(back.bn.running_var, g.bn.running_var)


def test_adapter_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    a = LinearParams.create(4, 6, rng)
    path = tmp_path / "ad.json"
    save_checkpoint(path, adapter_to_doc(a))
    back = adapter_from_doc(load_checkpoint(path))
    assert np.array_equal(back.W, a.W)
    assert np.array_equal(back.b, a.b)


def test_checkpoint_files_are_deterministic(tmp_path):
    rng_a = np.random.default_rng(9)
    rng_b = np.random.default_rng(9)
    pa = EncoderParams.create((8, 12, 10), rng_a)
    pb = EncoderParams.create((8, 12, 10), rng_b)
    fa, fb = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(fa, encoder_to_doc(pa))
    save_checkpoint(fb, encoder_to_doc(pb))
    assert fa.read_bytes() == fb.read_bytes()
