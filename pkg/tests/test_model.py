"""Backbone and head: shape traces, split consistency, homogeneity, cosines."""

import numpy as np
import pytest

from tsa import autodiff as ad
from tsa.model import ArchitectureConfig, Backbone, PrototypeHead


def t(data, rg=False, dtype=np.float64):
    return ad.Tensor(np.asarray(data, dtype=dtype), requires_grad=rg)


def make_backbone(split=2, dtype=np.float64, seed=0):
    return Backbone(ArchitectureConfig(split_index=split), seed=seed, dtype=dtype)


def test_default_shape_trace():
    bb = make_backbone()
    x = t(np.zeros((8, 1, 32, 32)))
    h = bb.forward_e1(x)
    assert h.shape == (8, 32, 16, 16)
    rng = np.random.default_rng(50)
    x2 = t(rng.uniform(-1, 1, (8, 1, 32, 32)))
    z = bb.forward_e2(bb.forward_e1(x2))
    assert z.shape == (8, 64)


def test_zero_image_zero_embedding_is_an_error():
    # bias-free network: the all-zero image has no direction to normalize
    bb = make_backbone()
    x = t(np.zeros((1, 1, 32, 32)))
    with pytest.raises(ValueError, match="l2_normalize"):
        bb.forward_full(x)


def test_forward_deterministic():
    bb = make_backbone()
    x = t(np.zeros((2, 1, 32, 32)))
    h1 = bb.forward_e1(x).data
    h2 = bb.forward_e1(x).data
    assert np.array_equal(h1, h2)
    bb2 = make_backbone()
    assert np.array_equal(bb2.forward_e1(x).data, h1)


def test_split_consistency_all_splits():
    rng = np.random.default_rng(51)
    x = t(rng.uniform(-1, 1, (3, 1, 32, 32)))
    for split in (1, 2, 3):
        bb = make_backbone(split=split)
        z_split = bb.forward_e2(bb.forward_e1(x)).data
        z_full = bb.forward_full(x).data
        assert np.array_equal(z_split, z_full)


def test_unit_norm_output():
    rng = np.random.default_rng(52)
    bb = make_backbone()
    x = t(rng.uniform(-1, 1, (6, 1, 32, 32)))
    z = bb.forward_full(x).data
    assert np.max(np.abs(np.linalg.norm(z, axis=1) - 1.0)) < 1e-6


def test_e2_positive_homogeneity():
    # no bias anywhere: scaling h scales the raw embedding linearly and
    # leaves the normalized output unchanged
    rng = np.random.default_rng(53)
    bb = make_backbone()
    x = t(rng.uniform(-1, 1, (2, 1, 32, 32)))
    h = bb.forward_e1(x)
    z1 = bb.forward_e2(h).data
    raw1 = bb.embed_raw(h).data
    h2 = t(h.data * 2.0)
    z2 = bb.forward_e2(h2).data
    raw2 = bb.embed_raw(h2).data
    assert np.allclose(raw2, 2.0 * raw1, rtol=1e-10)
    assert np.allclose(z2, z1, atol=1e-12)


def test_batch_independence():
    rng = np.random.default_rng(54)
    bb = make_backbone()
    xs = rng.uniform(-1, 1, (8, 1, 32, 32))
    z_all = bb.forward_full(t(xs)).data
    z_one = bb.forward_full(t(xs[3:4])).data
    assert np.allclose(z_all[3], z_one[0], atol=1e-12)
    perm = rng.permutation(8)
    z_perm = bb.forward_full(t(xs[perm])).data
    assert np.allclose(z_perm, z_all[perm], atol=1e-12)


def test_forward_e1_wrong_size_errors():
    bb = make_backbone()
    with pytest.raises(ad.ShapeError):
        bb.forward_e1(t(np.zeros((1, 1, 28, 28))))
    with pytest.raises(ad.ShapeError):
        bb.forward_e2(t(np.zeros((1, 16, 16, 16))))


def test_forward_e2_nonfinite_carries_layer_index():
    bb = make_backbone()
    h = np.zeros((1, 32, 16, 16))
    h[0, 0, 0, 0] = np.inf
    with pytest.raises(ad.NonFiniteError, match="layer 2"):
        bb.forward_e2(t(h))


def test_logits_cosine_contract():
    rng = np.random.default_rng(55)
    head = PrototypeHead(5, 8, dtype=np.float64)
    # aligned and orthogonal probes against actual prototype rows
    w = head.W.data
    z = np.vstack([w[2], np.zeros(8)])
    # build a vector orthogonal to w[2]
    v = rng.standard_normal(8)
    v -= v @ w[2] * w[2]
    z[1] = v / np.linalg.norm(v)
    out = head.logits(t(z)).data
    assert out[0, 2] == pytest.approx(1.0, abs=1e-9)
    assert out[1, 2] == pytest.approx(0.0, abs=1e-9)
    # brute-force dot product oracle + range bound
    zs = rng.standard_normal((6, 8))
    zs /= np.linalg.norm(zs, axis=1, keepdims=True)
    got = head.logits(t(zs)).data
    want = zs @ w.T
    assert np.allclose(got, want, atol=1e-12)
    assert got.min() >= -1 - 1e-6 and got.max() <= 1 + 1e-6


def test_logits_norm_violation_errors():
    head = PrototypeHead(3, 4, dtype=np.float64)
    bad = np.ones((1, 4))
    with pytest.raises(ValueError, match="norm"):
        head.logits(t(bad))
    head.W.data[0] *= 1.5
    good = np.zeros((1, 4))
    good[0, 0] = 1.0
    with pytest.raises(ValueError, match="prototypes"):
        head.logits(t(good))


def test_head_renormalize():
    head = PrototypeHead(4, 6, dtype=np.float64)
    head.W.data += 0.3  # simulate an optimizer step
    head.renormalize()
    assert np.max(np.abs(np.linalg.norm(head.W.data, axis=1) - 1.0)) < 1e-12


def test_gradients_flow_to_all_parameters():
    rng = np.random.default_rng(56)
    bb = make_backbone()
    head = PrototypeHead(3, 64, dtype=np.float64)
    x = t(rng.uniform(-1, 1, (2, 1, 32, 32)))
    z = bb.forward_full(x)
    loss = ad.mean(head.logits(z))
    ad.backward(loss)
    for p in bb.parameters() + head.parameters():
        assert p.grad is not None
        assert np.isfinite(p.grad).all()


def test_arch_config_validation():
    with pytest.raises(ValueError):
        ArchitectureConfig(split_index=0)
    with pytest.raises(ValueError):
        ArchitectureConfig(split_index=4)
    with pytest.raises(ValueError):
        ArchitectureConfig(channels=(8, 16), strides=(1,))
