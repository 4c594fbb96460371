"""Style statistics and mixing: closed forms, recompute oracles, FD grads."""

import numpy as np
import pytest

from conftest import fd_gradient, rel_err
from tsa import autodiff as ad
from tsa import style


def t(data, rg=False):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def rand_stats(rng, b, c, lo=0.2, hi=2.0):
    return style.StyleStats(
        t(rng.uniform(-3, 3, (b, c))),
        t(rng.uniform(lo, hi, (b, c))))


def test_extract_stats_constant_and_symmetric():
    h = t(np.full((1, 1, 2, 2), 5.0))
    s = style.extract_stats(h)
    assert s.mu.data[0, 0] == pytest.approx(5.0)
    assert s.sigma.data[0, 0] == pytest.approx(0.0)

    h = t(np.array([1.0, -1.0, 1.0, -1.0]).reshape(1, 1, 2, 2))
    s = style.extract_stats(h)
    assert s.mu.data[0, 0] == pytest.approx(0.0)
    assert s.sigma.data[0, 0] == pytest.approx(1.0)


def test_extract_stats_two_pass_oracle():
    rng = np.random.default_rng(21)
    h = rng.standard_normal((1, 3, 4, 4))
    s = style.extract_stats(t(h))
    for c in range(3):
        flat = h[0, c].reshape(-1)
        m = flat.sum() / flat.size
        v = ((flat - m) ** 2).sum() / flat.size
        assert abs(s.mu.data[0, c] - m) < 1e-10
        assert abs(s.sigma.data[0, c] - np.sqrt(v)) < 1e-10


def test_adain_identity():
    rng = np.random.default_rng(22)
    h = rng.standard_normal((2, 4, 6, 6))
    ht = t(h)
    out = style.adain(ht, style.extract_stats(ht))
    assert np.max(np.abs(out.data - h)) < 1e-6


def test_adain_closed_form():
    # channel {1,-1}: mu=0 sigma=1; target mu=3 sigma=2 -> {5, 1}
    h = t(np.array([1.0, -1.0]).reshape(1, 1, 1, 2))
    target = style.StyleStats(t([[3.0]]), t([[2.0]]))
    out = style.adain(h, target)
    assert np.allclose(out.data.reshape(-1), [5.0, 1.0])


def test_adain_stat_transfer():
    rng = np.random.default_rng(23)
    for _ in range(20):
        h = rng.standard_normal((2, 3, 5, 5)) * rng.uniform(0.5, 2.0)
        target = rand_stats(rng, 2, 3)
        out = style.adain(t(h), target)
        got = style.extract_stats(out)
        assert rel_err(got.mu.data, target.mu.data) < 1e-5
        assert rel_err(got.sigma.data, target.sigma.data) < 1e-5


def test_adain_degenerate_channel_stays_finite():
    h = t(np.zeros((1, 2, 3, 3)))  # sigma = 0 everywhere
    target = style.StyleStats(t([[1.0, -1.0]]), t([[0.5, 0.5]]))
    out = style.adain(h, target)
    assert np.all(np.isfinite(out.data))
    # constant map: (h - mu) = 0 so output collapses to the target mean
    assert np.allclose(out.data[0, 0], 1.0)


def test_mix_styles_endpoints_and_affine():
    rng = np.random.default_rng(24)
    a = rand_stats(rng, 3, 4)
    b = rand_stats(rng, 3, 4)
    ones = style.MixCoefficients(t(np.ones(3)), t(np.ones(3)))
    zeros = style.MixCoefficients(t(np.zeros(3)), t(np.zeros(3)))
    m1 = style.mix_styles(a, b, ones)
    assert np.allclose(m1.mu.data, a.mu.data) and np.allclose(m1.sigma.data, a.sigma.data)
    m0 = style.mix_styles(a, b, zeros)
    assert np.allclose(m0.mu.data, b.mu.data) and np.allclose(m0.sigma.data, b.sigma.data)

    lam = style.MixCoefficients(t(np.full(3, 0.37)), t(np.full(3, 0.37)))
    m = style.mix_styles(a, b, lam)
    assert np.allclose(m.sigma.data, 0.37 * a.sigma.data + 0.63 * b.sigma.data)
    assert np.allclose(m.mu.data, 0.37 * a.mu.data + 0.63 * b.mu.data)


def test_mix_styles_convexity_bounds():
    rng = np.random.default_rng(25)
    for _ in range(20):
        a = rand_stats(rng, 2, 5)
        b = rand_stats(rng, 2, 5)
        lam = style.MixCoefficients(t(rng.uniform(0, 1, 2)), t(rng.uniform(0, 1, 2)))
        m = style.mix_styles(a, b, lam)
        lo = np.minimum(a.sigma.data, b.sigma.data) - 1e-12
        hi = np.maximum(a.sigma.data, b.sigma.data) + 1e-12
        assert np.all(m.sigma.data >= lo) and np.all(m.sigma.data <= hi)
        assert np.all(m.sigma.data >= 0)
        lo = np.minimum(a.mu.data, b.mu.data) - 1e-12
        hi = np.maximum(a.mu.data, b.mu.data) + 1e-12
        assert np.all(m.mu.data >= lo) and np.all(m.mu.data <= hi)


def test_mix_styles_rejects_out_of_range():
    rng = np.random.default_rng(26)
    a = rand_stats(rng, 2, 3)
    b = rand_stats(rng, 2, 3)
    bad = style.MixCoefficients(t([0.5, 1.2]), t([0.5, 0.5]))
    with pytest.raises(ValueError):
        style.mix_styles(a, b, bad)


def test_stylize_endpoints():
    rng = np.random.default_rng(27)
    h = rng.standard_normal((2, 3, 4, 4))
    ht = t(h)
    labeled = style.extract_stats(ht)
    unlabeled = rand_stats(rng, 2, 3)
    ones = style.MixCoefficients(t(np.ones(2)), t(np.ones(2)))
    zeros = style.MixCoefficients(t(np.zeros(2)), t(np.zeros(2)))
    same = style.stylize(ht, labeled, unlabeled, ones)
    assert np.max(np.abs(same.data - h)) < 1e-6
    swapped = style.stylize(ht, labeled, unlabeled, zeros)
    got = style.extract_stats(swapped)
    assert rel_err(got.mu.data, unlabeled.mu.data) < 1e-5
    assert rel_err(got.sigma.data, unlabeled.sigma.data) < 1e-5


def test_stylize_gradient_wrt_lambda():
    rng = np.random.default_rng(28)
    h = rng.standard_normal((2, 3, 4, 4))
    mu_u = rng.uniform(-2, 2, (2, 3))
    sig_u = rng.uniform(0.3, 1.5, (2, 3))
    proj = rng.standard_normal((2, 3, 4, 4))
    l1 = rng.uniform(0.1, 0.9, 2)
    l2 = rng.uniform(0.1, 0.9, 2)

    def build(l1t, l2t, ht):
        labeled = style.extract_stats(ht)
        unlabeled = style.StyleStats(t(mu_u), t(sig_u))
        out = style.stylize(ht, labeled, unlabeled,
                            style.MixCoefficients(l1t, l2t))
        return ad.mean(ad.mul(out, ad.Tensor(proj)))

    l1t, l2t, ht = t(l1, rg=True), t(l2, rg=True), t(h, rg=True)
    ad.backward(build(l1t, l2t, ht))

    def f(a, b, c):
        with ad.no_grad():
            return float(build(ad.Tensor(a), ad.Tensor(b), ad.Tensor(c)).data)

    want = fd_gradient(f, [l1, l2, h])
    assert rel_err(l1t.grad, want[0]) < 1e-5
    assert rel_err(l2t.grad, want[1]) < 1e-5
    assert rel_err(ht.grad, want[2]) < 1e-5


def test_stat_transfer_through_stylize():
    rng = np.random.default_rng(29)
    for _ in range(10):
        h = rng.standard_normal((2, 4, 5, 5)) + rng.uniform(-1, 1)
        ht = t(h)
        labeled = rand_stats(rng, 2, 4)
        unlabeled = rand_stats(rng, 2, 4)
        lam = style.MixCoefficients(t(rng.uniform(0, 1, 2)), t(rng.uniform(0, 1, 2)))
        mixed = style.mix_styles(labeled, unlabeled, lam)
        out = style.stylize(ht, labeled, unlabeled, lam)
        got = style.extract_stats(out)
        assert rel_err(got.mu.data, mixed.mu.data) < 1e-4
        assert rel_err(got.sigma.data, mixed.sigma.data) < 1e-4


def test_stylestats_validation():
    with pytest.raises(ad.ShapeError):
        style.StyleStats(t(np.ones((2, 3))), t(np.ones((2, 4))))
    with pytest.raises(ValueError):
        style.StyleStats(t(np.ones((1, 2))), t([[-0.1, 1.0]]))


def test_export_stats_csv(tmp_path):
    path = tmp_path / "stats.csv"
    rows = [("sc", [1.0, 2.0], [0.1, 0.2]), ("uc", [3.0, 4.0], [0.3, 0.4])]
    style.export_stats_csv(rows, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "tag,mu_0,mu_1,sigma_0,sigma_1"
    assert lines[1].startswith("sc,1.0,2.0")
    with pytest.raises(ValueError):
        style.export_stats_csv([("x", [1.0], [0.1, 0.2])], str(path))
