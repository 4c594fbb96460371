"""Style search: update rule, projection, frozen-model and budget contracts."""

import numpy as np
import pytest

from conftest import fd_gradient, rel_err
from tsa import adversary as adv
from tsa import autodiff as ad
from tsa import recog, style
from tsa.losses import MarginSpec, margin_loss
from tsa.model import ArchitectureConfig, Backbone, PrototypeHead


def t(data, rg=False):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def tiny_setup(seed=0, num_classes=3, batch=4):
    arch = ArchitectureConfig(input_size=8, channels=(4, 8), strides=(1, 2),
                              split_index=1, embed_dim=8)
    model = Backbone(arch, seed=seed, dtype=np.float64)
    head = PrototypeHead(num_classes, 8, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    x = t(rng.uniform(-1, 1, (batch, 1, 8, 8)))
    h = model.forward_e1(x)
    labeled = style.extract_stats(h).detach()
    unlabeled = style.StyleStats(
        t(rng.uniform(-1.5, 1.5, labeled.mu.shape)),
        t(rng.uniform(0.2, 1.8, labeled.mu.shape)))
    labels = rng.integers(0, num_classes, batch)
    phi = rng.standard_normal(8)
    ur = recog.URState(phi=phi / np.linalg.norm(phi), initialized=True)
    return model, head, h, labeled, unlabeled, labels, ur, rng


MARGIN = MarginSpec("arcface", 0.5, 8.0)


# ---------------------------------------------------------------------------
# objective

def test_objective_beta_zero_is_pure_fr():
    model, head, h, _, _, labels, _, _ = tiny_setup()
    z = model.forward_e2(h)
    got = adv.adversary_objective(z, labels, head, recog.URState(), MARGIN, 0.0)
    want = margin_loss(head.logits(z), labels, MARGIN)
    assert float(got.data) == float(want.data)


def test_objective_arithmetic():
    model, head, h, _, _, labels, ur, _ = tiny_setup()
    z = model.forward_e2(h)
    lfr = float(margin_loss(head.logits(z), labels, MARGIN).data)
    lr = float(recog.recognizability_loss(z, ur).data)
    for beta in (0.5, 1.0, 2.0):
        got = float(adv.adversary_objective(z, labels, head, ur, MARGIN, beta).data)
        assert got == pytest.approx(lfr - beta * lr, rel=1e-12)


def test_objective_beta_zero_ignores_uninitialized_ur():
    model, head, h, _, _, labels, _, _ = tiny_setup()
    z = model.forward_e2(h)
    adv.adversary_objective(z, labels, head, recog.URState(), MARGIN, 0.0)
    with pytest.raises(RuntimeError):
        adv.adversary_objective(z, labels, head, recog.URState(), MARGIN, 1.0)


def test_objective_gradient_wrt_lambda_fd():
    model, head, h, labeled, unlabeled, labels, ur, rng = tiny_setup()
    l1 = rng.uniform(0.2, 0.8, 4)
    l2 = rng.uniform(0.2, 0.8, 4)
    h0 = h.detach()

    def build(l1t, l2t):
        hp = style.stylize(h0, labeled, unlabeled, style.MixCoefficients(l1t, l2t))
        zp = model.forward_e2(hp)
        return adv.adversary_objective(zp, labels, head, ur, MARGIN, 1.0)

    t1, t2 = t(l1, rg=True), t(l2, rg=True)
    ad.backward(build(t1, t2))

    def f(a, b):
        with ad.no_grad():
            return float(build(ad.Tensor(a), ad.Tensor(b)).data)

    want = fd_gradient(f, [l1, l2])
    assert rel_err(t1.grad, want[0]) < 1e-4
    assert rel_err(t2.grad, want[1]) < 1e-4


# ---------------------------------------------------------------------------
# PGD

def test_pgd_identity_styles_leave_lambda_at_init():
    # unlabeled == labeled stats: stylize output is independent of lambda,
    # so the gradient is exactly zero and sign(0)=0 holds lambda at 1
    model, head, h, labeled, _, labels, ur, _ = tiny_setup()
    cfg = adv.AdversaryConfig(pgd_steps=3, beta=0.0)
    out = adv.pgd_ascend(h, labeled, labeled, labels, model, head, ur, MARGIN, cfg)
    assert np.array_equal(out.lam1.data, np.ones(4))
    assert np.array_equal(out.lam2.data, np.ones(4))


def test_pgd_single_step_matches_manual_update():
    model, head, h, labeled, unlabeled, labels, ur, _ = tiny_setup()
    cfg = adv.AdversaryConfig(pgd_steps=1, pgd_step_size=0.1, beta=1.0)

    # manual replica of the first iteration
    t1 = t(np.ones(4), rg=True)
    t2 = t(np.ones(4), rg=True)
    with ad.frozen(model.parameters() + head.parameters()):
        hp = style.stylize(h.detach(), labeled.detach(), unlabeled.detach(),
                           style.MixCoefficients(t1, t2))
        zp = model.forward_e2(hp)
        ad.backward(adv.adversary_objective(zp, labels, head, ur, MARGIN, cfg.beta))
    want1 = np.clip(1.0 + 0.1 * np.sign(t1.grad), 0, 1)
    want2 = np.clip(1.0 + 0.1 * np.sign(t2.grad), 0, 1)

    out = adv.pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, MARGIN, cfg)
    assert np.allclose(out.lam1.data, want1, atol=1e-15)
    assert np.allclose(out.lam2.data, want2, atol=1e-15)
    # positive-gradient entries must have stayed clamped at 1.0
    up = np.sign(t1.grad) > 0
    if up.any():
        assert np.all(out.lam1.data[up] == 1.0)


def test_pgd_objective_nondecreasing_on_descending_instance():
    # labels chosen as the best-matching class at lambda=1: the search can
    # only make things harder, so the objective should climb step by step
    model, head, h, labeled, unlabeled, _, ur, _ = tiny_setup(seed=3)
    with ad.no_grad():
        z = model.forward_e2(h)
        labels = np.argmax(head.logits(z).data, axis=1)

    def objective_at(lams):
        with ad.no_grad():
            hp = style.stylize(h.detach(), labeled, unlabeled,
                               style.MixCoefficients(t(lams[0]), t(lams[1])))
            zp = model.forward_e2(hp)
            return float(adv.adversary_objective(zp, labels, head, ur, MARGIN, 0.0).data)

    values = [objective_at((np.ones(4), np.ones(4)))]
    for k in (1, 2, 3):
        cfg = adv.AdversaryConfig(pgd_steps=k, beta=0.0)
        out = adv.pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, MARGIN, cfg)
        values.append(objective_at((out.lam1.data, out.lam2.data)))
    diffs = np.diff(values)
    assert np.all(diffs >= -1e-9), values


def test_pgd_projection_bounds_random_instances():
    for seed in range(4):
        model, head, h, labeled, unlabeled, labels, ur, _ = tiny_setup(seed=seed)
        cfg = adv.AdversaryConfig(pgd_steps=5, pgd_step_size=0.4, beta=1.0)
        out = adv.pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, MARGIN, cfg)
        for lam in (out.lam1.data, out.lam2.data):
            assert lam.min() >= 0.0 and lam.max() <= 1.0


def test_pgd_leaves_model_bit_identical():
    model, head, h, labeled, unlabeled, labels, ur, _ = tiny_setup()
    params = model.parameters() + head.parameters()
    before = [p.data.tobytes() for p in params]
    cfg = adv.AdversaryConfig(pgd_steps=3, beta=1.0)
    adv.pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, MARGIN, cfg)
    after = [p.data.tobytes() for p in params]
    assert before == after
    for p in params:
        assert p.grad is None
        assert p.requires_grad


def test_pgd_per_sample_independence():
    model, head, h, labeled, unlabeled, labels, ur, rng = tiny_setup(batch=2)
    cfg = adv.AdversaryConfig(pgd_steps=3, beta=1.0)
    out_a = adv.pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, MARGIN, cfg)

    # replace sample 1 everywhere, keep sample 0
    h2 = h.data.copy()
    h2[1] = rng.standard_normal(h2[1].shape)
    labeled2 = style.StyleStats(
        t(np.vstack([labeled.mu.data[0], labeled.mu.data[1] + 0.5])),
        t(np.vstack([labeled.sigma.data[0], labeled.sigma.data[1] * 1.3])))
    labels2 = labels.copy()
    labels2[1] = (labels[1] + 1) % head.num_classes
    out_b = adv.pgd_ascend(t(h2), labeled2, unlabeled, labels2,
                           model, head, ur, MARGIN, cfg)
    assert np.array_equal(out_a.lam1.data[0], out_b.lam1.data[0])
    assert np.array_equal(out_a.lam2.data[0], out_b.lam2.data[0])


def test_pgd_beta_pulls_away_from_ur_centroid():
    # phi is planted at the fully-swapped embedding: with beta=0 the search
    # may approach it freely; beta=10 must not end up closer
    model, head, h, labeled, unlabeled, labels, _, _ = tiny_setup(seed=7)
    with ad.no_grad():
        z_swap = model.forward_e2(style.stylize(
            h, labeled, unlabeled,
            style.MixCoefficients(t(np.zeros(4)), t(np.zeros(4))))).data
        labels = np.argmax(head.logits(model.forward_e2(h)).data, axis=1)
    phi = z_swap.mean(axis=0)
    ur = recog.URState(phi=phi / np.linalg.norm(phi), initialized=True)

    def final_cos(beta):
        cfg = adv.AdversaryConfig(pgd_steps=4, pgd_step_size=0.2, beta=beta)
        out = adv.pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, MARGIN, cfg)
        with ad.no_grad():
            zp = model.forward_e2(style.stylize(h, labeled, unlabeled, out)).data
        return float((zp @ ur.phi).mean())

    assert final_cos(10.0) <= final_cos(0.0) + 1e-9


def test_pgd_zero_steps_returns_init():
    model, head, h, labeled, unlabeled, labels, ur, _ = tiny_setup()
    cfg = adv.AdversaryConfig(pgd_steps=0, beta=1.0)
    out = adv.pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, MARGIN, cfg)
    assert np.all(out.lam1.data == 1.0) and np.all(out.lam2.data == 1.0)


# ---------------------------------------------------------------------------
# non-targeted mode

class _FixedRng:
    """standard_normal stub returning a constant array."""

    def __init__(self, value):
        self.value = value

    def standard_normal(self, shape):
        return np.full(shape, self.value)


def test_non_targeted_zero_budget():
    labeled = style.StyleStats(t([[0.5, -0.5]]), t([[1.0, 2.0]]))
    cfg = adv.AdversaryConfig(mode="non_targeted", pgd_steps=0)
    out = adv.non_targeted_perturb(labeled, cfg, np.random.default_rng(0))
    assert np.array_equal(out.mu.data, labeled.mu.data)
    assert np.array_equal(out.sigma.data, labeled.sigma.data)


def test_non_targeted_single_step_arithmetic():
    labeled = style.StyleStats(t([[0.0]]), t([[1.0]]))
    cfg = adv.AdversaryConfig(mode="non_targeted", pgd_steps=1, pgd_step_size=0.1)
    out = adv.non_targeted_perturb(labeled, cfg, _FixedRng(1.0))
    assert out.sigma.data[0, 0] == pytest.approx(1.1)
    assert out.mu.data[0, 0] == pytest.approx(0.1)


def test_non_targeted_sigma_floored():
    labeled = style.StyleStats(t([[0.0]]), t([[0.05]]))
    cfg = adv.AdversaryConfig(mode="non_targeted", pgd_steps=3, pgd_step_size=0.1)
    out = adv.non_targeted_perturb(labeled, cfg, _FixedRng(-1.0))
    assert out.sigma.data[0, 0] == 0.0


def test_non_targeted_symmetric_directions():
    b, c, k, alpha = 1000, 4, 3, 0.1
    labeled = style.StyleStats(t(np.zeros((b, c))), t(np.full((b, c), 10.0)))
    cfg = adv.AdversaryConfig(mode="non_targeted", pgd_steps=k, pgd_step_size=alpha)
    out = adv.non_targeted_perturb(labeled, cfg, np.random.default_rng(8))
    delta = out.sigma.data - 10.0
    se = alpha * np.sqrt(k) / np.sqrt(b)
    assert np.all(np.abs(delta.mean(axis=0)) < 3 * se)


def test_non_targeted_requires_mode():
    labeled = style.StyleStats(t([[0.0]]), t([[1.0]]))
    cfg = adv.AdversaryConfig(mode="targeted")
    with pytest.raises(ValueError):
        adv.non_targeted_perturb(labeled, cfg, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        adv.AdversaryConfig(mode="pixel")
    with pytest.raises(ValueError):
        adv.AdversaryConfig(pgd_steps=-1)
    with pytest.raises(ValueError):
        adv.AdversaryConfig(pgd_step_size=0.0)
    with pytest.raises(ValueError):
        adv.AdversaryConfig(beta=-0.5)
    with pytest.raises(ValueError):
        adv.AdversaryConfig(rule="momentum")
