"""Inner-loop style search: PGD over mixing coefficients, plus ablations.

Stage 1 of training holds the network fixed and searches, per sample, for
the convex style mix that is hardest for the current model while staying
recognizable. The non-targeted mode replaces the search with random sign
steps of the same budget; mode "off" disables stage 1 entirely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import margin_loss
from .recog import recognizability_loss
from .style import MixCoefficients, StyleStats, stylize

MODES = ("targeted", "non_targeted", "off")
RULES = ("sign", "raw")

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdversaryConfig:
    mode: str = "targeted"
    pgd_steps: int = 3
    pgd_step_size: float = 0.1
    beta: float = 1.0
    rule: str = "sign"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"AdversaryConfig: unknown mode {self.mode!r}, want {MODES}")
        if self.rule not in RULES:
            raise ValueError(f"AdversaryConfig: unknown rule {self.rule!r}, want {RULES}")
        # pgd_steps 0 encodes an explicit zero budget (identity adversary)
        if self.pgd_steps < 0:
            raise ValueError(f"AdversaryConfig: pgd_steps {self.pgd_steps} must be >= 0")
        if self.pgd_step_size <= 0:
            raise ValueError(f"AdversaryConfig: step size {self.pgd_step_size} must be > 0")
        if self.beta < 0:
            raise ValueError(f"AdversaryConfig: beta {self.beta} must be >= 0")


def adversary_objective(z_prime, labels, head, ur, spec, beta):
    """L = L_fr(z') - beta * L_r(z').

    The classification term pushes the style mix toward hard examples;
    the recognizability term (beta > 0) holds it away from the
    unrecognizable cluster. beta == 0 skips L_r entirely.
    """
    loss = margin_loss(head.logits(z_prime), labels, spec)
    if beta == 0:
        return loss
    return ad.sub(loss, ad.mul(recognizability_loss(z_prime, ur), beta))


def pgd_ascend(h, labeled, unlabeled, labels, model, head, ur, spec, cfg):
    """Maximize the adversary objective over per-sample (lam1, lam2).

    Coefficients start at 1.0 (pure labeled style). Each of the
    cfg.pgd_steps iterations rebuilds the stylize -> E2 -> objective graph
    with the network frozen, then steps lam by step_size * sign(grad)
    (rule "sign") or by the raw gradient (rule "raw"), clamping to [0,1].
    Model and head parameters are left bit-identical. A non-finite
    gradient aborts the loop and returns the last valid coefficients.
    """
    b = h.shape[0]
    dt = h.dtype
    lam1 = np.ones(b, dtype=dt)
    lam2 = np.ones(b, dtype=dt)
    h0 = h.detach()
    lab = labeled.detach()
    unlab = unlabeled.detach()
    params = model.parameters() + head.parameters()
    with ad.frozen(params):
        for it in range(cfg.pgd_steps):
            t1 = Tensor(lam1.copy(), requires_grad=True)
            t2 = Tensor(lam2.copy(), requires_grad=True)
            hp = stylize(h0, lab, unlab, MixCoefficients(t1, t2))
            zp = model.forward_e2(hp)
            obj = adversary_objective(zp, labels, head, ur, spec, cfg.beta)
            ad.backward(obj)
            g1, g2 = t1.grad, t2.grad
            if g1 is None or g2 is None \
                    or not (np.isfinite(g1).all() and np.isfinite(g2).all()):
                log.warning("pgd_ascend: non-finite gradient at iteration %d, "
                            "keeping last valid coefficients", it)
                break
            if cfg.rule == "sign":
                d1, d2 = np.sign(g1), np.sign(g2)
            else:
                d1, d2 = g1, g2
            lam1 = np.clip(lam1 + cfg.pgd_step_size * d1, 0.0, 1.0).astype(dt)
            lam2 = np.clip(lam2 + cfg.pgd_step_size * d2, 0.0, 1.0).astype(dt)
    return MixCoefficients(Tensor(lam1), Tensor(lam2))


def non_targeted_perturb(labeled, cfg, rng):
    """Random-direction style walk with the same budget as the PGD search.

    Each step adds step_size * sign(gaussian draw) per stat entry; sigma
    is floored at 0 at the end. Draw order is fixed (sigma then mu per
    step) so a seeded rng reproduces exactly.
    """
    if cfg.mode != "non_targeted":
        raise ValueError(f"non_targeted_perturb: called with mode {cfg.mode!r}")
    shape = labeled.mu.shape
    dt = labeled.mu.dtype
    sigma = labeled.sigma.data.copy()
    mu = labeled.mu.data.copy()
    for _ in range(cfg.pgd_steps):
        sigma = sigma + cfg.pgd_step_size * np.sign(rng.standard_normal(shape)).astype(dt)
        mu = mu + cfg.pgd_step_size * np.sign(rng.standard_normal(shape)).astype(dt)
    sigma = np.maximum(sigma, 0.0)
    return StyleStats(Tensor(mu), Tensor(sigma))
