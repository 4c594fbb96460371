"""Unrecognizable-instance detection and the recognizability loss.

Destroyed samples collapse toward low-information embeddings; an entropy
upper bound computed from per-sample component variance ranks them, an
EMA centroid phi tracks their cluster, and the recognizability loss
measures how close a styled embedding sits to that cluster.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_R = 0.01        # caps the recognizability loss at 1/EPS_R
EPS_VAR = 1e-12     # variance floor inside the entropy log
EPS_NORM = 1e-8     # below this, a mean embedding is considered degenerate

log = logging.getLogger(__name__)


@dataclass
class URState:
    """EMA centroid of the unrecognizable cluster.

    phi stays unit-norm after every update; momentum is fixed for the
    lifetime of a run. skipped_updates counts degenerate batches whose
    mean embedding was too small to use.
    """

    phi: np.ndarray | None = None
    initialized: bool = False
    momentum: float = 0.99
    skipped_updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"URState: momentum {self.momentum} outside [0,1]")
        if self.initialized:
            n = float(np.linalg.norm(self.phi))
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"URState: initialized phi has norm {n}")


def entropy_upper_bound(z, eps_var=EPS_VAR):
    """Per-sample H = 0.5*ln(2*pi*v^2) + 0.5 with v^2 the component variance.

    v^2 is floored at eps_var so collapsed embeddings score a large
    negative constant instead of -inf.
    """
    if z.data.ndim != 2 or z.shape[1] < 2:
        raise ad.ShapeError(f"entropy_upper_bound: need [B,d] with d >= 2, got {z.shape}")
    v2 = ad.clamp(ad.var(z, axes=1), lo=eps_var)
    return ad.add(ad.mul(ad.log(ad.mul(v2, 2.0 * math.pi)), 0.5), 0.5)


def select_ur(z, top_k):
    """Indices of the top_k lowest-entropy samples, ties to the lowest index."""
    b = z.shape[0]
    if not 1 <= top_k <= b:
        raise ValueError(f"select_ur: top_k {top_k} outside [1, {b}]")
    with ad.no_grad():
        ent = entropy_upper_bound(z).data
    order = np.argsort(ent, kind="stable")
    return [int(i) for i in order[:top_k]]


def update_phi(state, z_topk):
    """EMA step of the centroid: phi <- normalize(a*phi + (1-a)*mean(z)).

    First successful update initializes phi to the normalized batch mean.
    A batch whose mean embedding is degenerate (norm < EPS_NORM) is
    skipped and counted, never folded in.
    """
    zd = z_topk.data if isinstance(z_topk, Tensor) else np.asarray(z_topk)
    if zd.ndim != 2:
        raise ad.ShapeError(f"update_phi: need [k,d], got {zd.shape}")
    norms = np.linalg.norm(zd, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-4:
        row = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(f"update_phi: row {row} has norm {norms[row]:.6f}, expected 1")
    zbar = zd.mean(axis=0).astype(np.float64)
    n = float(np.linalg.norm(zbar))
    if n < EPS_NORM:
        skips = state.skipped_updates + 1
        log.warning("update_phi: degenerate mean embedding (norm %.3e), %d skips so far",
                    n, skips)
        return replace(state, skipped_updates=skips)
    if not state.initialized:
        return replace(state, phi=zbar / n, initialized=True)
    a = state.momentum
    mixed = a * state.phi + (1.0 - a) * zbar
    return replace(state, phi=mixed / np.linalg.norm(mixed))


def recognizability_loss(z_prime, state, eps_r=EPS_R):
    """L_r = mean_i 1/(eps_r + 1 - <phi, z'_i>), phi held constant.

    High when styled embeddings drift toward the UR centroid; bounded in
    [1/(eps_r + 2), 1/eps_r] for unit-norm inputs.
    """
    if not state.initialized:
        raise RuntimeError("recognizability_loss: UR centroid not initialized yet")
    if z_prime.data.ndim != 2:
        raise ad.ShapeError(f"recognizability_loss: need [B,d], got {z_prime.shape}")
    d = z_prime.shape[1]
    if state.phi.shape != (d,):
        raise ad.ShapeError(
            f"recognizability_loss: phi dim {state.phi.shape} vs embeddings {d}")
    phi_row = Tensor(state.phi.reshape(1, d).astype(z_prime.dtype))
    cos = ad.reshape(ad.linear(z_prime, phi_row), (z_prime.shape[0],))
    denom = ad.sub(1.0 + eps_r, cos)
    return ad.mean(ad.div(1.0, denom))
