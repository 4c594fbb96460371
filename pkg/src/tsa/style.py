"""Instance style statistics, style replacement, and convex style mixing.

The "style" of a feature map is its per-sample, per-channel spatial mean
and standard deviation. Replacing one map's stats with another's moves a
sample across domains without touching its content; mixing two stat sets
with per-sample coefficients interpolates between domains.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

# Floor for the source-sigma denominator in style replacement. A strict
# floor (rather than an additive term) keeps replacement exact on healthy
# channels while still bounding gradients on dead ones.
EPS_STYLE = 1e-5


@dataclass
class StyleStats:
    """Per-sample, per-channel (mu, sigma), both shaped [B, c]."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(
                f"StyleStats: mu {self.mu.shape} vs sigma {self.sigma.shape}")
        if self.mu.data.ndim != 2:
            raise ShapeError(f"StyleStats: need [B,c], got {self.mu.shape}")
        if (self.sigma.data < 0).any():
            raise ValueError("StyleStats: sigma has negative entries")

    @property
    def batch(self):
        return self.mu.shape[0]

    @property
    def channels(self):
        return self.mu.shape[1]

    def detach(self):
        return StyleStats(self.mu.detach(), self.sigma.detach())


@dataclass
class MixCoefficients:
    """Per-sample interpolation pair: lam1 scales sigma, lam2 scales mu."""

    lam1: Tensor
    lam2: Tensor

    def __post_init__(self):
        if self.lam1.shape != self.lam2.shape or self.lam1.data.ndim != 1:
            raise ShapeError(
                f"MixCoefficients: need matching [B], got "
                f"{self.lam1.shape} and {self.lam2.shape}")


def extract_stats(h):
    """Spatial mean and population std per sample and channel."""
    if h.data.ndim != 4:
        raise ShapeError(f"extract_stats: need [B,c,h,w], got {h.shape}")
    mu = ad.mean(h, axes=(2, 3))
    sigma = ad.sqrt(ad.var(h, axes=(2, 3)))
    return StyleStats(mu, sigma)


def _bcol(stat_tensor, batch, channels):
    # [B,c] -> [B,c,1,1] so it broadcasts over the spatial axes
    return ad.reshape(stat_tensor, (batch, channels, 1, 1))


def adain(h, target, eps_style=EPS_STYLE):
    """Replace h's per-channel style with the target stats.

    h' = sigma_target * (h - mu_src) / max(sigma_src, eps_style) + mu_target.
    Differentiable w.r.t. h and both target tensors.
    """
    if h.data.ndim != 4:
        raise ShapeError(f"adain: need [B,c,h,w], got {h.shape}")
    b, c = h.shape[0], h.shape[1]
    if target.mu.shape != (b, c):
        raise ShapeError(
            f"adain: target stats {target.mu.shape} do not match input {(b, c)}")
    src = extract_stats(h)
    denom = ad.clamp(src.sigma, lo=eps_style)
    centered = ad.sub(h, _bcol(src.mu, b, c))
    normed = ad.div(centered, _bcol(denom, b, c))
    return ad.add(ad.mul(_bcol(target.sigma, b, c), normed), _bcol(target.mu, b, c))


def mix_styles(labeled, unlabeled, lam):
    """Convex combination of two stat sets, per-sample coefficients.

    sigma' = lam1*sigma + (1-lam1)*sigma_hat
    mu'    = lam2*mu    + (1-lam2)*mu_hat
    Coefficients outside [0,1] are an error here; projecting back into the
    box is the adversary's job, not this op's.
    """
    if labeled.mu.shape != unlabeled.mu.shape:
        raise ShapeError(
            f"mix_styles: stats shapes differ, {labeled.mu.shape} vs {unlabeled.mu.shape}")
    b, c = labeled.mu.shape
    if lam.lam1.shape != (b,):
        raise ShapeError(f"mix_styles: lam shape {lam.lam1.shape} vs batch {b}")
    for name, t in (("lam1", lam.lam1), ("lam2", lam.lam2)):
        if (t.data < 0).any() or (t.data > 1).any():
            raise ValueError(f"mix_styles: {name} outside [0,1]")
    l1 = ad.reshape(lam.lam1, (b, 1))
    l2 = ad.reshape(lam.lam2, (b, 1))
    sigma = ad.add(ad.mul(l1, labeled.sigma), ad.mul(ad.sub(1.0, l1), unlabeled.sigma))
    mu = ad.add(ad.mul(l2, labeled.mu), ad.mul(ad.sub(1.0, l2), unlabeled.mu))
    return StyleStats(mu, sigma)


def stylize(h, labeled, unlabeled, lam, eps_style=EPS_STYLE):
    """adain(h, mix_styles(labeled, unlabeled, lam)) with h's own source stats."""
    return adain(h, mix_styles(labeled, unlabeled, lam), eps_style=eps_style)


def export_stats_csv(rows, path):
    """Write (tag, mu vector, sigma vector) rows as CSV with a header.

    rows: iterable of (tag: str, mu: 1-d array, sigma: 1-d array); every
    row must agree on the channel count.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("export_stats_csv: no rows")
    c = len(np.asarray(rows[0][1]).reshape(-1))
    header = ["tag"] + [f"mu_{k}" for k in range(c)] + [f"sigma_{k}" for k in range(c)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for tag, mu, sigma in rows:
            mu = np.asarray(mu, dtype=np.float64).reshape(-1)
            sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
            if len(mu) != c or len(sigma) != c:
                raise ValueError(
                    f"export_stats_csv: row {tag!r} has {len(mu)}/{len(sigma)} "
                    f"channels, expected {c}")
            writer.writerow([tag] + [repr(float(v)) for v in mu]
                            + [repr(float(v)) for v in sigma])
    return path
