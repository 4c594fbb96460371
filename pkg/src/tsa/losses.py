"""Angular-margin classification losses over cosine logits.

margin_loss is a single fused op: modified-logit construction, stable
log-sum-exp cross-entropy, and the analytic gradient live together so the
backward pass is one softmax-minus-onehot product instead of a chain of
elementwise nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

KINDS = ("arcface", "cosface", "softmax")

# arccos inputs are clamped this far inside [-1, 1]; d(arccos) blows up at
# the endpoints and exactly-aligned embeddings do occur early in training.
_ACOS_CLIP = 1e-7


@dataclass(frozen=True)
class MarginSpec:
    kind: str = "arcface"
    margin: float = 0.5
    scale: float = 64.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"MarginSpec: unknown kind {self.kind!r}, want one of {KINDS}")
        if self.margin < 0:
            raise ValueError(f"MarginSpec: margin {self.margin} must be >= 0")
        if self.scale <= 0:
            raise ValueError(f"MarginSpec: scale {self.scale} must be > 0")
        if self.kind == "arcface" and self.margin >= math.pi / 2:
            raise ValueError(f"MarginSpec: arcface margin {self.margin} must be < pi/2")
        if self.kind == "cosface" and self.margin >= 1:
            raise ValueError(f"MarginSpec: cosface margin {self.margin} must be < 1")


def cosface_spec(margin=0.35, scale=64.0):
    return MarginSpec("cosface", margin, scale)


def _target_logit(cos_y, spec):
    """Margin-modified logit for the true class, plus its d/d(cos_y).

    arcface: cos(theta + m); where theta + m would pass pi the standard
    fallback cos_y - m*sin(m) keeps the logit monotone in cos_y.
    """
    if spec.kind == "softmax":
        return cos_y, np.ones_like(cos_y)
    if spec.kind == "cosface":
        return cos_y - spec.margin, np.ones_like(cos_y)
    m = spec.margin
    cc = np.clip(cos_y, -1.0 + _ACOS_CLIP, 1.0 - _ACOS_CLIP)
    theta = np.arccos(cc)
    in_range = theta + m < math.pi
    modified = np.where(in_range, np.cos(theta + m), cos_y - m * math.sin(m))
    sin_theta = np.sin(theta)
    # d cos(theta+m)/d cos_y = sin(theta+m)/sin(theta); guarded because the
    # clamp already keeps sin(theta) > 0
    deriv = np.where(in_range, np.sin(theta + m) / np.maximum(sin_theta, 1e-12),
                     np.ones_like(cos_y))
    return modified, deriv


def margin_loss(cosines, labels, spec):
    """Mean cross-entropy over margin-modified, scaled cosine logits.

    cosines: Tensor[B,C] of cosine similarities; labels: int array [B].
    Returns a scalar Tensor differentiable w.r.t. cosines.
    """
    if cosines.data.ndim != 2:
        raise ad.ShapeError(f"margin_loss: need [B,C], got {cosines.shape}")
    b, c = cosines.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ad.ShapeError(f"margin_loss: labels shape {labels.shape} vs batch {b}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"margin_loss: labels must be integers, got {labels.dtype}")
    if (labels < 0).any() or (labels >= c).any():
        bad = int(labels[(labels < 0) | (labels >= c)][0])
        raise ValueError(f"margin_loss: label {bad} outside [0, {c})")

    cos = cosines.data
    rows = np.arange(b)
    cos_y = cos[rows, labels]
    target, dtarget = _target_logit(cos_y, spec)

    logits = spec.scale * cos
    logits[rows, labels] = spec.scale * target  # logits is a fresh array

    # stable mean cross-entropy: lse - logit_y
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    lse = mx[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - logits[rows, labels]).mean())
    out = np.asarray(loss, dtype=cos.dtype)

    softmax = np.exp(logits - lse[:, None])

    def vjp(g):
        # d loss / d logits = (softmax - onehot)/B, then chain through the
        # margin modification on the target column only
        dl = softmax.copy()
        dl[rows, labels] -= 1.0
        dl *= float(g) * spec.scale / b
        dl[rows, labels] *= dtarget
        return dl

    return ad.custom_op("margin_loss", out, [(cosines, vjp)])
