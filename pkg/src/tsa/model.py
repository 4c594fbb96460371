"""Split convolutional encoder and the normalized prototype head.

The encoder is a plain conv+ReLU stack with no bias and no batch-coupled
layers, split at a configurable layer boundary: E1 produces the feature
map whose channel statistics act as "style", E2 maps that feature map to
a unit-norm embedding. Everything downstream (losses, adversary, eval)
works on cosines, so the head keeps its prototype rows unit-norm too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor


@dataclass
class ArchitectureConfig:
    """Conv stack description: channels[i] with strides[i], then GAP+linear.

    split_index is the number of conv layers inside E1; it may range from
    1 to len(channels) (the latter leaves E2 with only pooling+linear).
    """

    in_channels: int = 1
    input_size: int = 32
    channels: tuple = (16, 32, 64)
    strides: tuple = (1, 2, 2)
    split_index: int = 2
    embed_dim: int = 64
    kernel: int = 3

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("ArchitectureConfig: channels/strides length mismatch")
        if not 1 <= self.split_index <= len(self.channels):
            raise ValueError(
                f"ArchitectureConfig: split_index {self.split_index} outside "
                f"[1, {len(self.channels)}]")


def he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Backbone:
    """E = E2 . E1 with an explicit split for style extraction."""

    def __init__(self, arch=None, seed=0, dtype=np.float32):
        self.arch = arch or ArchitectureConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 0x6D6F64])
        k = self.arch.kernel
        self.conv_weights = []
        cin = self.arch.in_channels
        for cout in self.arch.channels:
            w = he_init(rng, (cout, cin, k, k), cin * k * k, self.dtype)
            self.conv_weights.append(Tensor(w, requires_grad=True))
            cin = cout
        self.linear_weight = Tensor(
            he_init(rng, (self.arch.embed_dim, cin), cin, self.dtype),
            requires_grad=True)

    def parameters(self):
        return self.conv_weights + [self.linear_weight]

    def param_names(self):
        names = [f"conv{i}.w" for i in range(len(self.conv_weights))]
        return names + ["linear.w"]

    def _conv_block(self, x, index):
        w = self.conv_weights[index]
        return ad.relu(ad.conv2d(x, w, stride=self.arch.strides[index], pad=1))

    def forward_e1(self, x):
        """Pixels in [-1,1], shape [B,1,S,S] -> style feature map."""
        size = self.arch.input_size
        if x.data.ndim != 4 or x.shape[1] != self.arch.in_channels \
                or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(
                f"forward_e1: expected [B,{self.arch.in_channels},{size},{size}], "
                f"got {x.shape}")
        h = x
        for i in range(self.arch.split_index):
            h = self._conv_block(h, i)
        return h

    def _expected_h_shape(self):
        size = self.arch.input_size
        for s in self.arch.strides[:self.arch.split_index]:
            size = (size + 2 - self.arch.kernel) // s + 1
        return self.arch.channels[self.arch.split_index - 1], size

    def forward_e2(self, h):
        """Feature map -> unit-norm embedding [B, d]."""
        return self._e2(h)[0]

    def embed_raw(self, h):
        """Feature map -> pre-normalization embedding [B, d].

        The raw embedding's magnitude tracks how much signal survived E2;
        the entropy-based detector keys off exactly that, which the
        unit-norm output deliberately erases.
        """
        return self._e2(h)[1]

    def _e2(self, h):
        c, size = self._expected_h_shape()
        if h.data.ndim != 4 or h.shape[1] != c or h.shape[2] != size or h.shape[3] != size:
            raise ShapeError(
                f"forward_e2: expected [B,{c},{size},{size}] at split "
                f"{self.arch.split_index}, got {h.shape}")
        out = h
        for i in range(self.arch.split_index, len(self.conv_weights)):
            out = self._conv_block(out, i)
            if not np.isfinite(out.data).all():
                raise NonFiniteError(f"forward_e2: non-finite activations at conv layer {i}")
        pooled = ad.mean(out, axes=(2, 3))
        raw = ad.linear(pooled, self.linear_weight)
        if not np.isfinite(raw.data).all():
            raise NonFiniteError("forward_e2: non-finite activations at linear layer")
        return ad.l2_normalize(raw), raw

    def forward_full(self, x):
        return self.forward_e2(self.forward_e1(x))


class PrototypeHead:
    """Unit-norm class prototypes; logits are plain cosines."""

    def __init__(self, num_classes, embed_dim, seed=0, dtype=np.float32):
        rng = np.random.default_rng([seed, 0x686561])
        w = rng.standard_normal((num_classes, embed_dim)).astype(np.dtype(dtype))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        self.W = Tensor(w, requires_grad=True)
        self.num_classes = num_classes
        self.embed_dim = embed_dim

    def parameters(self):
        return [self.W]

    def renormalize(self):
        """Project prototype rows back to unit norm (after an optimizer step)."""
        w = self.W.data
        w /= np.linalg.norm(w, axis=1, keepdims=True)

    def logits(self, z):
        _check_unit_rows("logits: embeddings", z.data)
        _check_unit_rows("logits: prototypes", self.W.data)
        return ad.linear(z, self.W)


def _check_unit_rows(what, arr, tol=1e-4):
    norms = np.sqrt((arr * arr).sum(axis=1))
    err = np.abs(norms - 1.0)
    if err.max() > tol:
        row = int(np.argmax(err))
        raise ValueError(f"{what}: row {row} has norm {norms[row]:.6f} (tol {tol})")
