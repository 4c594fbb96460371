"""Two-stage adversarial style training.

Each iteration runs, in order:

  (a) forward the labeled batch through E1; in targeted mode also embed
      the unlabeled batch,
  (b) update the unrecognizable-cluster centroid phi from the lowest
      entropy unlabeled embeddings,
  (c) stage 1: search per-sample style mixing coefficients by projected
      signed-gradient ascent with the network frozen,
  (d) stage 2: train on the clean and stylized features jointly,
  (e) emit one metrics record.

Mode "off" collapses to plain margin-loss training: no unlabeled
forward, no centroid, no stylized branch, and no adversary fields in
the metrics. Mode "non_targeted" replaces the searched coefficients
with a random style walk of the same budget.
"""

import dataclasses
import itertools
import json
import logging
import os
import time
import zlib

import numpy as np

from . import autodiff as ad
from .adversary import AdversaryConfig, non_targeted_perturb, pgd_ascend
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import MarginSpec, margin_loss
from .model import ArchitectureConfig, Backbone, PrototypeHead
from .recog import URState, recognizability_loss, select_ur, update_phi
from .style import MixCoefficients, adain, extract_stats, mix_styles

log = logging.getLogger(__name__)

# per-epoch rng stream tags; resume restarts cleanly at epoch boundaries
# because no rng state survives across epochs
_TAG_SHUFFLE_LABELED = 0x5AB
_TAG_SHUFFLE_UNLABELED = 0xC1C
_TAG_PERTURB = 0x6E7

METRIC_KEYS = {
    "off": ("t", "l_fr_clean", "wall_time"),
    "non_targeted": ("t", "l_fr_clean", "l_fr_styled", "wall_time"),
    "targeted": ("t", "l_fr_clean", "l_fr_styled", "l_r",
                 "lam1_mean", "lam2_mean", "phi_drift", "wall_time"),
}

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclasses.dataclass
class TrainConfig:
    num_classes: int = 50
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    lr_decay_epochs: tuple = (10, 16)
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    ema_alpha: float = 0.99
    ur_top_k: int = 8
    styled_loss_weight: float = 0.5
    seed: int = 0
    dtype: str = "float32"
    debug_checks: bool = False
    margin: MarginSpec = dataclasses.field(default_factory=MarginSpec)
    adversary: AdversaryConfig = dataclasses.field(default_factory=AdversaryConfig)
    arch: ArchitectureConfig = dataclasses.field(default_factory=ArchitectureConfig)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"TrainConfig: num_classes must be >= 2, got {self.num_classes}")
        if self.epochs < 1:
            raise ValueError(f"TrainConfig: epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"TrainConfig: lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(
                f"TrainConfig: lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ValueError("TrainConfig: lr_decay_epochs must be strictly increasing")
        if self.weight_decay < 0:
            raise ValueError(f"TrainConfig: weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"TrainConfig: momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.ema_alpha <= 1:
            raise ValueError(f"TrainConfig: ema_alpha must be in [0, 1], got {self.ema_alpha}")
        if self.ur_top_k < 1:
            raise ValueError(f"TrainConfig: ur_top_k must be >= 1, got {self.ur_top_k}")
        if not 0 <= self.styled_loss_weight <= 1:
            raise ValueError(
                f"TrainConfig: styled_loss_weight must be in [0, 1], "
                f"got {self.styled_loss_weight}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"TrainConfig: dtype must be one of {sorted(_DTYPES)}, "
                             f"got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


def reference_preset(num_classes, **overrides):
    """Full-scale settings; the constructor defaults are the desk-scale ones."""
    base = dict(num_classes=num_classes, lr=0.1, epochs=24, batch_size=512,
                lr_decay_epochs=(10, 16, 22))
    base.update(overrides)
    return TrainConfig(**base)


@dataclasses.dataclass
class TrainState:
    model: Backbone
    head: PrototypeHead
    ur: URState
    velocity: dict
    epoch: int = 0
    t: int = 0


def init_state(cfg):
    dt = cfg.np_dtype
    model = Backbone(cfg.arch, seed=cfg.seed, dtype=dt)
    head = PrototypeHead(cfg.num_classes, cfg.arch.embed_dim, seed=cfg.seed, dtype=dt)
    ur = URState(momentum=cfg.ema_alpha)
    velocity = {name: np.zeros_like(p.data) for name, p in _named_params(model, head)}
    return TrainState(model=model, head=head, ur=ur, velocity=velocity)


def _named_params(model, head):
    names = ["model." + n for n in model.param_names()] + ["head.W"]
    return list(zip(names, model.parameters() + head.parameters()))


def normalize_images(images):
    """uint8 pixels [N,H,W] or [N,1,H,W] -> float [-1, 1] with a channel axis."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    return arr.astype(np.float64) / 127.5 - 1.0


def current_lr(cfg, epoch):
    decays = sum(1 for d in cfg.lr_decay_epochs if epoch >= d)
    return cfg.lr * cfg.lr_decay_factor ** decays


def _param_crc(model, head):
    crc = 0
    for _, p in _named_params(model, head):
        crc = zlib.crc32(p.data.tobytes(), crc)
    return crc


def _deterministic():
    return os.environ.get("TSA_DETERMINISTIC") == "1"


def train_step(state, cfg, x, y, x_unlab=None, perturb_rng=None):
    """One optimization step on one batch; returns the metrics record.

    `x_unlab` is required in targeted mode and ignored otherwise.
    `perturb_rng` drives the random style walk in non_targeted mode.
    State is mutated: parameters, velocity, ur centroid, step counter.
    """
    t0 = time.perf_counter()
    mode = cfg.adversary.mode
    dt = cfg.np_dtype
    model, head = state.model, state.head

    xt = ad.Tensor(np.ascontiguousarray(x, dtype=dt))
    h = model.forward_e1(xt)

    lam = None
    stats_unlab = None
    phi_drift = 0.0
    if mode == "targeted":
        if x_unlab is None:
            raise ValueError("train_step: targeted mode needs an unlabeled batch")
        with ad.no_grad():
            h_hat = model.forward_e1(ad.Tensor(np.ascontiguousarray(x_unlab, dtype=dt)))
            # entropy keys off the raw embedding magnitudes; the centroid
            # lives on the unit sphere with the training embeddings
            raw_hat = model.embed_raw(h_hat)
            z_hat = model.forward_e2(h_hat)
            stats_unlab = extract_stats(h_hat)
        idx = select_ur(raw_hat, min(cfg.ur_top_k, raw_hat.shape[0]))
        phi_before = None if state.ur.phi is None else state.ur.phi.copy()
        state.ur = update_phi(state.ur, z_hat.data[idx])
        if phi_before is not None and state.ur.phi is not None:
            phi_drift = float(np.linalg.norm(state.ur.phi - phi_before))

        if cfg.adversary.pgd_steps > 0 and state.ur.initialized:
            crc_before = _param_crc(model, head) if cfg.debug_checks else None
            lam = pgd_ascend(h, extract_stats(h), stats_unlab, y,
                             model, head, state.ur, cfg.margin, cfg.adversary)
            if cfg.debug_checks and _param_crc(model, head) != crc_before:
                raise RuntimeError("train_step: stage 1 modified network parameters")
        else:
            b = h.shape[0]
            lam = MixCoefficients(ad.Tensor(np.ones(b, dtype=dt)),
                                  ad.Tensor(np.ones(b, dtype=dt)))

    # stage 2: clean branch plus (unless off) stylized branch
    z = model.forward_e2(h)
    loss_clean = margin_loss(head.logits(z), y, cfg.margin)
    l_fr_clean = loss_clean.item()

    l_fr_styled = None
    l_r_val = None
    if mode == "off":
        loss = loss_clean
    else:
        if mode == "targeted":
            target = mix_styles(extract_stats(h), stats_unlab, lam)
        else:
            if perturb_rng is None:
                raise ValueError("train_step: non_targeted mode needs perturb_rng")
            target = non_targeted_perturb(extract_stats(h).detach(),
                                          cfg.adversary, perturb_rng)
        h_styled = adain(h, target)
        z_styled = model.forward_e2(h_styled)
        loss_styled = margin_loss(head.logits(z_styled), y, cfg.margin)
        l_fr_styled = loss_styled.item()
        if mode == "targeted" and state.ur.initialized:
            with ad.no_grad():
                l_r_val = recognizability_loss(
                    ad.Tensor(z_styled.data), state.ur).item()
        w = cfg.styled_loss_weight
        loss = ad.add(ad.mul(loss_clean, 1.0 - w), ad.mul(loss_styled, w))

    if not np.isfinite(loss.item()):
        raise ad.NonFiniteError(f"train_step: non-finite loss at step {state.t}")
    loss.backward()

    lr = current_lr(cfg, state.epoch)
    for name, p in _named_params(model, head):
        g = p.grad
        if g is None:
            raise RuntimeError(f"train_step: parameter {name} received no gradient")
        v = cfg.momentum * state.velocity[name] + (g + cfg.weight_decay * p.data)
        state.velocity[name] = v
        p.data -= lr * v
        p.grad = None
    head.renormalize()

    record = {"t": state.t, "l_fr_clean": l_fr_clean}
    if mode != "off":
        record["l_fr_styled"] = l_fr_styled
    if mode == "targeted":
        record["l_r"] = l_r_val
        record["lam1_mean"] = float(lam.lam1.data.mean())
        record["lam2_mean"] = float(lam.lam2.data.mean())
        record["phi_drift"] = phi_drift
    record["wall_time"] = 0.0 if _deterministic() else time.perf_counter() - t0
    state.t += 1
    return record


def _index_stream(rng, n):
    while True:
        for i in rng.permutation(n):
            yield int(i)


def fit(cfg, x_labeled, y_labeled, x_unlabeled=None, out_dir=None, resume_from=None):
    """Run the full training loop; returns the final TrainState.

    `x_labeled`/`x_unlabeled` are normalized float arrays [N,1,S,S]
    (see normalize_images). Incomplete trailing batches are dropped.
    When `out_dir` is given, writes metrics.jsonl (one record per
    iteration) and a checkpoint per epoch; a non-finite loss aborts
    with the last epoch checkpoint intact. Same config + seed
    reproduces byte-identical metrics in deterministic mode.
    """
    from .config import serialize_config

    mode = cfg.adversary.mode
    x_labeled = np.asarray(x_labeled)
    y_labeled = np.asarray(y_labeled)
    n = x_labeled.shape[0]
    if y_labeled.shape != (n,):
        raise ValueError(f"fit: labels shape {y_labeled.shape} does not match {n} images")
    if y_labeled.min() < 0 or y_labeled.max() >= cfg.num_classes:
        raise ValueError("fit: labels out of range for num_classes")
    if n < cfg.batch_size:
        raise ValueError(f"fit: need at least one full batch ({cfg.batch_size}), got {n} samples")
    if mode == "targeted":
        if x_unlabeled is None or len(x_unlabeled) == 0:
            raise ValueError("fit: targeted mode needs unlabeled images")
        x_unlabeled = np.asarray(x_unlabeled)

    echo = serialize_config(cfg)
    start_epoch = 0
    if resume_from is not None:
        from .config import parse_config_text
        state, stored_echo, meta = load_state(resume_from, cfg=cfg)
        stored_cfg = parse_config_text(stored_echo)
        # the epoch budget may grow on resume; everything that affects the
        # per-step math must match exactly
        if dataclasses.replace(stored_cfg, epochs=cfg.epochs) != cfg:
            raise ValueError(f"fit: checkpoint {resume_from} was written with a "
                             f"different config")
        start_epoch = meta["next_epoch"]
    else:
        state = init_state(cfg)

    metrics_path = None
    metrics_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        metrics_f = open(metrics_path, "a" if resume_from is not None else "w")

    iters_per_epoch = n // cfg.batch_size
    try:
        for epoch in range(start_epoch, cfg.epochs):
            state.epoch = epoch
            shuffle_rng = np.random.default_rng([cfg.seed, _TAG_SHUFFLE_LABELED, epoch])
            perm = shuffle_rng.permutation(n)
            unlab_iter = None
            perturb_rng = None
            if mode == "targeted":
                unlab_rng = np.random.default_rng([cfg.seed, _TAG_SHUFFLE_UNLABELED, epoch])
                unlab_iter = _index_stream(unlab_rng, x_unlabeled.shape[0])
            elif mode == "non_targeted":
                perturb_rng = np.random.default_rng([cfg.seed, _TAG_PERTURB, epoch])
            for it in range(iters_per_epoch):
                sel = perm[it * cfg.batch_size:(it + 1) * cfg.batch_size]
                xb = x_labeled[sel]
                yb = y_labeled[sel]
                xu = None
                if mode == "targeted":
                    usel = np.fromiter(itertools.islice(unlab_iter, cfg.batch_size),
                                       dtype=np.int64)
                    xu = x_unlabeled[usel]
                record = train_step(state, cfg, xb, yb, x_unlab=xu,
                                    perturb_rng=perturb_rng)
                if metrics_f is not None:
                    metrics_f.write(json.dumps(record) + "\n")
                    metrics_f.flush()
            if out_dir is not None:
                save_state(os.path.join(out_dir, f"ckpt_epoch_{epoch:03d}.bin"),
                           state, echo, next_epoch=epoch + 1)
    finally:
        if metrics_f is not None:
            metrics_f.close()
    return state


def save_state(path, state, config_echo, next_epoch):
    tensors = {}
    for name, p in _named_params(state.model, state.head):
        tensors[name] = p.data
    for name, v in state.velocity.items():
        tensors["vel." + name] = v
    if state.ur.phi is not None:
        tensors["ur.phi"] = state.ur.phi
    tensors["meta"] = np.array(
        [next_epoch, state.t, int(state.ur.initialized), state.ur.skipped_updates],
        dtype=np.uint64)
    save_checkpoint(path, config_echo, tensors)


def load_state(path, cfg=None):
    """Rebuild a TrainState from a checkpoint.

    With cfg=None the config is parsed back out of the stored echo.
    Returns (state, config_echo, meta dict).
    """
    from .config import parse_config_text

    echo, tensors = load_checkpoint(path)
    if cfg is None:
        cfg = parse_config_text(echo)
    state = init_state(cfg)
    for name, p in _named_params(state.model, state.head):
        stored = tensors[name]
        if stored.shape != p.data.shape:
            raise ValueError(f"load_state: {name} shape {stored.shape} does not match "
                             f"config ({p.data.shape})")
        p.data = stored.astype(p.data.dtype, copy=True)
        state.velocity[name] = tensors["vel." + name].astype(p.data.dtype, copy=True)
    meta = tensors["meta"]
    next_epoch, t, ur_init, skipped = (int(v) for v in meta)
    state.t = t
    state.epoch = max(next_epoch - 1, 0)
    phi = tensors.get("ur.phi")
    state.ur = URState(phi=None if phi is None else phi.copy(),
                       initialized=bool(ur_init), momentum=cfg.ema_alpha,
                       skipped_updates=skipped)
    return state, echo, {"next_epoch": next_epoch, "t": t}
