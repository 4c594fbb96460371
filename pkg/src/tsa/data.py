"""Procedural identity dataset with a clean labeled split and a degraded
unlabeled split, plus the binary container both are stored in.

Each "identity" is a 16-dim seed vector; rendering maps it affinely to
grating and blob parameters and draws a 32x32 grayscale pattern. The
unlabeled split renders disjoint identities through a degradation pipe,
planting a controlled fraction of unrecognizable samples. Ground-truth
tags live in the files for auditing, but the trainer-facing reader
exposes images only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

MAGIC = b"TSAD"
VERSION = 1

TAG_SC = 0
TAG_UC_RECOGNIZABLE = 1
TAG_UC_UNRECOGNIZABLE = 2

IMG_C, IMG_H, IMG_W = 1, 32, 32
SEED_DIM = 16

_N_GRATINGS = 4
_N_BLOBS = 3
_BLOB_SIGNS = (1.0, -1.0, 1.0)  # mixed bright/dark spots decorrelate identities
_PATTERN_GAIN = 30.0
_UR_KEEP = 0.2            # unrecognizable samples keep 20% of signal
_JITTER_TAG = 0x4A495454  # namespaces the jitter rng stream

# rng stream tags for dataset splits
_SPLIT_LABELED = 1
_SPLIT_UNLABELED = 2
_SPLIT_GALLERY = 3
_SPLIT_PROBES = 4


class DatasetFormatError(ValueError):
    """Dataset file failed structural validation."""


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    seed_vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.seed_vector, dtype=np.float64)
        if v.shape != (SEED_DIM,):
            raise ValueError(f"IdentitySpec: seed vector shape {v.shape}, want ({SEED_DIM},)")
        if np.abs(v).max() > 1.0:
            raise ValueError("IdentitySpec: seed vector entries outside [-1,1]")
        object.__setattr__(self, "seed_vector", v)


@dataclass
class GenConfig:
    num_identities: int = 50
    imgs_per_id: int = 100
    unlabeled_size: int = 1000
    ur_fraction: float = 0.2
    seed: int = 0
    unlabeled_identities: int = 30
    eval_identities: int = 20
    eval_probes_per_id: int = 20

    def __post_init__(self):
        if self.num_identities < 1 or self.imgs_per_id < 1:
            raise ValueError("GenConfig: need at least one identity and one image")
        if self.unlabeled_size < 1 or self.unlabeled_identities < 1:
            raise ValueError("GenConfig: unlabeled split must be non-empty")
        if not 0.0 <= self.ur_fraction <= 1.0:
            raise ValueError(f"GenConfig: ur_fraction {self.ur_fraction} outside [0,1]")
        if self.eval_identities < 0 or self.eval_probes_per_id < 0:
            raise ValueError("GenConfig: eval sizes must be >= 0")


# ---------------------------------------------------------------------------
# rendering

def _param_map():
    """Fixed affine map from seed space to render parameters.

    Rows are l1-normalized to each parameter's half-range so that seeds
    in [-1,1]^16 land exactly inside the parameter box; the map stays
    affine end to end.
    """
    spans = []
    spans += [(np.pi / 2, np.pi / 2)] * _N_GRATINGS      # orientation [0, pi]
    spans += [(0.065, 0.025)] * _N_GRATINGS              # frequency [0.04, 0.09] cyc/px
    spans += [(0.0, np.pi)] * _N_GRATINGS                # phase [-pi, pi]
    spans += [(0.45, 0.2)] * _N_GRATINGS                 # grating amplitude [0.25, 0.65]
    spans += [(16.0, 9.0)] * _N_BLOBS                    # blob cx [7, 25]
    spans += [(16.0, 9.0)] * _N_BLOBS                    # blob cy
    spans += [(4.5, 1.5)] * _N_BLOBS                     # blob sigma [3, 6]
    spans += [(2.2, 0.9)] * _N_BLOBS                     # blob amplitude [1.3, 3.1]
    rng = np.random.default_rng(0xA11CE)
    raw = rng.standard_normal((len(spans), SEED_DIM))
    offsets = np.array([b for b, _ in spans])
    halves = np.array([r for _, r in spans])
    mat = raw / np.abs(raw).sum(axis=1, keepdims=True) * halves[:, None]
    return mat, offsets


_PARAM_MAT, _PARAM_OFF = _param_map()


def _render_params(seed_vector):
    p = _PARAM_MAT @ seed_vector + _PARAM_OFF
    g = _N_GRATINGS
    return {
        "theta": p[0:g],
        "freq": p[g:2 * g],
        "phase": p[2 * g:3 * g],
        "amp": p[3 * g:4 * g],
        "cx": p[4 * g:4 * g + _N_BLOBS],
        "cy": p[4 * g + _N_BLOBS:4 * g + 2 * _N_BLOBS],
        "bsig": p[4 * g + 2 * _N_BLOBS:4 * g + 3 * _N_BLOBS],
        "bamp": p[4 * g + 3 * _N_BLOBS:4 * g + 4 * _N_BLOBS],
    }


def render_identity(spec, jitter_seed=None):
    """Deterministic 32x32 uint8 render of one identity.

    jitter_seed None disables jitter entirely (canonical view); any int
    or tuple of ints selects one reproducible jitter draw: translation
    within 2 px, rotation within 10 degrees, brightness within 10% (of
    the pattern, so identity survives a plain intensity rescale), and
    additive gaussian noise at 2% of range. The translation/rotation
    magnitudes are calibrated so a raw-pixel nearest-centroid classifier
    stays above 90% on the labeled split.
    """
    prm = _render_params(spec.seed_vector)
    if jitter_seed is None:
        dx = dy = rot = 0.0
        bright = 1.0
        noise = None
    else:
        seq = [jitter_seed] if isinstance(jitter_seed, int) else list(jitter_seed)
        jrng = np.random.default_rng([_JITTER_TAG] + seq)
        dx, dy = jrng.uniform(-1.25, 1.25, 2)
        rot = jrng.uniform(-np.deg2rad(5.0), np.deg2rad(5.0))
        bright = jrng.uniform(0.9, 1.1)
        noise = jrng.normal(0.0, 0.02 * 255.0, (IMG_H, IMG_W))

    yy, xx = np.mgrid[0:IMG_H, 0:IMG_W].astype(np.float64)
    cx0, cy0 = (IMG_W - 1) / 2.0, (IMG_H - 1) / 2.0
    xr = xx - cx0 - dx
    yr = yy - cy0 - dy
    cos_r, sin_r = np.cos(rot), np.sin(rot)
    xj = cos_r * xr + sin_r * yr
    yj = -sin_r * xr + cos_r * yr

    value = np.zeros((IMG_H, IMG_W))
    for g in range(_N_GRATINGS):
        u = xj * np.cos(prm["theta"][g]) + yj * np.sin(prm["theta"][g])
        value += prm["amp"][g] * np.sin(2.0 * np.pi * prm["freq"][g] * u + prm["phase"][g])
    for b in range(_N_BLOBS):
        d2 = (xj - (prm["cx"][b] - cx0)) ** 2 + (yj - (prm["cy"][b] - cy0)) ** 2
        value += _BLOB_SIGNS[b] * prm["bamp"][b] * np.exp(-d2 / (2.0 * prm["bsig"][b] ** 2))

    px = 128.0 + _PATTERN_GAIN * value * bright
    if noise is not None:
        px = px + noise
    return np.clip(np.rint(px), 0, 255).astype(np.uint8).reshape(IMG_C, IMG_H, IMG_W)


# ---------------------------------------------------------------------------
# degradation

def _gaussian_blur(img, sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    k = kernel.size

    def pass1d(a):
        padded = np.pad(a, ((0, 0), (radius, radius)), mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)
        return win @ kernel

    img = pass1d(img)
    return pass1d(img.T).T


def _bilinear_up_matrix(small, big):
    # sample positions of the block means sit at block centers
    centers = (np.arange(small) + 0.5) * (big / small) - 0.5
    mat = np.zeros((big, small))
    for i in range(big):
        pos = np.clip(i, centers[0], centers[-1])
        j = int(np.searchsorted(centers, pos, side="right")) - 1
        j = min(max(j, 0), small - 2)
        w = (pos - centers[j]) / (centers[j + 1] - centers[j])
        mat[i, j] = 1.0 - w
        mat[i, j + 1] = w
    return mat


_UP32 = _bilinear_up_matrix(8, 32)


def attenuate(image, keep):
    """Scale signal toward mid-gray, keeping the given fraction."""
    v = image.astype(np.float64)
    return np.clip(np.rint(128.0 + keep * (v - 128.0)), 0, 255).astype(np.uint8)


def degrade_uc(image, severity, rng):
    """Unconstrained-domain degradation at the given severity in [0,1].

    Pipeline: gaussian blur (sigma = 0.5 + 2.5*severity), 4x down-up
    resample when severity > 0.5, additive noise (0.05*severity of
    range), contrast scaling by (1 - 0.5*severity). Severity 0 is an
    exact copy.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"degrade_uc: severity {severity} outside [0,1]")
    if severity == 0.0:
        return image.copy()
    v = image.reshape(IMG_H, IMG_W).astype(np.float64)
    v = _gaussian_blur(v, 0.5 + 2.5 * severity)
    if severity > 0.5:
        small = v.reshape(8, 4, 8, 4).mean(axis=(1, 3))
        v = _UP32 @ small @ _UP32.T
    v = v + rng.normal(0.0, 0.05 * severity * 255.0, v.shape)
    v = 128.0 + (1.0 - 0.5 * severity) * (v - 128.0)
    return np.clip(np.rint(v), 0, 255).astype(np.uint8).reshape(image.shape)


# ---------------------------------------------------------------------------
# binary container

_RECORD_DTYPE = np.dtype([
    ("label", "<i4"),
    ("tag", "u1"),
    ("pixels", "u1", (IMG_C * IMG_H * IMG_W,)),
])


def write_dataset(path, images, labels, tags):
    """Write records to the binary container; see read_dataset for layout."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n = images.shape[0]
    if images.shape != (n, IMG_C, IMG_H, IMG_W):
        raise ValueError(f"write_dataset: images shape {images.shape}")
    labels = np.asarray(labels, dtype=np.int32)
    tags = np.asarray(tags, dtype=np.uint8)
    if labels.shape != (n,) or tags.shape != (n,):
        raise ValueError("write_dataset: labels/tags length mismatch")
    records = np.empty(n, dtype=_RECORD_DTYPE)
    records["label"] = labels
    records["tag"] = tags
    records["pixels"] = images.reshape(n, -1)
    header = MAGIC + struct.pack("<IQIII", VERSION, n, IMG_C, IMG_H, IMG_W)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())
    return path


@dataclass
class DatasetRecords:
    images: np.ndarray  # uint8 [N,1,32,32]
    labels: np.ndarray  # int32 [N], -1 for unlabeled
    tags: np.ndarray    # uint8 [N]

    def __len__(self):
        return self.images.shape[0]


def read_dataset(path):
    """Read the full container, tags included (audit/eval use only).

    Layout, little-endian: magic "TSAD", version u32, record_count u64,
    img_c u32, img_h u32, img_w u32, then per record label i32, tag u8,
    pixels u8[c*h*w].
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28:
        raise DatasetFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count, c, h, w = struct.unpack("<IQIII", blob[4:28])
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if (c, h, w) != (IMG_C, IMG_H, IMG_W):
        raise DatasetFormatError(f"{path}: unexpected image dims {(c, h, w)}")
    want = 28 + count * _RECORD_DTYPE.itemsize
    if len(blob) != want:
        raise DatasetFormatError(
            f"{path}: size {len(blob)} does not match {count} records ({want})")
    records = np.frombuffer(blob, dtype=_RECORD_DTYPE, offset=28)
    images = records["pixels"].reshape(count, IMG_C, IMG_H, IMG_W).copy()
    return DatasetRecords(images=images,
                          labels=records["label"].astype(np.int32),
                          tags=records["tag"].copy())


class UnlabeledImages:
    """Trainer-facing unlabeled reader: images only, no tags, no labels.

    The container stores ground-truth degradation tags for auditing; this
    class is the firewall that keeps them out of the training path.
    """

    def __init__(self, path):
        rec = read_dataset(path)
        self._images = rec.images

    @property
    def images(self):
        return self._images

    def __len__(self):
        return self._images.shape[0]


# ---------------------------------------------------------------------------
# generation

def make_identities(count, rng, start_id=0):
    vecs = rng.uniform(-1.0, 1.0, (count, SEED_DIM))
    for i in range(count):
        for j in range(i + 1, count):
            if np.abs(vecs[i] - vecs[j]).max() < 1e-9:
                raise RuntimeError(f"identity seed collision between {i} and {j}")
    return [IdentitySpec(id=start_id + i, seed_vector=vecs[i]) for i in range(count)]


def _is_ur(index, total, ur_count):
    # spreads exactly ur_count hits evenly over [0, total)
    return (index + 1) * ur_count // total > index * ur_count // total


def _sidecar_text(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def generate_dataset(cfg, out_dir):
    """Write labeled/unlabeled splits (and eval splits when configured).

    Returns a dict of paths. Every record's randomness is derived from
    (cfg.seed, split, record_index), so output is byte-deterministic and
    independent of generation order.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    id_rng = np.random.default_rng([cfg.seed, 0x1D5])
    total_ids = cfg.num_identities + cfg.unlabeled_identities + cfg.eval_identities
    identities = make_identities(total_ids, id_rng)
    labeled_ids = identities[:cfg.num_identities]
    unlabeled_ids = identities[cfg.num_identities:cfg.num_identities + cfg.unlabeled_identities]
    eval_ids = identities[cfg.num_identities + cfg.unlabeled_identities:]

    paths = {}

    n = cfg.num_identities * cfg.imgs_per_id
    images = np.empty((n, IMG_C, IMG_H, IMG_W), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int32)
    for i in range(n):
        ident = labeled_ids[i // cfg.imgs_per_id]
        images[i] = render_identity(ident, jitter_seed=(cfg.seed, _SPLIT_LABELED, i))
        labels[i] = ident.id
    paths["labeled"] = write_dataset(
        os.path.join(out_dir, "labeled.tsad"), images, labels, np.full(n, TAG_SC))

    m = cfg.unlabeled_size
    ur_count = int(round(cfg.ur_fraction * m))
    images = np.empty((m, IMG_C, IMG_H, IMG_W), dtype=np.uint8)
    tags = np.empty(m, dtype=np.uint8)
    for j in range(m):
        rec_rng = np.random.default_rng([cfg.seed, _SPLIT_UNLABELED, j, 0xDE6])
        # identity drawn per record: keeps the planted-UR pattern
        # uncorrelated with identity round-robin
        ident = unlabeled_ids[int(rec_rng.integers(cfg.unlabeled_identities))]
        img = render_identity(ident, jitter_seed=(cfg.seed, _SPLIT_UNLABELED, j))
        if _is_ur(j, m, ur_count):
            severity = rec_rng.uniform(0.95, 1.0)
            img = attenuate(img, _UR_KEEP)
            tags[j] = TAG_UC_UNRECOGNIZABLE
        else:
            severity = rec_rng.uniform(0.2, 0.8)
            tags[j] = TAG_UC_RECOGNIZABLE
        images[j] = degrade_uc(img, severity, rec_rng)
    paths["unlabeled"] = write_dataset(
        os.path.join(out_dir, "unlabeled.tsad"), images, np.full(m, -1, np.int32), tags)

    if cfg.eval_identities > 0:
        k = cfg.eval_identities
        images = np.empty((k, IMG_C, IMG_H, IMG_W), dtype=np.uint8)
        labels = np.empty(k, dtype=np.int32)
        for i, ident in enumerate(eval_ids):
            images[i] = render_identity(ident, jitter_seed=None)
            labels[i] = ident.id
        paths["gallery"] = write_dataset(
            os.path.join(out_dir, "gallery.tsad"), images, labels, np.full(k, TAG_SC))

        p = k * cfg.eval_probes_per_id
        images = np.empty((p, IMG_C, IMG_H, IMG_W), dtype=np.uint8)
        labels = np.empty(p, dtype=np.int32)
        for i in range(p):
            ident = eval_ids[i // cfg.eval_probes_per_id]
            img = render_identity(ident, jitter_seed=(cfg.seed, _SPLIT_PROBES, i))
            rec_rng = np.random.default_rng([cfg.seed, _SPLIT_PROBES, i, 0xDE6])
            severity = rec_rng.uniform(0.2, 0.8)
            images[i] = degrade_uc(img, severity, rec_rng)
            labels[i] = ident.id
        paths["probes"] = write_dataset(
            os.path.join(out_dir, "probes.tsad"), images, labels,
            np.full(p, TAG_UC_RECOGNIZABLE))

    sidecar = os.path.join(out_dir, "generation.cfg")
    with open(sidecar, "w") as fh:
        fh.write(_sidecar_text(cfg))
    paths["sidecar"] = sidecar
    return paths
