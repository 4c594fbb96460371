"""Verification and identification metrics plus the style-swap probe.

Scoring is cosine similarity throughout; embeddings are unit-norm rows
so plain dot products suffice.
"""

import numpy as np

from . import autodiff as ad
from .style import adain, extract_stats

_UNIT_TOL = 1e-4


def tar_at_far(genuine_scores, impostor_scores, far):
    """True-accept rate at the smallest admissible impostor threshold.

    The threshold is the smallest observed impostor score whose
    strictly-greater impostor count stays within the FAR budget; a
    genuine pair is accepted when its score >= threshold. Ties at the
    threshold therefore count against TAR, not against FAR, which is
    what makes the small-sample behavior reproducible.
    """
    gen = np.asarray(genuine_scores, dtype=np.float64)
    imp = np.asarray(impostor_scores, dtype=np.float64)
    if gen.size == 0 or imp.size == 0:
        raise ValueError("tar_at_far: genuine and impostor scores must be non-empty")
    if not 0 < far <= 1:
        raise ValueError(f"tar_at_far: far must be in (0, 1], got {far}")
    imp_sorted = np.sort(imp)
    candidates = np.unique(imp_sorted)
    greater = imp.size - np.searchsorted(imp_sorted, candidates, side="right")
    admissible = greater <= far * imp.size
    if admissible.any():
        threshold = candidates[int(np.argmax(admissible))]
    else:
        threshold = np.inf
    return float(np.mean(gen >= threshold))


def _check_unit(name, arr):
    norms = np.linalg.norm(arr, axis=1)
    bad = np.abs(norms - 1.0) > _UNIT_TOL
    if bad.any():
        row = int(np.argmax(bad))
        raise ValueError(f"{name}: row {row} is not unit norm ({norms[row]:.6f})")


def rank_k(gallery, gallery_ids, probes, probe_ids, k):
    """Fraction of probes whose true id is among the k nearest gallery entries.

    Ties in similarity are resolved toward the lower gallery index.
    """
    gallery = np.asarray(gallery)
    probes = np.asarray(probes)
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if len(np.unique(gallery_ids)) != len(gallery_ids):
        raise ValueError("rank_k: gallery must have exactly one entry per identity")
    if not 1 <= k <= len(gallery_ids):
        raise ValueError(f"rank_k: k must be in [1, {len(gallery_ids)}], got {k}")
    _check_unit("rank_k: gallery", gallery)
    _check_unit("rank_k: probes", probes)
    missing = ~np.isin(probe_ids, gallery_ids)
    if missing.any():
        i = int(np.argmax(missing))
        raise ValueError(f"rank_k: probe {i} has id {probe_ids[i]} absent from gallery")

    scores = probes @ gallery.T
    order = np.argsort(-scores, axis=1, kind="stable")
    ranked_ids = gallery_ids[order]
    hit_pos = np.argmax(ranked_ids == probe_ids[:, None], axis=1)
    return float(np.mean(hit_pos < k))


def embed_dataset(model, images, batch_size=256):
    """Normalized embeddings for float images [N,1,S,S], batched."""
    images = np.asarray(images)
    dt = model.parameters()[0].data.dtype
    out = []
    with ad.no_grad():
        for start in range(0, images.shape[0], batch_size):
            xb = np.ascontiguousarray(images[start:start + batch_size], dtype=dt)
            out.append(model.forward_full(ad.Tensor(xb)).data)
    return np.concatenate(out, axis=0)


def embed_with_swapped_style(model, images, donor_images, donor_indices, batch_size=256):
    """Embed `images` with each sample's split-point statistics replaced
    by those of donor_images[donor_indices[i]]."""
    images = np.asarray(images)
    donor_images = np.asarray(donor_images)
    donor_indices = np.asarray(donor_indices)
    if donor_indices.shape != (images.shape[0],):
        raise ValueError("embed_with_swapped_style: one donor index per image required")
    dt = model.parameters()[0].data.dtype
    out = []
    with ad.no_grad():
        for start in range(0, images.shape[0], batch_size):
            sel = slice(start, start + batch_size)
            xb = np.ascontiguousarray(images[sel], dtype=dt)
            db = np.ascontiguousarray(donor_images[donor_indices[sel]], dtype=dt)
            h = model.forward_e1(ad.Tensor(xb))
            target = extract_stats(model.forward_e1(ad.Tensor(db)))
            out.append(model.forward_e2(adain(h, target)).data)
    return np.concatenate(out, axis=0)


def style_swap_eval(model, gallery_images, gallery_ids, probe_images, probe_ids,
                    unlabeled_images, seed=0, rank=1, batch_size=256):
    """Rank accuracy before and after swapping every eval sample's style
    with a randomly drawn unlabeled sample's statistics.

    A representation that leans on style collapses under the swap; the
    drop (delta = original - swapped) is the susceptibility measure.
    """
    unlabeled_images = np.asarray(unlabeled_images)
    if unlabeled_images.shape[0] == 0:
        raise ValueError("style_swap_eval: unlabeled donor set is empty")
    g_emb = embed_dataset(model, gallery_images, batch_size)
    p_emb = embed_dataset(model, probe_images, batch_size)
    original = rank_k(g_emb, gallery_ids, p_emb, probe_ids, rank)

    rng = np.random.default_rng([seed, 0x57A9])
    n_g = np.asarray(gallery_images).shape[0]
    n_p = np.asarray(probe_images).shape[0]
    donors_g = rng.integers(0, unlabeled_images.shape[0], size=n_g)
    donors_p = rng.integers(0, unlabeled_images.shape[0], size=n_p)
    g_swap = embed_with_swapped_style(model, gallery_images, unlabeled_images,
                                      donors_g, batch_size)
    p_swap = embed_with_swapped_style(model, probe_images, unlabeled_images,
                                      donors_p, batch_size)
    swapped = rank_k(g_swap, gallery_ids, p_swap, probe_ids, rank)
    return {"metric_original": original, "metric_swapped": swapped,
            "delta": original - swapped}


def eval_report(model, gallery_images, gallery_ids, probe_images, probe_ids,
                far_targets=(0.01, 0.1), ranks=(1, 5), batch_size=256):
    """Identification and verification summary as one JSON-friendly dict.

    Verification pairs are all probe x gallery combinations, genuine
    when the identities match.
    """
    g_emb = embed_dataset(model, gallery_images, batch_size)
    p_emb = embed_dataset(model, probe_images, batch_size)
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)

    report = {"num_gallery": int(len(gallery_ids)), "num_probes": int(len(probe_ids)),
              "rank": {}, "tar_at_far": {}}
    for k in ranks:
        report["rank"][str(k)] = rank_k(g_emb, gallery_ids, p_emb, probe_ids, k)
    scores = p_emb @ g_emb.T
    genuine_mask = probe_ids[:, None] == gallery_ids[None, :]
    genuine = scores[genuine_mask]
    impostor = scores[~genuine_mask]
    for far in far_targets:
        report["tar_at_far"][f"{far:g}"] = tar_at_far(genuine, impostor, far)
    return report
