"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime failure. The
TSA_DETERMINISTIC=1 environment variable pins BLAS to one thread (set
here, before numpy loads) and zeroes wall-time metrics so repeated runs
are byte-identical.
"""

import os
import sys

if os.environ.get("TSA_DETERMINISTIC") == "1":
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import dataclasses
import json

import numpy as np

from . import autodiff as ad
from .config import parse_config, serialize_config, write_manifest
from .data import (TAG_SC, TAG_UC_RECOGNIZABLE, TAG_UC_UNRECOGNIZABLE,
                   GenConfig, UnlabeledImages, generate_dataset, read_dataset)
from .evaluation import eval_report, style_swap_eval
from .recog import select_ur
from .style import extract_stats, export_stats_csv
from .trainer import TrainConfig, fit, load_state, normalize_images

_TAG_NAMES = {TAG_SC: "sc", TAG_UC_RECOGNIZABLE: "uc_rec",
              TAG_UC_UNRECOGNIZABLE: "uc_ur"}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip() != "")


def build_parser():
    p = _Parser(prog="tsa", description="Style-adversarial training toolkit")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic benchmark dataset")
    g.add_argument("--out", required=True)
    for flag, typ in (("--num-identities", int), ("--imgs-per-id", int),
                      ("--unlabeled-size", int), ("--ur-fraction", float),
                      ("--unlabeled-identities", int), ("--eval-identities", int),
                      ("--eval-probes-per-id", int), ("--seed", int)):
        g.add_argument(flag, type=typ, default=None)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--mode", choices=["targeted", "non_targeted", "off"], default=None)
    t.add_argument("--beta", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None)

    e = sub.add_parser("eval", help="identification/verification report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ranks", type=_int_list, default=(1, 5))
    e.add_argument("--far", type=_float_list, default=(0.01, 0.1))
    e.add_argument("--json-out", default=None)

    s = sub.add_parser("style-swap-eval", help="rank accuracy under swapped styles")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rank", type=int, default=1)
    s.add_argument("--json-out", default=None)

    u = sub.add_parser("ur-audit", help="score the low-entropy detector against planted tags")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--data", required=True)
    u.add_argument("--top-k", type=int, default=None)
    u.add_argument("--json-out", default=None)

    x = sub.add_parser("export-stats", help="dump per-sample split-point statistics to CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", choices=["labeled", "unlabeled", "gallery", "probes"],
                   default="unlabeled")
    x.add_argument("--limit", type=int, default=None)

    ab = sub.add_parser("ablate-beta", help="train+eval over a beta grid")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--grid", type=_float_list, required=True)
    ab.add_argument("--config", default=None)
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--epochs", type=int, default=None)

    am = sub.add_parser("ablate-mode", help="train+eval over adversary modes")
    am.add_argument("--data", required=True)
    am.add_argument("--out", required=True)
    am.add_argument("--modes", default="off,non_targeted,targeted")
    am.add_argument("--config", default=None)
    am.add_argument("--seed", type=int, default=None)
    am.add_argument("--epochs", type=int, default=None)
    return p


def _base_config(args):
    cfg = parse_config(args.config) if args.config else TrainConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    adv = {}
    if getattr(args, "mode", None) is not None:
        adv["mode"] = args.mode
    if getattr(args, "beta", None) is not None:
        adv["beta"] = args.beta
    if adv:
        updates["adversary"] = dataclasses.replace(cfg.adversary, **adv)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _dataset_path(data_dir, split):
    path = os.path.join(data_dir, split + ".tsad")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {split} split at {path}")
    return path


def _run_training(cfg, data_dir, out_dir, resume=None):
    labeled = read_dataset(_dataset_path(data_dir, "labeled"))
    x = normalize_images(labeled.images)
    y = labeled.labels.astype(np.int64)
    cfg = dataclasses.replace(cfg, num_classes=int(y.max()) + 1)
    xu = None
    if cfg.adversary.mode == "targeted":
        xu = normalize_images(UnlabeledImages(_dataset_path(data_dir, "unlabeled")).images)
    fit(cfg, x, y, xu, out_dir=out_dir, resume_from=resume)
    last_ckpt = os.path.join(out_dir, f"ckpt_epoch_{cfg.epochs - 1:03d}.bin")
    inputs = {"labeled": _dataset_path(data_dir, "labeled")}
    if xu is not None:
        inputs["unlabeled"] = _dataset_path(data_dir, "unlabeled")
    write_manifest(os.path.join(out_dir, "manifest.json"),
                   run_id=os.path.basename(os.path.normpath(out_dir)),
                   config_text=serialize_config(cfg), inputs=inputs,
                   artifacts={"metrics": os.path.join(out_dir, "metrics.jsonl"),
                              "checkpoint": last_ckpt})
    return last_ckpt


def _load_eval_split(data_dir):
    gallery = read_dataset(_dataset_path(data_dir, "gallery"))
    probes = read_dataset(_dataset_path(data_dir, "probes"))
    return (normalize_images(gallery.images), gallery.labels.astype(np.int64),
            normalize_images(probes.images), probes.labels.astype(np.int64))


def _emit(doc, json_out):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if json_out:
        with open(json_out, "w") as f:
            f.write(text + "\n")
    print(text)


def cmd_gen_data(args):
    overrides = {name: getattr(args, name) for name in
                 ("num_identities", "imgs_per_id", "unlabeled_size", "ur_fraction",
                  "unlabeled_identities", "eval_identities", "eval_probes_per_id",
                  "seed")
                 if getattr(args, name) is not None}
    paths = generate_dataset(GenConfig(**overrides), args.out)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


def cmd_train(args):
    cfg = _base_config(args)
    last_ckpt = _run_training(cfg, args.data, args.out, resume=args.resume)
    print(f"checkpoint: {last_ckpt}")
    print(f"metrics: {os.path.join(args.out, 'metrics.jsonl')}")
    return 0


def cmd_eval(args):
    state, _, _ = load_state(args.ckpt)
    gx, gids, px, pids = _load_eval_split(args.data)
    report = eval_report(state.model, gx, gids, px, pids,
                         far_targets=args.far, ranks=args.ranks)
    print(f"gallery {report['num_gallery']}  probes {report['num_probes']}")
    for k in sorted(report["rank"], key=int):
        print(f"rank@{k}: {report['rank'][k]:.4f}")
    for far in report["tar_at_far"]:
        print(f"tar@far={far}: {report['tar_at_far'][far]:.4f}")
    if args.json_out:
        _emit(report, args.json_out)
    return 0


def cmd_style_swap_eval(args):
    state, _, _ = load_state(args.ckpt)
    gx, gids, px, pids = _load_eval_split(args.data)
    donors = normalize_images(UnlabeledImages(_dataset_path(args.data, "unlabeled")).images)
    out = style_swap_eval(state.model, gx, gids, px, pids, donors,
                          seed=args.seed, rank=args.rank)
    _emit(out, args.json_out)
    return 0


def cmd_ur_audit(args):
    state, _, _ = load_state(args.ckpt)
    records = read_dataset(_dataset_path(args.data, "unlabeled"))
    planted = np.flatnonzero(records.tags == TAG_UC_UNRECOGNIZABLE)
    if planted.size == 0:
        raise ValueError("ur-audit: dataset has no planted unrecognizable samples")
    top_k = args.top_k if args.top_k is not None else planted.size

    model = state.model
    dt = model.parameters()[0].data.dtype
    images = normalize_images(records.images)
    raw = []
    with ad.no_grad():
        for start in range(0, images.shape[0], 256):
            xb = np.ascontiguousarray(images[start:start + 256], dtype=dt)
            raw.append(model.embed_raw(model.forward_e1(ad.Tensor(xb))).data)
    raw = np.concatenate(raw, axis=0)
    selected = np.asarray(select_ur(ad.Tensor(raw), top_k))
    true_pos = int(np.isin(selected, planted).sum())
    doc = {"planted": int(planted.size), "selected": int(top_k),
           "true_positives": true_pos,
           "precision": true_pos / top_k,
           "recall": true_pos / planted.size}
    _emit(doc, args.json_out)
    return 0


def cmd_export_stats(args):
    state, _, _ = load_state(args.ckpt)
    records = read_dataset(_dataset_path(args.data, args.split))
    images = normalize_images(records.images)
    if args.limit is not None:
        images = images[:args.limit]
        tags = records.tags[:args.limit]
    else:
        tags = records.tags
    model = state.model
    dt = model.parameters()[0].data.dtype
    rows = []
    with ad.no_grad():
        for start in range(0, images.shape[0], 256):
            xb = np.ascontiguousarray(images[start:start + 256], dtype=dt)
            stats = extract_stats(model.forward_e1(ad.Tensor(xb)))
            for i in range(xb.shape[0]):
                tag = _TAG_NAMES.get(int(tags[start + i]), "unknown")
                rows.append((tag, stats.mu.data[i], stats.sigma.data[i]))
    export_stats_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _summary_table(rows, key_name):
    lines = [f"{key_name:>14}  {'rank@1':>8}  {'rank@5':>8}  {'tar@0.1':>8}"]
    for key, rep in rows:
        r1 = rep["rank"].get("1", float("nan"))
        r5 = rep["rank"].get("5", float("nan"))
        tar = rep["tar_at_far"].get("0.1", float("nan"))
        lines.append(f"{key:>14}  {r1:8.4f}  {r5:8.4f}  {tar:8.4f}")
    return "\n".join(lines)


def _ablate(args, variants, apply_variant, key_name):
    base = _base_config(args)
    rows = []
    summary = {}
    for key, variant in variants:
        cfg = apply_variant(base, variant)
        run_dir = os.path.join(args.out, f"{key_name}_{key}")
        ckpt = _run_training(cfg, args.data, run_dir)
        state, _, _ = load_state(ckpt)
        gx, gids, px, pids = _load_eval_split(args.data)
        ranks = tuple(k for k in (1, 5) if k <= len(gids))
        rep = eval_report(state.model, gx, gids, px, pids, ranks=ranks)
        rows.append((key, rep))
        summary[key] = rep
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(_summary_table(rows, key_name))
    return 0


def cmd_ablate_beta(args):
    variants = [(f"{b:g}", b) for b in args.grid]

    def apply(cfg, beta):
        adv = dataclasses.replace(cfg.adversary, mode="targeted", beta=beta)
        return dataclasses.replace(cfg, adversary=adv)

    return _ablate(args, variants, apply, "beta")


def cmd_ablate_mode(args):
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    variants = [(m, m) for m in modes]

    def apply(cfg, mode):
        return dataclasses.replace(cfg, adversary=dataclasses.replace(
            cfg.adversary, mode=mode))

    return _ablate(args, variants, apply, "mode")


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "style-swap-eval": cmd_style_swap_eval,
    "ur-audit": cmd_ur_audit,
    "export-stats": cmd_export_stats,
    "ablate-beta": cmd_ablate_beta,
    "ablate-mode": cmd_ablate_mode,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
