"""Flat text config files and run manifests.

Config syntax: one `key = value` per line, `#` starts a comment,
dotted keys reach nested sections (adversary.beta, arch.channels).
Unknown keys are rejected. Missing keys take the TrainConfig defaults,
so an empty file parses to the full default configuration.
"""

import dataclasses
import hashlib
import json
import os

from .adversary import AdversaryConfig
from .losses import MarginSpec
from .model import ArchitectureConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# dotted key -> type tag; order here is the canonical serialization order
_SCHEMA = (
    ("num_classes", "int"),
    ("epochs", "int"),
    ("batch_size", "int"),
    ("lr", "float"),
    ("lr_decay_epochs", "int_tuple"),
    ("lr_decay_factor", "float"),
    ("weight_decay", "float"),
    ("momentum", "float"),
    ("ema_alpha", "float"),
    ("ur_top_k", "int"),
    ("styled_loss_weight", "float"),
    ("seed", "int"),
    ("dtype", "str"),
    ("debug_checks", "bool"),
    ("margin.kind", "str"),
    ("margin.margin", "float"),
    ("margin.scale", "float"),
    ("adversary.mode", "str"),
    ("adversary.pgd_steps", "int"),
    ("adversary.pgd_step_size", "float"),
    ("adversary.beta", "float"),
    ("adversary.rule", "str"),
    ("arch.in_channels", "int"),
    ("arch.input_size", "int"),
    ("arch.channels", "int_tuple"),
    ("arch.strides", "int_tuple"),
    ("arch.split_index", "int"),
    ("arch.embed_dim", "int"),
    ("arch.kernel", "int"),
)
_TYPE_OF = dict(_SCHEMA)


def _parse_value(key, raw, tag, line_no):
    def bad(expected):
        raise ConfigError(f"line {line_no}: {key}: expected {expected}, got {raw!r}")

    if tag == "int":
        try:
            return int(raw)
        except ValueError:
            bad("int")
    if tag == "float":
        try:
            return float(raw)
        except ValueError:
            bad("float")
    if tag == "bool":
        if raw == "true":
            return True
        if raw == "false":
            return False
        bad("bool (true/false)")
    if tag == "str":
        return raw
    if tag == "int_tuple":
        if raw == "":
            return ()
        try:
            return tuple(int(p.strip()) for p in raw.split(","))
        except ValueError:
            bad("comma-separated ints")
    raise AssertionError(f"unhandled type tag {tag}")


def _format_value(value, tag):
    if tag == "bool":
        return "true" if value else "false"
    if tag == "int_tuple":
        return ", ".join(str(int(v)) for v in value)
    if tag == "float":
        return repr(float(value))
    return str(value)


def parse_config_text(text):
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPE_OF:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, _TYPE_OF[key], line_no)

    top = {}
    nested = {"margin": {}, "adversary": {}, "arch": {}}
    for key, val in values.items():
        if "." in key:
            section, field = key.split(".", 1)
            nested[section][field] = val
        else:
            top[key] = val
    try:
        return TrainConfig(
            margin=MarginSpec(**nested["margin"]),
            adversary=AdversaryConfig(**nested["adversary"]),
            arch=ArchitectureConfig(**nested["arch"]),
            **top)
    except ValueError as e:
        raise ConfigError(str(e))


def parse_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def _flatten(cfg):
    flat = dict(dataclasses.asdict(cfg))
    for section in ("margin", "adversary", "arch"):
        for field, val in flat.pop(section).items():
            flat[f"{section}.{field}"] = val
    return flat


def serialize_config(cfg):
    """Canonical text form; parse_config_text(serialize_config(c)) == c."""
    flat = _flatten(cfg)
    lines = [f"{key} = {_format_value(flat[key], tag)}" for key, tag in _SCHEMA]
    return "\n".join(lines) + "\n"


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, run_id, config_text, inputs=None, artifacts=None):
    """Record a run: config snapshot plus sha256 of every referenced file.

    Paths in the manifest are stored relative to the manifest directory.
    """
    base = os.path.dirname(os.path.abspath(path))

    def entry(p):
        return {"path": os.path.relpath(os.path.abspath(p), base),
                "sha256": sha256_file(p)}

    doc = {
        "run_id": run_id,
        "config": config_text,
        "inputs": {name: entry(p) for name, p in (inputs or {}).items()},
        "artifacts": {name: entry(p) for name, p in (artifacts or {}).items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return doc


def verify_manifest(path):
    """Check every file the manifest references still exists and hash-matches."""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    for group in ("inputs", "artifacts"):
        for name, entry in doc.get(group, {}).items():
            full = os.path.join(base, entry["path"])
            if not os.path.exists(full):
                raise ManifestError(f"manifest {group[:-1]} {name!r}: missing file {entry['path']}")
            actual = sha256_file(full)
            if actual != entry["sha256"]:
                raise ManifestError(
                    f"manifest {group[:-1]} {name!r}: hash mismatch for {entry['path']}")
    return doc
