"""Command-line entry points: train, eval and inspect-prototypes.

Configuration files are INI-style ``key = value`` lines with ``#`` comments.
Checkpoints are JSON documents holding the config, the vocabulary, every
named parameter tensor and the training history.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .model import Model, TrainConfig
from .molgraph import DatasetError, SmilesError, load_dataset
from .text_encoder import Vocabulary
from .trainer import evaluate, split_dataset, train

FORMAT_VERSION = 1
SPLITS = ("all", "train", "valid", "test")

log = logging.getLogger("protofuse")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------- config


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       delimiters=("=",), interpolation=None)
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    defaults = TrainConfig()
    known = set(TrainConfig.field_names())
    values = {}
    for key, raw in parser["config"].items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _coerce(key, raw.strip(), getattr(defaults, key))
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(text)


# ------------------------------------------------------------------ checkpoint


def checkpoint_dict(model: Model, history=()) -> dict:
    tensors = {name: {"shape": list(t.value.shape), "data": t.value.ravel().tolist()}
               for name, t in model.named_tensors().items()}
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocabulary": dict(model.vocab.token_to_id),
        "tensors": tensors,
        "history": [dict(row) for row in history],
        "target_mean": model.target_mean,
        "target_std": model.target_std,
    }


def dumps_checkpoint(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_checkpoint(path, model: Model, history=()) -> None:
    Path(path).write_text(dumps_checkpoint(checkpoint_dict(model, history)), encoding="utf-8")


def model_from_dict(doc: dict) -> tuple[Model, list[dict]]:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    try:
        config = TrainConfig(**doc["config"])
        vocab = Vocabulary({str(k): int(v) for k, v in doc["vocabulary"].items()})
        model = Model.init(config, vocab)
        stored = doc["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    params = model.named_tensors()
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(f"tensor names differ from config: missing={missing} unexpected={extra}")
    for name, t in params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if shape != t.value.shape or data.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: stored shape {shape} does not match expected {t.value.shape}")
        t.value = data.reshape(shape)
    model.target_mean = float(doc.get("target_mean", 0.0))
    model.target_std = float(doc.get("target_std", 1.0))
    return model, list(doc.get("history", []))


def load_checkpoint(path) -> tuple[Model, list[dict]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model_from_dict(doc)


# -------------------------------------------------------------------- helpers


def write_history(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_metric", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_metric"]), repr(row["lr"])])


def select_split(records, config: TrainConfig, split: str):
    if split == "all":
        return list(records)
    train_set, valid_set, test_set = split_dataset(records, config.seed, config.task_kind)
    return {"train": train_set, "valid": valid_set, "test": test_set}[split]


def prototype_rows(model: Model, records):
    """(sample_id, modality, flat_index, class, proto_index, activation) for retained entries."""
    if not records:
        return []
    alpha_g, alpha_t = model.distributions(records)
    per_class = model.space.per_class
    rows = []
    for i in range(len(records)):
        for modality, alpha in (("graph", alpha_g), ("text", alpha_t)):
            for flat in alpha.support[i]:
                flat = int(flat)
                rows.append((i, modality, flat, flat // per_class, flat % per_class,
                             float(alpha.probs.value[i, flat])))
    return rows


# ------------------------------------------------------------------- commands


def cmd_train(config_path, data_path, out_path) -> int:
    config = load_config(config_path)
    records, _ = load_dataset(data_path, config.task_kind)
    result = train(config, records)
    save_checkpoint(out_path, result.model, result.history)
    write_history(str(out_path) + ".history.csv", result.history)
    if result.best_epoch is not None:
        val = result.history[result.best_epoch - 1]["val_metric"]
    else:
        val = float("nan")
    print(f"val_metric={val!r}")
    return 0


def cmd_eval(checkpoint_path, data_path, out_path=None, split="all") -> int:
    model, _ = load_checkpoint(checkpoint_path)
    records, _ = load_dataset(data_path, model.config.task_kind)
    records = select_split(records, model.config, split)
    report = evaluate(model, records)
    out_path = out_path or str(checkpoint_path) + ".predictions.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "target", "prediction"])
        for i, t, p in report.rows():
            w.writerow([i, repr(float(t)), repr(float(p))])
    print(f"metric={report.metric!r}")
    return 0


def cmd_inspect_prototypes(checkpoint_path, data_path, out_path=None, split="all") -> int:
    model, _ = load_checkpoint(checkpoint_path)
    records, _ = load_dataset(data_path, model.config.task_kind)
    records = select_split(records, model.config, split)
    out_path = out_path or str(checkpoint_path) + ".prototypes.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "modality", "flat_index", "class", "proto_index", "activation_strength"])
        for sid, modality, flat, cls, idx, act in prototype_rows(model, records):
            w.writerow([sid, modality, flat, cls, idx, repr(act)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protofuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; history goes to <out>.history.csv")

    for name, helptext in (("eval", "evaluate a checkpoint"),
                           ("inspect-prototypes", "dump retained prototype activations")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", default=None, help="output CSV path")
        e.add_argument("--split", choices=SPLITS, default="all",
                       help="restrict to one split recomputed from the checkpoint seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.data, args.out)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data, args.out, args.split)
        return cmd_inspect_prototypes(args.checkpoint, args.data, args.out, args.split)
    except (ConfigError, CheckpointError, DatasetError, SmilesError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
