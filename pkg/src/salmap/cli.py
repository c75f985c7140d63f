"""Command-line front end: scene generation, training, attribution, metric
evaluation, and report rendering.

Config precedence is flags > --config JSON file > built-in defaults, and the
effective config is written next to every output for provenance. All
randomness derives from the single --seed through purpose tags; nothing reads
global RNG state or the clock. Exit codes: 0 ok, 2 config, 3 I/O, 4 numeric,
with one JSON error line on stderr for nonzero exits.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attribution, metrics, tensors, tinycnn
from . import dataset as scenes
from .rng import derive_key

logger = logging.getLogger("salmap")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

METHODS = ("lafam", "gradcam", "relax")


class ConfigError(ValueError):
    """Bad flag combination, bad config value, or missing required option."""


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2) with plain usage text; route through the
    # shared error channel so stderr stays machine-readable
    def error(self, message):
        raise ConfigError(message)


# Per-command mergeable options and their built-in defaults. None means
# "no default"; required ones are checked after merging.
_DEFAULTS = {
    "generate-data": {
        "out": None,
        "seed": 0,
        "train_count": 800,
        "eval_count": 200,
        "image_size": 64,
        "noise_level": 0.3,
        "two_object_fraction": 0.0,
    },
    "train": {
        "manifest": None,
        "out": None,
        "seed": 0,
        "epochs": 12,
        "learning_rate": 0.2,
        "batch_size": 16,
    },
    "attribute": {
        "method": "lafam",
        "out": None,
        "activations": None,
        "checkpoint": None,
        "manifest": None,
        "seed": 0,
        "threads": 1,
        "layer": None,
        "class_index": None,
        "masks_n": attribution.DEFAULT_MASK_COUNT,
        "masks_p": attribution.DEFAULT_MASK_P,
        "cells": attribution.DEFAULT_MASK_CELLS,
        "fill_value": 0.0,
        "smoothing": "bilinear",
        "out_size": None,
    },
    "eval": {
        "manifest": None,
        "saliency": None,
        "method": None,
        "out": None,
        "top_k": metrics.DEFAULT_TOP_K,
    },
    "report": {
        "inputs": None,
        "out": None,
    },
}


def build_parser() -> _Parser:
    parser = _Parser(
        prog="salmap",
        description="Activation-based saliency maps and localization metrics "
        "on a small self-contained CNN.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with option defaults for this command")
        p.add_argument("--out", help="output directory or file")
        return p

    g = add("generate-data", "write synthetic scenes, masks, and manifests")
    g.add_argument("--seed", type=int)
    g.add_argument("--train-count", type=int)
    g.add_argument("--eval-count", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--noise-level", type=float)
    g.add_argument("--two-object-fraction", type=float)

    t = add("train", "fit the small CNN on a generated split")
    t.add_argument("--manifest", help="training manifest (JSON lines)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-size", type=int)

    a = add("attribute", "compute saliency maps")
    a.add_argument("--method", choices=METHODS)
    a.add_argument("--activations", help="external activation tensor file (lafam only)")
    a.add_argument("--checkpoint", help="model checkpoint")
    a.add_argument("--manifest", help="dataset manifest to attribute over")
    a.add_argument("--seed", type=int)
    a.add_argument("--threads", type=int)
    a.add_argument("--layer", type=int, help="capture layer index (default: last)")
    a.add_argument("--class-index", type=int, help="gradcam class (default: predicted)")
    a.add_argument("--masks-n", type=int)
    a.add_argument("--masks-p", type=float)
    a.add_argument("--cells", type=int)
    a.add_argument("--fill-value", type=float)
    a.add_argument("--smoothing", choices=("bilinear", "nearest"))
    a.add_argument("--out-size", type=int, nargs=2, metavar=("H", "W"))

    e = add("eval", "score saliency maps against ground-truth masks")
    e.add_argument("--manifest")
    e.add_argument("--saliency", help="directory of saliency tensor files")
    e.add_argument("--method", choices=METHODS)
    e.add_argument("--top-k", type=int)

    r = add("report", "side-by-side method/metric table from aggregate files")
    r.add_argument("inputs", nargs="*", help="aggregate JSON files, one per method")

    return parser


def _effective_config(args: argparse.Namespace, command: str) -> dict:
    cfg = dict(_DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None and value != []:
            cfg[key] = value
    return cfg


def _require(cfg: dict, command: str, *keys: str):
    missing = [k for k in keys if cfg.get(k) in (None, [])]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ConfigError(f"{command} requires {flags}")


def _echo_config(target: Path, command: str, cfg: dict, single_file: bool):
    """Effective config next to the outputs: <dir>/run_config.json, or a
    sibling <file>.run_config.json in single-file mode."""
    doc = {"command": command, "config": {k: cfg[k] for k in sorted(cfg)}}
    path = (
        target.with_name(target.name + ".run_config.json")
        if single_file
        else target / "run_config.json"
    )
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def cmd_generate_data(cfg: dict) -> None:
    _require(cfg, "generate-data", "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", cfg["train_count"]), ("eval", cfg["eval_count"])):
        manifest = scenes.generate_dataset(
            seed=cfg["seed"],
            count=count,
            out_dir=out,
            split=split,
            image_size=cfg["image_size"],
            noise_level=cfg["noise_level"],
            two_object_fraction=cfg["two_object_fraction"],
        )
        logger.info("wrote %s (%d samples)", manifest, count)
    _echo_config(out, "generate-data", cfg, single_file=False)


def cmd_train(cfg: dict) -> None:
    _require(cfg, "train", "manifest", "out")
    pairs = scenes.load_pairs(cfg["manifest"])
    if not pairs:
        raise ConfigError(f"manifest {cfg['manifest']} holds no samples")
    in_channels = pairs[0][0].shape[0]
    classes = len(scenes.CLASS_SPECS)
    model = tinycnn.default_model(cfg["seed"], in_channels=in_channels, classes=classes)
    result = tinycnn.train_sgd(
        model,
        pairs,
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
    )
    ckpt = Path(cfg["out"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tinycnn.save_checkpoint(ckpt, result.model)
    logger.info("epoch losses: %s", ["%.4f" % v for v in result.epoch_losses])
    _echo_config(ckpt, "train", cfg, single_file=True)


def _attribute_volume(cfg: dict) -> None:
    """Single external activation tensor -> single saliency file."""
    if cfg["method"] != "lafam":
        raise ConfigError(
            f"--activations supports only lafam; {cfg['method']} needs a "
            "checkpoint (gradients or an encoder)"
        )
    tensor = tensors.read_tensor(cfg["activations"])
    if not isinstance(tensor, tensors.ActivationVolume):
        raise ConfigError("--activations must point at a 3-d activation volume")
    out_h, out_w = cfg["out_size"] or (tensor.height, tensor.width)
    result = attribution.lafam(tensor, out_h, out_w, layer_index=cfg["layer"])
    out = Path(cfg["out"])
    if out.suffix != ".npy":
        out.mkdir(parents=True, exist_ok=True)
        out = out / (Path(cfg["activations"]).stem + ".lafam.npy")
    out.parent.mkdir(parents=True, exist_ok=True)
    attribution.write_result(out, result)
    _echo_config(out, "attribute", cfg, single_file=True)


def _attribute_dataset(cfg: dict) -> None:
    """Checkpoint + manifest -> one saliency file per sample, any method."""
    model = tinycnn.load_checkpoint(cfg["checkpoint"])
    records = scenes.read_manifest(cfg["manifest"])
    if not records:
        raise ConfigError(f"manifest {cfg['manifest']} holds no samples")
    base = Path(cfg["manifest"]).parent
    layer = cfg["layer"] if cfg["layer"] is not None else len(model.layers) - 1
    if not 0 <= layer < len(model.layers):
        raise ConfigError(f"--layer {layer} out of range for a {len(model.layers)}-layer model")
    method = cfg["method"]

    masks = None
    if method == "relax":
        probe = scenes.load_image(base / records[0]["image"])
        h, w = probe.shape[1:]
        masks = attribution.sample_masks(
            seed=derive_key(cfg["seed"], "attribute/masks"),
            n=cfg["masks_n"],
            cells_h=cfg["cells"],
            cells_w=cfg["cells"],
            p=cfg["masks_p"],
            out_h=h,
            out_w=w,
            smoothing=cfg["smoothing"],
        )

    def work(record: dict) -> attribution.AttributionResult:
        image = scenes.load_image(base / record["image"])
        h, w = image.shape[1:]
        if method == "lafam":
            trace = tinycnn.forward(model, image)
            return attribution.lafam(trace.layers[layer], h, w, layer_index=layer)
        if method == "gradcam":
            trace = tinycnn.forward(model, image)
            class_index = cfg["class_index"]
            if class_index is None:
                class_index = int(np.argmax(trace.logits))
            grads = tinycnn.backward_class_score(model, trace, class_index, layer)
            return attribution.gradcam(
                trace.layers[layer], grads, h, w, layer_index=layer, class_index=class_index
            )
        return attribution.relax(image, model, masks, fill_value=cfg["fill_value"])

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    # parallel compute, serialized in-order writes: byte-identical output at
    # any --threads value
    with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
        futures = [(rec["id"], pool.submit(work, rec)) for rec in records]
        for sample_id, future in futures:
            attribution.write_result(out / f"{sample_id}.{method}.npy", future.result())
    logger.info("wrote %d %s maps to %s", len(records), method, out)
    _echo_config(out, "attribute", cfg, single_file=False)


def cmd_attribute(cfg: dict) -> None:
    _require(cfg, "attribute", "out")
    if cfg["threads"] < 1:
        raise ConfigError("--threads must be at least 1")
    if cfg["activations"] is not None:
        if cfg["checkpoint"] is not None or cfg["manifest"] is not None:
            raise ConfigError("--activations excludes --checkpoint/--manifest")
        _attribute_volume(cfg)
        return
    if cfg["checkpoint"] is None or cfg["manifest"] is None:
        raise ConfigError("attribute needs --activations, or --checkpoint with --manifest")
    _attribute_dataset(cfg)


def cmd_eval(cfg: dict) -> None:
    _require(cfg, "eval", "manifest", "saliency", "method", "out")
    if cfg["top_k"] < 1:
        raise ConfigError("--top-k must be at least 1")
    records = scenes.read_manifest(cfg["manifest"])
    base = Path(cfg["manifest"]).parent
    saliency_dir = Path(cfg["saliency"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    ids, rows = [], []
    skipped = 0
    for record in records:
        # ground truth covering several classes is ambiguous for
        # single-label localization; such samples are dropped
        if len(record.get("classes", [record["label"]])) > 1:
            skipped += 1
            continue
        mask = scenes.load_mask(base / record["mask"])
        tensor = tensors.read_tensor(saliency_dir / f"{record['id']}.{cfg['method']}.npy")
        if not isinstance(tensor, tensors.RawGrid):
            raise ConfigError(f"saliency file for {record['id']} is not a 2-d map")
        ids.append(record["id"])
        rows.append(metrics.evaluate_sample(tensors.SaliencyMap(tensor.values), mask, cfg["top_k"]))
    if skipped:
        logger.info("skipped %d multi-class samples", skipped)
    if not rows:
        raise ConfigError("no single-class samples to evaluate")

    report = metrics.aggregate(rows)
    metrics.write_per_sample_csv(out / "per_sample.csv", cfg["method"], ids, rows)
    metrics.write_aggregate_json(out / "aggregate.json", cfg["method"], report)
    _echo_config(out, "eval", cfg, single_file=False)


def cmd_report(cfg: dict) -> None:
    _require(cfg, "report", "inputs", "out")
    aggregates = []
    for path in cfg["inputs"]:
        with open(path) as fh:
            aggregates.append(json.load(fh))
    csv_text, plain_text = metrics.render_report(aggregates)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(csv_text)
    (out / "report.txt").write_text(plain_text)
    _echo_config(out, "report", cfg, single_file=False)


_COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _setup_logging():
    level_name = os.environ.get("SALMAP_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": str(exc)}),
          file=sys.stderr)
    logger.debug("failure detail", exc_info=exc)
    return code


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a command is required (see --help)")
        cfg = _effective_config(args, args.command)
        _COMMANDS[args.command](cfg)
        return EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except tensors.TensorFileError as exc:
        return _fail(EXIT_IO, "io", exc)
    except tinycnn.NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except RuntimeError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)


if __name__ == "__main__":
    sys.exit(main())
