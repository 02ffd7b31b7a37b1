"""Command line entry point: ``siamese-lstm synth|train|eval|inspect --config run.json``.

The config is a single flat JSON object. Recipe keys have defaults, while
``lr``, ``lr_decay_per_epoch`` and (for the LSTM model) ``hidden_dim`` must
be given explicitly. Logs go to stderr, artifacts to the configured paths.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

import argparse
import difflib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .dataset import (Standardizer, SyntheticSpec, generate_synthetic, load_feature_set, make_split,
                      read_manifest, save_dataset)
from .errors import ConfigError, ReidError, ShapeError
from .evaluation import evaluate, fuse_scores, multi_query_collapse, score_matrix
from .inspect import GATES, export_heatmap, trace_gates
from .model import BaselineParams, SiameseParams, load_model, save_model
from .numerics import SeededRng
from .training import TrainConfig, mine_pairs, train

log = logging.getLogger("siamese_lstm")

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
SYNTH_KEYS = {f.name for f in fields(SyntheticSpec)}

DEFAULTS = {
    "seed": 0,
    "manifest": None,
    "out_dir": None,
    "synthetic": {},
    "feature_sets": None,
    "split_ratio": 0.5,
    "val_fraction": 0.1,
    "normalize": True,
    "model_kind": "lstm",
    "baseline_layers": 1,
    "baseline_widths": None,
    "baseline_activation": "tanh",
    "model_out": "model.bin",
    "model_in": None,
    "log_out": None,
    "config_out": None,
    "report_out": "report.json",
    "inspect_out": "gates",
    "gates": ["i", "f", "o"],
    "protocol": "single",
    # Recipe values fixed by the method; lr, lr_decay_per_epoch, hidden_dim have none.
    "margin": 0.5,
    "batch_size": 100,
    "rmsprop_decay": 0.95,
    "clip": 5.0,
    "max_epochs": 20,
    "patience": 3,
}
REQUIRED_FOR_TRAIN = ("lr", "lr_decay_per_epoch")
KNOWN_KEYS = set(DEFAULTS) | TRAIN_KEYS


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(raw)


def resolve_config(raw):
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    bad_synth = sorted(set(raw.get("synthetic", {})) - SYNTH_KEYS)
    if bad_synth:
        raise ConfigError(f"unknown config key: synthetic.{bad_synth[0]}")
    if raw.get("protocol", "single") not in ("single", "multi"):
        raise ConfigError(f"protocol must be 'single' or 'multi', got {raw['protocol']!r}")
    return {**DEFAULTS, **raw}


def train_config(cfg):
    for key in REQUIRED_FOR_TRAIN:
        if cfg.get(key) is None:
            raise ConfigError(f"missing required config key: {key}")
    if cfg["model_kind"] == "lstm" and cfg.get("hidden_dim") is None:
        raise ConfigError("missing required config key: hidden_dim")
    try:
        return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if cfg.get(k) is not None})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _manifest(cfg):
    if cfg["manifest"]:
        return Path(cfg["manifest"])
    if cfg["out_dir"]:
        return Path(cfg["out_dir"]) / "manifest.json"
    raise ConfigError("missing required config key: manifest")


def _feature_names(cfg):
    names = cfg["feature_sets"]
    if names is None:
        names = [e["name"] for e in read_manifest(_manifest(cfg))["feature_sets"]]
    if not names:
        raise ConfigError("feature_sets is empty")
    return list(names)


def _per_feature(path, name, multiple):
    path = Path(path)
    return path.with_name(f"{path.stem}.{name}{path.suffix}") if multiple else path


def _prepared(cfg, name):
    """Load a feature set, split it, and standardize with training statistics."""
    fs = load_feature_set(_manifest(cfg), name)
    split = make_split(fs, cfg["split_ratio"], cfg["seed"], cfg["val_fraction"])
    if cfg["normalize"]:
        fs = Standardizer.fit(fs.subset(split.train_items)).apply(fs)
    return fs, split


def cmd_synth(cfg, args):
    if not cfg["out_dir"] and not cfg["manifest"]:
        raise ConfigError("missing required config key: out_dir")
    spec = SyntheticSpec(**{"seed": cfg["seed"], **cfg["synthetic"]})
    fs = generate_synthetic(spec)
    try:
        path = save_dataset(_manifest(cfg), [fs])
    except OSError as exc:
        raise ConfigError(f"cannot write synthetic data: {exc}") from None
    log.info("wrote %d items (R=%d, d=%d) to %s", len(fs), fs.R, fs.d, path)


def _new_model(cfg, tc, fs):
    rng = SeededRng(cfg["seed"])
    if cfg["model_kind"] == "lstm":
        return SiameseParams.init(rng, fs.R, fs.d, tc.hidden_dim)
    if cfg["model_kind"] == "baseline":
        return BaselineParams.init(rng, fs.R, fs.d, cfg["baseline_layers"], cfg["baseline_widths"],
                                   cfg["baseline_activation"])
    raise ConfigError(f"model_kind must be 'lstm' or 'baseline', got {cfg['model_kind']!r}")


def cmd_train(cfg, args):
    tc = train_config(cfg)
    names = _feature_names(cfg)
    multiple = len(names) > 1
    for name in names:
        fs, split = _prepared(cfg, name)
        train_fs = fs.subset(split.train_items)
        pairs = mine_pairs(train_fs, cfg["seed"])
        val = (fs.subset(split.val_query), fs.subset(split.val_gallery)) if len(split.val_query) else None
        log.info("%s: %d pairs (%d positive) from %d training images", name, len(pairs), pairs.positives, len(train_fs))
        result = train(_new_model(cfg, tc, fs), train_fs, pairs, tc, val)
        model_path = _per_feature(cfg["model_out"], name, multiple)
        save_model(result.model, model_path)
        log_path = Path(cfg["log_out"]) if cfg["log_out"] else model_path.with_suffix(".log.jsonl")
        _per_feature(log_path, name, multiple and bool(cfg["log_out"])).write_text(result.log_lines())
        log.info("%s: best epoch %d written to %s", name, result.best_epoch, model_path)
    config_path = Path(cfg["config_out"]) if cfg["config_out"] else Path(cfg["model_out"]).with_suffix(".config.json")
    emitted = {**cfg, **tc.to_json()}
    config_path.write_text(json.dumps(emitted, indent=1, sort_keys=True) + "\n")


def _load_checked(cfg, name, fs, multiple):
    path = _per_feature(cfg["model_in"] or cfg["model_out"], name, multiple)
    if not path.is_file():
        raise ConfigError(f"model file not found: {path}")
    model = load_model(path)
    if (model.rows, model.input_dim) != (fs.R, fs.d):
        raise ShapeError(f"model {path} expects R={model.rows}, d={model.input_dim}; "
                         f"feature set {name!r} has R={fs.R}, d={fs.d}")
    return model


def cmd_eval(cfg, args):
    names = _feature_names(cfg)
    multiple = len(names) > 1
    matrices = []
    for name in names:
        fs, split = _prepared(cfg, name)
        model = _load_checked(cfg, name, fs, multiple)
        matrices.append(score_matrix(model, fs.subset(split.test_query), fs.subset(split.test_gallery)))
    matrix = fuse_scores(matrices) if multiple else matrices[0]
    if cfg["protocol"] == "multi":
        report = evaluate(multi_query_collapse(matrix), "multi-query")
    else:
        report = evaluate(matrix, "single-query")
    Path(cfg["report_out"]).write_text(json.dumps(report.to_json()) + "\n")
    log.info("rank-1 %.4f, mAP %.4f (%s)", report.rank1, report.map, report.protocol)


def cmd_inspect(cfg, args):
    if not args.image_id:
        raise ConfigError("inspect needs --image-id")
    names = _feature_names(cfg)
    name = names[0]
    fs, _ = _prepared(cfg, name)
    model = _load_checked(cfg, name, fs, len(names) > 1)
    if not isinstance(model, SiameseParams):
        raise ConfigError("inspect needs an LSTM model, not a baseline")
    if args.image_id not in fs.ids:
        near = difflib.get_close_matches(args.image_id, fs.ids, n=5, cutoff=0.0)
        raise ConfigError(f"unknown image id {args.image_id!r}; nearest ids: {', '.join(near)}")
    trace = trace_gates(model, fs.data[fs.index_of(args.image_id)], args.image_id)
    base = Path(cfg["inspect_out"])
    for gate in cfg["gates"]:
        if gate not in GATES:
            raise ConfigError(f"unknown gate {gate!r}")
        export_heatmap(trace, gate, base.with_name(f"{base.name}_{gate}.pgm"), csv_path=base.with_suffix(".csv"))
    log.info("wrote gate traces for %s to %s*", args.image_id, base)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="siamese-lstm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--image-id", help="image to trace (inspect only)")
    parser.add_argument("-v", "--verbose", action="store_true")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](load_config(args.config), args)
    except ReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
