"""``mapre`` command-line entry point.

Every run writes under ``<paths.runs>/<subcommand>-<config hash>-<timestamp>/``:
the resolved config (``config.yaml``), the metrics JSONL (first line echoes the
resolved config) and, for training subcommands, ``model.ckpt``.  On failure a
single JSON line ``{"error": <category>, "message": ...}`` goes to stderr and
the exit status identifies the category.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from mapre import config as C
from mapre.corpus import CorpusError, RelationCatalog, generate_corpus, load_jsonl, split_relations_disjoint, write_jsonl
from mapre.sampling import SamplingError
from mapre.tokens import Vocabulary
from mapre.training.checkpoint import CheckpointError, checkpoint_from_model, load_checkpoint, model_from_checkpoint, save_checkpoint
from mapre.training.metrics import MetricsLogger
from mapre.training.pretrain import TrainingAborted

log = logging.getLogger("mapre")

SUBCOMMANDS = ("gen-corpus", "pretrain", "finetune-supervised", "finetune-fewshot", "eval-fewshot",
               "eval-zeroshot", "gradcheck")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_PATH = 4
EXIT_DATA = 5
EXIT_TRAINING = 6
EXIT_GRADCHECK = 7

SPLIT_FILES = {"pretrain": "pretrain.jsonl", "train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}


class CliError(Exception):
    category = "internal"
    code = EXIT_INTERNAL


class UsageError(CliError):
    category, code = "usage", EXIT_USAGE


class PathError(CliError):
    category, code = "path", EXIT_PATH


class DataError(CliError):
    category, code = "data", EXIT_DATA


class GradcheckFailed(CliError):
    category, code = "gradcheck", EXIT_GRADCHECK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mapre", description="Relation-mapping pretraining and fine-tuning on synthetic data.")
    p.add_argument("subcommand", help="one of: " + ", ".join(SUBCOMMANDS))
    p.add_argument("--config", "-c", help="YAML run config")
    p.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config key, e.g. pretrain.steps=200 (repeatable; wins over --config)")
    p.add_argument("--verbose", "-v", action="store_true", help="progress logging on stderr")
    return p


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------


def corpus_files(cfg: dict) -> dict[str, Path]:
    paths = cfg["paths"]
    root = Path(paths["corpus"])
    out = {k: root / v for k, v in SPLIT_FILES.items()}
    out["catalog"] = Path(paths["catalog"]) if paths["catalog"] else root / "catalog.json"
    out["vocab"] = Path(paths["vocab"]) if paths["vocab"] else root / "vocab.txt"
    return out


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise PathError(f"{what} not found: {path}")


def _require_dir_writable(path: Path, what: str) -> None:
    probe = path
    while not probe.exists():
        if probe.parent == probe:
            break
        probe = probe.parent
    if probe.exists() and not probe.is_dir():
        raise PathError(f"{what} {path} is below a non-directory {probe}")
    if not os.access(probe, os.W_OK):
        raise PathError(f"{what} {path} is not writable")


def validate_paths(subcommand: str, cfg: dict) -> None:
    """Check every input exists and every output location is writable."""
    files = corpus_files(cfg)
    paths = cfg["paths"]
    _require_dir_writable(Path(paths["runs"]), "runs directory")
    if paths["metrics"]:
        _require_dir_writable(Path(paths["metrics"]).parent, "metrics directory")
    if subcommand == "gen-corpus":
        for key in ("pretrain", "catalog", "vocab"):
            _require_dir_writable(files[key].parent, f"{key} directory")
        return
    if subcommand == "gradcheck":
        return
    _require_file(files["catalog"], "relation catalog")
    _require_file(files["vocab"], "vocabulary")
    if subcommand == "pretrain":
        _require_file(files["pretrain"], "pretraining corpus")
    else:
        if not paths["checkpoint_in"]:
            raise PathError(f"{subcommand} needs paths.checkpoint_in")
        _require_file(Path(paths["checkpoint_in"]), "input checkpoint")
        needed = ["train", "val", "test"]
        if subcommand in ("eval-fewshot", "eval-zeroshot") and cfg["eval"]["split"] != "heldout":
            needed = [cfg["eval"]["split"]]
        elif subcommand == "finetune-fewshot":
            needed = ["train"] + (["val", "test"] if cfg["eval"]["split"] == "heldout" else [cfg["eval"]["split"]])
        for key in dict.fromkeys(needed):
            _require_file(files[key], f"{key} split")
    if subcommand in ("pretrain", "finetune-supervised", "finetune-fewshot") and paths["checkpoint_out"]:
        _require_dir_writable(Path(paths["checkpoint_out"]).parent, "checkpoint directory")


def make_run_dir(subcommand: str, cfg: dict, now: datetime | None = None) -> Path:
    stamp = (now or datetime.now()).strftime("%Y%m%dT%H%M%S")
    base = Path(cfg["paths"]["runs"]) / f"{subcommand}-{C.config_hash(cfg)}-{stamp}"
    run_dir, n = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}-{n}")
        n += 1
    run_dir.mkdir(parents=True)
    return run_dir


# --------------------------------------------------------------------------
# data loading
# --------------------------------------------------------------------------


def _load_catalog_vocab(cfg):
    files = corpus_files(cfg)
    try:
        return RelationCatalog.load(files["catalog"]), Vocabulary.load(files["vocab"])
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read catalog or vocabulary: {e}") from None


def _load_split(cfg, name, catalog):
    path = corpus_files(cfg)[name]
    try:
        return load_jsonl(path, catalog)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None


def _eval_instances(cfg, catalog):
    split = cfg["eval"]["split"]
    if split == "heldout":
        return _load_split(cfg, "val", catalog) + _load_split(cfg, "test", catalog)
    return _load_split(cfg, split, catalog)


def _load_model(cfg, vocab):
    path = cfg["paths"]["checkpoint_in"]
    try:
        return model_from_checkpoint(load_checkpoint(path), vocab)
    except CheckpointError as e:
        raise DataError(f"checkpoint {path}: {type(e).__name__}: {e}") from None
    except (KeyError, ValueError) as e:
        raise DataError(f"checkpoint {path} does not match the vocabulary or model layout: {e}") from None


def _save_model(cfg, run_dir, model, step, optimizer=None) -> Path:
    path = Path(cfg["paths"]["checkpoint_out"]) if cfg["paths"]["checkpoint_out"] else run_dir / "model.ckpt"
    save_checkpoint(checkpoint_from_model(model, step, cfg, optimizer), path)
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def build_benchmark(cfg: dict):
    """Generate the synthetic corpus and its relation-disjoint partition.

    Returns ``(parts, relations, catalog, vocab)`` where ``parts`` maps
    pretrain/train/val/test to instance lists.
    """
    c = cfg["corpus"]
    seed = cfg["seed"]
    try:
        kg, instances, vocab = generate_corpus(c["num_relations"], c["entities_per_relation"],
                                               c["sentences_per_triple"], c["vocab_size"], seed,
                                               max_filler=c["max_filler"])
    except CorpusError as e:
        raise C.ConfigError(f"corpus generation: {e}") from None
    catalog = kg.catalog
    pre_ids = catalog.ids[:c["pretrain_relations"]]
    ft_ids = catalog.ids[c["pretrain_relations"]:]
    pre_set = set(pre_ids)
    counts = np.asarray(c["split"], dtype=float)
    split = split_relations_disjoint([x for x in instances if x.relation not in pre_set], catalog.subset(ft_ids),
                                     tuple(counts / counts.sum()), seed)
    parts = {"pretrain": [x for x in instances if x.relation in pre_set],
             "train": split.train, "val": split.val, "test": split.test}
    relations = {"pretrain": pre_ids, "train": split.train_relations, "val": split.val_relations,
                 "test": split.test_relations}
    return parts, relations, catalog, vocab


def cmd_gen_corpus(cfg, logger, run_dir) -> dict:
    parts, relations, catalog, vocab = build_benchmark(cfg)
    files = corpus_files(cfg)
    for key in ("pretrain", "catalog", "vocab"):
        files[key].parent.mkdir(parents=True, exist_ok=True)
    for name, items in parts.items():
        write_jsonl(items, files[name])
    catalog.save(files["catalog"])
    vocab.save(files["vocab"])
    rec = {"phase": "gen-corpus", "instances": {k: len(v) for k, v in parts.items()},
           "relations": relations, "vocab_size": len(vocab)}
    logger.log(rec)
    return {"corpus": str(files["pretrain"].parent)}


def _new_model(cfg, vocab):
    from mapre.training.model import MapREModel

    try:
        return MapREModel(C.encoder_config(cfg), vocab, seed=cfg["seed"],
                          share_encoders=cfg["model"]["share_encoders"])
    except ValueError as e:
        raise DataError(str(e)) from None


def cmd_pretrain(cfg, logger, run_dir) -> dict:
    from mapre.training.pretrain import pretrain

    catalog, vocab = _load_catalog_vocab(cfg)
    instances = _load_split(cfg, "pretrain", catalog)
    model = _new_model(cfg, vocab)
    pc = C.pretrain_config(cfg)
    try:
        history = pretrain(model, instances, catalog.subset(sorted({x.relation for x in instances})), pc, logger)
    except SamplingError as e:
        raise DataError(f"pretraining corpus: {e}") from None
    path = _save_model(cfg, run_dir, model, pc.steps)
    return {"checkpoint": str(path), "final_loss": history[-1].total}


def cmd_finetune_fewshot(cfg, logger, run_dir) -> dict:
    from mapre.training.fewshot import evaluate_fewshot, finetune_fewshot
    from mapre.training.model import FewShotHead

    catalog, vocab = _load_catalog_vocab(cfg)
    model = _load_model(cfg, vocab)
    train = _load_split(cfg, "train", catalog)
    held = _eval_instances(cfg, catalog)
    fc = C.finetune_config(cfg)
    ev = cfg["eval"]
    spec = C.eval_spec(cfg)
    out = {}
    if spec.k_shot > 0:
        before = evaluate_fewshot(model, FewShotHead.for_mode(fc.mode), held, catalog, spec, ev["episodes"], cfg["seed"])
        logger.log({"phase": "eval-before", "split": ev["split"], "accuracy": before, "seed": cfg["seed"]})
        out["accuracy_before"] = before
    try:
        head = finetune_fewshot(model, train, catalog, fc, logger)
    except SamplingError as e:
        raise DataError(f"training split: {e}") from None
    if spec.k_shot > 0:
        after = evaluate_fewshot(model, head, held, catalog, spec, ev["episodes"], cfg["seed"])
        logger.log({"phase": "eval-after", "split": ev["split"], "accuracy": after, "seed": cfg["seed"]})
        out["accuracy_after"] = after
    out["checkpoint"] = str(_save_model(cfg, run_dir, model, fc.iterations))
    return out


def cmd_finetune_supervised(cfg, logger, run_dir) -> dict:
    from mapre.training.supervised import finetune_supervised, split_instances, subsample_per_relation

    catalog, vocab = _load_catalog_vocab(cfg)
    model = _load_model(cfg, vocab)
    s = cfg["supervised"]
    instances = [x for name in ("train", "val", "test") for x in _load_split(cfg, name, catalog)]
    sub = catalog.subset(sorted({x.relation for x in instances}))
    try:
        train, test = split_instances(instances, s["test_fraction"], cfg["seed"])
    except ValueError as e:
        raise DataError(str(e)) from None
    if s["fraction"] < 1.0:
        train = subsample_per_relation(train, s["fraction"], cfg["seed"])
    variant = cfg["mode"]["variant"]
    acc = finetune_supervised(model, train, test, sub, variant, C.supervised_config(cfg), logger)
    path = _save_model(cfg, run_dir, model, s["steps"])
    return {"accuracy": acc, "variant": variant, "train_instances": len(train), "checkpoint": str(path)}


def cmd_eval_fewshot(cfg, logger, run_dir) -> dict:
    from mapre.training.fewshot import evaluate_fewshot
    from mapre.training.model import FewShotHead

    spec = C.eval_spec(cfg)
    if spec.k_shot == 0:
        raise C.ConfigError("eval-fewshot needs eval.k_shot >= 1; use eval-zeroshot for K = 0")
    catalog, vocab = _load_catalog_vocab(cfg)
    model = _load_model(cfg, vocab)
    instances = _eval_instances(cfg, catalog)
    head = model.fewshot or FewShotHead.for_mode(cfg["mode"]["ablation"])
    try:
        acc = evaluate_fewshot(model, head, instances, catalog, spec, cfg["eval"]["episodes"], cfg["seed"])
    except SamplingError as e:
        raise DataError(f"evaluation split: {e}") from None
    alpha, beta = head.values
    logger.log({"phase": "eval-fewshot", "split": cfg["eval"]["split"], "n_way": spec.n_way, "k_shot": spec.k_shot,
                "n_query": spec.n_query, "alpha": alpha, "beta": beta, "accuracy": acc, "seed": cfg["seed"]})
    return {"accuracy": acc}


def cmd_eval_zeroshot(cfg, logger, run_dir) -> dict:
    from mapre.training.fewshot import evaluate_zeroshot

    spec = C.eval_spec(cfg)
    catalog, vocab = _load_catalog_vocab(cfg)
    model = _load_model(cfg, vocab)
    instances = _eval_instances(cfg, catalog)
    try:
        acc = evaluate_zeroshot(model, instances, catalog, spec.n_way, spec.n_query, cfg["eval"]["episodes"],
                                cfg["seed"])
    except SamplingError as e:
        raise DataError(f"evaluation split: {e}") from None
    logger.log({"phase": "eval-zeroshot", "split": cfg["eval"]["split"], "n_way": spec.n_way,
                "n_query": spec.n_query, "accuracy": acc, "seed": cfg["seed"]})
    return {"accuracy": acc}


def cmd_gradcheck(cfg, logger, run_dir) -> dict:
    from mapre.gradsuite import run_suite

    g = cfg["gradcheck"]
    seeds = range(cfg["seed"], cfg["seed"] + g["seeds"])
    results = run_suite(seeds, tolerance=g["tolerance"])
    for r in results:
        logger.log({"phase": "gradcheck", **r.as_dict()})
    failed = sorted({r.name for r in results if not r.report.passed})
    worst = max(r.report.max_rel_error for r in results)
    logger.log({"phase": "gradcheck-summary", "cases": len(results), "failed": failed, "max_rel_error": worst})
    if failed:
        raise GradcheckFailed(f"relative error >= {g['tolerance']} in: {', '.join(failed)}")
    return {"cases": len(results), "max_rel_error": worst}


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "finetune-supervised": cmd_finetune_supervised,
    "finetune-fewshot": cmd_finetune_fewshot,
    "eval-fewshot": cmd_eval_fewshot,
    "eval-zeroshot": cmd_eval_zeroshot,
    "gradcheck": cmd_gradcheck,
}


# --------------------------------------------------------------------------


def _fail(err: Exception, category: str, code: int) -> int:
    msg = " ".join(str(err).split())
    print(json.dumps({"error": category, "message": msg}, sort_keys=True), file=sys.stderr)
    return code


def run(argv=None, environ=None) -> int:
    """Parse ``argv``, run one subcommand and return the exit status."""
    try:
        args = build_parser().parse_args(argv)
        if args.subcommand not in COMMANDS:
            raise UsageError(f"unknown subcommand {args.subcommand!r}; expected one of {', '.join(SUBCOMMANDS)}")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(name)s %(message)s", stream=sys.stderr)
        cfg = C.load_config(args.config, args.override, environ)
        validate_paths(args.subcommand, cfg)
        run_dir = make_run_dir(args.subcommand, cfg)
        (run_dir / "config.yaml").write_text(C.dump_config(cfg), encoding="utf-8")
        metrics = Path(cfg["paths"]["metrics"]) if cfg["paths"]["metrics"] else run_dir / "metrics.jsonl"
        logger = MetricsLogger(metrics, header={"subcommand": args.subcommand, "config": cfg})
        result = COMMANDS[args.subcommand](cfg, logger, run_dir)
    except CliError as e:
        return _fail(e, e.category, e.code)
    except C.ConfigError as e:
        return _fail(e, "config", EXIT_CONFIG)
    except TrainingAborted as e:
        return _fail(e, "training", EXIT_TRAINING)
    except (CorpusError, CheckpointError) as e:
        return _fail(e, "data", EXIT_DATA)
    except OSError as e:
        return _fail(e, "path", EXIT_PATH)
    except Exception as e:  # noqa: BLE001  last-resort reporting for the exit-code contract
        return _fail(e, "internal", EXIT_INTERNAL)
    print(json.dumps({"status": "ok", "run_dir": str(run_dir), "metrics": str(metrics), **result}, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
