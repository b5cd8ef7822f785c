"""Command-line interface: train, evaluate, predict, paths, ablate."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, training
from .encoder import MECHANISMS
from .graph import load_dataset
from .hashing import mix
from .model import RelationModel
from .training import TrainConfig

logger = logging.getLogger("kgrelpred")

# flag name -> (TrainConfig field, parser)
_CONFIG_KEYS = {
    "attention": ("mechanisms", lambda s: tuple(m.strip() for m in s.split(",") if m.strip())),
    "use-paths": ("use_paths", lambda s: _parse_bool(s)),
    "hops": ("hops", int),
    "iterations": ("iterations", int),
    "path-len": ("max_path_len", int),
    "dim": ("dim", int),
    "lr": ("learning_rate", float),
    "l2": ("l2_weight", float),
    "batch": ("batch_size", int),
    "epochs": ("epochs", int),
    "p-random": ("p_random", float),
    "neighbor-cap": ("neighbor_cap", lambda s: None if s.lower() in ("none", "off") else int(s)),
    "seed": ("seed", int),
    "workers": ("workers", int),
}


class UsageError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {s!r}")


def _parse_seeds(s: str) -> list[int]:
    s = s.strip()
    if ".." in s:
        lo, hi = s.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in s.split(",") if x]


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat `key = value` lines; keys named identically to flags; # comments."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = val
    return values


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    """Precedence: flags > config file > defaults."""
    merged: dict[str, object] = {}
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            field, parse = _CONFIG_KEYS[key]
            merged[field] = parse(raw)
    for key, (field, parse) in _CONFIG_KEYS.items():
        flag_val = getattr(args, key.replace("-", "_"), None)
        if flag_val is not None:
            merged[field] = parse(flag_val) if isinstance(flag_val, str) else flag_val
    cfg = TrainConfig(**merged)
    bad = [m for m in cfg.mechanisms if m not in MECHANISMS]
    if bad or not cfg.mechanisms:
        raise UsageError(
            f"--attention must name at least one of {','.join(MECHANISMS)}"
        )
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--attention", help="comma list of local,global,random")
    p.add_argument("--use-paths", dest="use_paths")
    for flag in ("hops", "iterations", "path-len", "dim", "batch", "epochs",
                 "seed", "workers"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"))
    p.add_argument("--lr", dest="lr")
    p.add_argument("--l2", dest="l2")
    p.add_argument("--p-random", dest="p_random")
    p.add_argument("--neighbor-cap", dest="neighbor_cap")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kgrelpred",
                                 description="Relation prediction on knowledge graphs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="rank relations for a held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--seeds", help="evaluation seeds, e.g. 1..5")
    p.add_argument("--out", help="also write the report here")
    p.add_argument("--confusion", help="write the confusion matrix CSV here")

    p = sub.add_parser("predict", help="rank relations for one entity pair")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--tail", required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("paths", help="path vocabulary statistics for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--path-len", dest="path_len", type=int, default=3)
    p.add_argument("--out", help="also write the statistics here")

    p = sub.add_parser("ablate", help="metrics over mechanism subsets x paths on/off")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="training seeds, e.g. 1..3")
    p.add_argument("--grid", action="store_true",
                   help="also sweep hops x path length over {1,2,3}^2")
    _add_config_flags(p)
    return ap


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    graph = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = training.train(graph, cfg)
    training.save_checkpoint(result.final, out / "model.final.ckpt")
    training.save_checkpoint(result.best, out / "model.best.ckpt")
    with open(out / "train.log", "w") as f:
        for log in result.history:
            f.write(
                f"epoch = {log.epoch}  loss = {log.train_loss:.6f}  "
                f"valid_mrr = {log.valid_mrr:.6f}  seconds = {log.seconds:.1f}\n"
            )
    print(f"wrote {out / 'model.final.ckpt'}, {out / 'model.best.ckpt'}, {out / 'train.log'}")
    return 0


def _write_confusion(path, results, model) -> None:
    matrix, order = evaluation.confusion_matrix(results, model.graph.n_relations)
    names = [model.graph.relation_names[i] for i in order]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true\\predicted"] + names)
        for name, row in zip(names, matrix):
            w.writerow([name] + [f"{v:.4f}" for v in row])


def cmd_evaluate(args) -> int:
    graph = load_dataset(args.data)
    ckpt = training.load_checkpoint(args.checkpoint)
    model = training.model_from_checkpoint(ckpt, graph)
    seeds = _parse_seeds(args.seeds) if args.seeds else [args.seed]
    reports = {}
    for seed in seeds:
        reports[seed] = evaluation.evaluate_model(
            model, args.split, pass_key=mix(seed, 0xEA77),
            keep_results=bool(args.confusion),
        )
    if len(reports) == 1:
        text = next(iter(reports.values())).to_text()
    else:
        text = evaluation.summarize(reports).to_text()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.confusion:
        _write_confusion(args.confusion, next(iter(reports.values())).results, model)
    return 0


def cmd_predict(args) -> int:
    graph = load_dataset(args.data)
    ckpt = training.load_checkpoint(args.checkpoint)
    model = training.model_from_checkpoint(ckpt, graph)
    for name in (args.head, args.tail):
        if name not in graph.entity_ids:
            raise UsageError(f"unknown entity: {name}")
    h, t = graph.entity_ids[args.head], graph.entity_ids[args.tail]
    probs = model.probabilities(h, t, pass_key=mix(args.seed, 0xEA77))
    top = np.argsort(-probs, kind="stable")[: args.topk]
    for r in top:
        print(f"{graph.relation_names[r]}\t{probs[r]:.6f}")
    return 0


def cmd_paths(args) -> int:
    from .paths import PathIndex, build_path_vocabulary, encode_pair_batch

    graph = load_dataset(args.data)
    index = PathIndex(graph, args.path_len)
    ids = graph.split_edge_ids("train")
    vocab = build_path_vocabulary(graph, index, ids)
    enc = encode_pair_batch(index, vocab, graph.heads[ids], graph.tails[ids], ids)
    per_pair = np.asarray(enc.counts.sum(axis=1)).ravel()
    hist = vocab.length_histogram()
    lines = [
        f"vocabulary_size = {len(vocab)}",
        f"max_path_len = {args.path_len}",
    ]
    lines += [f"paths_of_length_{k} = {hist[k]}" for k in sorted(hist)]
    lines += [
        f"pairs = {len(per_pair)}",
        f"walks_per_pair_mean = {per_pair.mean():.2f}",
        f"walks_per_pair_median = {float(np.median(per_pair)):.1f}",
        f"walks_per_pair_max = {int(per_pair.max())}",
        f"pairs_without_paths = {int((per_pair == 0).sum())}",
    ]
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


_ABLATION_VARIANTS = (
    ("local",), ("global",), ("random",),
    ("local", "global"), ("local", "random"), ("global", "random"),
    ("local", "global", "random"),
)


def variant_label(mechanisms) -> str:
    return "+".join(m[0].upper() for m in mechanisms)


def cmd_ablate(args) -> int:
    from dataclasses import replace

    base = build_train_config(args)
    graph = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _parse_seeds(args.seeds) if args.seeds else [base.seed]

    rows = []
    for mechanisms in _ABLATION_VARIANTS:
        for use_paths in (True, False):
            for seed in seeds:
                cfg = replace(base, mechanisms=mechanisms, use_paths=use_paths, seed=seed)
                result = training.train(graph, cfg)
                report = evaluation.evaluate_checkpoint(result.best, graph, "test", seed=seed,
                                                        keep_results=True)
                rows.append((variant_label(mechanisms), use_paths, seed,
                             report.mrr, report.hit1, report.hit3))
                if seed == seeds[0]:
                    model = training.model_from_checkpoint(result.best, graph)
                    _write_confusion(
                        out / f"confusion_{variant_label(mechanisms)}"
                              f"{'_paths' if use_paths else ''}.csv",
                        report.results, model)
                logger.info("ablation %s paths=%s seed=%d: mrr %.4f hit1 %.4f",
                            variant_label(mechanisms), use_paths, seed,
                            report.mrr, report.hit1)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mechanisms", "paths", "seed", "mrr", "hit1", "hit3"])
        for row in rows:
            w.writerow(row)

    if args.grid:
        grid_rows = []
        for mechanisms in _ABLATION_VARIANTS:
            for hops in (1, 2, 3):
                for plen in (1, 2, 3):
                    cfg = replace(base, mechanisms=mechanisms, hops=hops,
                                  max_path_len=plen, seed=seeds[0])
                    result = training.train(graph, cfg)
                    report = evaluation.evaluate_checkpoint(result.best, graph, "test",
                                                            seed=seeds[0])
                    grid_rows.append((variant_label(mechanisms), hops, plen,
                                      report.mrr, report.hit1))
        with open(out / "grid.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mechanisms", "hops", "path_len", "mrr", "hit1"])
            for row in grid_rows:
                w.writerow(row)
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def main(argv=None) -> int:
    level = os.environ.get("KGRELPRED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(message)s")
    ap = make_parser()
    args = ap.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "predict": cmd_predict,
        "paths": cmd_paths,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except (UsageError, training.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
