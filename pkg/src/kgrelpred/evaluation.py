"""Relation ranking over held-out triples: MRR, MR, Hit@1/3, confusion."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import KnowledgeGraph
from .hashing import mix
from .model import RelationModel

# ties rank pessimistically: every tied competitor counts against the true relation


def rank_relation(logits: np.ndarray, true_relation: int) -> int:
    """1 + number of other relations scoring >= the true relation's score."""
    s = logits[true_relation]
    return int(np.count_nonzero(logits >= s))


@dataclass
class RankResult:
    edge_id: int
    true_relation: int
    rank: int
    top: list[int]  # relation ids by descending score


@dataclass
class MetricsReport:
    mrr: float
    mr: float
    hit1: float
    hit3: float
    n_triples: int
    seconds: float
    results: list[RankResult] = field(default_factory=list)

    def __post_init__(self):
        assert 0.0 <= self.hit1 <= self.hit3 <= 1.0
        assert self.mr >= 1.0
        assert self.mrr >= 1.0 / self.mr - 1e-12  # Jensen: E[1/x] >= 1/E[x]

    def to_text(self) -> str:
        lines = [
            f"triples = {self.n_triples}",
            f"mrr = {self.mrr:.6f}",
            f"mr = {self.mr:.6f}",
            f"hit1 = {self.hit1:.6f}",
            f"hit3 = {self.hit3:.6f}",
            f"seconds = {self.seconds:.2f}",
        ]
        return "\n".join(lines)


def metrics_from_ranks(ranks: np.ndarray, seconds: float, results=None) -> MetricsReport:
    ranks = np.asarray(ranks, dtype=np.float64)
    return MetricsReport(
        mrr=float(np.mean(1.0 / ranks)),
        mr=float(np.mean(ranks)),
        hit1=float(np.mean(ranks <= 1)),
        hit3=float(np.mean(ranks <= 3)),
        n_triples=len(ranks),
        seconds=seconds,
        results=results or [],
    )


def evaluate_model(
    model: RelationModel,
    split: str,
    pass_key: int | np.uint64 = 0,
    batch_size: int = 128,
    topk: int = 3,
    keep_results: bool = False,
) -> MetricsReport:
    """Rank every triple of a split; the random-attention context is drawn
    once per run from ``pass_key``. Parameters are read-only throughout."""
    graph = model.graph
    ids = graph.split_edge_ids(split)
    if len(ids) == 0:
        raise ValueError(f"split {split!r} is empty")
    counts_all = model.split_path_counts(split) if model.use_paths else None
    t0 = time.time()
    ranks = np.empty(len(ids), dtype=np.int64)
    results: list[RankResult] = []
    key_arr = np.full(batch_size, np.uint64(pass_key), dtype=np.uint64)
    with ad.no_grad():
        for lo in range(0, len(ids), batch_size):
            batch = ids[lo: lo + batch_size]
            counts = counts_all[lo: lo + len(batch)] if counts_all is not None else None
            logits = model.forward_batch(batch, key_arr[: len(batch)], counts=counts).data
            true = graph.rels[batch]
            s_true = logits[np.arange(len(batch)), true]
            ranks[lo: lo + len(batch)] = (logits >= s_true[:, None]).sum(axis=1)
            if keep_results:
                order = np.argsort(-logits, axis=1, kind="stable")
                for i, e in enumerate(batch):
                    results.append(
                        RankResult(int(e), int(true[i]), int(ranks[lo + i]),
                                   order[i, :topk].tolist())
                    )
    return metrics_from_ranks(ranks, time.time() - t0, results)


def evaluate_checkpoint(ckpt, graph: KnowledgeGraph, split: str, seed: int = 0, **kw) -> MetricsReport:
    from .training import model_from_checkpoint

    model = model_from_checkpoint(ckpt, graph)
    return evaluate_model(model, split, pass_key=mix(seed, 0xEA77), **kw)


def confusion_matrix(
    results: list[RankResult], n_relations: int
) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized (true x top-1 predicted) counts.

    Rows/columns are ordered by descending true-relation frequency in the
    results (ties by relation id); returns (matrix, relation order). Rows of
    relations with at least one triple sum to 1.
    """
    counts = np.zeros((n_relations, n_relations), dtype=np.float64)
    freq = np.zeros(n_relations, dtype=np.int64)
    for r in results:
        counts[r.true_relation, r.top[0]] += 1.0
        freq[r.true_relation] += 1
    order = np.lexsort((np.arange(n_relations), -freq))
    counts = counts[order][:, order]
    totals = counts.sum(axis=1, keepdims=True)
    np.divide(counts, totals, out=counts, where=totals > 0)
    return counts, order


@dataclass
class SeedSummary:
    """Mean and population std of each metric across per-seed reports."""

    mean: dict[str, float]
    std: dict[str, float]
    seeds: list[int]

    def to_text(self) -> str:
        keys = ("mrr", "mr", "hit1", "hit3")
        lines = [f"seeds = {','.join(map(str, self.seeds))}"]
        lines += [f"{k} = {self.mean[k]:.4f} ± {self.std[k]:.4f}" for k in keys]
        return "\n".join(lines)


def summarize(reports: dict[int, MetricsReport]) -> SeedSummary:
    keys = ("mrr", "mr", "hit1", "hit3")
    vals = {k: np.array([getattr(r, k) for r in reports.values()]) for k in keys}
    return SeedSummary(
        mean={k: float(v.mean()) for k, v in vals.items()},
        std={k: float(v.std()) for k, v in vals.items()},
        seeds=list(reports),
    )
