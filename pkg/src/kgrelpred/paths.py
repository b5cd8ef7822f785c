"""Semantic-path vocabulary and multi-hot pair encodings.

A path is a sequence of direction-tagged relation tokens labelling a walk
from head to tail (edge ids never repeat within a walk). The vocabulary is
frozen over the training pairs, each with its own labelled edge excluded;
pairs are encoded as sparse count vectors over it and projected to
relation-logit space by a learned linear map. Paths met at evaluation time
that are missing from the vocabulary are dropped and counted, never added.

Bulk extraction uses a bidirectional (meet-in-the-middle) walk join,
vectorized per pair, for max_len <= 3; longer limits fall back to the graph's
breadth-first enumerator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .graph import FORWARD, KnowledgeGraph, PathToken

_UNSET = np.iinfo(np.int64).min


def pack_tokens(tokens: tuple[PathToken, ...], base: int) -> int:
    """Pack a token sequence into one integer key (base = 2*|R| + 1)."""
    key = 0
    for tok in tokens:
        key = key * base + (tok.relation * 2 + tok.direction + 1)
    return key


def unpack_key(key: int, base: int) -> tuple[PathToken, ...]:
    tokens = []
    key = int(key)
    while key:
        key, code = divmod(key, base)
        tokens.append(PathToken((code - 1) // 2, (code - 1) % 2))
    return tuple(reversed(tokens))


@dataclass(frozen=True)
class PathVocabulary:
    """Frozen bijection between packed path keys and dense path ids."""

    keys: np.ndarray  # sorted uint64
    base: int
    max_len: int

    def __len__(self) -> int:
        return len(self.keys)

    def ids_of(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map packed keys to vocabulary ids; second array flags known keys."""
        if len(self.keys) == 0:
            return np.zeros(0, np.int64), np.zeros(len(keys), bool)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        known = self.keys[pos_c] == keys
        return pos_c[known], known

    def tokens_of(self, path_id: int) -> tuple[PathToken, ...]:
        return unpack_key(int(self.keys[path_id]), self.base)

    def length_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for key in self.keys:
            n = len(unpack_key(int(key), self.base))
            hist[n] = hist.get(n, 0) + 1
        return hist


class PathIndex:
    """Per-graph walk tables enabling fast bounded path extraction."""

    def __init__(self, graph: KnowledgeGraph, max_len: int):
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.graph = graph
        self.max_len = max_len
        self.base = 2 * graph.n_relations + 1
        if self.base ** max_len >= 2**63:
            raise ValueError("path packing overflow; reduce max_len")
        self.vectorized = max_len <= 3
        if self.vectorized:
            self._build_tables()

    def _build_tables(self) -> None:
        g = self.graph
        n_ent = g.n_entities
        ent = g.inc_entities.astype(np.int64)
        edge = g.inc_edges.astype(np.int64)
        d = g.inc_dirs.astype(np.int64)
        rel = g.rels[edge].astype(np.int64)
        other = np.where(d == FORWARD, g.tails[edge], g.heads[edge]).astype(np.int64)

        # out-walks of length 1 from v: cross the edge in the direction seen from v
        self.out_ptr = g.inc_indptr.copy()
        self.out_other = other
        self.out_tok = rel * 2 + d
        self.out_eid = edge

        # in-walks of length 1 into v: cross the edge the opposite way
        order = np.lexsort((other, ent))
        self.in_ptr = g.inc_indptr.copy()
        self.in_start = other[order]
        self.in_tok = (rel * 2 + (1 - d))[order]
        self.in_eid = edge[order]
        # in-walk tables are sorted by (target, start) for joining
        if self.max_len >= 3:
            self._build_in2(n_ent)

    def _build_in2(self, n_ent: int) -> None:
        # compose in-walks: start --e1--> mid --e2--> target, e1 != e2
        tgt_of = np.repeat(np.arange(n_ent), np.diff(self.in_ptr))
        mid = self.in_start
        counts = (self.in_ptr[mid + 1] - self.in_ptr[mid]).astype(np.int64)
        left = np.repeat(np.arange(len(mid)), counts)
        right = _ranges(self.in_ptr[mid], counts)
        keep = self.in_eid[right] != self.in_eid[left]
        left, right = left[keep], right[keep]
        tgt = tgt_of[left]
        order = np.lexsort((self.in_start[right], tgt))
        left, right = left[order], right[order]
        self.in2_ptr = np.searchsorted(tgt[order], np.arange(n_ent + 1))
        self.in2_start = self.in_start[right]
        self.in2_tok1 = self.in_tok[right]
        self.in2_tok2 = self.in_tok[left]
        self.in2_eid1 = self.in_eid[right]
        self.in2_eid2 = self.in_eid[left]

    # -- per-pair extraction ----------------------------------------------

    def pair_path_keys(self, head: int, tail: int, exclude: int = -1) -> np.ndarray:
        """Packed keys of every walk head->tail of length <= max_len.

        One entry per walk (not per distinct path); callers count duplicates.
        """
        if not self.vectorized:
            found = self.graph.enumerate_paths(
                head, tail, self.max_len, None if exclude < 0 else exclude
            )
            return np.array(sorted(pack_tokens(p, self.base) for p in found), dtype=np.uint64)
        parts = [self._walks_len1(head, tail, exclude)]
        if self.max_len >= 2:
            parts.append(self._walks_len2(head, tail, exclude))
        if self.max_len >= 3:
            parts.append(self._walks_len3(head, tail, exclude))
        return np.concatenate(parts)

    def _tail_slice(self, ptr, start_col, tail: int, value: int) -> slice:
        lo, hi = ptr[tail], ptr[tail + 1]
        seg = start_col[lo:hi]
        return slice(lo + np.searchsorted(seg, value, "left"), lo + np.searchsorted(seg, value, "right"))

    def _walks_len1(self, head, tail, exclude) -> np.ndarray:
        sl = self._tail_slice(self.in_ptr, self.in_start, tail, head)
        tok = self.in_tok[sl]
        eid = self.in_eid[sl]
        keep = eid != exclude
        return (tok[keep] + 1).astype(np.uint64)

    def _out_of(self, head, exclude):
        lo, hi = self.out_ptr[head], self.out_ptr[head + 1]
        keep = self.out_eid[lo:hi] != exclude
        return (
            self.out_other[lo:hi][keep],
            self.out_tok[lo:hi][keep],
            self.out_eid[lo:hi][keep],
        )

    def _walks_len2(self, head, tail, exclude) -> np.ndarray:
        other, tok_a, eid_a = self._out_of(head, exclude)
        lo, hi = self.in_ptr[tail], self.in_ptr[tail + 1]
        seg_start = self.in_start[lo:hi]
        left_pos = np.searchsorted(seg_start, other, "left")
        right_pos = np.searchsorted(seg_start, other, "right")
        counts = right_pos - left_pos
        li = np.repeat(np.arange(len(other)), counts)
        ri = _ranges(lo + left_pos, counts)
        keep = (self.in_eid[ri] != eid_a[li]) & (self.in_eid[ri] != exclude)
        li, ri = li[keep], ri[keep]
        base = np.uint64(self.base)
        return (tok_a[li] + 1).astype(np.uint64) * base + (self.in_tok[ri] + 1).astype(np.uint64)

    def _walks_len3(self, head, tail, exclude) -> np.ndarray:
        other, tok_a, eid_a = self._out_of(head, exclude)
        lo, hi = self.in2_ptr[tail], self.in2_ptr[tail + 1]
        seg_start = self.in2_start[lo:hi]
        left_pos = np.searchsorted(seg_start, other, "left")
        right_pos = np.searchsorted(seg_start, other, "right")
        counts = right_pos - left_pos
        li = np.repeat(np.arange(len(other)), counts)
        ri = _ranges(lo + left_pos, counts)
        ea, e1, e2 = eid_a[li], self.in2_eid1[ri], self.in2_eid2[ri]
        keep = (e1 != ea) & (e2 != ea) & (e1 != exclude) & (e2 != exclude) & (ea != exclude)
        li, ri = li[keep], ri[keep]
        base = np.uint64(self.base)
        k = (tok_a[li] + 1).astype(np.uint64) * base + (self.in2_tok1[ri] + 1).astype(np.uint64)
        return k * base + (self.in2_tok2[ri] + 1).astype(np.uint64)

    def pair_path_counts(self, head, tail, exclude: int = -1) -> tuple[np.ndarray, np.ndarray]:
        keys = self.pair_path_keys(head, tail, exclude)
        return np.unique(keys, return_counts=True)


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    seg_of = np.repeat(np.arange(len(counts)), counts)
    flat_starts = np.cumsum(counts) - counts
    return starts[seg_of] + (np.arange(total) - flat_starts[seg_of])


def build_path_vocabulary(
    graph: KnowledgeGraph, index: PathIndex, edge_ids: np.ndarray
) -> PathVocabulary:
    """All distinct paths over the given training pairs, own edge excluded."""
    chunks = []
    for e in np.asarray(edge_ids):
        e = int(e)
        keys = np.unique(index.pair_path_keys(int(graph.heads[e]), int(graph.tails[e]), e))
        chunks.append(keys)
    all_keys = np.unique(np.concatenate(chunks)) if chunks else np.zeros(0, np.uint64)
    return PathVocabulary(keys=all_keys, base=index.base, max_len=index.max_len)


@dataclass
class PathEncodingBatch:
    """Sparse multi-hot counts over the vocabulary for a list of pairs."""

    counts: sp.csr_matrix  # (n_pairs, |vocab|)
    dropped: int  # walks found but absent from the frozen vocabulary


def encode_pair_batch(
    index: PathIndex,
    vocab: PathVocabulary,
    heads: np.ndarray,
    tails: np.ndarray,
    excludes: np.ndarray,
) -> PathEncodingBatch:
    rows, cols, vals = [], [], []
    dropped = 0
    for i, (h, t, x) in enumerate(zip(heads, tails, excludes)):
        keys, counts = index.pair_path_counts(int(h), int(t), int(x))
        ids, known = vocab.ids_of(keys)
        dropped += int(counts[~known].sum())
        cols.append(ids)
        vals.append(counts[known])
        rows.append(np.full(len(ids), i, dtype=np.int64))
    if rows:
        mat = sp.csr_matrix(
            (np.concatenate(vals).astype(np.float64),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(heads), max(len(vocab), 1)),
        )
    else:
        mat = sp.csr_matrix((0, max(len(vocab), 1)))
    return PathEncodingBatch(counts=mat, dropped=dropped)


def damp_counts(counts: sp.csr_matrix) -> sp.csr_matrix:
    """Elementwise 1 + ln(c) over the nonzero counts (0 stays 0, 1 stays 1).

    Walk multiplicities are heavy-tailed; the damping bounds the feature scale
    while preserving sparsity, order invariance, and multiplicity ordering.
    """
    damped = counts.copy()
    damped.data = 1.0 + np.log(damped.data)
    return damped


def path_logits(w_p: ad.Tensor, counts: sp.csr_matrix) -> ad.Tensor:
    """Project multi-hot path counts to relation logits.

    Counts are damped elementwise (see :func:`damp_counts`) and multiplied by
    the projection. ``w_p`` is stored vocabulary-major, shape (|vocab|, |R|),
    so the sparse product needs no transposed copies; row b of the output is
    the projection applied to pair b's damped count vector. A path seen once
    contributes exactly one column of the projection.
    """
    if counts.shape[1] != w_p.data.shape[0]:
        raise ValueError(
            f"count width {counts.shape[1]} does not match vocabulary size {w_p.data.shape[0]}"
        )
    damped = damp_counts(counts)
    out_data = np.asarray(damped @ w_p.data)

    def bwd(g):
        if w_p.traced:
            w_p.add_grad(damped.T @ g)

    return ad.Tensor(out_data, (w_p,), bwd, "path_logits")


def encode_paths(
    index: PathIndex,
    vocab: PathVocabulary,
    w_p: ad.Tensor,
    head: int,
    tail: int,
    exclude: int = -1,
) -> tuple[ad.Tensor, sp.csr_matrix, int]:
    """Relation-logit contribution of one pair's paths.

    Returns (logits (|R|,), the sparse count row, dropped-walk count). With an
    empty vocabulary the logits are zero.
    """
    batch = encode_pair_batch(index, vocab, np.array([head]), np.array([tail]), np.array([exclude]))
    n_rel = w_p.data.shape[1]
    if len(vocab) == 0:
        return ad.constant(np.zeros(n_rel)), batch.counts, batch.dropped
    logits = path_logits(w_p, batch.counts)
    return ad.reshape(logits, (n_rel,)), batch.counts, batch.dropped
