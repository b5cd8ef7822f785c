"""Triple store: vocabularies, incidence indices, and path queries.

The graph is immutable after construction. Message-passing neighborhoods are
always built from the training split only; validation/test edges exist solely
as evaluation targets.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .hashing import rank_keys

logger = logging.getLogger("kgrelpred")

FORWARD = 0
REVERSE = 1

SPLITS = ("train", "valid", "test")


class PathToken(NamedTuple):
    """One step of a semantic path: a relation crossed in a given direction.

    Reverse traversal of an edge emits a distinct token from forward traversal
    of the same relation.
    """

    relation: int
    direction: int  # FORWARD or REVERSE

    def flipped(self) -> "PathToken":
        return PathToken(self.relation, 1 - self.direction)


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


class DatasetError(ValueError):
    """Raised for missing, empty, or malformed dataset files."""


def _read_split(path: Path) -> list[tuple[str, str, str]]:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if line == "" and lineno > 0:
                # allow a trailing blank line only
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DatasetError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            rows.append((fields[0], fields[1], fields[2]))
    return rows


class KnowledgeGraph:
    """Entity/relation vocabularies plus edge list and incidence indices.

    Edge ids are global positions over train + valid + test (train first).
    Each edge also carries a stable ``uid`` equal to its original id; uids
    survive :meth:`without_train_edge`, which keeps hash-derived sampling
    decisions comparable between an excluded edge and a removed one.
    """

    def __init__(
        self,
        entity_names: list[str],
        relation_names: list[str],
        heads: np.ndarray,
        rels: np.ndarray,
        tails: np.ndarray,
        split_ranges: dict[str, tuple[int, int]],
        uids: np.ndarray | None = None,
        detached: frozenset[int] = frozenset(),
    ):
        self.entity_names = entity_names
        self.relation_names = relation_names
        self.entity_ids = {name: i for i, name in enumerate(entity_names)}
        self.relation_ids = {name: i for i, name in enumerate(relation_names)}
        self.heads = heads
        self.rels = rels
        self.tails = tails
        self.split_ranges = split_ranges
        self.uids = uids if uids is not None else np.arange(len(heads), dtype=np.uint64)
        self.detached = detached
        self._build_incidence()

    # -- construction ------------------------------------------------------

    def _build_incidence(self) -> None:
        lo, hi = self.split_ranges["train"]
        train_ids = np.arange(lo, hi, dtype=np.int32)
        if self.detached:
            keep = ~np.isin(train_ids, np.fromiter(self.detached, dtype=np.int32))
            train_ids = train_ids[keep]
        self.train_edge_ids = train_ids
        n_ent = len(self.entity_names)
        # two incidence entries per edge: (head, forward) and (tail, reverse)
        ents = np.concatenate([self.heads[train_ids], self.tails[train_ids]])
        edges = np.concatenate([train_ids, train_ids])
        dirs = np.concatenate(
            [np.zeros(len(train_ids), np.int8), np.ones(len(train_ids), np.int8)]
        )
        order = np.lexsort((dirs, edges, ents))
        self.inc_entities = ents[order]
        self.inc_edges = edges[order]
        self.inc_dirs = dirs[order]
        self.inc_indptr = np.zeros(n_ent + 1, dtype=np.int64)
        np.add.at(self.inc_indptr, self.inc_entities + 1, 1)
        np.cumsum(self.inc_indptr, out=self.inc_indptr)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def split_edge_ids(self, split: str) -> np.ndarray:
        lo, hi = self.split_ranges[split]
        ids = np.arange(lo, hi, dtype=np.int32)
        if split == "train" and self.detached:
            ids = self.train_edge_ids
        return ids

    def triple(self, edge_id: int) -> Triple:
        return Triple(int(self.heads[edge_id]), int(self.rels[edge_id]), int(self.tails[edge_id]))

    def degree(self, entity: int) -> int:
        return int(self.inc_indptr[entity + 1] - self.inc_indptr[entity])

    def without_train_edge(self, edge_id: int) -> "KnowledgeGraph":
        """A view of the graph with one training edge removed from every index.

        Edge ids and uids of the remaining edges are unchanged, so sampling
        and reduction orders stay comparable with the original graph.
        """
        lo, hi = self.split_ranges["train"]
        if not (lo <= edge_id < hi):
            raise ValueError(f"edge {edge_id} is not a training edge")
        return KnowledgeGraph(
            self.entity_names,
            self.relation_names,
            self.heads,
            self.rels,
            self.tails,
            self.split_ranges,
            uids=self.uids,
            detached=self.detached | {edge_id},
        )

    # -- queries -----------------------------------------------------------

    def neighbors(
        self,
        entity: int,
        exclude: int | None = None,
        cap: int | None = None,
        sample_key: int = 0,
    ) -> list[tuple[int, int]]:
        """Training-split incidence of ``entity`` as (edge_id, direction) pairs.

        ``exclude`` drops one edge id. With ``cap`` set and more than ``cap``
        entries remaining, a uniform sample without replacement is taken,
        determined entirely by ``sample_key`` and the edges' uids (so the
        outcome for a surviving edge does not depend on which other edges
        exist). Output preserves incidence order.
        """
        lo, hi = self.inc_indptr[entity], self.inc_indptr[entity + 1]
        edges = self.inc_edges[lo:hi]
        dirs = self.inc_dirs[lo:hi]
        if exclude is not None:
            keep = edges != exclude
            edges, dirs = edges[keep], dirs[keep]
        if cap is not None and len(edges) > cap:
            keys = rank_keys(np.uint64(sample_key), np.uint64(entity), self.uids[edges], dirs)
            sel = np.sort(np.argpartition(keys, cap)[:cap])
            edges, dirs = edges[sel], dirs[sel]
        return list(zip(edges.tolist(), dirs.tolist()))

    def enumerate_paths(
        self,
        head: int,
        tail: int,
        max_len: int,
        exclude: int | None = None,
    ) -> set[tuple[PathToken, ...]]:
        """All distinct token sequences of length 1..max_len labelling walks
        from ``head`` to ``tail`` in the train graph.

        Edges are traversable in both directions (reverse traversal emits a
        reverse token). A walk may revisit entities but never reuses an edge
        id; ``exclude`` is never traversed. Breadth-first over partial walks.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        found: set[tuple[PathToken, ...]] = set()
        queue: deque[tuple[int, tuple[PathToken, ...], frozenset[int]]] = deque()
        queue.append((head, (), frozenset()))
        while queue:
            entity, tokens, used = queue.popleft()
            if len(tokens) == max_len:
                continue
            lo, hi = self.inc_indptr[entity], self.inc_indptr[entity + 1]
            for edge, direction in zip(self.inc_edges[lo:hi], self.inc_dirs[lo:hi]):
                edge = int(edge)
                if edge == exclude or edge in used:
                    continue
                token = PathToken(int(self.rels[edge]), int(direction))
                nxt = int(self.tails[edge]) if direction == FORWARD else int(self.heads[edge])
                walk = tokens + (token,)
                if nxt == tail:
                    found.add(walk)
                queue.append((nxt, walk, used | {edge}))
        return found


def load_dataset(directory: str | Path) -> KnowledgeGraph:
    """Load train/valid/test TSV triples from ``directory`` into one graph.

    Vocabularies cover all three splits in first-occurrence order
    (train, then valid, then test). Incidence covers the train split only.
    Relations absent from the training split are kept for evaluation and
    reported with a warning.
    """
    directory = Path(directory)
    raw = {split: _read_split(directory / f"{split}.txt") for split in SPLITS}
    if not raw["train"]:
        raise DatasetError("empty training split")

    entity_names: list[str] = []
    relation_names: list[str] = []
    ent_id: dict[str, int] = {}
    rel_id: dict[str, int] = {}

    def ent(name: str) -> int:
        if name not in ent_id:
            ent_id[name] = len(entity_names)
            entity_names.append(name)
        return ent_id[name]

    def rel(name: str) -> int:
        if name not in rel_id:
            rel_id[name] = len(relation_names)
            relation_names.append(name)
        return rel_id[name]

    heads, rels, tails = [], [], []
    split_ranges = {}
    for split in SPLITS:
        start = len(heads)
        for h, r, t in raw[split]:
            heads.append(ent(h))
            rels.append(rel(r))
            tails.append(ent(t))
        split_ranges[split] = (start, len(heads))

    heads = np.asarray(heads, dtype=np.int32)
    rels = np.asarray(rels, dtype=np.int32)
    tails = np.asarray(tails, dtype=np.int32)

    lo, hi = split_ranges["train"]
    train_rels = set(rels[lo:hi].tolist())
    unseen = [name for i, name in enumerate(relation_names) if i not in train_rels]
    if unseen:
        logger.warning(
            "relations only in valid/test (kept for evaluation, will rank by the tie rule): %s",
            ", ".join(unseen),
        )

    return KnowledgeGraph(entity_names, relation_names, heads, rels, tails, split_ranges)
