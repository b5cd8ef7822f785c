"""The relation-prediction model: pair encoder, path head, output projection."""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import encoder, paths
from .graph import KnowledgeGraph
from .hashing import mix
from .optim import ParameterStore

logger = logging.getLogger("kgrelpred")


class RelationModel:
    """Scores P(r | h, t) from attention-derived pair encodings plus paths.

    Holds the parameter store, the frozen path vocabulary, and per-split
    caches of sparse path-count rows. Forward passes are batched; every
    query excludes its own labelled edge from all neighborhoods and paths.
    """

    def __init__(
        self,
        graph: KnowledgeGraph,
        attention: encoder.AttentionConfig,
        use_paths: bool = True,
        max_path_len: int = 3,
        store: ParameterStore | None = None,
        vocab: paths.PathVocabulary | None = None,
    ):
        self.graph = graph
        self.attention = attention
        self.use_paths = use_paths
        self.max_path_len = max_path_len
        self.store = store if store is not None else ParameterStore()
        self.path_index = paths.PathIndex(graph, max_path_len) if use_paths else None
        self.vocab = vocab
        self._split_counts: dict[str, sp.csr_matrix] = {}
        self.dropped_paths = 0

    # -- setup ---------------------------------------------------------------

    def build_vocabulary(self) -> None:
        if not self.use_paths or self.vocab is not None:
            return
        self.vocab = paths.build_path_vocabulary(
            self.graph, self.path_index, self.graph.split_edge_ids("train")
        )
        logger.info("path vocabulary: %d distinct paths", len(self.vocab))

    def init_parameters(self, seed: int) -> None:
        cfg = self.attention
        if self.use_paths and self.vocab is None:
            self.build_vocabulary()
        rng = np.random.default_rng(int(mix(seed, 0xC0FFEE)))
        s = self.store
        s.glorot("relation_embeddings", (self.graph.n_relations, cfg.dim), rng)
        for k in range(1, cfg.iterations + 1):
            s.glorot(f"update_w1_{k}", (cfg.dim * cfg.dim, cfg.dim), rng)
            s.glorot(f"update_w2_{k}", (cfg.dim, cfg.dim), rng)
            s.glorot(f"update_bias_{k}", (cfg.dim,), rng)
        for mech in cfg.mechanisms:
            s.glorot(f"{mech}_align", (cfg.dim, cfg.dim), rng)
            s.glorot(f"{mech}_value", (cfg.dim, cfg.dim), rng)
        s.glorot("output_projection", (self.graph.n_relations, cfg.pair_width), rng)
        if self.use_paths:
            # zero start: raw path counts are heavy-tailed (hundreds of walks per
            # path type), so any nonzero init yields huge initial logits
            s.create("path_projection", np.zeros((max(len(self.vocab), 1), self.graph.n_relations)))

    # -- path-count caches -----------------------------------------------------

    def split_path_counts(self, split: str) -> sp.csr_matrix:
        """Sparse path-count rows for a split's triples, own edge excluded."""
        if split not in self._split_counts:
            ids = self.graph.split_edge_ids(split)
            batch = paths.encode_pair_batch(
                self.path_index,
                self.vocab,
                self.graph.heads[ids],
                self.graph.tails[ids],
                ids,
            )
            if batch.dropped:
                self.dropped_paths += batch.dropped
                logger.info("%s split: %d walks outside the frozen vocabulary dropped",
                            split, batch.dropped)
            self._split_counts[split] = batch.counts
        return self._split_counts[split]

    # -- forward ---------------------------------------------------------------

    def forward_batch(
        self,
        edge_ids: np.ndarray,
        pass_keys: np.ndarray,
        counts: sp.csr_matrix | None = None,
        leaves: dict[str, ad.Tensor] | None = None,
        audit: encoder.AttentionAudit | None = None,
    ) -> ad.Tensor:
        """Relation logits (B, |R|) for the given triples, own edges excluded."""
        edge_ids = np.asarray(edge_ids)
        if leaves is None:
            leaves = self.store.leaves()
        scope = encoder.build_scope(
            self.graph,
            self.graph.heads[edge_ids].astype(np.int64),
            self.graph.tails[edge_ids].astype(np.int64),
            edge_ids.astype(np.int64),
            np.asarray(pass_keys, dtype=np.uint64),
            self.attention,
        )
        pair = encoder.encode_pairs(leaves, self.attention, scope, audit=audit)
        logits = ad.matmul(pair, ad.transpose(leaves["output_projection"]))
        if self.use_paths and len(self.vocab):
            if counts is None:
                batch = paths.encode_pair_batch(
                    self.path_index, self.vocab,
                    self.graph.heads[edge_ids], self.graph.tails[edge_ids], edge_ids,
                )
                counts = batch.counts
            logits = ad.add(logits, paths.path_logits(leaves["path_projection"], counts))
        return logits

    def score(
        self,
        head: int,
        tail: int,
        exclude: int | None = None,
        pass_key: int = 0,
        audit: encoder.AttentionAudit | None = None,
    ) -> ad.Tensor:
        """Logits (|R|,) for one entity pair."""
        if not 0 <= head < self.graph.n_entities or not 0 <= tail < self.graph.n_entities:
            raise ValueError("unknown entity id")
        leaves = self.store.leaves()
        scope = encoder.build_scope(
            self.graph,
            np.array([head], dtype=np.int64),
            np.array([tail], dtype=np.int64),
            np.array([-1 if exclude is None else exclude], dtype=np.int64),
            np.array([pass_key], dtype=np.uint64),
            self.attention,
        )
        pair = encoder.encode_pairs(leaves, self.attention, scope, audit=audit)
        logits = ad.matmul(pair, ad.transpose(leaves["output_projection"]))
        if self.use_paths and len(self.vocab):
            plog, _, _ = paths.encode_paths(
                self.path_index, self.vocab, leaves["path_projection"],
                head, tail, -1 if exclude is None else exclude,
            )
            logits = ad.add(logits, ad.reshape(plog, (1, self.graph.n_relations)))
        return ad.reshape(logits, (self.graph.n_relations,))

    def probabilities(self, head: int, tail: int, **kw) -> np.ndarray:
        with ad.no_grad():
            logits = self.score(head, tail, **kw)
        z = logits.data - logits.data.max()
        e = np.exp(z)
        return e / e.sum()
