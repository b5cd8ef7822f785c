"""Attention-enhanced relational message passing for entity-pair encodings.

For a queried (head, tail) pair the encoder runs K outer iterations of H-1
edge-update steps over the pair's capped k-hop enclosing subgraph, maintains
three attention views of the evolving edge states (local contexts within the
final iteration, per-edge trajectories across iteration snapshots, and a
Bernoulli-admitted random context), and concatenates the per-mechanism entity
messages of head and tail into one pair encoding of width 2 * D * #mechanisms.

All passes over one mini-batch are fused: scope rows of every query are
stacked into flat arrays and each algorithm step is a handful of batched
tensor ops. Given the same pass keys, results are bit-identical whether an
edge is excluded from a pass or physically removed from the graph, because
every stochastic choice is a pure hash of stable edge uids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import KnowledgeGraph
from .hashing import bernoulli, mix, rank_keys

MECHANISMS = ("local", "global", "random")


@dataclass(frozen=True)
class AttentionConfig:
    """Mechanism selection and message-passing geometry."""

    mechanisms: tuple[str, ...] = MECHANISMS
    iterations: int = 1  # K: outer iterations
    hops: int = 3  # H: hops per iteration; H-1 edge updates per iteration
    p_random: float = 0.2
    dim: int = 64
    neighbor_cap: int | None = None
    activation: str = "relu"

    def __post_init__(self):
        bad = [m for m in self.mechanisms if m not in MECHANISMS]
        if bad:
            raise ValueError(f"unknown mechanisms: {bad}")
        if not self.mechanisms:
            raise ValueError("at least one attention mechanism must be enabled")
        if self.iterations < 1 or self.hops < 1:
            raise ValueError("iterations and hops must be >= 1")
        if not 0.0 <= self.p_random <= 1.0:
            raise ValueError("p_random must lie in [0, 1]")
        # canonical order, deduplicated
        object.__setattr__(
            self, "mechanisms", tuple(m for m in MECHANISMS if m in self.mechanisms)
        )

    @property
    def n_steps(self) -> int:
        return self.iterations * (self.hops - 1)

    @property
    def entity_width(self) -> int:
        return self.dim * len(self.mechanisms)

    @property
    def pair_width(self) -> int:
        return 2 * self.entity_width


class AttentionAudit:
    """Collects attention-weight sums when debug auditing is enabled."""

    def __init__(self):
        self.count = 0
        self.max_deviation = 0.0

    def record(self, sums: np.ndarray) -> None:
        if sums.size:
            self.count += int(sums.size)
            dev = float(np.abs(sums - 1.0).max())
            if dev > self.max_deviation:
                self.max_deviation = dev


@dataclass
class BatchScope:
    """Flat per-batch view of every query's enclosing subgraph."""

    n_queries: int
    edge_batch: np.ndarray  # (E,) query slot per scope row
    edge_id: np.ndarray  # (E,) global edge id
    edge_rel: np.ndarray  # (E,)
    edge_uid: np.ndarray  # (E,) uint64
    edge_head_v: np.ndarray  # (E,) -> entity table row
    edge_tail_v: np.ndarray  # (E,)
    pass_keys: np.ndarray  # (B,) uint64
    batch_ptr: np.ndarray  # (B+1,) scope rows per query (rows sorted by query)
    msg_gather: np.ndarray  # (C,) scope rows feeding entity messages
    msg_ptr: np.ndarray  # (V+1,)
    ro_gather: np.ndarray  # (C2,) scope rows feeding the 2B readout entities
    ro_ptr: np.ndarray  # (2B+1,) order: head of query 0, tail of query 0, ...
    loc_rows: np.ndarray  # (n0,) scope rows needing a local-attention output
    ro_loc_gather: np.ndarray  # (C2,) positions into loc_rows
    loc_ctx_gather: np.ndarray  # (P,) scope rows forming the local contexts
    loc_ctx_ptr: np.ndarray  # (n0+1,)

    @property
    def n_edges(self) -> int:
        return len(self.edge_id)


def _capped_select(
    graph: KnowledgeGraph,
    ent_batch: np.ndarray,
    ent_id: np.ndarray,
    excludes: np.ndarray,
    pass_keys: np.ndarray,
    cap: int | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per (query, entity) row: capped incidence entries, flattened.

    Returns (row_of_entry, edge_of_entry). Selection of each entry depends
    only on (pass key, entity, edge uid, direction), never on which other
    entries exist, so exclusion and removal cannot shift it.
    """
    indptr = graph.inc_indptr
    starts = indptr[ent_id]
    counts = (indptr[ent_id + 1] - starts).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int32)
    row_of = np.repeat(np.arange(len(ent_id)), counts)
    flat = _ranges(starts, counts)
    edges = graph.inc_edges[flat]
    dirs = graph.inc_dirs[flat]
    keep = edges != excludes[ent_batch[row_of]]
    row_of, edges, dirs = row_of[keep], edges[keep], dirs[keep]
    if cap is not None and len(edges):
        keys = rank_keys(
            pass_keys[ent_batch[row_of]], ent_id[row_of].astype(np.uint64),
            graph.uids[edges], dirs,
        )
        order = np.lexsort((keys, row_of))
        row_s, edge_s = row_of[order], edges[order]
        seg_start = np.flatnonzero(np.diff(row_s, prepend=-1))
        rank = np.arange(len(row_s)) - seg_start[np.searchsorted(row_s[seg_start], row_s)]
        sel = rank < cap
        row_of, edges = row_s[sel], edge_s[sel]
    return row_of, edges


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenate [s, s+c) ranges without a Python loop."""
    total = int(counts.sum())
    seg_of = np.repeat(np.arange(len(counts)), counts)
    flat_starts = np.cumsum(counts) - counts
    within = np.arange(total) - flat_starts[seg_of]
    return starts[seg_of] + within


def build_scope(
    graph: KnowledgeGraph,
    heads: np.ndarray,
    tails: np.ndarray,
    excludes: np.ndarray,
    pass_keys: np.ndarray,
    cfg: AttentionConfig,
) -> BatchScope:
    """Assemble the fused enclosing-subgraph arrays for one batch of queries."""
    B = len(heads)
    n_ent = graph.n_entities
    rounds = max(cfg.n_steps, 1)
    excludes = np.asarray(excludes, dtype=np.int64)  # -1 means "no exclusion"

    def ekey(b, e):
        return b.astype(np.int64) * len(graph.heads) + e

    def vkey(b, v):
        return b.astype(np.int64) * n_ent + v

    work_b = np.concatenate([np.arange(B), np.arange(B)]).astype(np.int64)
    work_v = np.concatenate([heads, tails]).astype(np.int64)
    wk = np.unique(vkey(work_b, work_v))
    work_b, work_v = wk // n_ent, wk % n_ent
    visited = wk
    scope_keys = np.zeros(0, dtype=np.int64)
    for _ in range(rounds):
        if len(work_v) == 0:
            break
        row_of, edges = _capped_select(graph, work_b, work_v, excludes, pass_keys, cfg.neighbor_cap)
        if len(edges) == 0:
            break
        new_keys = np.unique(ekey(work_b[row_of], edges))
        scope_keys = np.union1d(scope_keys, new_keys)
        eb, ee = new_keys // len(graph.heads), new_keys % len(graph.heads)
        cand = np.unique(
            np.concatenate([vkey(eb, graph.heads[ee]), vkey(eb, graph.tails[ee])])
        )
        nxt = np.setdiff1d(cand, visited, assume_unique=True)
        visited = np.union1d(visited, nxt)
        work_b, work_v = nxt // n_ent, nxt % n_ent

    edge_batch = (scope_keys // len(graph.heads)).astype(np.int64)
    edge_id = (scope_keys % len(graph.heads)).astype(np.int64)
    edge_rel = graph.rels[edge_id].astype(np.int64)
    edge_uid = graph.uids[edge_id]
    batch_ptr = np.searchsorted(edge_batch, np.arange(B + 1))

    # entity table: all endpoints present in scope, keyed by (query, entity)
    h_of = graph.heads[edge_id].astype(np.int64)
    t_of = graph.tails[edge_id].astype(np.int64)
    ent_keys = np.unique(np.concatenate([vkey(edge_batch, h_of), vkey(edge_batch, t_of),
                                         vkey(np.arange(B, dtype=np.int64), np.asarray(heads, dtype=np.int64)),
                                         vkey(np.arange(B, dtype=np.int64), np.asarray(tails, dtype=np.int64))]))
    ent_batch = (ent_keys // n_ent).astype(np.int64)
    ent_id = (ent_keys % n_ent).astype(np.int64)
    edge_head_v = np.searchsorted(ent_keys, vkey(edge_batch, h_of))
    edge_tail_v = np.searchsorted(ent_keys, vkey(edge_batch, t_of))

    # per-entity incidence within the pass: capped selection intersected with scope
    row_of, edges = _capped_select(graph, ent_batch, ent_id, excludes, pass_keys, cfg.neighbor_cap)
    cand_keys = ekey(ent_batch[row_of], edges)
    pos = np.searchsorted(scope_keys, cand_keys)
    pos_clip = np.minimum(pos, max(len(scope_keys) - 1, 0))
    hit = len(scope_keys) > 0
    in_scope = (scope_keys[pos_clip] == cand_keys) if hit else np.zeros(len(cand_keys), bool)
    row_of, srow = row_of[in_scope], pos_clip[in_scope]
    order = np.lexsort((srow, row_of))
    row_of, msg_gather = row_of[order], srow[order]
    msg_ptr = np.searchsorted(row_of, np.arange(len(ent_keys) + 1))

    # readout entities: (head of query b, tail of query b) pairs in order
    q_ent_keys = np.empty(2 * B, dtype=np.int64)
    q_ent_keys[0::2] = vkey(np.arange(B, dtype=np.int64), np.asarray(heads, dtype=np.int64))
    q_ent_keys[1::2] = vkey(np.arange(B, dtype=np.int64), np.asarray(tails, dtype=np.int64))
    q_rows = np.searchsorted(ent_keys, q_ent_keys)
    ro_counts = msg_ptr[q_rows + 1] - msg_ptr[q_rows]
    ro_ptr = np.concatenate([[0], np.cumsum(ro_counts)])
    ro_gather = (
        np.concatenate([msg_gather[msg_ptr[r]: msg_ptr[r + 1]] for r in q_rows])
        if ro_counts.sum()
        else np.zeros(0, dtype=np.int64)
    ).astype(np.int64)

    # local-attention outputs are needed only for readout rows
    loc_rows = np.unique(ro_gather)
    ro_loc_gather = np.searchsorted(loc_rows, ro_gather)
    # context of edge r: incidence entries of its endpoints, minus r, deduplicated
    if len(loc_rows):
        hv, tv = edge_head_v[loc_rows], edge_tail_v[loc_rows]
        reps = []
        for vrows in (hv, tv):
            cnts = msg_ptr[vrows + 1] - msg_ptr[vrows]
            gi = (
                np.concatenate([msg_gather[msg_ptr[r]: msg_ptr[r + 1]] for r in vrows])
                if cnts.sum()
                else np.zeros(0, dtype=np.int64)
            )
            reps.append((np.repeat(np.arange(len(loc_rows)), cnts), gi))
        lpos = np.concatenate([reps[0][0], reps[1][0]])
        lrow = np.concatenate([reps[0][1], reps[1][1]]).astype(np.int64)
        keep = lrow != loc_rows[lpos]
        lpos, lrow = lpos[keep], lrow[keep]
        n_scope = len(scope_keys)
        pair_keys = np.unique(lpos * n_scope + lrow)
        lpos = pair_keys // n_scope
        lrow = pair_keys % n_scope
        loc_ctx_ptr = np.searchsorted(lpos, np.arange(len(loc_rows) + 1))
        loc_ctx_gather = lrow
    else:
        loc_ctx_ptr = np.zeros(1, dtype=np.int64)
        loc_ctx_gather = np.zeros(0, dtype=np.int64)

    return BatchScope(
        n_queries=B,
        edge_batch=edge_batch,
        edge_id=edge_id,
        edge_rel=edge_rel,
        edge_uid=edge_uid,
        edge_head_v=edge_head_v,
        edge_tail_v=edge_tail_v,
        pass_keys=np.asarray(pass_keys, dtype=np.uint64),
        batch_ptr=batch_ptr,
        msg_gather=msg_gather.astype(np.int64),
        msg_ptr=msg_ptr,
        ro_gather=ro_gather,
        ro_ptr=ro_ptr.astype(np.int64),
        loc_rows=loc_rows.astype(np.int64),
        ro_loc_gather=ro_loc_gather.astype(np.int64),
        loc_ctx_gather=loc_ctx_gather.astype(np.int64),
        loc_ctx_ptr=loc_ctx_ptr.astype(np.int64),
    )


def _act(t: ad.Tensor, activation: str) -> ad.Tensor:
    return ad.relu(t) if activation == "relu" else ad.sigmoid(t)


def _mask_empty(t: ad.Tensor, counts: np.ndarray) -> ad.Tensor:
    """Zero rows whose context was empty (documented fallback)."""
    if (counts > 0).all():
        return t
    return ad.scale_rows(t, (counts > 0).astype(np.float64))


def encode_pairs(
    leaves: dict[str, ad.Tensor],
    cfg: AttentionConfig,
    scope: BatchScope,
    audit: AttentionAudit | None = None,
) -> ad.Tensor:
    """Pair encodings for one batch of queries, shape (B, 2*D*#mechanisms)."""
    B = scope.n_queries
    D = cfg.dim
    embed = leaves["relation_embeddings"]
    s0 = ad.gather_rows(embed, scope.edge_rel)
    states = s0
    snapshots = [s0]
    random_picks: list[tuple[np.ndarray, ad.Tensor]] = []
    want_random = "random" in cfg.mechanisms

    for k in range(1, cfg.iterations + 1):
        for hop in range(1, cfg.hops):
            m = ad.segment_sum(states, scope.msg_gather, scope.msg_ptr)
            mh = ad.gather_rows(m, scope.edge_head_v)
            mt = ad.gather_rows(m, scope.edge_tail_v)
            states = ad.pair_bilinear(
                mh, mt, states,
                leaves[f"update_w1_{k}"], leaves[f"update_w2_{k}"], leaves[f"update_bias_{k}"],
                activation=cfg.activation,
            )
            if want_random and cfg.p_random > 0 and scope.n_edges:
                admit = bernoulli(
                    cfg.p_random,
                    scope.pass_keys[scope.edge_batch],
                    scope.edge_uid,
                    np.uint64(k),
                    np.uint64(hop),
                )
                rows = np.flatnonzero(admit)
                if len(rows):
                    random_picks.append((rows, states))
        snapshots.append(states)

    parts: list[ad.Tensor] = []
    ro_batch = np.repeat(np.arange(B), 2)
    ro_counts = np.diff(scope.ro_ptr)

    if "local" in cfg.mechanisms:
        parts.append(_local_messages(leaves, cfg, scope, states, audit))
    if "global" in cfg.mechanisms:
        parts.append(_global_messages(leaves, cfg, scope, snapshots, audit))
    if "random" in cfg.mechanisms:
        v = _random_context_vector(leaves, cfg, scope, random_picks, audit)
        # every edge shares the context vector, so m_e^random = |N(e)| * v
        m_rand = ad.scale_rows(ad.gather_rows(v, ro_batch), ro_counts.astype(np.float64))
        parts.append(m_rand)

    m_att = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)  # (2B, D*n)
    return ad.reshape(m_att, (B, cfg.pair_width))


def _local_messages(leaves, cfg, scope, states, audit) -> ad.Tensor:
    """Eqs. of the local mechanism over the final iteration's states."""
    B = scope.n_queries
    n_scope = np.diff(scope.batch_ptr)
    sbar = ad.segment_sum(states, np.arange(scope.n_edges), scope.batch_ptr)
    sbar = ad.scale_rows(sbar, 1.0 / np.maximum(n_scope, 1))
    q = ad.matmul(sbar, leaves["local_align"])  # (B, D)
    ctx_batch = scope.edge_batch[scope.loc_ctx_gather]
    logits = ad.row_dot(ad.gather_rows(q, ctx_batch), ad.gather_rows(states, scope.loc_ctx_gather))
    alpha = ad.segment_softmax(logits, scope.loc_ctx_ptr, audit=audit)
    values = ad.matmul(states, leaves["local_value"])
    weighted = ad.scale_rows(ad.gather_rows(values, scope.loc_ctx_gather), alpha)
    out = ad.segment_sum(weighted, np.arange(len(scope.loc_ctx_gather)), scope.loc_ctx_ptr)
    out = _mask_empty(_act(out, cfg.activation), np.diff(scope.loc_ctx_ptr))
    return ad.segment_sum(out, scope.ro_loc_gather, scope.ro_ptr)


def _global_messages(leaves, cfg, scope, snapshots, audit) -> ad.Tensor:
    """Per-edge attention across iteration snapshots, queried by S_0."""
    q = ad.matmul(snapshots[0], leaves["global_align"])
    cols = [ad.reshape(ad.row_dot(q, s), (scope.n_edges, 1)) for s in snapshots]
    logits = cols[0] if len(cols) == 1 else ad.concat(cols, axis=1)
    alpha = ad.softmax_rows(logits, audit=audit)
    out = None
    for i, s in enumerate(snapshots):
        w = ad.reshape(ad.slice_cols(alpha, i, i + 1), (scope.n_edges,))
        term = ad.scale_rows(ad.matmul(s, leaves["global_value"]), w)
        out = term if out is None else ad.add(out, term)
    out = _act(out, cfg.activation)
    return ad.segment_sum(out, scope.ro_gather, scope.ro_ptr)


def _random_context_vector(leaves, cfg, scope, random_picks, audit) -> ad.Tensor:
    """One attention-combined vector per query over its admitted emissions."""
    B = scope.n_queries
    if not random_picks:
        return ad.constant(np.zeros((B, cfg.dim)))
    rows = np.concatenate([r for r, _ in random_picks])
    batches = scope.edge_batch[rows]
    gathered = [ad.gather_rows(s, r) for r, s in random_picks]
    ctx = gathered[0] if len(gathered) == 1 else ad.concat(gathered, axis=0)
    order = np.argsort(batches, kind="stable")
    ctx = ad.gather_rows(ctx, order)
    batches = batches[order]
    ptr = np.searchsorted(batches, np.arange(B + 1))
    counts = np.diff(ptr)
    q = ad.segment_sum(ctx, np.arange(len(batches)), ptr)
    q = ad.scale_rows(q, 1.0 / np.maximum(counts, 1))
    qw = ad.matmul(q, leaves["random_align"])
    logits = ad.row_dot(ad.gather_rows(qw, batches), ctx)
    alpha = ad.segment_softmax(logits, ptr, audit=audit)
    weighted = ad.scale_rows(ad.matmul(ctx, leaves["random_value"]), alpha)
    v = ad.segment_sum(weighted, np.arange(len(batches)), ptr)
    return _mask_empty(_act(v, cfg.activation), counts)


# -- single-pair / whole-graph reference surface --------------------------------


def init_edge_states(graph: KnowledgeGraph, embeddings: np.ndarray) -> np.ndarray:
    """Initial edge states over train edges: each edge copies its relation row."""
    return embeddings[graph.rels[graph.train_edge_ids]]


def entity_messages(graph: KnowledgeGraph, states: np.ndarray) -> np.ndarray:
    """Sum of incident edge states per entity (whole-graph, uncapped)."""
    pos = {int(e): i for i, e in enumerate(graph.train_edge_ids)}
    out = np.zeros((graph.n_entities, states.shape[1]))
    for v in range(graph.n_entities):
        lo, hi = graph.inc_indptr[v], graph.inc_indptr[v + 1]
        for e in graph.inc_edges[lo:hi]:
            out[v] += states[pos[int(e)]]
    return out


def message_pass_step(
    graph: KnowledgeGraph,
    states: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
    bias: np.ndarray,
    activation: str = "relu",
) -> np.ndarray:
    """One whole-graph edge update: act(flatten(m_h outer m_t) W1 + s W2 + b)."""
    m = entity_messages(graph, states)
    ids = graph.train_edge_ids
    mh, mt = m[graph.heads[ids]], m[graph.tails[ids]]
    cross = (mh[:, :, None] * mt[:, None, :]).reshape(len(ids), -1)
    z = cross @ w1 + states @ w2 + bias
    return np.where(z > 0, z, 0.0) if activation == "relu" else 1.0 / (1.0 + np.exp(-z))


def run_algorithm(
    graph: KnowledgeGraph,
    leaves: dict[str, ad.Tensor],
    cfg: AttentionConfig,
    head: int,
    tail: int,
    exclude: int | None = None,
    pass_key: int = 0,
    audit: AttentionAudit | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Full attention-enhanced pass for one query; returns (m_head, m_tail)."""
    scope = build_scope(
        graph,
        np.array([head]),
        np.array([tail]),
        np.array([-1 if exclude is None else exclude]),
        np.array([mix(pass_key)], dtype=np.uint64),
        cfg,
    )
    pair = encode_pairs(leaves, cfg, scope, audit=audit)
    w = cfg.entity_width
    m_h = ad.reshape(ad.slice_cols(pair, 0, w), (w,))
    m_t = ad.reshape(ad.slice_cols(pair, w, 2 * w), (w,))
    return m_h, m_t


def pair_encoding(m_head: ad.Tensor, m_tail: ad.Tensor) -> ad.Tensor:
    """Concatenate head and tail messages; widths must match."""
    if m_head.shape != m_tail.shape:
        raise ValueError(f"width mismatch: {m_head.shape} vs {m_tail.shape}")
    return ad.concat([m_head, m_tail], axis=0)
