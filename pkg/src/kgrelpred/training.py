"""Training loop, configuration, and checkpoint serialization."""

from __future__ import annotations

import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .encoder import AttentionConfig, AttentionAudit
from .graph import KnowledgeGraph
from .hashing import mix, rank_keys
from .model import RelationModel
from .optim import ParameterStore, adam_step

logger = logging.getLogger("kgrelpred")

CHECKPOINT_MAGIC = b"KGRELPRD"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; message names the worst norms."""


@dataclass(frozen=True)
class TrainConfig:
    """Full training configuration; defaults follow the reference setup."""

    batch_size: int = 128
    epochs: int = 25
    learning_rate: float = 1e-3
    l2_weight: float = 1e-7
    dim: int = 64
    iterations: int = 1
    hops: int = 3
    max_path_len: int = 3
    p_random: float = 0.2
    mechanisms: tuple[str, ...] = ("local", "global", "random")
    use_paths: bool = True
    seed: int = 0
    neighbor_cap: int | None = None
    workers: int = 1
    activation: str = "relu"

    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            mechanisms=tuple(self.mechanisms),
            iterations=self.iterations,
            hops=self.hops,
            p_random=self.p_random,
            dim=self.dim,
            neighbor_cap=self.neighbor_cap,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mechanisms"] = list(self.mechanisms)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["mechanisms"] = tuple(d["mechanisms"])
        if d.get("neighbor_cap") is not None:
            d["neighbor_cap"] = int(d["neighbor_cap"])
        return TrainConfig(**d)


@dataclass
class Checkpoint:
    """Everything needed to rebuild a scoring model, round-trips bit-exactly."""

    config: TrainConfig
    entity_names: list[str]
    relation_names: list[str]
    path_keys: np.ndarray | None  # uint64, or None when paths disabled
    path_base: int
    tensors: dict[str, np.ndarray]

    def vocab_signature(self) -> tuple[int, int]:
        return (len(self.entity_names), len(self.relation_names))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_mrr: float
    seconds: float


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[EpochLog] = field(default_factory=list)


def new_model(graph: KnowledgeGraph, cfg: TrainConfig) -> RelationModel:
    model = RelationModel(
        graph,
        cfg.attention(),
        use_paths=cfg.use_paths,
        max_path_len=cfg.max_path_len,
    )
    model.build_vocabulary()
    model.init_parameters(cfg.seed)
    return model


def _snapshot(model: RelationModel, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        config=cfg,
        entity_names=list(model.graph.entity_names),
        relation_names=list(model.graph.relation_names),
        path_keys=(model.vocab.keys.copy() if model.use_paths else None),
        path_base=(model.vocab.base if model.use_paths else 0),
        tensors=model.store.state_dict(),
    )


def _batch_pass(model, batch_ids, pass_keys, counts, scale, audit):
    """Forward + backward over one chunk; returns (loss sum contribution, leaf grads)."""
    leaves = model.store.leaves()
    logits = model.forward_batch(batch_ids, pass_keys, counts=counts, leaves=leaves, audit=audit)
    targets = model.graph.rels[batch_ids]
    losses = ad.cross_entropy_rows(logits, targets)
    loss = ad.scale(ad.sum_rows(ad.reshape(losses, (len(batch_ids), 1))), scale)
    loss = ad.reshape(loss, ())
    ad.backward(loss)
    return float(losses.data.sum()), leaves


def train(graph: KnowledgeGraph, cfg: TrainConfig, audit: AttentionAudit | None = None) -> TrainResult:
    """Minimize mean cross-entropy over training triples with Adam.

    Each epoch visits every training edge exactly once in a seeded shuffle;
    each triple's forward pass excludes its own edge. Logs train loss and
    validation MRR per epoch; returns the final and the best-validation
    checkpoints.
    """
    from .evaluation import evaluate_model  # local import to avoid a cycle

    model = new_model(graph, cfg)
    train_ids = graph.split_edge_ids("train")
    counts_all = model.split_path_counts("train") if cfg.use_paths else None
    pos_of = np.zeros(len(graph.heads), dtype=np.int64)
    pos_of[train_ids] = np.arange(len(train_ids))

    result = TrainResult(final=None, best=None)
    best_mrr = -1.0
    step_counter = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        rng = np.random.default_rng(int(mix(cfg.seed, 0x5E0F, epoch)))
        perm = rng.permutation(len(train_ids))
        epoch_loss = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            batch_ids = train_ids[perm[lo: lo + cfg.batch_size]]
            pass_keys = rank_keys(
                np.uint64(cfg.seed),
                np.uint64(0xF0),
                (step_counter + np.arange(len(batch_ids))).astype(np.uint64),
            )
            step_counter += len(batch_ids)
            counts = counts_all[pos_of[batch_ids]] if cfg.use_paths else None
            scale = 1.0 / len(batch_ids)
            if cfg.workers > 1 and len(batch_ids) > 1:
                chunks = np.array_split(np.arange(len(batch_ids)), cfg.workers)
                chunks = [c for c in chunks if len(c)]
                with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                    futures = [
                        pool.submit(
                            _batch_pass, model, batch_ids[c], pass_keys[c],
                            counts[c] if counts is not None else None, scale, audit,
                        )
                        for c in chunks
                    ]
                    outs = [f.result() for f in futures]
                loss_sum = sum(o[0] for o in outs)
                for _, leaves in outs:
                    model.store.accumulate(leaves)
            else:
                loss_sum, leaves = _batch_pass(model, batch_ids, pass_keys, counts, scale, audit)
                model.store.accumulate(leaves)
            batch_loss = loss_sum / len(batch_ids)
            if not np.isfinite(batch_loss):
                worst = sorted(
                    model.store.total_sq_norm().items(), key=lambda kv: -kv[1]
                )[:3]
                raise TrainingDiverged(
                    "non-finite loss at epoch %d; largest parameter norms: %s"
                    % (epoch, ", ".join(f"{n}={v:.3e}" for n, v in worst))
                )
            epoch_loss += loss_sum
            adam_step(
                model.store,
                lr=cfg.learning_rate,
                l2_weight=cfg.l2_weight,
            )
        epoch_loss /= len(train_ids)
        report = evaluate_model(model, "valid", pass_key=mix(cfg.seed, 0xEA01, epoch),
                                batch_size=cfg.batch_size)
        log = EpochLog(epoch, epoch_loss, report.mrr, time.time() - t0)
        result.history.append(log)
        logger.info(
            "epoch %d: loss %.4f, valid MRR %.4f (%.1fs)",
            epoch, epoch_loss, report.mrr, log.seconds,
        )
        if report.mrr > best_mrr:
            best_mrr = report.mrr
            result.best = _snapshot(model, cfg)
    result.final = _snapshot(model, cfg)
    if result.best is None:
        result.best = result.final
    return result


def model_from_checkpoint(ckpt: Checkpoint, graph: KnowledgeGraph) -> RelationModel:
    """Rebuild a scoring model; refuses vocab or config mismatches."""
    if ckpt.entity_names != graph.entity_names or ckpt.relation_names != graph.relation_names:
        raise ValueError("checkpoint vocabularies do not match the dataset")
    from .paths import PathVocabulary

    cfg = ckpt.config
    vocab = None
    if cfg.use_paths:
        if ckpt.path_keys is None:
            raise ValueError("config mismatch: use_paths=true but checkpoint has no path vocabulary")
        vocab = PathVocabulary(
            keys=ckpt.path_keys.astype(np.uint64), base=ckpt.path_base, max_len=cfg.max_path_len
        )
    model = RelationModel(
        graph, cfg.attention(), use_paths=cfg.use_paths,
        max_path_len=cfg.max_path_len, vocab=vocab,
    )
    store = ParameterStore()
    store.load_state_dict(ckpt.tensors)
    model.store = store
    return model


# -- binary checkpoint container -------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, version, length-prefixed JSON header, named tensors."""
    header = {
        "config": ckpt.config.to_dict(),
        "entities": ckpt.entity_names,
        "relations": ckpt.relation_names,
        "path_base": ckpt.path_base,
        "path_keys": None if ckpt.path_keys is None else [int(k) for k in ckpt.path_keys],
        "tensor_names": list(ckpt.tensors),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, arr in ckpt.tensors.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 8) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", _read_exact(f, 8))
        header = json.loads(_read_exact(f, hlen).decode("utf-8"))
        tensors = {}
        for _ in header["tensor_names"]:
            (nlen,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape).copy()
            tensors[name] = arr
        if f.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    keys = header["path_keys"]
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        entity_names=header["entities"],
        relation_names=header["relations"],
        path_keys=None if keys is None else np.array(keys, dtype=np.uint64),
        path_base=header["path_base"],
        tensors=tensors,
    )
