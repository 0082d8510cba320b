"""Mini-batch training: cosine warm-restart schedule, Adam/SGD, checkpoints.

Runs are deterministic functions of (samples, configs, seed): batch order,
initialization and updates all derive from explicit seeds, and checkpoints
round-trip through decimal JSON text.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataset import IndicatorPanel, LabelSpec, coarsen_label
from .diffcore import ParameterStore
from .errors import (
    CorruptCheckpoint,
    DataError,
    Diverged,
    FormatVersionMismatch,
    InsufficientHistory,
    NonFiniteGradient,
)
from .graph_mapping import build_graph, indicator_vectors, node_features
from .model import GraphBatch, ModelConfig, init_params, loss_and_grad, model_forward, predict

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    optimizer: str = "adam"
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    restart_period_0: int = 10  # epochs in the first cosine cycle
    restart_mult: int = 2
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 30
    class_weights: bool = False

    def __post_init__(self):
        if self.lr_min >= self.lr_max:
            raise DataError("lr_min must be < lr_max")
        if self.restart_period_0 < 1 or self.restart_mult < 1:
            raise DataError("restart_period_0 and restart_mult must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise DataError("batch_size and epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise DataError(f"optimizer must be adam or sgd, got {self.optimizer!r}")

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "lr_max": self.lr_max,
            "lr_min": self.lr_min,
            "restart_period_0": self.restart_period_0,
            "restart_mult": self.restart_mult,
            "momentum": self.momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "early_stop_patience": self.early_stop_patience,
            "class_weights": self.class_weights,
        }


def warm_restart_lr(t: float, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate with warm restarts at fractional epoch t.

    Cycle lengths grow geometrically: T_0, T_0*mult, T_0*mult^2, ... The rate
    equals lr_max at every cycle start and anneals to lr_min within a cycle.
    """
    if t < 0:
        raise DataError("epoch progress must be >= 0")
    cycle_len = float(cfg.restart_period_0)
    t_cur = float(t)
    while t_cur >= cycle_len:
        t_cur -= cycle_len
        cycle_len *= cfg.restart_mult
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (
        1.0 + math.cos(math.pi * t_cur / cycle_len)
    )


class OptimizerState:
    """Per-parameter moment/velocity arrays mirroring a ParameterStore."""

    def __init__(self, params: ParameterStore, cfg: TrainConfig):
        self.step = 0
        self.kind = cfg.optimizer
        if self.kind == "adam":
            self.m = {n: np.zeros_like(params.value(n)) for n in params.names()}
            self.v = {n: np.zeros_like(params.value(n)) for n in params.names()}
        else:
            self.velocity = {n: np.zeros_like(params.value(n)) for n in params.names()}


def optimizer_step(
    params: ParameterStore, state: OptimizerState, lr: float, cfg: TrainConfig
) -> None:
    """One in-place update from the store's current gradients."""
    for name in params.names():
        if not np.isfinite(params.grad(name)).all():
            raise NonFiniteGradient(name)

    if state.kind == "adam":
        state.step += 1
        bc1 = 1.0 - cfg.beta1 ** state.step
        bc2 = 1.0 - cfg.beta2 ** state.step
        for name in params.names():
            g = params.grad(name)
            m = state.m[name]
            v = state.v[name]
            m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * params.value(name)
            params.value(name)[...] -= lr * update
    else:
        state.step += 1
        for name in params.names():
            vel = state.velocity[name]
            vel[...] = cfg.momentum * vel + params.grad(name)
            update = vel
            if cfg.weight_decay:
                update = update + cfg.weight_decay * params.value(name)
            params.value(name)[...] -= lr * update


# --- sample preparation -------------------------------------------------------


@dataclass
class GraphSample:
    """One (enterprise, year) observation: node features, edges, label."""

    enterprise_id: str
    year: int
    x: np.ndarray  # (n_vertices, window)
    edges: np.ndarray  # (m, 2) int64
    label: int


def build_samples(
    panels: list[IndicatorPanel],
    keys: list[tuple[str, int]],
    label_spec: LabelSpec,
    window: int = 4,
    plus_k: int = 0,
    abs_similarity: bool = False,
    global_edges: np.ndarray | None = None,
) -> list[GraphSample]:
    """Graph samples for the given (enterprise, year) keys.

    Keys with fewer than 2 years of history are dropped (no graph can be
    built for them). With ``global_edges`` every sample shares one edge set
    instead of its own per-window graph.
    """
    by_id = {p.enterprise_id: p for p in panels}
    samples = []
    for eid, year in keys:
        panel = by_id[eid]
        label = panel.label_for(year)
        if label is None:
            continue
        try:
            feats = node_features(panel, year, window)
        except InsufficientHistory:
            continue
        if global_edges is not None:
            edges = np.asarray(global_edges, dtype=np.int64)
        else:
            graph = build_graph(
                indicator_vectors(panel, year, window),
                plus_k=plus_k,
                abs_similarity=abs_similarity,
            )
            edges = graph.edge_array()
        samples.append(
            GraphSample(
                enterprise_id=eid,
                year=year,
                x=feats,
                edges=edges,
                label=coarsen_label(label, label_spec),
            )
        )
    return samples


def global_graph_edges(
    panels: list[IndicatorPanel],
    keys: list[tuple[str, int]],
    plus_k: int = 0,
    abs_similarity: bool = False,
) -> np.ndarray:
    """One shared graph built from all rows referenced by the given keys."""
    by_id = {p.enterprise_id: p for p in panels}
    rows = [by_id[eid].values[by_id[eid].years.index(year)] for eid, year in keys]
    if len(rows) < 2:
        raise DataError("need at least 2 rows to build a global graph")
    graph = build_graph(np.vstack(rows), plus_k=plus_k, abs_similarity=abs_similarity)
    return graph.edge_array()


def concat_batch(samples: list[GraphSample]) -> GraphBatch:
    """Block-diagonal concatenation with node ids remapped per graph."""
    xs, edges, graph_of_node, labels = [], [], [], []
    offset = 0
    for g, sample in enumerate(samples):
        n = sample.x.shape[0]
        xs.append(sample.x)
        if sample.edges.size:
            edges.append(sample.edges + offset)
        graph_of_node.append(np.full(n, g, dtype=np.int64))
        labels.append(sample.label)
        offset += n
    return GraphBatch(
        x=np.vstack(xs),
        edges=np.vstack(edges) if edges else np.empty((0, 2), dtype=np.int64),
        graph_of_node=np.concatenate(graph_of_node),
        num_graphs=len(samples),
        labels=np.array(labels, dtype=np.int64),
    )


def make_batches(
    samples: list[GraphSample], batch_size: int, seed: int, epoch: int
) -> list[GraphBatch]:
    """Deterministic (seed, epoch)-shuffled mini-batches."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(samples))
    return [
        concat_batch([samples[i] for i in order[start:start + batch_size]])
        for start in range(0, len(samples), batch_size)
    ]


# --- fit ------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class FitResult:
    params: ParameterStore  # best-validation snapshot
    best_epoch: int
    best_val_loss: float
    history: list[EpochStats] = field(default_factory=list)


def evaluate(
    samples: list[GraphSample],
    params: ParameterStore,
    cfg: ModelConfig,
    batch_size: int = 256,
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """(mean loss, accuracy, probability rows, labels) over the samples."""
    losses, probs_rows, labels = [], [], []
    for start in range(0, len(samples), batch_size):
        batch = concat_batch(samples[start:start + batch_size])
        logits, _ = model_forward(batch, params, cfg)
        loss, probs = dc.softmax_xent(logits, batch.labels)
        losses.append(loss * batch.num_graphs)
        probs_rows.append(probs)
        labels.append(batch.labels)
    probs = np.vstack(probs_rows)
    labels = np.concatenate(labels)
    preds = probs.argmax(axis=1)
    loss = float(sum(losses) / len(samples))
    acc = float((preds == labels).mean())
    return loss, acc, probs, labels


def inverse_frequency_weights(samples: list[GraphSample], num_classes: int) -> np.ndarray:
    counts = np.bincount([s.label for s in samples], minlength=num_classes).astype(np.float64)
    weights = len(samples) / (num_classes * np.maximum(counts, 1.0))
    return weights


def fit(
    train_samples: list[GraphSample],
    val_samples: list[GraphSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> FitResult:
    """Train with per-step warm-restart LR; return the best-validation snapshot.

    Stops early after ``early_stop_patience`` epochs without a validation-loss
    improvement. Raises ``Diverged`` if the train loss leaves the reals.
    """
    if not train_samples:
        raise DataError("no training samples")
    params = init_params(model_cfg)
    state = OptimizerState(params, train_cfg)
    class_weights = (
        inverse_frequency_weights(train_samples, model_cfg.num_classes)
        if train_cfg.class_weights
        else None
    )

    best = FitResult(params=params.copy(), best_epoch=-1, best_val_loss=math.inf)
    since_improvement = 0

    for epoch in range(train_cfg.epochs):
        batches = make_batches(train_samples, train_cfg.batch_size, train_cfg.seed, epoch)
        epoch_lr = warm_restart_lr(float(epoch), train_cfg)
        total_loss = 0.0
        for step, batch in enumerate(batches):
            lr = warm_restart_lr(epoch + step / len(batches), train_cfg)
            params.zero_grads()
            loss, _ = loss_and_grad(batch, params, model_cfg, class_weights)
            total_loss += loss * batch.num_graphs
            optimizer_step(params, state, lr, train_cfg)
        train_loss = total_loss / len(train_samples)
        if not math.isfinite(train_loss):
            raise Diverged(epoch)

        if val_samples:
            val_loss, val_acc, _, _ = evaluate(val_samples, params, model_cfg)
        else:
            val_loss, val_acc = train_loss, float("nan")
        best.history.append(EpochStats(epoch, epoch_lr, train_loss, val_loss, val_acc))

        if val_loss < best.best_val_loss:
            best.params = params.copy()
            best.best_epoch = epoch
            best.best_val_loss = val_loss
            since_improvement = 0
        else:
            since_improvement += 1
            if since_improvement >= train_cfg.early_stop_patience:
                break

    return best


def write_history(history: list[EpochStats], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "val_acc"])
        for row in history:
            writer.writerow(
                [row.epoch, repr(row.lr), repr(row.train_loss), repr(row.val_loss), repr(row.val_acc)]
            )


# --- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParameterStore
    model_cfg: ModelConfig
    means: np.ndarray
    stds: np.ndarray
    label_spec: LabelSpec
    pipeline: dict  # window / graph construction / split settings

    def predict_batch(self, batch: GraphBatch):
        return predict(batch, self.params, self.model_cfg)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": ckpt.model_cfg.to_json_dict(),
        "label_spec": ckpt.label_spec.to_json_dict(),
        "standardization": {
            "means": [float(v) for v in ckpt.means],
            "stds": [float(v) for v in ckpt.stds],
        },
        "pipeline": ckpt.pipeline,
        "params": ckpt.params.to_json_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(str(exc)) from None
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatVersionMismatch(version, CHECKPOINT_FORMAT_VERSION)
    try:
        return Checkpoint(
            params=ParameterStore.from_json_dict(payload["params"]),
            model_cfg=ModelConfig.from_json_dict(payload["model_config"]),
            means=np.array(payload["standardization"]["means"], dtype=np.float64),
            stds=np.array(payload["standardization"]["stds"], dtype=np.float64),
            label_spec=LabelSpec.from_json_dict(payload["label_spec"]),
            pipeline=payload["pipeline"],
        )
    except KeyError as exc:
        raise CorruptCheckpoint(f"missing field {exc}") from None
