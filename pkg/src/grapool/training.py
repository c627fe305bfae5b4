"""Model assembly, losses, SGD and the early-stopped training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NonFiniteError, Tensor
from .graphio import GraphDataset, GraphInstance, SplitSpec, batch_iter
from .layers import GcnLayer, MlpBlock, global_mean_readout, normalize_adjacency
from .pooling import (
    AGGREGATORS,
    AUX_LOSSES,
    SELECTIONS,
    AuxLossReport,
    DiffPool,
    PoolOutput,
    SAGPool,
    SpaPool,
    TopKPool,
)

log = logging.getLogger(__name__)

POOLINGS = ("spapool", "topk", "sagpool", "diffpool")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    pooling: str = "spapool"
    aggregator: str | None = None
    aux_loss: str | None = None
    selection: str | None = None
    hidden: int = 64
    ratio: float = 0.5
    diffpool_clusters: int | None = None

    def resolved(self) -> "ModelConfig":
        """Fill pooling-specific defaults and validate the combination."""
        p = self.pooling
        if p not in POOLINGS:
            raise ConfigError(f"unknown pooling {p!r}; choose from {POOLINGS}")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"pooling ratio must be in (0, 1], got {self.ratio}")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if p == "spapool":
            cfg = replace(
                self,
                aggregator=self.aggregator or "cosine",
                aux_loss=self.aux_loss or "diffpool",
                selection=self.selection or "topk",
            )
            if cfg.aggregator not in AGGREGATORS:
                raise ConfigError(f"unknown aggregator {cfg.aggregator!r}")
            if cfg.selection not in SELECTIONS:
                raise ConfigError(f"unknown selection {cfg.selection!r}")
        else:
            if self.aggregator is not None or self.selection is not None:
                raise ConfigError(f"aggregator/selection only apply to spapool, not {p}")
            default_aux = "diffpool" if p == "diffpool" else "none"
            cfg = replace(self, aux_loss=self.aux_loss or default_aux)
            if p in ("topk", "sagpool") and cfg.aux_loss != "none":
                raise ConfigError(f"{p} produces no assignment matrix; aux_loss must be 'none'")
        if cfg.aux_loss not in AUX_LOSSES:
            raise ConfigError(f"unknown aux_loss {cfg.aux_loss!r}")
        return cfg

    def signature(self) -> str:
        c = self.resolved()
        parts = [c.pooling]
        if c.pooling == "spapool":
            parts += [c.selection, c.aggregator]
        parts.append(c.aux_loss)
        return "-".join(parts)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError(f"invalid training config {self}")


@dataclass
class RunResult:
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    test_acc: float = float("nan")
    seconds: float = 0.0
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class GraphClassifier:
    """MLP -> GCN -> pool -> GCN -> mean readout -> linear classifier."""

    def __init__(self, feature_dim: int, num_classes: int, config: ModelConfig, seed: int):
        cfg = config.resolved()
        rng = np.random.default_rng(seed)
        hid = cfg.hidden
        self.config = cfg
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.encoder = MlpBlock([feature_dim, hid], rng, activate_last=True)
        self.gcn1 = GcnLayer(hid, hid, rng)
        if cfg.pooling == "spapool":
            self.pool = SpaPool(hid, rng, cfg.ratio, cfg.aggregator, cfg.selection, cfg.aux_loss)
        elif cfg.pooling == "topk":
            self.pool = TopKPool(hid, rng, cfg.ratio)
        elif cfg.pooling == "sagpool":
            self.pool = SAGPool(hid, rng, cfg.ratio)
        else:
            if cfg.diffpool_clusters is None:
                raise ConfigError("diffpool needs diffpool_clusters (see diffpool_default_clusters)")
            self.pool = DiffPool(hid, rng, cfg.diffpool_clusters, cfg.aux_loss)
        self.gcn2 = GcnLayer(hid, hid, rng)
        self.classifier = MlpBlock([hid, num_classes], rng)

    def parameters(self) -> list[Tensor]:
        return (
            self.encoder.parameters()
            + self.gcn1.parameters()
            + self.pool.parameters()
            + self.gcn2.parameters()
            + self.classifier.parameters()
        )

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        for p, arr in zip(self.parameters(), state, strict=True):
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def run(self, graph: GraphInstance) -> tuple[Tensor, PoolOutput]:
        if graph.features.shape[1] != self.feature_dim:
            raise ad.DimensionError(
                f"graph has {graph.features.shape[1]} features, model expects {self.feature_dim}"
            )
        adj = Tensor(graph.adjacency)
        h = self.encoder(Tensor(graph.features))
        h = self.gcn1(normalize_adjacency(adj), h)
        pooled = self.pool(adj, h)
        h = self.gcn2(normalize_adjacency(pooled.adjacency), pooled.features)
        logits = self.classifier(global_mean_readout(h))
        return logits, pooled


def diffpool_default_clusters(dataset: GraphDataset, ratio: float = 0.5) -> int:
    avg = float(np.mean([g.num_nodes for g in dataset.graphs]))
    return max(1, math.ceil(ratio * avg))


def build_model(feature_dim: int, num_classes: int, config: ModelConfig, seed: int) -> GraphClassifier:
    return GraphClassifier(feature_dim, num_classes, config, seed)


def forward_graph(model: GraphClassifier, graph: GraphInstance) -> tuple[Tensor, AuxLossReport]:
    logits, pooled = model.run(graph)
    return logits, pooled.aux if pooled.aux is not None else AuxLossReport()


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    if not 0 <= label < logits.cols:
        raise ContractError(f"label {label} outside [0, {logits.cols})")
    return -ad.pick(ad.log_softmax_rows(logits), 0, label)


def total_loss(model: GraphClassifier, graphs: Sequence[GraphInstance]) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy plus mean auxiliary loss over a batch.

    Returns (total, mean cross-entropy).
    """
    ce_sum = None
    aux_sum = None
    for g in graphs:
        logits, aux = forward_graph(model, g)
        ce = cross_entropy_loss(logits, g.label)
        ce_sum = ce if ce_sum is None else ce_sum + ce
        if aux.terms:
            aux_sum = aux.total if aux_sum is None else aux_sum + aux.total
    scale = 1.0 / len(graphs)
    ce_mean = ce_sum * scale
    total = ce_mean if aux_sum is None else ce_mean + aux_sum * scale
    return total, ce_mean


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """w <- w - lr * grad, then clear the gradient."""
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step on a parameter without a gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def predict(model: GraphClassifier, graph: GraphInstance) -> int:
    with ad.no_grad():
        logits, _ = model.run(graph)
    # argmax returns the first maximum, i.e. the lower class index on ties
    return int(np.argmax(logits.data[0]))


def evaluate_accuracy(model: GraphClassifier, graphs: Sequence[GraphInstance]) -> float:
    if len(graphs) == 0:
        raise ValueError("accuracy of an empty set")
    correct = sum(predict(model, g) == g.label for g in graphs)
    return correct / len(graphs)


def train_run(
    dataset: GraphDataset,
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    init_seed: int | None = None,
) -> RunResult:
    """Train with SGD, keep the best-validation parameters, report test accuracy.

    Stops once ``patience`` consecutive epochs fail to improve validation
    accuracy (ties keep the earlier epoch) or at ``max_epochs``.
    """
    if not (split.train and split.val and split.test):
        raise ValueError("every partition of the split must be non-empty")
    cfg = model_config.resolved()
    if cfg.pooling == "diffpool" and cfg.diffpool_clusters is None:
        cfg = replace(cfg, diffpool_clusters=diffpool_default_clusters(dataset, cfg.ratio))
    tc = train_config
    start = time.perf_counter()
    result = RunResult()
    model = build_model(
        dataset.feature_dim,
        dataset.num_classes,
        cfg,
        tc.seed if init_seed is None else init_seed,
    )
    params = model.parameters()
    val_graphs = [dataset[i] for i in split.val]
    best_acc = -1.0
    best_state = model.state()
    stale = 0
    try:
        for epoch in range(1, tc.max_epochs + 1):
            loss_sum = 0.0
            for batch in batch_iter(split.train, tc.batch_size, tc.seed, epoch):
                loss, _ = total_loss(model, [dataset[i] for i in batch])
                ad.backward(loss)
                sgd_step(params, tc.lr)
                loss_sum += loss.item() * len(batch)
            result.train_loss.append(loss_sum / len(split.train))
            acc = evaluate_accuracy(model, val_graphs)
            result.val_acc.append(acc)
            result.stopped_epoch = epoch
            if acc > best_acc:
                best_acc, result.best_epoch, stale = acc, epoch, 0
                best_state = model.state()
            else:
                stale += 1
                if stale >= tc.patience:
                    break
    except NonFiniteError as exc:
        result.failed = True
        result.error = f"non-finite value at epoch {result.stopped_epoch + 1}: {exc}"
        result.seconds = time.perf_counter() - start
        log.warning("run failed: %s", result.error)
        return result
    model.load_state(best_state)
    result.test_acc = evaluate_accuracy(model, [dataset[i] for i in split.test])
    result.seconds = time.perf_counter() - start
    return result
