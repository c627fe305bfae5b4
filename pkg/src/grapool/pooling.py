"""Hierarchical pooling operators and auxiliary clustering losses.

SpaPool builds a soft assignment ``S`` (N x ceil(kN)) by scoring node
embeddings, keeping the top ``ceil(kN)`` as representatives, scaling each
representative by its score to form a centroid, and softmaxing an affinity
between every node and every centroid.  Pooled features are ``S^T H`` and
the pooled adjacency ``S^T A S``.

Baselines: TopKPool and SAGPool (keep the top nodes, gate them with
tanh(score), slice the adjacency) and DiffPool (fixed cluster count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .layers import GcnLayer, MlpBlock, glorot, normalize_adjacency

AGGREGATORS = ("cosine", "scalar", "attention")
AUX_LOSSES = ("diffpool", "mincut", "dmon", "none")
SELECTIONS = ("topk", "sag")
ATTENTION_WIDTH = 16


def pool_size(num_nodes: int, ratio: float) -> int:
    """ceil(ratio * N), never below 1."""
    # round() strips float noise such as 0.1 * 30 = 3.0000000000000004
    return max(1, math.ceil(round(ratio * num_nodes, 9)))


def rank_nodes(scores: np.ndarray, m: int) -> list[int]:
    """Indices of the ``m`` highest scores; ties go to the lower index."""
    order = np.argsort(-np.asarray(scores).ravel(), kind="stable")
    return [int(i) for i in order[:m]]


@dataclass
class AuxLossReport:
    terms: dict[str, Tensor] = field(default_factory=dict)

    @property
    def total(self) -> Tensor | None:
        total = None
        for t in self.terms.values():
            total = t if total is None else total + t
        return total

    def values(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.terms.items()}


@dataclass
class PoolOutput:
    adjacency: Tensor
    features: Tensor
    assignment: Tensor | None
    indices: list[int]
    scores: np.ndarray
    aux: AuxLossReport | None = None


# -- scoring --------------------------------------------------------------------


class TopKScorer:
    """Projection score y = H p / ||p||."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: float = 0.5):
        self.p = glorot(rng, dim, 1)
        self.ratio = ratio

    def parameters(self) -> list[Tensor]:
        return [self.p]

    def score(self, h: Tensor, a_norm: Tensor | None = None) -> Tensor:
        if h.cols != self.p.rows:
            raise DimensionError(f"embeddings {h.shape} vs scorer {self.p.shape}")
        return (h @ self.p) / ad.frobenius_norm(self.p)


class SagScorer:
    """Self-attention score: a one-column GCN over the normalized adjacency."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: float = 0.5):
        self.gcn = GcnLayer(dim, 1, rng, activation="none")
        self.ratio = ratio

    def parameters(self) -> list[Tensor]:
        return self.gcn.parameters()

    def score(self, h: Tensor, a_norm: Tensor | None = None) -> Tensor:
        if a_norm is None:
            raise ValueError("SAG scoring needs the normalized adjacency")
        return self.gcn(a_norm, h)


def topk_select(h_emb: Tensor, scorer, a_norm: Tensor | None = None):
    """Return (representatives m x F, selected scores m x 1, indices, all scores)."""
    y = scorer.score(h_emb, a_norm)
    m = pool_size(h_emb.rows, scorer.ratio)
    idx = rank_nodes(y.data, m)
    return ad.gather_rows(h_emb, idx), ad.gather_rows(y, idx), idx, y.data.ravel().copy()


# -- affinities -----------------------------------------------------------------


def affinity_cosine(h: Tensor, centroids: Tensor) -> Tensor:
    return ad.row_l2_normalize(h) @ ad.row_l2_normalize(centroids).T


def affinity_scalar(h: Tensor, reps: Tensor) -> Tensor:
    return h @ reps.T


class AttentionAggregator:
    def __init__(self, dim: int, rng: np.random.Generator, width: int = ATTENTION_WIDTH):
        self.query = MlpBlock([dim, width], rng)
        self.key = MlpBlock([dim, width], rng)
        self.width = width

    @classmethod
    def from_weights(cls, query, key) -> "AttentionAggregator":
        agg = cls.__new__(cls)
        agg.query = MlpBlock.from_weights(query)
        agg.key = MlpBlock.from_weights(key)
        agg.width = agg.query.layers[-1][0].cols
        return agg

    def parameters(self) -> list[Tensor]:
        return self.query.parameters() + self.key.parameters()


def affinity_attention(h: Tensor, reps: Tensor, params: AttentionAggregator) -> Tensor:
    hq = params.query(h)
    hk = params.key(reps)
    if hq.cols != params.width or hk.cols != params.width:
        raise DimensionError(f"attention projections must have width {params.width}")
    return (hq @ hk.T) * (1.0 / math.sqrt(params.width))


def affinity(kind: str, h: Tensor, centroids: Tensor, attention: AttentionAggregator | None = None) -> Tensor:
    if kind == "cosine":
        return affinity_cosine(h, centroids)
    if kind == "scalar":
        return affinity_scalar(h, centroids)
    if kind == "attention":
        if attention is None:
            raise ValueError("attention aggregator needs projection parameters")
        return affinity_attention(h, centroids, attention)
    raise ValueError(f"unknown aggregator {kind!r}")


# -- select / reduce / connect --------------------------------------------------


def spapool_select(h_emb: Tensor, scorer, aggregator: str = "cosine", attention=None, a_norm=None):
    """Assignment from already-computed embeddings.

    Returns (S, centroids, indices, all scores).
    """
    reps, scores, idx, all_scores = topk_select(h_emb, scorer, a_norm)
    centroids = ad.scale_rows(reps, scores)
    s = ad.softmax_rows(affinity(aggregator, h_emb, centroids, attention))
    return s, centroids, idx, all_scores


def spapool_assign(a_norm: Tensor, h: Tensor, gcn: GcnLayer, scorer, aggregator: str = "cosine", attention=None):
    h_emb = gcn(a_norm, h)
    return spapool_select(h_emb, scorer, aggregator, attention, a_norm)


def reduce_embeddings(s: Tensor, h: Tensor) -> Tensor:
    if s.rows != h.rows:
        raise DimensionError(f"assignment {s.shape} vs embeddings {h.shape}")
    return s.T @ h


def connect_adjacency(s: Tensor, adj) -> Tensor:
    adj = ad.as_tensor(adj)
    if adj.shape != (s.rows, s.rows):
        raise DimensionError(f"adjacency {adj.shape} vs assignment {s.shape}")
    return s.T @ (adj @ s)


# -- auxiliary losses -----------------------------------------------------------
# The adjacency is treated as a constant input in all three losses.


def _adj_array(adj) -> np.ndarray:
    return adj.data if isinstance(adj, Tensor) else np.asarray(adj, dtype=float)


def aux_loss_diffpool(s: Tensor, adj) -> AuxLossReport:
    a = Tensor(_adj_array(adj))
    link = ad.frobenius_norm(a - s @ s.T)
    return AuxLossReport({"link_pred": link, "entropy": ad.row_entropy_mean(s)})


def aux_loss_mincut_adaptive(s: Tensor, adj) -> AuxLossReport:
    a = _adj_array(adj)
    n, k = s.shape
    a_tilde = Tensor(a + np.eye(n))
    d_tilde = Tensor(np.diag((a + np.eye(n)).sum(axis=1)))
    cut = -(ad.trace(s.T @ (a_tilde @ s)) / ad.trace(s.T @ (d_tilde @ s)))
    sts = s.T @ s
    ortho = ad.frobenius_norm(sts / ad.frobenius_norm(sts) - Tensor(np.eye(k) / math.sqrt(k)))
    return AuxLossReport({"cut": cut, "orthogonality": ortho})


def modularity_matrix(adj) -> np.ndarray:
    a = _adj_array(adj)
    d = a.sum(axis=1, keepdims=True)
    two_m = a.sum()
    if two_m == 0:
        return np.zeros_like(a)
    return a - d @ d.T / two_m


def aux_loss_dmon_adaptive(s: Tensor, adj) -> AuxLossReport:
    a = _adj_array(adj)
    n, k = s.shape
    two_m = a.sum()
    if two_m == 0:
        modularity = Tensor(0.0)
    else:
        b = Tensor(modularity_matrix(a))
        modularity = ad.trace(s.T @ (b @ s)) * (-1.0 / two_m)
    collapse = ad.frobenius_norm(ad.column_sum(s)) * (math.sqrt(k) / n) - 1.0
    return AuxLossReport({"modularity": modularity, "collapse": collapse})


AUX_FUNCTIONS = {
    "diffpool": aux_loss_diffpool,
    "mincut": aux_loss_mincut_adaptive,
    "dmon": aux_loss_dmon_adaptive,
}


def aux_loss(kind: str, s: Tensor, adj) -> AuxLossReport | None:
    if kind in (None, "none"):
        return None
    try:
        return AUX_FUNCTIONS[kind](s, adj)
    except KeyError:
        raise ValueError(f"unknown auxiliary loss {kind!r}") from None


# -- pooling layers -------------------------------------------------------------


def _sparse_pool(adj: Tensor, h: Tensor, y: Tensor, ratio: float) -> PoolOutput:
    m = pool_size(h.rows, ratio)
    idx = rank_nodes(y.data, m)
    gate = ad.tanh(ad.gather_rows(y, idx))
    h_new = ad.scale_rows(ad.gather_rows(h, idx), gate)
    return PoolOutput(ad.submatrix(adj, idx), h_new, None, idx, y.data.ravel().copy())


def topkpool_layer(adj, h: Tensor, scorer: TopKScorer) -> PoolOutput:
    adj = ad.as_tensor(adj)
    return _sparse_pool(adj, h, scorer.score(h), scorer.ratio)


def sagpool_layer(adj, h: Tensor, score_gcn: GcnLayer, ratio: float = 0.5) -> PoolOutput:
    adj = ad.as_tensor(adj)
    if score_gcn.weight.cols != 1:
        raise DimensionError("SAGPool score GCN must output one column")
    y = score_gcn(normalize_adjacency(adj), h)
    return _sparse_pool(adj, h, y, ratio)


def diffpool_layer(adj, h: Tensor, assign_gcn: GcnLayer, embed_gcn: GcnLayer, aux: str = "diffpool") -> PoolOutput:
    adj = ad.as_tensor(adj)
    a_norm = normalize_adjacency(adj)
    s = ad.softmax_rows(assign_gcn(a_norm, h))
    z = embed_gcn(a_norm, h)
    return PoolOutput(
        connect_adjacency(s, adj),
        reduce_embeddings(s, z),
        s,
        list(range(s.cols)),
        np.zeros(0),
        aux_loss(aux, s, adj),
    )


class SpaPool:
    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        ratio: float = 0.5,
        aggregator: str = "cosine",
        selection: str = "topk",
        aux: str = "diffpool",
    ):
        if aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {aggregator!r}")
        if selection not in SELECTIONS:
            raise ValueError(f"unknown selection {selection!r}")
        if aux not in AUX_LOSSES:
            raise ValueError(f"unknown auxiliary loss {aux!r}")
        self.gcn = GcnLayer(dim, dim, rng)
        self.scorer = TopKScorer(dim, rng, ratio) if selection == "topk" else SagScorer(dim, rng, ratio)
        self.attention = AttentionAggregator(dim, rng) if aggregator == "attention" else None
        self.aggregator = aggregator
        self.aux = aux

    def parameters(self) -> list[Tensor]:
        params = self.gcn.parameters() + self.scorer.parameters()
        if self.attention is not None:
            params += self.attention.parameters()
        return params

    def __call__(self, adj, h: Tensor) -> PoolOutput:
        adj = ad.as_tensor(adj)
        a_norm = normalize_adjacency(adj)
        s, _, idx, scores = spapool_assign(a_norm, h, self.gcn, self.scorer, self.aggregator, self.attention)
        return PoolOutput(
            connect_adjacency(s, adj),
            reduce_embeddings(s, h),
            s,
            idx,
            scores,
            aux_loss(self.aux, s, adj),
        )


class TopKPool:
    def __init__(self, dim: int, rng: np.random.Generator, ratio: float = 0.5):
        self.scorer = TopKScorer(dim, rng, ratio)

    def parameters(self) -> list[Tensor]:
        return self.scorer.parameters()

    def __call__(self, adj, h: Tensor) -> PoolOutput:
        return topkpool_layer(adj, h, self.scorer)


class SAGPool:
    def __init__(self, dim: int, rng: np.random.Generator, ratio: float = 0.5):
        self.gcn = GcnLayer(dim, 1, rng, activation="none")
        self.ratio = ratio

    def parameters(self) -> list[Tensor]:
        return self.gcn.parameters()

    def __call__(self, adj, h: Tensor) -> PoolOutput:
        return sagpool_layer(adj, h, self.gcn, self.ratio)


class DiffPool:
    def __init__(self, dim: int, rng: np.random.Generator, clusters: int, aux: str = "diffpool"):
        if clusters < 1:
            raise ValueError("DiffPool needs at least one cluster")
        self.assign = GcnLayer(dim, clusters, rng, activation="none")
        self.embed = GcnLayer(dim, dim, rng)
        self.aux = aux

    def parameters(self) -> list[Tensor]:
        return self.assign.parameters() + self.embed.parameters()

    def __call__(self, adj, h: Tensor) -> PoolOutput:
        return diffpool_layer(adj, h, self.assign, self.embed, self.aux)
