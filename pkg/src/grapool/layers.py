"""GCN propagation, dense MLP blocks and the mean readout."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)


def normalize_adjacency(adj) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 with D the row sums of A + I.

    Differentiable in ``adj`` so pooled (weighted) adjacencies can be fed back.
    """
    adj = ad.as_tensor(adj)
    n = adj.rows
    if adj.cols != n:
        raise DimensionError(f"adjacency must be square, got {adj.shape}")
    a_tilde = adj + Tensor(np.eye(n))
    d_inv_sqrt = ad.power(ad.row_sum(a_tilde), -0.5)
    half = ad.scale_rows(a_tilde, d_inv_sqrt)
    return ad.scale_rows(half.T, d_inv_sqrt)


class GcnLayer:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, activation: str = "relu"):
        self.weight = glorot(rng, fan_in, fan_out)
        self.activation = activation

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def __call__(self, a_norm: Tensor, h: Tensor) -> Tensor:
        return gcn_forward(a_norm, h, self)


def gcn_forward(a_norm: Tensor, h: Tensor, layer: GcnLayer) -> Tensor:
    if a_norm.cols != h.rows:
        raise DimensionError(f"adjacency {a_norm.shape} vs embeddings {h.shape}")
    return ad.activation(a_norm @ (h @ layer.weight), layer.activation)


class MlpBlock:
    """Affine layers with ReLU in between.

    ``activate_last`` also applies ReLU after the final layer, for blocks
    that feed further hidden layers rather than a classifier.
    """

    def __init__(self, dims, rng: np.random.Generator, activate_last: bool = False):
        self.layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            self.layers.append((glorot(rng, fan_in, fan_out), Tensor(np.zeros((1, fan_out)), requires_grad=True)))
        self.activate_last = activate_last

    @classmethod
    def from_weights(cls, pairs, activate_last: bool = False) -> "MlpBlock":
        block = cls.__new__(cls)
        block.layers = [
            (Tensor(w, requires_grad=True), Tensor(np.reshape(b, (1, -1)), requires_grad=True))
            for w, b in pairs
        ]
        block.activate_last = activate_last
        return block

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def __call__(self, h: Tensor) -> Tensor:
        return mlp_forward(h, self)


def mlp_forward(h: Tensor, block: MlpBlock) -> Tensor:
    last = len(block.layers) - 1
    for i, (w, b) in enumerate(block.layers):
        if h.cols != w.rows:
            raise DimensionError(f"layer {i}: input {h.shape} vs weight {w.shape}")
        h = ad.add_bias(h @ w, b)
        if i < last or block.activate_last:
            h = ad.relu(h)
    return h


def global_mean_readout(h: Tensor) -> Tensor:
    if h.rows < 1:
        raise DimensionError("readout of an empty graph")
    return ad.column_mean(h)
