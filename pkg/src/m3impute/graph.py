"""Bipartite sample/feature graph and its edge-aware message-passing encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError
from .layers import zeros_param
from .tensor import Tensor, uniform_init


@dataclass(frozen=True)
class BipartiteGraph:
    """One edge per observed cell, stored in row-major cell order.

    Continuous edges carry their scaled value. A discrete edge carries its
    class index, which the encoder expands to a one-hot vector.
    """

    n_samples: int
    n_features: int
    sample_index: np.ndarray  # (E,)
    feature_index: np.ndarray  # (E,)
    values: np.ndarray  # (E,)
    n_classes: np.ndarray  # (m,), 0 for continuous columns

    @property
    def n_edges(self) -> int:
        return self.sample_index.size

    def sample_neighbors(self, s: int) -> np.ndarray:
        lo, hi = self._sample_ptr[s], self._sample_ptr[s + 1]
        return self.feature_index[lo:hi]

    def feature_neighbors(self, f: int) -> np.ndarray:
        lo, hi = self._feature_ptr[f], self._feature_ptr[f + 1]
        return self.sample_index[self._by_feature[lo:hi]]

    @property
    def _sample_ptr(self):
        return np.concatenate([[0], np.cumsum(np.bincount(self.sample_index, minlength=self.n_samples))])

    @property
    def _feature_ptr(self):
        return np.concatenate([[0], np.cumsum(np.bincount(self.feature_index, minlength=self.n_features))])

    @property
    def _by_feature(self):
        return np.argsort(self.feature_index, kind="stable")


def build_graph(D: np.ndarray, M: np.ndarray, n_classes=None) -> BipartiteGraph:
    D = np.asarray(D, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    if D.shape != M.shape:
        raise DimensionError(f"data {D.shape} and mask {M.shape} differ in shape")
    n, m = D.shape
    n_classes = np.zeros(m, np.int64) if n_classes is None else np.asarray(n_classes, np.int64)
    s, f = np.nonzero(M)
    return BipartiteGraph(n, m, s, f, D[s, f], n_classes)


class EncoderParams:
    """Weights of the edge-aware GraphSAGE encoder.

    Every concatenation weight is stored as one block per concatenated part,
    so ``W . [a; b]`` is evaluated as ``a W_a + b W_b``. The edge update of the
    final layer is not built: nothing downstream reads the last edge states.
    """

    def __init__(self, rng: np.random.Generator, n_classes, dim=128, layers=3):
        n_classes = np.asarray(n_classes, np.int64)
        self.dim = dim
        self.n_layers = layers
        # Row 0 projects a continuous value; each discrete column gets C rows.
        offsets = np.concatenate([[1], 1 + np.cumsum(n_classes)])[:-1]
        self.class_offset = np.where(n_classes > 0, offsets, 0)
        n_rows = 1 + int(n_classes.sum())
        self.edge_table = uniform_init(rng, (n_rows, dim), 1, "edge_in.w")
        self.edge_bias = zeros_param(dim, "edge_in.b")
        self.layers = []
        for layer in range(layers):
            p = {
                "msg_node": uniform_init(rng, (dim, dim), 2 * dim, f"l{layer}.msg_node"),
                "msg_edge": uniform_init(rng, (dim, dim), 2 * dim, f"l{layer}.msg_edge"),
                "msg_b": zeros_param(dim, f"l{layer}.msg_b"),
                "upd_self": uniform_init(rng, (dim, dim), 2 * dim, f"l{layer}.upd_self"),
                "upd_agg": uniform_init(rng, (dim, dim), 2 * dim, f"l{layer}.upd_agg"),
                "upd_b": zeros_param(dim, f"l{layer}.upd_b"),
            }
            if layer < layers - 1:
                p.update(
                    edge_self=uniform_init(rng, (dim, dim), 3 * dim, f"l{layer}.edge_self"),
                    edge_sample=uniform_init(rng, (dim, dim), 3 * dim, f"l{layer}.edge_sample"),
                    edge_feature=uniform_init(rng, (dim, dim), 3 * dim, f"l{layer}.edge_feature"),
                    edge_b=zeros_param(dim, f"l{layer}.edge_b"),
                )
            self.layers.append(p)

    def parameters(self) -> list[Tensor]:
        out = [self.edge_table, self.edge_bias]
        for p in self.layers:
            out.extend(p.values())
        return out


def edge_inputs(G: BipartiteGraph, params: EncoderParams) -> Tensor:
    """Linear projection of width-1 continuous values and one-hot discrete classes."""
    disc = G.n_classes[G.feature_index] > 0
    rows = np.where(disc, params.class_offset[G.feature_index] + G.values.astype(np.int64), 0)
    coef = np.where(disc, 1.0, G.values)[:, None]
    return T.take(params.edge_table, rows) * Tensor(coef) + params.edge_bias


def encode(
    G: BipartiteGraph, H_S0, H_F0, params: EncoderParams, normalize: bool = True
) -> tuple[Tensor, Tensor]:
    """Run the encoder; returns ``(H_S, H_F)`` as ``(n, d)`` and ``(m, d)`` row matrices.

    Per layer, a message from ``u`` to ``v`` over edge ``e`` is
    ``relu(h_u Q_node + e Q_edge + b)``; nodes update as
    ``relu(h_v W_self + mean(messages) W_agg + b)``; edges then update from
    their own state and both refreshed endpoints. Isolated nodes aggregate a
    zero vector. With ``normalize`` each refreshed node embedding is scaled
    to unit length before it is used further.
    """
    H_S, H_F = T.as_tensor(H_S0), T.as_tensor(H_F0)
    d = params.dim
    if H_S.shape != (G.n_samples, d) or H_F.shape != (G.n_features, d):
        raise ContractError(
            f"encoder expects embeddings ({G.n_samples}, {d}) and ({G.n_features}, {d}), "
            f"got {H_S.shape} and {H_F.shape}"
        )
    s_idx, f_idx = G.sample_index, G.feature_index
    E = edge_inputs(G, params)
    for p in params.layers:
        edge_part = T.matmul(E, p["msg_edge"]) + p["msg_b"]
        to_sample = T.relu(T.take(T.matmul(H_F, p["msg_node"]), f_idx) + edge_part)
        to_feature = T.relu(T.take(T.matmul(H_S, p["msg_node"]), s_idx) + edge_part)
        agg_S = T.segment_mean(to_sample, s_idx, G.n_samples)
        agg_F = T.segment_mean(to_feature, f_idx, G.n_features)
        H_S = T.relu(T.matmul(H_S, p["upd_self"]) + T.matmul(agg_S, p["upd_agg"]) + p["upd_b"])
        H_F = T.relu(T.matmul(H_F, p["upd_self"]) + T.matmul(agg_F, p["upd_agg"]) + p["upd_b"])
        if normalize:
            H_S, H_F = T.l2_normalize(H_S), T.l2_normalize(H_F)
        if "edge_self" in p:
            E = T.relu(
                T.matmul(E, p["edge_self"])
                + T.take(T.matmul(H_S, p["edge_sample"]), s_idx)
                + T.take(T.matmul(H_F, p["edge_feature"]), f_idx)
                + p["edge_b"]
            )
    return H_S, H_F
