"""Graph isomorphism network layers over per-sample causal graphs."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .causal import CausalMatrix
from .tensor import Tensor


@dataclass
class GinConfig:
    n_layers: int = 2
    node_dim: int = 32
    mlp_hidden: int | None = None  # None -> node_dim
    eps_learnable: bool = True
    direction: str = "in"  # in: causes feed effects; out: effects feed causes; sym: both
    weighted: bool = False

    def validate(self):
        if self.n_layers < 1 or self.node_dim < 1 or (self.mlp_hidden is not None and self.mlp_hidden < 1):
            raise ValueError("n_layers, node_dim and mlp_hidden must be positive")
        if self.direction not in ("in", "out", "sym"):
            raise ValueError(f"unknown GNN direction {self.direction!r}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.node_dim

    def to_dict(self) -> dict:
        return asdict(self)


def init_gin(cfg: GinConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, h = cfg.node_dim, cfg.hidden
    p = {}
    for k in range(cfg.n_layers):
        p[f"gin{k}.eps"] = Tensor(np.zeros(()), requires_grad=cfg.eps_learnable)
        p[f"gin{k}.w1"] = T.uniform_init(rng, (d, h), d)
        p[f"gin{k}.b1"] = T.uniform_init(rng, (h,), d)
        p[f"gin{k}.w2"] = T.uniform_init(rng, (h, d), h)
        p[f"gin{k}.b2"] = T.uniform_init(rng, (d,), h)
    return p


def aggregation_matrix(matrix: CausalMatrix | np.ndarray, direction: str = "in", weighted: bool = False) -> np.ndarray:
    """A with A[v, u] = contribution of node u to node v's neighbour sum.

    With direction "in", u is a neighbour of v iff M[u, v] > 0.
    """
    M = matrix.scores if isinstance(matrix, CausalMatrix) else np.asarray(matrix, dtype=np.float64)
    edge = np.where(M > 0, M if weighted else 1.0, 0.0)
    np.fill_diagonal(edge, 0.0)
    if direction == "in":
        return edge.T.copy()
    if direction == "out":
        return edge
    if direction == "sym":
        return edge + edge.T
    raise ValueError(f"unknown GNN direction {direction!r}")


def gin_layer(H, A, eps, w1, b1, w2, b2) -> Tensor:
    """h'_v = MLP((1 + eps) h_v + sum_{u in N(v)} h_u) for H (..., n, d), A (..., n, n)."""
    H = T.as_tensor(H)
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-1] != H.shape[-2] or A.shape[-2] != H.shape[-2]:
        raise T.ShapeError(f"gin_layer: adjacency {A.shape} does not match features {H.shape}")
    agg = T.mul(H, T.add(eps, 1.0)) + T.matmul(A, H)
    return T.relu(agg @ w1 + b1) @ w2 + b2


def gin_stack(H, A, params: dict[str, Tensor], cfg: GinConfig) -> Tensor:
    for k in range(cfg.n_layers):
        H = gin_layer(H, A, params[f"gin{k}.eps"], params[f"gin{k}.w1"], params[f"gin{k}.b1"],
                      params[f"gin{k}.w2"], params[f"gin{k}.b2"])
    return H


def readout(H) -> Tensor:
    """Mean over the node axis: (..., n, d) -> (..., d)."""
    H = T.as_tensor(H)
    if H.shape[-2] < 1:
        raise ValueError("readout of an empty graph")
    return T.mean(H, axis=-2)
