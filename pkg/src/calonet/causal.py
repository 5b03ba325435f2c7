"""Transfer-entropy causal matrices between the dimensions of one sample.

Probabilities are plug-in frequencies over discretised symbols and all
entropies are in bits.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

TE_CLAMP = 1e-12


@dataclass(frozen=True)
class BinningSpec:
    n_bins: int = 8
    strategy: str = "equal-frequency"

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.strategy not in ("equal-frequency", "equal-width"):
            raise ValueError(f"unknown binning strategy {self.strategy!r}")


@dataclass(frozen=True)
class HistoryOrder:
    k: int = 1
    l: int = 1  # noqa: E741

    def __post_init__(self):
        if self.k < 1 or self.l < 1:
            raise ValueError(f"history orders must be >= 1, got k={self.k}, l={self.l}")


@dataclass
class CausalConfig:
    n_bins: int = 8
    bin_strategy: str = "equal-frequency"
    k: int = 1
    l: int = 1  # noqa: E741
    threshold: float = 0.0
    scope: str = "sample"  # or "dataset-mean"

    def __post_init__(self):
        if self.scope not in ("sample", "dataset-mean"):
            raise ValueError(f"unknown graph scope {self.scope!r}")
        self.binning  # validates
        self.order

    @property
    def binning(self) -> BinningSpec:
        return BinningSpec(self.n_bins, self.bin_strategy)

    @property
    def order(self) -> HistoryOrder:
        return HistoryOrder(self.k, self.l)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CausalMatrix:
    scores: np.ndarray  # (n, n), M[i, j] > 0 means i causes j
    threshold: float

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass
class CausalGraph:
    n: int
    edges: list[tuple[int, int, float]]  # (source, target, weight)


# ---------------------------------------------------------------------------
# estimation


def discretize(series, spec: BinningSpec = BinningSpec()) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot discretise an empty series")
    lo, hi = x.min(), x.max()
    if lo == hi:
        return np.zeros(x.size, dtype=np.int64)
    if spec.strategy == "equal-width":
        sym = np.floor((x - lo) / (hi - lo) * spec.n_bins).astype(np.int64)
        return np.minimum(sym, spec.n_bins - 1)
    rank = np.empty(x.size, dtype=np.int64)
    rank[np.argsort(x, kind="stable")] = np.arange(x.size)
    return rank * spec.n_bins // x.size


def _joint_codes(*columns: np.ndarray) -> np.ndarray:
    """Map rows of stacked symbol columns to dense integer codes."""
    if len(columns) == 1:
        return np.unique(columns[0], return_inverse=True)[1].reshape(-1)
    cols = [np.unique(c, return_inverse=True)[1].reshape(-1) for c in columns]
    radices = [int(c.max()) + 1 for c in cols]
    if math.prod(radices) < 2**62:
        code = np.zeros(cols[0].size, dtype=np.int64)
        for c, r in zip(cols, radices):
            code = code * r + c
        return np.unique(code, return_inverse=True)[1].reshape(-1)
    stacked = np.stack(columns, axis=1)
    return np.unique(stacked, axis=0, return_inverse=True)[1].reshape(-1)


def _entropy_of_codes(codes: np.ndarray) -> float:
    counts = np.bincount(codes)
    counts = counts[counts > 0]
    p = counts / codes.size
    return float(-(p * np.log2(p)).sum())


def conditional_entropy(x, y) -> float:
    """H(X|Y) in bits from plug-in joint frequencies; ``y`` may be 2-D (n, m) for a joint condition."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] == 0:
        raise ValueError("conditional entropy of empty sequences")
    ycols = [y] if y.ndim == 1 else [y[:, i] for i in range(y.shape[1])]
    ycode = _joint_codes(*ycols)
    xycode = _joint_codes(x, ycode)
    return max(_entropy_of_codes(xycode) - _entropy_of_codes(ycode), 0.0)


def _lagged(sym: np.ndarray, order: int, start: int, stop: int) -> list[np.ndarray]:
    """Columns s[t], s[t-1], ..., s[t-order+1] for t in [start, stop)."""
    return [sym[start - j : stop - j] for j in range(order)]


def transfer_entropy_symbols(source: np.ndarray, target: np.ndarray, order: HistoryOrder) -> float:
    L = target.size
    if source.size != L:
        raise ValueError(f"length mismatch: {source.size} vs {L}")
    h = max(order.k, order.l)
    if L < h + 2:
        raise ValueError(f"series of length {L} too short for history order k={order.k}, l={order.l}")
    start, stop = h - 1, L - 1
    future = target[start + 1 : stop + 1]
    past_x = np.stack(_lagged(target, order.k, start, stop), axis=1)
    past_xy = np.concatenate([past_x, np.stack(_lagged(source, order.l, start, stop), axis=1)], axis=1)
    te = conditional_entropy(future, past_x) - conditional_entropy(future, past_xy)
    if -TE_CLAMP <= te < 0:
        te = 0.0
    return te


def transfer_entropy(source, target, order: HistoryOrder = HistoryOrder(),
                     spec: BinningSpec = BinningSpec()) -> float:
    """TE from ``source`` to ``target`` in bits."""
    return transfer_entropy_symbols(discretize(source, spec), discretize(target, spec), order)


def causal_score(x, y, order: HistoryOrder = HistoryOrder(), spec: BinningSpec = BinningSpec()) -> float:
    """TE(x->y) - TE(y->x); positive means x drives y."""
    sx, sy = discretize(x, spec), discretize(y, spec)
    return transfer_entropy_symbols(sx, sy, order) - transfer_entropy_symbols(sy, sx, order)


def causal_scores(values: np.ndarray, order: HistoryOrder = HistoryOrder(),
                  spec: BinningSpec = BinningSpec()) -> np.ndarray:
    """Antisymmetric n x n matrix of unthresholded causal scores for one D x L sample."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 dimensions to build a causal matrix, got {n}")
    syms = [discretize(row, spec) for row in values]
    te = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                te[i, j] = transfer_entropy_symbols(syms[i], syms[j], order)
    return te - te.T


def threshold_scores(scores: np.ndarray, c: float) -> CausalMatrix:
    m = np.where(scores > c, scores, 0.0)
    np.fill_diagonal(m, 0.0)
    return CausalMatrix(m, float(c))


def build_causal_matrix(sample, c: float = 0.0, order: HistoryOrder = HistoryOrder(),
                        spec: BinningSpec = BinningSpec()) -> CausalMatrix:
    values = getattr(sample, "values", sample)
    return threshold_scores(causal_scores(values, order, spec), c)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CALONET_THREADS", "1")))
    except ValueError:
        return 1


def build_matrices(samples: Sequence, config: CausalConfig) -> list[CausalMatrix]:
    """One matrix per sample in input order (or the dataset mean for every sample)."""
    order, spec = config.order, config.binning
    values = [getattr(s, "values", s) for s in samples]

    def one(v):
        return causal_scores(v, order, spec)

    threads = worker_count()
    if threads > 1 and len(values) > 1:
        with ThreadPoolExecutor(threads) as pool:
            scores = list(pool.map(one, values))
    else:
        scores = [one(v) for v in values]
    if config.scope == "dataset-mean":
        shared = threshold_scores(np.mean(scores, axis=0), config.threshold)
        return [shared] * len(values)
    return [threshold_scores(s, config.threshold) for s in scores]


# ---------------------------------------------------------------------------
# graph view and exports


def to_graph(matrix: CausalMatrix) -> CausalGraph:
    src, dst = np.nonzero(matrix.scores)
    edges = [(int(i), int(j), float(matrix.scores[i, j])) for i, j in zip(src, dst) if i != j]
    return CausalGraph(matrix.n, edges)


def export(graph_or_matrix, format: str = "dot", threshold: float | None = None) -> str:
    """Render a causal matrix/graph as Graphviz DOT or as JSON for heatmaps."""
    if isinstance(graph_or_matrix, CausalMatrix):
        matrix = graph_or_matrix
        graph = to_graph(matrix)
    else:
        graph = graph_or_matrix
        matrix = None
    if format == "dot":
        lines = ["digraph causal {"]
        lines += [f"  {i};" for i in range(graph.n)]
        lines += [f'  {u} -> {v} [weight={w:.4f}, label="{w:.4f}"];' for u, v, w in graph.edges]
        lines.append("}")
        return "\n".join(lines) + "\n"
    if format == "json":
        if matrix is None:
            scores = np.zeros((graph.n, graph.n))
            for u, v, w in graph.edges:
                scores[u, v] = w
            matrix = CausalMatrix(scores, 0.0 if threshold is None else threshold)
        doc = {
            "n": matrix.n,
            "threshold": matrix.threshold if math.isfinite(matrix.threshold) else str(matrix.threshold),
            "matrix": matrix.scores.tolist(),
            "edges": [{"source": u, "target": v, "weight": w} for u, v, w in graph.edges],
        }
        return json.dumps(doc, indent=2) + "\n"
    raise ValueError(f"unknown export format {format!r} (expected 'dot' or 'json')")


def parse_json(text: str) -> CausalMatrix:
    doc = json.loads(text)
    scores = np.asarray(doc["matrix"], dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"matrix must be square, got shape {scores.shape}")
    return CausalMatrix(scores, float(doc["threshold"]))
