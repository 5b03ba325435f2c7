"""Independent reference implementations shared by the test modules."""

from __future__ import annotations

import itertools
from collections import Counter

import numpy as np

from calonet import tensor as T

FD_STEP = 1e-5
FD_TOL = 1e-4


def rel_err(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def tape_grads(fn, arrays):
    """Gradients of the scalar ``fn(*tensors)`` with respect to every array."""
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape():
        out = fn(*leaves)
        out.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def numeric_grads(fn, arrays, h: float = FD_STEP):
    """Central differences of ``fn`` evaluated without a tape.

    The forward passes run in extended precision: at h = 1e-5 float64 roundoff
    alone is about 1e-11 * |f|, which swamps entries with gradients near 1e-8.
    """
    arrays = [np.array(a, dtype=np.longdouble) for a in arrays]
    step = np.longdouble(h)

    def f():
        return fn(*[T.Tensor(x) for x in arrays]).data

    grads = []
    for a in arrays:
        g = np.zeros(a.shape)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            fp = f()
            a[idx] = orig - step
            fm = f()
            a[idx] = orig
            g[idx] = float((fp - fm) / (2 * step))
        grads.append(g)
    return grads


def scalarize(out, seed: int = 0):
    """Contract an output with a fixed random weight so every element matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum_(T.mul(out, w))



def max_grad_error(fn, arrays) -> float:
    analytic = tape_grads(fn, arrays)
    numeric = numeric_grads(fn, arrays)
    return max(float(rel_err(a, n).max()) if a.size else 0.0 for a, n in zip(analytic, numeric))


# ---------------------------------------------------------------------------
# information theory by direct enumeration


def entropy_counts(items) -> float:
    counts = Counter(items)
    n = sum(counts.values())
    return -sum(c / n * np.log2(c / n) for c in counts.values())


def cond_entropy_oracle(x, y) -> float:
    return entropy_counts(zip(x, y)) - entropy_counts(list(y))


def brute_force_te(source, target) -> float:
    """TE(source -> target), k = l = 1, as a sum over the joint distribution of triples."""
    n = len(target) - 1
    triples = Counter((target[t + 1], target[t], source[t]) for t in range(n))
    pairs_xy = Counter((target[t], source[t]) for t in range(n))
    pairs_fx = Counter((target[t + 1], target[t]) for t in range(n))
    singles = Counter(target[t] for t in range(n))
    te = 0.0
    for (f, x, y), c in triples.items():
        p_joint = c / n
        p_f_given_xy = c / pairs_xy[(x, y)]
        p_f_given_x = pairs_fx[(f, x)] / singles[x]
        te += p_joint * np.log2(p_f_given_xy / p_f_given_x)
    return te


# ---------------------------------------------------------------------------
# linear algebra / attention


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i, j in itertools.product(range(n), range(m)):
        for t in range(k):
            out[i, j] += a[i, t] * b[t, j]
    return out


def dense_masked_attention(q, k, v, bias):
    """softmax(q k^T / sqrt(d) + bias) v computed row by row with plain loops."""
    P, d = q.shape
    out = np.zeros_like(v)
    for i in range(P):
        logits = np.array([q[i] @ k[j] / np.sqrt(d) + bias[i, j] for j in range(P)])
        keep = np.isfinite(logits)
        w = np.zeros(P)
        e = np.exp(logits[keep] - logits[keep].max())
        w[keep] = e / e.sum()
        out[i] = w @ v
    return out
