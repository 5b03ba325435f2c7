"""Local-correlation encoder: patch embedding, CBAM gating, log-sparse windowed attention.

Every function works on a leading batch axis: a sample batch is (N, D, L) and
patch sequences are (N, P, C). Parameters live in a flat ``name -> Tensor``
dict so the whole model serialises as one list.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int | None = None  # None -> 4 * n_dims
    window: int = 8
    conv_kernel: int = 7
    n_blocks: int = 2
    mlp_ratio: float = 2.0
    heads: int = 1
    node_dim: int = 32

    def validate(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be a positive odd number")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.heads < 1 or self.node_dim < 1 or self.mlp_ratio <= 0:
            raise ValueError("heads, node_dim and mlp_ratio must be positive")
        if self.embed_dim is not None and self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    def resolved(self, n_dims: int) -> "EncoderConfig":
        cfg = EncoderConfig(**asdict(self))
        if cfg.embed_dim is None:
            cfg.embed_dim = 4 * n_dims
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def n_patches(length: int, patch_size: int) -> int:
    return -(-length // patch_size)


# ---------------------------------------------------------------------------
# parameters


def _cbam_params(prefix: str, C: int, kernel: int, rng) -> dict[str, Tensor]:
    hidden = max(1, C // 4)
    return {
        f"{prefix}.mlp0": T.uniform_init(rng, (C, hidden), C),
        f"{prefix}.mlp1": T.uniform_init(rng, (hidden, C), hidden),
        f"{prefix}.conv_w": T.uniform_init(rng, (1, 2, kernel), 2 * kernel),
        f"{prefix}.conv_b": T.uniform_init(rng, (1,), 2 * kernel),
    }


def _linear_params(prefix: str, fan_in: int, fan_out: int, rng) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": T.uniform_init(rng, (fan_in, fan_out), fan_in),
        f"{prefix}.b": T.uniform_init(rng, (fan_out,), fan_in),
    }


def init_encoder(cfg: EncoderConfig, n_dims: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Parameters for an already-resolved config, drawn uniform in +-1/sqrt(fan_in)."""
    C = cfg.embed_dim
    hidden = max(1, int(round(cfg.mlp_ratio * C)))
    p = _linear_params("embed", cfg.patch_size * n_dims, C, rng)
    for b in range(cfg.n_blocks):
        pre = f"block{b}"
        p[f"{pre}.ln1.gamma"] = T.parameter(np.ones(C))
        p[f"{pre}.ln1.beta"] = T.parameter(np.zeros(C))
        p.update(_cbam_params(f"{pre}.cbam", C, cfg.conv_kernel, rng))
        for proj in ("q", "k", "v"):
            p.update(_cbam_params(f"{pre}.{proj}.cbam", C, cfg.conv_kernel, rng))
            p.update(_linear_params(f"{pre}.{proj}", C, C, rng))
        p[f"{pre}.ln2.gamma"] = T.parameter(np.ones(C))
        p[f"{pre}.ln2.beta"] = T.parameter(np.zeros(C))
        p.update(_linear_params(f"{pre}.mlp1", C, hidden, rng))
        p.update(_linear_params(f"{pre}.mlp2", hidden, C, rng))
    p.update(_linear_params("node", C, n_dims * cfg.node_dim, rng))
    return p


# ---------------------------------------------------------------------------
# stages


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else y + b


def patch_embed(x, w: Tensor, b: Tensor, patch_size: int) -> Tensor:
    """(N, D, L) -> (N, P, C); each patch flattens patch_size timestamps time-major."""
    x = T.as_tensor(x)
    N, D, L = x.shape
    P = n_patches(L, patch_size)
    if P * patch_size != L:
        # right-pad by repeating the last timestamp
        x = T.take(x, np.minimum(np.arange(P * patch_size), L - 1), axis=2)
    chunks = T.reshape(T.transpose(x, (0, 2, 1)), (N, P, patch_size * D))
    return linear(chunks, w, b)


def channel_gate(E, w0: Tensor, w1: Tensor) -> Tensor:
    """(N, P, C) -> (N, 1, C) gate from the shared MLP over avg- and max-pooled positions."""
    avg = T.mean(E, axis=-2, keepdims=True)
    mx = T.max_(E, axis=-2, keepdims=True)
    return T.sigmoid(T.relu(avg @ w0) @ w1 + T.relu(mx @ w0) @ w1)


def channel_attention(E, w0: Tensor, w1: Tensor) -> Tensor:
    return T.mul(E, channel_gate(E, w0, w1))


def spatial_gate(E, conv_w: Tensor, conv_b: Tensor) -> Tensor:
    """(N, P, C) -> (N, P, 1) gate from a 1-D conv over [channel-avg; channel-max]."""
    pooled = T.concat([T.mean(E, axis=-1, keepdims=True), T.max_(E, axis=-1, keepdims=True)], axis=-1)
    conv = T.conv1d(T.transpose(pooled), conv_w, conv_b)  # (N, 1, P)
    return T.sigmoid(T.transpose(conv))


def spatial_attention(E, conv_w: Tensor, conv_b: Tensor) -> Tensor:
    return T.mul(E, spatial_gate(E, conv_w, conv_b))


def cbam(E, params: dict[str, Tensor], prefix: str) -> Tensor:
    E1 = channel_attention(E, params[f"{prefix}.mlp0"], params[f"{prefix}.mlp1"])
    return spatial_attention(E1, params[f"{prefix}.conv_w"], params[f"{prefix}.conv_b"])


def log_sparse_mask(W: int) -> np.ndarray:
    """W x W additive bias: 0 where row i may attend column j, -inf elsewhere.

    Row i sees itself and the cells 1, 2, 4, 8, ... steps back.
    """
    if W < 1:
        raise ValueError("window size must be >= 1")
    mask = np.full((W, W), -np.inf)
    for i in range(W):
        mask[i, i] = 0.0
        step = 1
        while step <= i:
            mask[i, i - step] = 0.0
            step *= 2
    return mask


def windowed_attention(q, k, v, window: int, heads: int = 1) -> Tensor:
    """Log-sparse attention inside consecutive windows of ``window`` patches.

    q, k, v: (N, P, C). The last window may be short; it is zero-padded, which
    leaves real rows unchanged because the mask never looks forward.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    N, P, C = q.shape
    if C % heads:
        raise T.ShapeError(f"attention: width {C} not divisible by {heads} heads")
    dk = C // heads
    nw = n_patches(P, window)
    pad = nw * window - P

    def split(t):
        if pad:
            t = T.concat([t, Tensor(np.zeros((N, pad, C)))], axis=1)
        t = T.reshape(t, (N, nw, window, heads, dk))
        return T.transpose(t, (0, 1, 3, 2, 4))  # (N, nw, h, W, dk)

    qs, ks, vs = split(q), split(k), split(v)
    scores = T.mul(qs @ T.transpose(ks), 1.0 / math.sqrt(dk))
    attn = T.softmax(scores, mask=log_sparse_mask(window))
    out = T.transpose(attn @ vs, (0, 1, 3, 2, 4))
    out = T.reshape(out, (N, nw * window, C))
    return out[:, :P, :] if pad else out


def ssa(E2, params: dict[str, Tensor], prefix: str, window: int, heads: int = 1) -> Tensor:
    """Q, K, V each from their own CBAM stack plus projection, then windowed log-sparse attention."""
    qkv = [
        linear(cbam(E2, params, f"{prefix}.{n}.cbam"), params[f"{prefix}.{n}.w"], params[f"{prefix}.{n}.b"])
        for n in ("q", "k", "v")
    ]
    return windowed_attention(*qkv, window=window, heads=heads)


def _rotate(E, shift: int) -> Tensor:
    P = E.shape[1]
    return T.take(E, (np.arange(P) + shift) % P, axis=1)


def encoder_block(E, params: dict[str, Tensor], prefix: str, cfg: EncoderConfig, shifted: bool = False) -> Tensor:
    """Pre-norm residual block; the shifted variant rotates patches by window // 2 around it."""
    shift = cfg.window // 2 if shifted else 0
    if shift:
        E = _rotate(E, shift)
    h = T.layer_norm(E, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    h = cbam(h, params, f"{prefix}.cbam")
    E1 = E + ssa(h, params, prefix, cfg.window, cfg.heads)
    h = T.layer_norm(E1, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = linear(T.relu(linear(h, params[f"{prefix}.mlp1.w"], params[f"{prefix}.mlp1.b"])),
               params[f"{prefix}.mlp2.w"], params[f"{prefix}.mlp2.b"])
    out = E1 + h
    if shift:
        out = _rotate(out, -shift)
    return out


def node_features(E, w: Tensor, b: Tensor, n_dims: int, node_dim: int) -> Tensor:
    """Mean-pool patches then project: (N, P, C) -> (N, n_dims, node_dim)."""
    pooled = T.mean(E, axis=1)
    H = linear(pooled, w, b)
    return T.reshape(H, (pooled.shape[0], n_dims, node_dim))


def encode_patches(x, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    E = patch_embed(x, params["embed.w"], params["embed.b"], cfg.patch_size)
    for b in range(cfg.n_blocks):
        E = encoder_block(E, params, f"block{b}", cfg, shifted=b % 2 == 1)
    return E


def encode(x, params: dict[str, Tensor], cfg: EncoderConfig, n_dims: int) -> Tensor:
    """(N, D, L) samples -> (N, D, node_dim) node features."""
    E = encode_patches(x, params, cfg)
    return node_features(E, params["node.w"], params["node.b"], n_dims, cfg.node_dim)
