"""Parameterized building blocks.

Blocks are plain functions of ``(input, params, name, ...)``.  Convolutional
blocks take channels-last feature maps (B, H, W, C); kernels keep the
(O, C, kh, kw) layout.  Parameters live
in a flat :class:`LayerParams` map keyed by dotted paths such as
``"face_enc.stage1.mb.branch3x3.conv.w"``; ``add_*`` helpers register and
initialize the entries a block needs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed on (seed, parameter path); independent of creation order."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


class LayerParams:
    """Trainable tensors plus non-trainable buffers (normalization running stats)."""

    def __init__(self, params=None, buffers=None):
        self.params: dict[str, Tensor] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.params))

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return [(k, self.params[k]) for k in sorted(self.params)]

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter path {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter path {name!r}")
        self.buffers[name] = np.asarray(value, dtype=np.float32)

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(
            {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "LayerParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        for t in self.params.values():
            return t.dtype
        return np.dtype(np.float32)


# ---------------------------------------------------------------- initializers

def _uniform(seed: int, name: str, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return param_rng(seed, name).uniform(-bound, bound, size=shape)


def add_linear(p: LayerParams, name: str, n_in: int, n_out: int, seed: int,
               gain: float = 1.0, zero: bool = False) -> None:
    shape = (n_in, n_out)
    w = np.zeros(shape) if zero else _uniform(seed, f"{name}.w", shape, n_in, gain)
    p.add(f"{name}.w", w)
    p.add(f"{name}.b", np.zeros(n_out))


def add_conv(p: LayerParams, name: str, c_in: int, c_out: int, k: int, seed: int,
             bias: bool = False, zero: bool = False) -> None:
    shape = (c_out, c_in, k, k)
    fan_in = c_in * k * k
    w = np.zeros(shape) if zero else _uniform(seed, f"{name}.w", shape, fan_in, np.sqrt(2.0))
    p.add(f"{name}.w", w)
    if bias:
        p.add(f"{name}.b", np.zeros(c_out))


def add_conv_block(p: LayerParams, name: str, c_in: int, c_out: int, k: int, seed: int) -> None:
    add_conv(p, f"{name}.conv", c_in, c_out, k, seed)
    p.add(f"{name}.norm.gamma", np.ones(c_out))
    p.add(f"{name}.norm.beta", np.zeros(c_out))
    p.add_buffer(f"{name}.norm.running_mean", np.zeros(c_out))
    p.add_buffer(f"{name}.norm.running_var", np.ones(c_out))


def add_residual_block(p: LayerParams, name: str, c_in: int, c_out: int, stride: int,
                       seed: int) -> None:
    add_conv_block(p, f"{name}.conv1", c_in, c_out, 3, seed)
    add_conv(p, f"{name}.conv2", c_out, c_out, 3, seed, bias=True, zero=True)
    if c_in != c_out or stride != 1:
        add_conv(p, f"{name}.proj", c_in, c_out, 1, seed)


def branch_width(channels: int) -> int:
    return max(channels // 2, 1)


def add_multi_branch_block(p: LayerParams, name: str, channels: int, seed: int) -> None:
    b = branch_width(channels)
    add_conv_block(p, f"{name}.branch1x1", channels, b, 1, seed)
    add_conv_block(p, f"{name}.branch3x3", channels, b, 3, seed)
    add_conv_block(p, f"{name}.branch5x5a", channels, b, 3, seed)
    add_conv_block(p, f"{name}.branch5x5b", b, b, 3, seed)
    add_conv(p, f"{name}.project", 3 * b, channels, 1, seed, bias=True, zero=True)


def add_layer_norm(p: LayerParams, name: str, dim: int) -> None:
    p.add(f"{name}.gamma", np.ones(dim))
    p.add(f"{name}.beta", np.zeros(dim))


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 128
    heads: int = 4

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1:
            raise ValueError("attention dim and heads must be positive")
        if self.dim % self.heads:
            raise ValueError(f"attention dim {self.dim} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def add_cross_attention(p: LayerParams, name: str, config: AttentionConfig, seed: int) -> None:
    d = config.dim
    for proj in ("wq", "wk", "wv", "wo"):
        p.add(f"{name}.{proj}", _uniform(seed, f"{name}.{proj}", (d, d), d, 1.0))
    add_layer_norm(p, f"{name}.norm", d)


def add_fcn_fusion(p: LayerParams, name: str, dim: int, seed: int) -> None:
    add_linear(p, f"{name}.fc1", 2 * dim, dim, seed, gain=np.sqrt(2.0))
    add_linear(p, f"{name}.fc2", dim, dim, seed)


def add_mlp_head(p: LayerParams, name: str, dim: int, seed: int) -> None:
    hidden = max(dim // 2, 1)
    add_linear(p, f"{name}.fc1", dim, hidden, seed, gain=np.sqrt(2.0))
    add_linear(p, f"{name}.fc2", hidden, 3, seed)


# ---------------------------------------------------------------- blocks

def linear(x: Tensor, p: LayerParams, name: str) -> Tensor:
    w, b = p[f"{name}.w"], p[f"{name}.b"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"{name}: input width {x.shape[-1]} does not match weight {w.shape}")
    return T.matmul(x, w) + b


def conv(x: Tensor, p: LayerParams, name: str, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    out = T.conv2d_nhwc(x, w, stride=stride, padding=w.shape[-1] // 2)
    bias = p.params.get(f"{name}.b")
    if bias is not None:
        out = out + bias
    return out


def norm(x: Tensor, p: LayerParams, name: str, training: bool) -> Tensor:
    return T.batch_norm(
        x, p[f"{name}.gamma"], p[f"{name}.beta"],
        p.buffers[f"{name}.running_mean"], p.buffers[f"{name}.running_var"],
        training=training, momentum=NORM_MOMENTUM, eps=NORM_EPS, channel_axis=-1,
    )


def conv_block(x: Tensor, p: LayerParams, name: str, stride: int = 1,
               training: bool = False) -> Tensor:
    return T.relu(norm(conv(x, p, f"{name}.conv", stride), p, f"{name}.norm", training))


def residual_block(x: Tensor, p: LayerParams, name: str, stride: int = 1,
                   training: bool = False) -> Tensor:
    h = conv_block(x, p, f"{name}.conv1", stride, training)
    h = conv(h, p, f"{name}.conv2")
    skip = conv(x, p, f"{name}.proj", stride) if f"{name}.proj.w" in p else x
    return T.relu(skip + h)


def multi_branch_block(x: Tensor, p: LayerParams, name: str, training: bool = False) -> Tensor:
    b1 = conv_block(x, p, f"{name}.branch1x1", training=training)
    b3 = conv_block(x, p, f"{name}.branch3x3", training=training)
    b5 = conv_block(x, p, f"{name}.branch5x5a", training=training)
    b5 = conv_block(b5, p, f"{name}.branch5x5b", training=training)
    mixed = conv(T.concat([b1, b3, b5], axis=-1), p, f"{name}.project")
    return T.relu(x + mixed)


def layer_norm(x: Tensor, p: LayerParams, name: str) -> Tensor:
    return T.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], eps=NORM_EPS)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, heads, d // heads)), (0, 2, 1, 3))


def attention_logits(q_tokens: Tensor, kv_tokens: Tensor, config: AttentionConfig,
                     p: LayerParams, name: str) -> Tensor:
    """Scaled per-head logits, shape (B, heads, Tq, Tkv)."""
    q = _split_heads(T.matmul(q_tokens, p[f"{name}.wq"]), config.heads)
    k = _split_heads(T.matmul(kv_tokens, p[f"{name}.wk"]), config.heads)
    return T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(config.head_dim))


def attend(q_tokens: Tensor, kv_tokens: Tensor, config: AttentionConfig,
           p: LayerParams, name: str) -> Tensor:
    """Multi-head attention output before the residual add and normalization."""
    if q_tokens.ndim != 3 or kv_tokens.ndim != 3:
        raise ValueError("cross_attention expects (B, T, d) token tensors")
    B, Tq, d = q_tokens.shape
    if d != config.dim or kv_tokens.shape[-1] != config.dim or kv_tokens.shape[0] != B:
        raise ValueError(
            f"cross_attention dims: queries {q_tokens.shape}, keys {kv_tokens.shape}, "
            f"model dim {config.dim}"
        )
    weights = T.softmax(attention_logits(q_tokens, kv_tokens, config, p, name), axis=-1)
    v = _split_heads(T.matmul(kv_tokens, p[f"{name}.wv"]), config.heads)
    heads = T.matmul(weights, v)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (B, Tq, d))
    return T.matmul(merged, p[f"{name}.wo"])


def cross_attention(q_tokens: Tensor, kv_tokens: Tensor, config: AttentionConfig,
                    p: LayerParams, name: str) -> Tensor:
    return layer_norm(q_tokens + attend(q_tokens, kv_tokens, config, p, name), p, f"{name}.norm")


def fcn_fusion(face_vec: Tensor, eye_vec: Tensor, p: LayerParams, name: str) -> Tensor:
    if face_vec.shape != eye_vec.shape:
        raise ValueError(f"fcn_fusion: face {face_vec.shape} and eye {eye_vec.shape} differ")
    h = T.relu(linear(T.concat([face_vec, eye_vec], axis=-1), p, f"{name}.fc1"))
    return linear(h, p, f"{name}.fc2")


def mlp_head(fused: Tensor, p: LayerParams, name: str) -> Tensor:
    return linear(T.relu(linear(fused, p, f"{name}.fc1")), p, f"{name}.fc2")
