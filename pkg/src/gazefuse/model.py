"""Face/eye encoders and the three fusion variants (none, fcn, xattn)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .data import IMAGE_SIZE
from .layers import AttentionConfig, LayerParams
from .tensor import Tensor

FUSIONS = ("none", "fcn", "xattn")
QUERY_MODES = ("tokens", "pooled")
EYE_STRIDES = (1, 2, 2, 1)


@dataclass(frozen=True)
class GazeModelConfig:
    fusion: str = "xattn"
    feature_dim: int = 128
    heads: int = 4
    face_widths: tuple = (16, 32, 64, 128)
    eye_widths: tuple = (16, 32, 64, 128)
    seed: int = 0
    query_mode: str = "tokens"

    def __post_init__(self):
        object.__setattr__(self, "face_widths", tuple(int(w) for w in self.face_widths))
        object.__setattr__(self, "eye_widths", tuple(int(w) for w in self.eye_widths))
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}, got {self.query_mode!r}")
        if len(self.face_widths) != 4 or len(self.eye_widths) != 4:
            raise ValueError("encoders have exactly 4 stages")
        if min(self.face_widths + self.eye_widths) < 1:
            raise ValueError("stage widths must be positive")
        if self.face_widths[-1] != self.feature_dim:
            raise ValueError("final face stage width must equal feature_dim")
        if self.fusion != "none" and self.eye_widths[-1] != self.feature_dim:
            raise ValueError("final eye stage width must equal feature_dim")
        if self.fusion == "xattn":
            AttentionConfig(self.feature_dim, self.heads)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.feature_dim, self.heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["face_widths"] = list(self.face_widths)
        d["eye_widths"] = list(self.eye_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GazeModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    config: GazeModelConfig
    params: LayerParams = field(default_factory=LayerParams)

    def count(self) -> int:
        return self.params.count()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.params.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, self.params.astype(dtype))


# ---------------------------------------------------------------- init

def _add_face_encoder(p: LayerParams, cfg: GazeModelConfig) -> None:
    w = cfg.face_widths
    s = cfg.seed
    L.add_conv_block(p, "face_enc.stem", 3, w[0], 3, s)
    for i in range(4):
        L.add_multi_branch_block(p, f"face_enc.stage{i}.mb", w[i], s)
        if i < 3:
            L.add_conv_block(p, f"face_enc.stage{i}.down", w[i], w[i + 1], 3, s)


def _add_eye_encoder(p: LayerParams, cfg: GazeModelConfig) -> None:
    w = cfg.eye_widths
    s = cfg.seed
    L.add_conv_block(p, "eye_enc.stem", 3, w[0], 3, s)
    prev = w[0]
    for i, stride in enumerate(EYE_STRIDES):
        L.add_residual_block(p, f"eye_enc.stage{i}.res", prev, w[i], stride, s)
        prev = w[i]
    p.add("eye_enc.identity", L.param_rng(s, "eye_enc.identity").normal(0.0, 0.02, (2, cfg.feature_dim)))


def init_parameters(config: GazeModelConfig) -> ModelParams:
    """Seeded initialization; every tensor depends only on (seed, path)."""
    p = LayerParams()
    _add_face_encoder(p, config)
    if config.fusion != "none":
        _add_eye_encoder(p, config)
    if config.fusion == "fcn":
        L.add_fcn_fusion(p, "fusion", config.feature_dim, config.seed)
    elif config.fusion == "xattn":
        L.add_cross_attention(p, "fusion", config.attention, config.seed)
    L.add_mlp_head(p, "head", config.feature_dim, config.seed)
    return ModelParams(config, p)


# ---------------------------------------------------------------- forward

def _check_images(x: Tensor, what: str) -> None:
    if x.ndim != 4 or x.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"{what} must be (B, 3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {x.shape}")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling of a channels-last map."""
    B, H, W, C = x.shape
    return T.reduce("max", T.reshape(x, (B, H // 2, 2, W // 2, 2, C)), axes=(2, 4))


def _channels_last(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def face_encoder_forward(face, mp: ModelParams, training: bool = False):
    """Return ``(tokens (B, 16, d), pooled (B, d))``."""
    p = mp.params
    face = _as_tensor(face, p.dtype)
    _check_images(face, "face")
    h = L.conv_block(_channels_last(face), p, "face_enc.stem", stride=2, training=training)
    for i in range(4):
        h = L.multi_branch_block(h, p, f"face_enc.stage{i}.mb", training=training)
        if i < 3:
            h = L.conv_block(h, p, f"face_enc.stage{i}.down", stride=2, training=training)
    B, H, W, d = h.shape
    tokens = T.reshape(h, (B, H * W, d))
    return tokens, T.reduce("mean", tokens, axes=1)


def _encode_eye(x: Tensor, p: LayerParams, training: bool) -> Tensor:
    h = L.conv_block(_channels_last(x), p, "eye_enc.stem", stride=2, training=training)
    h = max_pool2(h)
    for i, stride in enumerate(EYE_STRIDES):
        h = L.residual_block(h, p, f"eye_enc.stage{i}.res", stride=stride, training=training)
    B, H, W, d = h.shape
    # 2x2 average pooling of the final map -> 4 tokens per eye
    pooled = T.reduce("mean", T.reshape(h, (B, H // 2, 2, W // 2, 2, d)), axes=(2, 4))
    return T.reshape(pooled, (B, (H // 2) * (W // 2), d))


def eye_encoder_forward(left, right, mp: ModelParams, training: bool = False) -> Tensor:
    """Shared-weight encoder on both eyes; returns (B, 8, d) tokens, left eye first."""
    p = mp.params
    left = _as_tensor(left, p.dtype)
    right = _as_tensor(right, p.dtype)
    _check_images(left, "left eye")
    _check_images(right, "right eye")
    if left.shape != right.shape:
        raise ValueError(f"eye batches differ: {left.shape} vs {right.shape}")
    B = left.shape[0]
    # both eyes in one pass; normalization statistics are shared across them
    tokens = _encode_eye(T.concat([left, right], axis=0), p, training)
    n, d = tokens.shape[1], tokens.shape[2]
    tokens = T.reshape(tokens, (2, B, n, d))
    ident = T.reshape(p["eye_enc.identity"], (2, 1, 1, d))
    tokens = tokens + ident
    return T.reshape(T.transpose(tokens, (1, 0, 2, 3)), (B, 2 * n, d))


def model_forward(face, left, right, mp: ModelParams, training: bool = False) -> Tensor:
    """Raw (unnormalized) gaze predictions, shape (B, 3)."""
    cfg = mp.config
    p = mp.params
    expected = init_parameters_shapes(cfg)
    if set(expected) != set(p.params) or any(p[k].shape != s for k, s in expected.items()):
        raise ValueError("parameter set does not match the model configuration")
    face_tokens, face_pooled = face_encoder_forward(face, mp, training)
    if cfg.fusion == "none":
        return L.mlp_head(face_pooled, p, "head")
    if left is None or right is None:
        raise ValueError(f"fusion={cfg.fusion!r} needs both eye images")
    eye_tokens = eye_encoder_forward(left, right, mp, training)
    if cfg.fusion == "fcn":
        fused = L.fcn_fusion(face_pooled, T.reduce("mean", eye_tokens, axes=1), p, "fusion")
    else:
        if cfg.query_mode == "pooled":
            B, d = face_pooled.shape
            queries = T.reshape(face_pooled, (B, 1, d))
        else:
            queries = face_tokens
        attended = L.cross_attention(queries, eye_tokens, cfg.attention, p, "fusion")
        fused = T.reduce("mean", attended, axes=1)
    return L.mlp_head(fused, p, "head")


_SHAPE_CACHE: dict = {}


def init_parameters_shapes(config: GazeModelConfig) -> dict:
    """Map of parameter path to shape for ``config`` (cached)."""
    shapes = _SHAPE_CACHE.get(config)
    if shapes is None:
        shapes = {k: v.shape for k, v in init_parameters(config).params.items()}
        _SHAPE_CACHE[config] = shapes
    return shapes


def eye_path_names(params: LayerParams) -> list[str]:
    return [k for k in params if k.startswith("eye_enc.")]
