"""Loss, Adam, training loop, evaluation and GZCK checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gzt
from . import tensor as T
from .data import GazeArrays, batch_iterator
from .geometry import EmptySubsetError, mean_angular_error
from .gzt import FormatError
from .layers import LayerParams
from .model import GazeModelConfig, ModelParams, init_parameters_shapes, model_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GZCK"
CKPT_VERSION = 1


class NumericalError(RuntimeError):
    """A parameter or loss became NaN/Inf."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_subsets: tuple = ("all", "front180", "front_facing")

    def __post_init__(self):
        object.__setattr__(self, "eval_subsets", tuple(self.eval_subsets))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid optimizer hyperparameters")
        if not isinstance(self.seed, int):
            raise ValueError("an integer seed is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_subsets"] = list(self.eval_subsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------- loss

def gaze_loss(pred: Tensor, truth) -> Tensor:
    """Mean of ``1 - cos(pred, truth)`` over the batch; ``truth`` rows are unit vectors."""
    if not isinstance(truth, Tensor):
        truth = Tensor(np.asarray(truth, dtype=pred.dtype))
    dot = T.reduce("sum", pred * truth, axes=-1)
    sq = T.reduce("sum", pred * pred, axes=-1)
    norm = T.sqrt(T.clamp_min(sq, 1e-16))
    return T.reduce("mean", 1.0 - dot / norm)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update of the arrays in ``params`` (in place)."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return params, state


# ---------------------------------------------------------------- loop

def epoch_shuffle_seed(seed: int, epoch_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch_index]).generate_state(1)[0])


def _as_arrays(data) -> GazeArrays:
    if isinstance(data, GazeArrays):
        return data
    return GazeArrays.from_manifest(data)


def check_finite(mp: ModelParams) -> None:
    for name, t in mp.params.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"parameter {name!r} is not finite")


@dataclass
class EpochResult:
    mean_loss: float
    batch_losses: list


def train_epoch(model: ModelParams, data, config: TrainConfig, epoch_index: int,
                state: AdamState | None = None) -> EpochResult:
    """One pass over ``data`` with one Adam step per batch."""
    data = _as_arrays(data)
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = AdamState() if state is None else state
    params = model.params
    fusion = model.config.fusion
    losses = []
    for batch in batch_iterator(data, config.batch_size, epoch_shuffle_seed(config.seed, epoch_index)):
        T.get_tape().reset()
        params.zero_grad()
        left = batch.left_eye if fusion != "none" else None
        right = batch.right_eye if fusion != "none" else None
        pred = model_forward(batch.face, left, right, model, training=True)
        loss = gaze_loss(pred, batch.gaze)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"loss became {value} in epoch {epoch_index}")
        T.backward(loss)
        arrays = {k: t.data for k, t in params.items()}
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        adam_step(arrays, grads, state, config)
        losses.append(value)
    params.zero_grad()
    check_finite(model)
    return EpochResult(math.fsum(losses) / len(losses), losses)


def train(model: ModelParams, data, config: TrainConfig, state: AdamState | None = None,
          start_epoch: int = 0, end_epoch: int | None = None,
          on_epoch: Callable[[int, EpochResult], None] | None = None) -> AdamState:
    data = _as_arrays(data)
    state = AdamState() if state is None else state
    end = config.epochs if end_epoch is None else end_epoch
    for epoch in range(start_epoch, end):
        res = train_epoch(model, data, config, epoch, state)
        log.info("epoch %d loss %.6f", epoch, res.mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, res)
    return state


# ---------------------------------------------------------------- evaluation

def predict(model: ModelParams, data, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions (N, 3) in dataset order."""
    data = _as_arrays(data)
    out = []
    with T.no_grad():
        for batch in batch_iterator(data, batch_size):
            with_eyes = model.config.fusion != "none"
            pred = model_forward(batch.face, batch.left_eye if with_eyes else None,
                                 batch.right_eye if with_eyes else None, model, training=False)
            out.append(pred.data)
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class SubsetMetric:
    subset: str
    count: int
    mean_error: float | None


def evaluate(model, data, subsets: Sequence[str] = ("all", "front180", "front_facing"),
             batch_size: int = 64) -> dict:
    """Mean angular error per subset.

    ``model`` is either :class:`ModelParams` or a callable mapping a
    :class:`~gazefuse.data.Batch` to (B, 3) predictions.
    """
    data = _as_arrays(data)
    if isinstance(model, ModelParams):
        preds = predict(model, data, batch_size)
    else:
        preds = np.concatenate([np.asarray(model(b)) for b in batch_iterator(data, batch_size)])
    truths = data.gaze.astype(np.float64)
    result = {}
    for subset in subsets:
        try:
            mean, count = mean_angular_error(preds, truths, subset)
        except EmptySubsetError:
            mean, count = None, 0
        result[subset] = SubsetMetric(subset, count, mean)
    return result


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: ModelParams
    epoch: int = 0
    opt_state: AdamState = field(default_factory=AdamState)
    train_config: TrainConfig | None = None
    version: int = CKPT_VERSION

    @property
    def config(self) -> GazeModelConfig:
        return self.model.config

    @property
    def rng_cursor(self) -> dict:
        seed = None if self.train_config is None else self.train_config.seed
        return {"train_seed": seed, "next_epoch": self.epoch}


def _entries(ck: Checkpoint) -> dict:
    p = ck.model.params
    entries = {f"param/{k}": t.data for k, t in p.items()}
    entries.update({f"buffer/{k}": v for k, v in p.buffers.items()})
    entries.update({f"adam.m/{k}": v for k, v in ck.opt_state.m.items()})
    entries.update({f"adam.v/{k}": v for k, v in ck.opt_state.v.items()})
    return entries


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    entries = _entries(ck)
    parts = [CKPT_MAGIC, struct.pack("<HI", ck.version, len(entries))]
    for name in sorted(entries):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(gzt.encode(entries[name]))
    meta = {
        "format_version": ck.version,
        "config": ck.config.to_dict(),
        "epoch": ck.epoch,
        "adam_t": ck.opt_state.t,
        "rng_cursor": ck.rng_cursor,
        "train_config": None if ck.train_config is None else ck.train_config.to_dict(),
    }
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(text)))
    parts.append(text)
    return b"".join(parts)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 10:
        raise FormatError("truncated checkpoint header", len(buf))
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 10
    entries = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated entry name length", len(buf))
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + n:
            raise FormatError("truncated entry name", len(buf))
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        entries[name], pos = gzt.decode(buf, pos)
    if len(buf) < pos + 4:
        raise FormatError("truncated metadata length", len(buf))
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + mlen:
        raise FormatError("truncated metadata block", len(buf))
    if len(buf) != pos + mlen:
        raise FormatError("trailing bytes after metadata", pos + mlen)
    try:
        meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    except ValueError:
        raise FormatError("metadata is not valid JSON", pos) from None

    config = GazeModelConfig.from_dict(meta["config"])
    expected = init_parameters_shapes(config)
    params, buffers, m, v = {}, {}, {}, {}
    for name, arr in entries.items():
        kind, _, path = name.partition("/")
        target = {"param": params, "buffer": buffers, "adam.m": m, "adam.v": v}.get(kind)
        if target is None:
            raise FormatError(f"unknown checkpoint entry {name!r}", 0)
        target[path] = arr
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"checkpoint parameters do not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for path, arr in params.items():
        if arr.shape != tuple(expected[path]):
            raise ValueError(f"parameter {path!r} has shape {arr.shape}, config expects {tuple(expected[path])}")
        for store in (m, v):
            if path in store and store[path].shape != arr.shape:
                raise ValueError(f"optimizer moment for {path!r} has shape {store[path].shape}")
    lp = LayerParams({k: Tensor(a, requires_grad=True) for k, a in params.items()}, buffers)
    tc = meta.get("train_config")
    return Checkpoint(
        model=ModelParams(config, lp),
        epoch=int(meta["epoch"]),
        opt_state=AdamState(m, v, int(meta["adam_t"])),
        train_config=None if tc is None else TrainConfig.from_dict(tc),
        version=version,
    )


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
