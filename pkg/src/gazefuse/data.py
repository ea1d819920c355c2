"""Synthetic gaze dataset: rendering, on-disk layout, loading and batching.

A dataset directory holds ``manifest.txt`` and ``samples/NNNNNN.{face,leye,reye}.gzt``.
Each manifest line is ``face<TAB>leye<TAB>reye<TAB>gx<TAB>gy<TAB>gz`` with paths
relative to the dataset root; lines starting with ``#`` are comments.  Images
are stored as raw [0, 1] float32 GZT1 tensors of shape (3, H, W) and mapped to
[-1, 1] by :func:`preprocess` when loaded.
"""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import gzt
from .geometry import GazeVector, SphericalGaze, spherical_to_vector

IMAGE_SIZE = 64
YAW_MAX = math.radians(100.0)
PITCH_MAX = math.radians(50.0)
IRIS_SHIFT_PX = 14.0
EYE_JITTER_PX = 0.5
PIXEL_NOISE = 0.02
OCCLUSION_PROB = 0.15
# Eye crops are pasted into the face at this fraction of their size.
FACE_EYE_SCALE = 8
# Spread of head yaw (which drives face shading and nose) around the gaze yaw.
HEAD_YAW_SIGMA = math.radians(30.0)

MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "test")
_SPLIT_CODE = {"train": 0, "test": 1}

_SKIN = np.array([0.80, 0.62, 0.52])
_SCLERA = np.array([0.96, 0.95, 0.93])
_IRIS = np.array([0.30, 0.20, 0.12])
_PUPIL = np.array([0.04, 0.03, 0.03])
_BACKGROUND = np.array([0.22, 0.24, 0.28])
_OCCLUDER = np.array([0.5, 0.5, 0.5])


class DataError(Exception):
    """Malformed, missing or inconsistent dataset content."""


@dataclass
class Sample:
    face: np.ndarray
    left_eye: np.ndarray
    right_eye: np.ndarray
    gaze: GazeVector
    meta: int = -1


@dataclass(frozen=True)
class Record:
    face_path: str
    left_eye_path: str
    right_eye_path: str
    gaze: tuple

    def to_line(self) -> str:
        comps = "\t".join(f"{c:.9g}" for c in self.gaze)
        return f"{self.face_path}\t{self.left_eye_path}\t{self.right_eye_path}\t{comps}"


@dataclass
class DatasetManifest:
    root: Path
    records: list = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)

    def gaze_array(self) -> np.ndarray:
        return np.array([r.gaze for r in self.records], dtype=np.float64).reshape(-1, 3)

    def load_sample(self, index: int) -> Sample:
        r = self.records[index]
        raw = Sample(
            face=gzt.load(self.root / r.face_path),
            left_eye=gzt.load(self.root / r.left_eye_path),
            right_eye=gzt.load(self.root / r.right_eye_path),
            gaze=GazeVector(*r.gaze),
            meta=index,
        )
        return preprocess(raw)


# ---------------------------------------------------------------- rendering

def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _paint(img: np.ndarray, coverage: np.ndarray, color: np.ndarray) -> None:
    img *= 1.0 - coverage
    img += coverage * color[:, None, None]


def _disk(yy, xx, cy, cx, r):
    return np.clip(r + 0.5 - np.hypot(yy - cy, xx - cx), 0.0, 1.0)


def iris_center(spherical: SphericalGaze, size: int = IMAGE_SIZE) -> tuple[float, float]:
    """Noise-free iris center (row, col) in an eye crop, pixel-center coordinates."""
    c = size / 2.0
    return (c - IRIS_SHIFT_PX * spherical.pitch / PITCH_MAX,
            c + IRIS_SHIFT_PX * spherical.yaw / YAW_MAX)


def render_eye(cy: float, cx: float, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = _grid(size)
    c = size / 2.0
    img = np.broadcast_to(_SKIN[:, None, None], (3, size, size)).copy()
    sclera = np.clip((1.0 - np.hypot((yy - c) / 15.0, (xx - c) / 25.0)) * 15.0 + 0.5, 0.0, 1.0)
    _paint(img, sclera, _SCLERA)
    _paint(img, _disk(yy, xx, cy, cx, 9.0), _IRIS)
    _paint(img, _disk(yy, xx, cy, cx, 3.5), _PUPIL)
    return img


def _shrink(img: np.ndarray, factor: int) -> np.ndarray:
    C, H, W = img.shape
    return img.reshape(C, H // factor, factor, W // factor, factor).mean(axis=(2, 4))


def render_face(head_yaw: float, left_eye: np.ndarray, right_eye: np.ndarray,
                occlude: str | None = None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Face crop: head ellipse shaded by ``head_yaw``, nose wedge, shrunken eye crops."""
    yy, xx = _grid(size)
    c = size / 2.0
    yaw_frac = head_yaw / YAW_MAX
    img = np.broadcast_to(_BACKGROUND[:, None, None], (3, size, size)).copy()
    head = np.clip((1.0 - np.hypot((yy - c) / 30.0, (xx - c) / 24.0)) * 24.0 + 0.5, 0.0, 1.0)
    shade = 1.0 + 0.35 * yaw_frac * (xx - c) / c
    skin = _SKIN[:, None, None] * shade[None]
    img = img * (1.0 - head) + skin * head

    # nose wedge, apex slides with yaw
    apex_x = c + 6.0 * yaw_frac
    top, bottom = 28.0, 44.0
    t = np.clip((yy - top) / (bottom - top), 0.0, 1.0)
    half = 1.0 + 5.0 * t
    inside = (yy >= top) & (yy <= bottom)
    nose = np.clip(half + 0.5 - np.abs(xx - apex_x), 0.0, 1.0) * inside
    _paint(img, nose, _SKIN * 0.6)

    small = size // FACE_EYE_SCALE
    row, margin = 20, 16
    # subject's right eye appears on the image left
    slots = {"right": (row, margin), "left": (row, size - margin - small)}
    for side, eye in (("right", right_eye), ("left", left_eye)):
        r0, c0 = slots[side]
        patch = _shrink(eye, FACE_EYE_SCALE)
        if occlude == side:
            patch = np.broadcast_to(_OCCLUDER[:, None, None], patch.shape)
        img[:, r0:r0 + small, c0:c0 + small] = patch
    return img


def check_angles(spherical: SphericalGaze) -> None:
    if abs(spherical.yaw) > YAW_MAX + 1e-12 or abs(spherical.pitch) > PITCH_MAX + 1e-12:
        raise ValueError(
            f"gaze angles (yaw={math.degrees(spherical.yaw):.3f} deg, "
            f"pitch={math.degrees(spherical.pitch):.3f} deg) outside generator range "
            f"(|yaw| <= 100, |pitch| <= 50)"
        )


def render_sample(spherical: SphericalGaze, rng: np.random.Generator | None,
                  noise: bool = True) -> Sample:
    """Render face and eye crops (values in [0, 1]) for one gaze direction.

    With ``noise=False`` (or ``rng=None``) the image is the noise-free anchor:
    no iris jitter, no pixel noise, no occlusion, and head yaw equal to gaze yaw.
    """
    check_angles(spherical)
    noisy = noise and rng is not None
    cy, cx = iris_center(spherical)
    eyes = {}
    for side in ("left", "right"):
        jy, jx = rng.normal(0.0, EYE_JITTER_PX, size=2) if noisy else (0.0, 0.0)
        eyes[side] = render_eye(cy + jy, cx + jx)
    occlude = None
    head_yaw = spherical.yaw
    if noisy:
        if rng.random() < OCCLUSION_PROB:
            occlude = "left" if rng.random() < 0.5 else "right"
        # the eyes rotate within the head, so head pose only loosely tracks gaze
        head_yaw = float(np.clip(head_yaw + rng.normal(0.0, HEAD_YAW_SIGMA), -YAW_MAX, YAW_MAX))
    face = render_face(head_yaw, eyes["left"], eyes["right"], occlude)
    images = [face, eyes["left"], eyes["right"]]
    if noisy:
        images = [im + rng.normal(0.0, PIXEL_NOISE, size=im.shape) for im in images]
    face, left, right = (np.clip(im, 0.0, 1.0).astype(np.float32) for im in images)
    return Sample(face, left, right, spherical_to_vector(spherical))


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODE[split], index]))


def draw_angles(rng: np.random.Generator) -> SphericalGaze:
    yaw = rng.uniform(-YAW_MAX, YAW_MAX)
    pitch = rng.uniform(-PITCH_MAX, PITCH_MAX)
    return SphericalGaze(yaw, pitch)


# ---------------------------------------------------------------- on-disk format

def _sample_paths(index: int) -> tuple[str, str, str]:
    stem = f"samples/{index:06d}"
    return f"{stem}.face.gzt", f"{stem}.leye.gzt", f"{stem}.reye.gzt"


def write_manifest(manifest: DatasetManifest) -> Path:
    lines = [f"# gazefuse manifest split={manifest.split}"]
    lines += [r.to_line() for r in manifest.records]
    path = Path(manifest.root) / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def generate_synthetic_dataset(out_dir, count: int, seed: int, split: str = "train") -> DatasetManifest:
    """Render ``count`` samples into ``out_dir`` and write the manifest last.

    Sample ``i`` depends only on ``(seed, split, i)``.  On failure every file this
    call created is removed before the error propagates.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    root = Path(out_dir)
    created_root = not root.exists()
    sample_dir = root / "samples"
    created_samples = not sample_dir.exists()
    written: list[Path] = []
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(count):
            rng = sample_rng(seed, split, i)
            s = render_sample(draw_angles(rng), rng)
            paths = _sample_paths(i)
            for rel, img in zip(paths, (s.face, s.left_eye, s.right_eye)):
                p = root / rel
                written.append(p)
                gzt.save(p, img)
            records.append(Record(*paths, gaze=(s.gaze.x, s.gaze.y, s.gaze.z)))
        manifest = DatasetManifest(root, records, split)
        written.append(root / MANIFEST_NAME)
        write_manifest(manifest)
    except BaseException:
        if created_root:
            shutil.rmtree(root, ignore_errors=True)
        else:
            for p in written:
                p.unlink(missing_ok=True)
            if created_samples:
                shutil.rmtree(sample_dir, ignore_errors=True)
        raise
    # re-read so the returned gaze values match what a later load sees
    return load_manifest(root)


def load_manifest(directory) -> DatasetManifest:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    split = "train"
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("split="):
                    split = tok.split("=", 1)[1]
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        try:
            gaze = tuple(float(v) for v in fields[3:])
        except ValueError:
            raise DataError(f"{path}:{lineno}: gaze components are not numbers") from None
        norm = math.sqrt(sum(c * c for c in gaze))
        if not abs(norm - 1.0) <= 1e-4:
            raise DataError(
                f"{path}:{lineno}: record {len(records)} gaze {gaze} is not unit-norm (|g|={norm:.6g})"
            )
        records.append(Record(fields[0], fields[1], fields[2], gaze))
    if not records:
        raise DataError(f"{path}: no records")
    for r in records:
        for rel in (r.face_path, r.left_eye_path, r.right_eye_path):
            if not (root / rel).is_file():
                raise DataError(f"{path}: referenced file missing: {rel}")
    return DatasetManifest(root, records, split)


# ---------------------------------------------------------------- preprocessing

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (C, H, W) with half-pixel centers and edge clamping."""
    C, H, W = img.shape
    if (H, W) == (out_h, out_w):
        return img.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(H, out_h)
    x0, x1, wx = axis_weights(W, out_w)
    rows = img[:, y0, :] * (1 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx
    return out.astype(img.dtype, copy=False)


def _prep_image(img: np.ndarray, what: str) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"{what} image must be 3-channel (3, H, W), got shape {img.shape}")
    if img.shape[1] < 8 or img.shape[2] < 8:
        raise ValueError(f"{what} image must be at least 8x8, got {img.shape[1:]}")
    img = resize_bilinear(img.astype(np.float32), IMAGE_SIZE, IMAGE_SIZE)
    return np.clip(2.0 * img - 1.0, -1.0, 1.0).astype(np.float32)


def preprocess(raw: Sample) -> Sample:
    return Sample(
        face=_prep_image(raw.face, "face"),
        left_eye=_prep_image(raw.left_eye, "left eye"),
        right_eye=_prep_image(raw.right_eye, "right eye"),
        gaze=raw.gaze,
        meta=raw.meta,
    )


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    face: np.ndarray
    left_eye: np.ndarray
    right_eye: np.ndarray
    gaze: np.ndarray
    indices: np.ndarray


class GazeArrays:
    """Preprocessed samples of a manifest held in memory as stacked arrays."""

    def __init__(self, face, left_eye, right_eye, gaze):
        self.face = face
        self.left_eye = left_eye
        self.right_eye = right_eye
        self.gaze = gaze

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "GazeArrays":
        n = len(manifest)
        shape = (n, 3, IMAGE_SIZE, IMAGE_SIZE)
        face = np.empty(shape, np.float32)
        left = np.empty(shape, np.float32)
        right = np.empty(shape, np.float32)
        for i in range(n):
            s = manifest.load_sample(i)
            face[i], left[i], right[i] = s.face, s.left_eye, s.right_eye
        return cls(face, left, right, manifest.gaze_array())

    def __len__(self) -> int:
        return len(self.gaze)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self.face[idx], self.left_eye[idx], self.right_eye[idx], self.gaze[idx], idx)


def batch_order(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(data, batch_size: int, shuffle_seed: int | None = None) -> Iterator[Batch]:
    """Yield batches in manifest order, or in a seeded permutation.

    ``data`` is a :class:`DatasetManifest` (images read per batch) or
    :class:`GazeArrays`.  The last partial batch is kept.
    """
    for idx in batch_order(len(data), batch_size, shuffle_seed):
        if isinstance(data, GazeArrays):
            yield data.take(idx)
            continue
        samples = [data.load_sample(int(i)) for i in idx]
        yield Batch(
            np.stack([s.face for s in samples]),
            np.stack([s.left_eye for s in samples]),
            np.stack([s.right_eye for s in samples]),
            np.array([[s.gaze.x, s.gaze.y, s.gaze.z] for s in samples], dtype=np.float64),
            idx,
        )


def stack_gaze(gazes: Sequence[GazeVector]) -> np.ndarray:
    return np.array([[g.x, g.y, g.z] for g in gazes], dtype=np.float64)
