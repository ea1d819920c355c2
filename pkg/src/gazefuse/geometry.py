"""Gaze directions, angular error and evaluation subsets.

Camera frame convention: ``(0, 0, -1)`` points from the subject toward the
camera, ``y`` is up and ``x`` is toward the subject's left.  Yaw is positive to
the subject's left, pitch positive upward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CAMERA_AXIS = np.array([0.0, 0.0, -1.0])
SUBSETS = ("all", "front180", "front_facing")
SUBSET_LIMITS_DEG = {"all": None, "front180": 90.0, "front_facing": 20.0}
# Angles within this many degrees of a subset limit count as on the boundary
# (excluded); absorbs acos round-off for vectors built at exactly the limit.
BOUNDARY_TOL_DEG = 1e-9


@dataclass(frozen=True)
class GazeVector:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "GazeVector":
        x, y, z = (float(v) for v in a)
        return cls(x, y, z)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    def normalized(self) -> "GazeVector":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero gaze vector")
        return GazeVector(self.x / n, self.y / n, self.z / n)


@dataclass(frozen=True)
class SphericalGaze:
    yaw: float
    pitch: float


def _vec(g) -> np.ndarray:
    if isinstance(g, GazeVector):
        return g.as_array()
    return np.asarray(g, dtype=np.float64)


def angular_error(pred, truth) -> float:
    """Angle in degrees between two (not necessarily unit) direction vectors."""
    p, t = _vec(pred), _vec(truth)
    np_, nt = np.linalg.norm(p), np.linalg.norm(t)
    if np_ == 0.0 or nt == 0.0:
        raise ValueError("angular_error is undefined for a zero-norm vector")
    cos = float(p @ t) / (float(np_) * float(nt))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def angular_errors(preds: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Row-wise :func:`angular_error` for (N, 3) arrays."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {p.shape} and {t.shape}")
    pn = np.linalg.norm(p, axis=1)
    tn = np.linalg.norm(t, axis=1)
    bad = np.flatnonzero((pn == 0) | (tn == 0))
    if bad.size:
        raise ValueError(f"zero-norm gaze vector at row {int(bad[0])}")
    cos = np.einsum("ij,ij->i", p, t) / (pn * tn)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def spherical_to_vector(s: SphericalGaze) -> GazeVector:
    if not -math.pi / 2 < s.pitch < math.pi / 2:
        raise ValueError(f"pitch {s.pitch} outside (-pi/2, pi/2)")
    cp = math.cos(s.pitch)
    return GazeVector(cp * math.sin(s.yaw), math.sin(s.pitch), -cp * math.cos(s.yaw))


def vector_to_spherical(g) -> SphericalGaze:
    x, y, z = _vec(g)
    pitch = math.asin(min(1.0, max(-1.0, y)))
    if abs(y) >= 1.0:
        return SphericalGaze(0.0, pitch)
    return SphericalGaze(math.atan2(x, -z), pitch)


def subset_filter(gaze, subset: str) -> bool:
    """True iff ``gaze`` lies strictly below the subset's angle from the camera axis."""
    if subset not in SUBSET_LIMITS_DEG:
        raise ValueError(f"unknown subset {subset!r}; expected one of {SUBSETS}")
    limit = SUBSET_LIMITS_DEG[subset]
    err = angular_error(gaze, CAMERA_AXIS)
    return True if limit is None else err < limit - BOUNDARY_TOL_DEG


def subset_mask(truths: np.ndarray, subset: str) -> np.ndarray:
    if subset not in SUBSET_LIMITS_DEG:
        raise ValueError(f"unknown subset {subset!r}; expected one of {SUBSETS}")
    limit = SUBSET_LIMITS_DEG[subset]
    t = np.asarray(truths, dtype=np.float64)
    errs = angular_errors(t, np.broadcast_to(CAMERA_AXIS, t.shape))
    return np.ones(len(t), dtype=bool) if limit is None else errs < limit - BOUNDARY_TOL_DEG


class EmptySubsetError(ValueError):
    def __init__(self, subset: str):
        super().__init__(f"subset {subset!r} contains no samples (count 0)")
        self.subset = subset
        self.count = 0


def mean_angular_error(preds: Sequence, truths: Sequence, subset: str = "all") -> tuple[float, int]:
    """Mean angular error (degrees) over samples whose *truth* falls in ``subset``.

    Returns ``(mean, count)``.  Raises :class:`EmptySubsetError` when nothing is
    left after filtering.
    """
    p = np.array([_vec(g) for g in preds], dtype=np.float64).reshape(-1, 3)
    t = np.array([_vec(g) for g in truths], dtype=np.float64).reshape(-1, 3)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} labels")
    keep = subset_mask(t, subset) if len(t) else np.zeros(0, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise EmptySubsetError(subset)
    errs = [angular_error(a, b) for a, b in zip(p[keep], t[keep])]
    return math.fsum(errs) / count, count
