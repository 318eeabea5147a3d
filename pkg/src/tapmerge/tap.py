"""Task alignment proxy: feature dissimilarity between a merged encoder and each task's
fine-tuned encoder, averaged over samples and then over tasks.

Feature files (FTS1) are ``b"FTS1" | u32 N | u32 D | u64 sample_digest | N*D f32``, all
little-endian and row-major.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericalError, SpecError
from .tensor_store import atomic_write_bytes, check_finite

METRICS = ("l1", "l2", "cosine")
DEFAULT_METRIC = "l2"
DEFAULT_N_SAMPLES = 128

FTS_MAGIC = b"FTS1"
_FTS_HEADER = struct.Struct("<4sIIQ")
_F32 = np.dtype("<f4")


def sample_digest(sample_ids: Iterable) -> int:
    """64-bit digest of an ordered list of sample identifiers."""
    payload = json.dumps([str(s) for s in sample_ids], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class FeatureSet:
    task_id: str
    matrix: np.ndarray
    sample_digest: int = 0
    source: str = "toy_encoder"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float32, order="C")
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise FormatError(f"feature matrix must be N x D with N, D >= 1, got shape {m.shape}")
        check_finite(f"features[{self.task_id}]", m)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def comparable(self, other: "FeatureSet") -> bool:
        return (
            self.task_id == other.task_id
            and self.matrix.shape == other.matrix.shape
            and self.sample_digest == other.sample_digest
        )


def features_to_bytes(fs: FeatureSet) -> bytes:
    n, d = fs.matrix.shape
    return _FTS_HEADER.pack(FTS_MAGIC, n, d, fs.sample_digest) + fs.matrix.astype(_F32).tobytes()


def features_from_bytes(buf: bytes, task_id: str, source: str = "external_provider") -> FeatureSet:
    if len(buf) < _FTS_HEADER.size:
        raise FormatError("file too short for FTS1 header")
    magic, n, d, digest = _FTS_HEADER.unpack_from(buf)
    if magic != FTS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FTS_MAGIC!r}")
    expected = _FTS_HEADER.size + 4 * n * d
    if len(buf) != expected:
        raise FormatError(f"feature file has {len(buf)} bytes, expected {expected} for N={n}, D={d}")
    mat = np.frombuffer(buf, dtype=_F32, offset=_FTS_HEADER.size).reshape(n, d)
    return FeatureSet(task_id, mat, digest, source)


def save_features(fs: FeatureSet, path) -> None:
    atomic_write_bytes(path, features_to_bytes(fs))


def load_features(path, task_id: str, source: str = "external_provider") -> FeatureSet:
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read(), task_id, source)


def _check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise SpecError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return metric


def rowwise_dissimilarity(a: np.ndarray, b: np.ndarray, metric: str = DEFAULT_METRIC) -> np.ndarray:
    """Dissimilarity of matching rows of two ``N x D`` arrays, in float64."""
    _check_metric(metric)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SpecError(f"shape mismatch: {a.shape} vs {b.shape}")
    if metric == "l1":
        return np.abs(a - b).sum(axis=-1)
    if metric == "l2":
        return np.sqrt(((a - b) ** 2).sum(axis=-1))
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericalError("cosine dissimilarity is undefined for a zero feature vector")
    cos = np.clip((a * b).sum(axis=-1) / (na * nb), -1.0, 1.0)
    # rounding can leave a few ulps for equal rows; identical features must score exactly 0
    return np.where(np.all(a == b, axis=-1), 0.0, 1.0 - cos)


def dissimilarity(f, g, metric: str = DEFAULT_METRIC) -> float:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.ndim != 1 or f.shape != g.shape:
        raise SpecError(f"need two vectors of equal length, got shapes {f.shape} and {g.shape}")
    return float(rowwise_dissimilarity(f[None], g[None], metric)[0])


def tap_task(merged: FeatureSet, teacher: FeatureSet, metric: str = DEFAULT_METRIC) -> float:
    """Mean dissimilarity between merged-model and teacher features over the shared samples."""
    if not merged.comparable(teacher):
        raise SpecError(
            f"feature sets are not comparable: task {merged.task_id!r}/{teacher.task_id!r}, "
            f"shape {merged.matrix.shape}/{teacher.matrix.shape}, "
            f"digest {merged.sample_digest:016x}/{teacher.sample_digest:016x}"
        )
    rows = rowwise_dissimilarity(merged.matrix, teacher.matrix, metric)
    return math.fsum(rows.tolist()) / rows.size


def tap_average(per_task: Mapping[str, float]) -> float:
    if not per_task:
        raise ValueError("tap_average needs at least one task")
    return math.fsum(float(per_task[k]) for k in sorted(per_task)) / len(per_task)


@dataclass(frozen=True)
class TapReport:
    per_task: dict
    average: float
    metric: str = DEFAULT_METRIC
    n_samples: int = DEFAULT_N_SAMPLES

    def to_json_obj(self) -> dict:
        return {
            "metric": self.metric,
            "n_samples": self.n_samples,
            "per_task": {k: self.per_task[k] for k in sorted(self.per_task)},
            "average": self.average,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, indent=2) + "\n"


def tap_report(
    merged: Mapping[str, FeatureSet], teachers: Mapping[str, FeatureSet], metric: str = DEFAULT_METRIC
) -> TapReport:
    """Score every task present in ``teachers``."""
    if not teachers:
        raise SpecError("need at least one teacher feature set")
    missing = sorted(set(teachers) - set(merged))
    if missing:
        raise SpecError(f"no merged features for tasks {missing}")
    per_task = {t: tap_task(merged[t], teachers[t], metric) for t in sorted(teachers)}
    n = {fs.n for fs in teachers.values()}
    return TapReport(per_task, tap_average(per_task), metric, n.pop() if len(n) == 1 else -1)


def select(candidates: Sequence[tuple[object, TapReport | float]]):
    """Candidate spec with the lowest average TAP; the earliest wins ties."""
    if not candidates:
        raise ValueError("select needs at least one candidate")
    best, best_val = None, math.inf
    for spec, rep in candidates:
        val = rep.average if isinstance(rep, TapReport) else float(rep)
        if best is None or val < best_val:
            best, best_val = spec, val
    return best
