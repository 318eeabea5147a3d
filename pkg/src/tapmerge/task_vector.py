"""Task vectors and their diagnostics (norms, cosine similarity to the mean)."""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SpecError
from .tensor_store import WeightMap, sub, validate_compat


@dataclass(frozen=True)
class TaskVector:
    task_id: str
    delta: WeightMap

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("task_id must be non-empty")


def compute_task_vector(base: WeightMap, finetuned: WeightMap, task_id: str) -> TaskVector:
    return TaskVector(task_id, sub(finetuned, base))


def check_task_vectors(tvs: list[TaskVector], base: WeightMap | None = None) -> None:
    """Unique ids and a shared schema (with ``base`` when given)."""
    ids = [tv.task_id for tv in tvs]
    if len(set(ids)) != len(ids):
        raise SpecError(f"duplicate task ids in {ids}")
    maps = ([base] if base is not None else []) + [tv.delta for tv in tvs]
    if maps:
        validate_compat(maps)


def _natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


@dataclass(frozen=True)
class LayerGrouping:
    """Assign parameters to layers by name.

    ``pattern`` is a regex whose first capture group is the layer name. Parameters
    that do not match form a group of their own. The default strips the last
    dot-separated component, so ``layer3.weight`` and ``layer3.bias`` share the
    group ``layer3``.
    """

    pattern: str = r"^(.+)\.[^.]+$"
    _rx: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_rx", re.compile(self.pattern))

    def layer_of(self, name: str) -> str:
        m = self._rx.match(name)
        return m.group(1) if m else name

    def groups(self, names, strict: bool = False) -> dict[str, list[str]]:
        """Layer -> member names, layers in natural-sort order (layer2 before layer10).

        With ``strict``, a pattern that matches none of the names is an error.
        """
        names = list(names)
        if strict and names and not any(self._rx.match(n) for n in names):
            raise SpecError(f"layer grouping {self.pattern!r} matches no parameters")
        out: dict[str, list[str]] = {}
        for n in sorted(names):
            out.setdefault(self.layer_of(n), []).append(n)
        return {k: out[k] for k in sorted(out, key=_natural_key)}


DEFAULT_GROUPING = LayerGrouping()


@dataclass(frozen=True)
class NormReport:
    scope: str
    rows: list[tuple[str, str, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "layer", "l2_norm"])
        for task, layer, val in self.rows:
            w.writerow([task, layer, repr(float(val))])
        return buf.getvalue()


def _l2(arrays) -> float:
    return float(np.sqrt(sum(float(np.dot(a.ravel().astype(np.float64), a.ravel().astype(np.float64))) for a in arrays)))


def layer_norms(delta: WeightMap, grouping: LayerGrouping = DEFAULT_GROUPING, strict: bool = False) -> dict[str, float]:
    return {layer: _l2(delta[n] for n in members) for layer, members in grouping.groups(delta, strict).items()}


def norms(tvs: list[TaskVector], scope: str = "global", grouping: LayerGrouping = DEFAULT_GROUPING) -> NormReport:
    if not tvs:
        raise ValueError("norms needs at least one task vector")
    check_task_vectors(tvs)
    rows = []
    if scope == "global":
        for tv in tvs:
            rows.append((tv.task_id, "ALL", _l2(tv.delta.values())))
    elif scope in ("per_layer", "per-layer"):
        scope = "per_layer"
        for tv in tvs:
            for layer, val in layer_norms(tv.delta, grouping, strict=True).items():
                rows.append((tv.task_id, layer, val))
    else:
        raise SpecError(f"unknown norm scope {scope!r}")
    return NormReport(scope, rows)


@dataclass(frozen=True)
class CosineReport:
    task_ids: list[str]
    pairwise: np.ndarray
    to_average: np.ndarray
    # every parameter is flattened; embeddings and norms are not excluded
    metadata: dict = field(default_factory=lambda: {"flatten": "all_parameters"})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_a", "task_b", "cosine"])
        for i, a in enumerate(self.task_ids):
            for j, b in enumerate(self.task_ids):
                w.writerow([a, b, repr(float(self.pairwise[i, j]))])
        for i, a in enumerate(self.task_ids):
            w.writerow([a, "AVERAGE", repr(float(self.to_average[i]))])
        return buf.getvalue()


def cosine_analysis(tvs: list[TaskVector]) -> CosineReport:
    if len(tvs) < 2:
        raise ValueError("cosine_analysis needs at least two task vectors")
    check_task_vectors(tvs)
    flats = np.stack([tv.delta.flat() for tv in tvs])
    lengths = np.linalg.norm(flats, axis=1)
    for tv, n in zip(tvs, lengths):
        if n == 0.0:
            raise NumericalError(f"task vector {tv.task_id!r} is zero; cosine is undefined")
    unit = flats / lengths[:, None]
    gram = unit @ unit.T
    pairwise = np.clip(0.5 * (gram + gram.T), -1.0, 1.0)
    mean = flats.mean(axis=0)
    mnorm = np.linalg.norm(mean)
    if mnorm == 0.0:
        raise NumericalError("average task vector is zero; cosine is undefined")
    to_avg = np.clip(unit @ (mean / mnorm), -1.0, 1.0)
    return CosineReport([tv.task_id for tv in tvs], pairwise, to_avg)
