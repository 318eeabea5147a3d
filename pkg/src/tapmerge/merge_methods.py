"""Weight-space merging: ``theta = theta_0 + sum_t lambda_t * phi(tau_t; mu)``.

Every method is expressed as a per-task transform ``phi`` plus a coefficient
for each (task, layer) pair. The user-supplied ``lambda`` always multiplies the
method's own coefficients (``1/T`` for Avg, the linear schedule for Lines, the
norm ratios for NormAvg), so ``lambda = 0`` returns the base for every method.
"""
from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SpecError
from .task_vector import DEFAULT_GROUPING, LayerGrouping, TaskVector, check_task_vectors, layer_norms
from .tensor_store import WeightMap

METHODS = ("Avg", "TA", "TIES", "Breadcrumbs", "Consensus", "Lines", "STAR", "TSV", "NormAvg")
_BY_LOWER = {m.lower(): m for m in METHODS}

TSV_RANK_POLICIES = ("per_task_floor_div_T",)

# defaults and allowed keys for mu
MU_DEFAULTS: dict[str, dict] = {
    "Avg": {},
    "TA": {},
    "TIES": {"keep_fraction": 0.2},
    "Breadcrumbs": {"top_cut": 0.01, "bottom_cut": 0.9},
    "Consensus": {"keep_fraction": 0.2, "agreement": 2},
    "Lines": {"lambda_min": 0.0, "lambda_max": 1.0},
    "STAR": {"energy_fraction": 0.4},
    "TSV": {"rank_policy": "per_task_floor_div_T"},
    "NormAvg": {},
}


def canonical_method(name: str) -> str:
    try:
        return _BY_LOWER[str(name).lower()]
    except KeyError:
        raise SpecError(f"unknown merge method {name!r}; expected one of {', '.join(METHODS)}") from None


def _frac(x, name):
    x = float(x)
    if not 0.0 < x <= 1.0:
        raise SpecError(f"{name} must lie in (0, 1], got {x}")
    return x


@dataclass(frozen=True)
class MergeSpec:
    method: str
    lam: float | dict = 1.0
    mu: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        mu = dict(MU_DEFAULTS[self.method])
        unknown = set(self.mu) - set(mu)
        if unknown:
            raise SpecError(f"unknown mu keys for {self.method}: {sorted(unknown)}")
        mu.update(self.mu)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", _normalize_lambda(self.lam))
        self._check_mu()

    def _check_mu(self):
        mu = self.mu
        if self.method in ("TIES", "Consensus"):
            _frac(mu["keep_fraction"], "keep_fraction")
        if self.method == "Consensus":
            a = mu["agreement"]
            if isinstance(a, bool) or int(a) != a or a < 2:
                raise SpecError(f"agreement must be an integer >= 2, got {a!r}")
            mu["agreement"] = int(a)
        if self.method == "Breadcrumbs":
            top, bot = float(mu["top_cut"]), float(mu["bottom_cut"])
            if top < 0 or bot < 0 or top + bot >= 1:
                raise SpecError(f"need top_cut, bottom_cut >= 0 and top_cut + bottom_cut < 1, got {top}, {bot}")
        if self.method == "Lines" and float(mu["lambda_min"]) > float(mu["lambda_max"]):
            raise SpecError("lambda_min must not exceed lambda_max")
        if self.method == "STAR":
            _frac(mu["energy_fraction"], "energy_fraction")
        if self.method == "TSV" and mu["rank_policy"] not in TSV_RANK_POLICIES:
            raise SpecError(f"unknown TSV rank policy {mu['rank_policy']!r}")

    @property
    def structure(self) -> str:
        if isinstance(self.lam, float):
            return "scalar"
        first = next(iter(self.lam.values()), None)
        return "per_task_per_layer" if isinstance(first, dict) else "per_task"

    def to_json_obj(self) -> dict:
        return {"method": self.method, "lambda": self.lam, "mu": dict(sorted(self.mu.items()))}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "MergeSpec":
        if not isinstance(obj, Mapping) or set(obj) - {"method", "lambda", "mu"} or "method" not in obj:
            raise SpecError(f"merge spec must have keys method, lambda, mu; got {obj!r}")
        return cls(obj["method"], obj.get("lambda", 1.0), dict(obj.get("mu", {})))

    @classmethod
    def from_json(cls, text: str) -> "MergeSpec":
        return cls.from_json_obj(json.loads(text))


def _num(x, what):
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise SpecError(f"{what} must be a finite number, got {x!r}")
    return float(x)


def _normalize_lambda(lam):
    if not isinstance(lam, Mapping):
        return _num(lam, "lambda")
    if not lam:
        raise SpecError("lambda map must not be empty")
    vals = list(lam.values())
    if all(isinstance(v, Mapping) for v in vals):
        return {str(t): {str(l): _num(v, f"lambda[{t}][{l}]") for l, v in sorted(d.items())} for t, d in sorted(lam.items())}
    return {str(t): _num(v, f"lambda[{t}]") for t, v in sorted(lam.items())}


@dataclass(frozen=True)
class MergedModel:
    weights: WeightMap
    spec: MergeSpec
    task_ids: list[str]
    base_digest: str


# -- helpers -----------------------------------------------------------------

def _count(x: float, d: int, rounding) -> int:
    # snap values within float noise of an integer before rounding
    v = x * d
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        return int(r)
    return int(rounding(v))


def magnitude_order(arr: np.ndarray) -> np.ndarray:
    """Flat indices by decreasing magnitude; equal magnitudes keep the lower index first."""
    return np.argsort(-np.abs(arr.ravel()), kind="stable")


def topk_mask(arr: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Boolean mask of the ``ceil(k*d)`` largest-magnitude entries."""
    d = arr.size
    m = min(d, _count(keep_fraction, d, math.ceil))
    mask = np.zeros(d, dtype=bool)
    mask[magnitude_order(arr)[:m]] = True
    return mask.reshape(arr.shape)


def _check_nonempty(tvs):
    if not tvs:
        raise SpecError("need at least one task vector")
    check_task_vectors(tvs)


# -- transforms --------------------------------------------------------------

def transform_ties(tvs: list[TaskVector], keep_fraction: float) -> list[TaskVector]:
    """Trim each task to its top-k magnitudes, elect a sign per coordinate, drop disagreeing values.

    The elected sign is that of the sum of trimmed values (a zero sum elects +).
    Surviving values are not rescaled.
    """
    _check_nonempty(tvs)
    keep_fraction = _frac(keep_fraction, "keep_fraction")
    out = {tv.task_id: {} for tv in tvs}
    for name in tvs[0].delta:
        trimmed = [np.where(topk_mask(tv.delta[name], keep_fraction), tv.delta[name], np.float32(0)) for tv in tvs]
        total = np.zeros(trimmed[0].shape, dtype=np.float64)
        for t in trimmed:
            total += t
        elected = np.where(total >= 0, 1.0, -1.0)
        for tv, t in zip(tvs, trimmed):
            out[tv.task_id][name] = np.where(np.sign(t) == elected, t, np.float32(0))
    return [TaskVector(tv.task_id, WeightMap(out[tv.task_id])) for tv in tvs]


def breadcrumbs_tensor(arr: np.ndarray, top_cut: float, bottom_cut: float) -> np.ndarray:
    d = arr.size
    keep = _count(1.0 - top_cut - bottom_cut, d, math.ceil)
    n_top = min(_count(top_cut, d, math.floor), d - keep)
    n_bottom = d - keep - n_top
    order = magnitude_order(arr)
    flat = arr.ravel().copy()
    flat[order[:n_top]] = 0
    if n_bottom:
        flat[order[d - n_bottom:]] = 0
    return flat.reshape(arr.shape)


def transform_breadcrumbs(tv: TaskVector, top_cut: float, bottom_cut: float) -> TaskVector:
    """Zero the largest ``top_cut`` and smallest ``bottom_cut`` fractions of each tensor by magnitude."""
    if top_cut < 0 or bottom_cut < 0 or top_cut + bottom_cut >= 1:
        raise SpecError(f"need top_cut, bottom_cut >= 0 and sum < 1, got {top_cut}, {bottom_cut}")
    return TaskVector(tv.task_id, tv.delta.map(lambda _, a: breadcrumbs_tensor(a, top_cut, bottom_cut)))


def transform_consensus(
    tvs: list[TaskVector], keep_fraction: float, agreement: int = 2
) -> tuple[WeightMap, list[TaskVector]]:
    """Keep coordinates selected by at least ``agreement`` per-task top-k masks."""
    _check_nonempty(tvs)
    keep_fraction = _frac(keep_fraction, "keep_fraction")
    if agreement < 2:
        raise SpecError(f"agreement must be >= 2, got {agreement}")
    if len(tvs) < agreement:
        raise SpecError(f"consensus needs at least {agreement} tasks, got {len(tvs)}")
    masks = {}
    for name in tvs[0].delta:
        count = sum(topk_mask(tv.delta[name], keep_fraction).astype(np.int64) for tv in tvs)
        masks[name] = (count >= agreement).astype(np.float32)
    mask = WeightMap(masks)
    pruned = [TaskVector(tv.task_id, tv.delta.map(lambda n, a: a * mask[n])) for tv in tvs]
    return mask, pruned


def _svd(mat: np.ndarray):
    try:
        return np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from None


def star_matrix(mat: np.ndarray, energy_fraction: float) -> np.ndarray:
    u, s, vt = _svd(mat.astype(np.float64))
    energy = s**2
    total = energy.sum()
    if total == 0.0:
        return mat.copy()
    cum = np.cumsum(energy)
    r = int(np.searchsorted(cum, energy_fraction * total, side="left")) + 1
    r = min(r, s.size)
    kept = s[:r] * np.sqrt(total / cum[r - 1])
    return ((u[:, :r] * kept) @ vt[:r]).astype(np.float32)


def transform_star(tv: TaskVector, energy_fraction: float) -> TaskVector:
    """Truncate each matrix to the smallest rank holding ``energy_fraction`` of the squared
    singular values, then rescale the kept values so the total energy is unchanged.
    Tensors that are not 2-D pass through."""
    energy_fraction = _frac(energy_fraction, "energy_fraction")
    return TaskVector(
        tv.task_id,
        tv.delta.map(lambda _, a: star_matrix(a, energy_fraction) if a.ndim == 2 else a),
    )


def polar_factor(mat: np.ndarray) -> np.ndarray:
    """Closest matrix with orthonormal columns (orthogonal Procrustes solution)."""
    p, _, qt = _svd(mat)
    return p @ qt


def tsv_rank(shape: tuple[int, int], n_tasks: int) -> int:
    return max(1, min(shape) // n_tasks)


def tsv_components(mats: list[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Per-task contributions whose sum is the TSV merged matrix.

    Returns the contributions and the orthogonalized stacked factors (U, V).
    """
    T = len(mats)
    r = tsv_rank(mats[0].shape, T)
    us, ss, vs = [], [], []
    for m in mats:
        u, s, vt = _svd(m.astype(np.float64))
        us.append(u[:, :r])
        ss.append(s[:r])
        vs.append(vt[:r].T)
    u_orth = polar_factor(np.concatenate(us, axis=1))
    v_orth = polar_factor(np.concatenate(vs, axis=1))
    parts = []
    for t in range(T):
        cols = slice(t * r, (t + 1) * r)
        parts.append((u_orth[:, cols] * ss[t]) @ v_orth[:, cols].T)
    return parts, u_orth, v_orth


def _tsv_per_task(tvs: list[TaskVector]) -> list[TaskVector]:
    out = {tv.task_id: {} for tv in tvs}
    for name in tvs[0].delta:
        mats = [tv.delta[name] for tv in tvs]
        parts = tsv_components(mats)[0] if mats[0].ndim == 2 else mats
        for tv, p in zip(tvs, parts):
            out[tv.task_id][name] = p
    return [TaskVector(tv.task_id, WeightMap(out[tv.task_id])) for tv in tvs]


def transform_tsv(tvs: list[TaskVector], rank_policy: str = "per_task_floor_div_T") -> WeightMap:
    """Merged TSV delta: per-task truncated SVD, stacked factors orthogonalized via their
    polar factors, reassembled as ``U_orth diag(S) V_orth^T``. Non-matrix tensors are summed."""
    _check_nonempty(tvs)
    if rank_policy not in TSV_RANK_POLICIES:
        raise SpecError(f"unknown TSV rank policy {rank_policy!r}")
    out = {}
    for name in tvs[0].delta:
        mats = [tv.delta[name] for tv in tvs]
        parts = tsv_components(mats)[0] if mats[0].ndim == 2 else mats
        acc = np.zeros(mats[0].shape, dtype=np.float64)
        for p in parts:
            acc += p
        out[name] = acc
    return WeightMap(out)


# -- coefficient schemes -----------------------------------------------------

def lambda_lines(layer_order: list[str], lambda_min: float, lambda_max: float) -> dict[str, float]:
    """Linear schedule from ``lambda_min`` (first layer) to ``lambda_max`` (last layer)."""
    if not layer_order:
        raise SpecError("lambda_lines needs at least one layer")
    if lambda_min > lambda_max:
        raise SpecError("lambda_min must not exceed lambda_max")
    L = len(layer_order)
    if L == 1:
        return {layer_order[0]: float(lambda_min)}
    step = (lambda_max - lambda_min) / (L - 1)
    return {layer: lambda_min + step * i for i, layer in enumerate(layer_order)}


def lambda_normavg(tvs: list[TaskVector], grouping: LayerGrouping = DEFAULT_GROUPING) -> dict[str, dict[str, float]]:
    """``lambda[t][l] = min_j ||tau_j^l|| / ||tau_t^l||``."""
    _check_nonempty(tvs)
    per_task = {tv.task_id: layer_norms(tv.delta, grouping) for tv in tvs}
    layers = list(next(iter(per_task.values())))
    for tid, norms_ in per_task.items():
        for layer, n in norms_.items():
            if n == 0.0:
                raise NumericalError(f"task {tid!r} has zero norm in layer {layer!r}")
    mins = {l: min(per_task[t][l] for t in per_task) for l in layers}
    return {t: {l: mins[l] / per_task[t][l] for l in layers} for t in per_task}


# -- merge -------------------------------------------------------------------

def _user_coef(spec: MergeSpec, task_ids, layers):
    lam = spec.lam
    coef = {}
    if spec.structure == "scalar":
        return {(t, l): lam for t in task_ids for l in layers}
    if set(lam) != set(task_ids):
        raise SpecError(f"lambda tasks {sorted(lam)} do not match merge tasks {sorted(task_ids)}")
    for t in task_ids:
        if spec.structure == "per_task":
            coef.update({(t, l): lam[t] for l in layers})
        else:
            if set(lam[t]) != set(layers):
                raise SpecError(f"lambda layers for task {t!r} must be exactly {layers}, got {sorted(lam[t])}")
            coef.update({(t, l): lam[t][l] for l in layers})
    return coef


def transformed_task_vectors(tvs: list[TaskVector], spec: MergeSpec) -> list[TaskVector]:
    """Apply the method's ``phi`` to every task vector."""
    mu = spec.mu
    if spec.method == "TIES":
        return transform_ties(tvs, mu["keep_fraction"])
    if spec.method == "Breadcrumbs":
        return [transform_breadcrumbs(tv, mu["top_cut"], mu["bottom_cut"]) for tv in tvs]
    if spec.method == "Consensus":
        return transform_consensus(tvs, mu["keep_fraction"], mu["agreement"])[1]
    if spec.method == "STAR":
        return [transform_star(tv, mu["energy_fraction"]) for tv in tvs]
    if spec.method == "TSV":
        return _tsv_per_task(tvs)
    return list(tvs)


def merge_coefficients(
    tvs: list[TaskVector], spec: MergeSpec, layers: list[str], grouping: LayerGrouping = DEFAULT_GROUPING
) -> dict[tuple[str, str], float]:
    """Effective coefficient for every (task, layer): user lambda times the method's own."""
    ids = [tv.task_id for tv in tvs]
    coef = _user_coef(spec, ids, layers)
    if spec.method == "Avg":
        coef = {k: v / len(ids) for k, v in coef.items()}
    elif spec.method == "Lines":
        sched = lambda_lines(layers, float(spec.mu["lambda_min"]), float(spec.mu["lambda_max"]))
        coef = {(t, l): v * sched[l] for (t, l), v in coef.items()}
    elif spec.method == "NormAvg":
        ratio = lambda_normavg(tvs, grouping)
        coef = {(t, l): v * ratio[t][l] for (t, l), v in coef.items()}
    return coef


def merge(
    base: WeightMap, tvs: list[TaskVector], spec: MergeSpec, grouping: LayerGrouping = DEFAULT_GROUPING
) -> MergedModel:
    _check_nonempty(tvs)
    check_task_vectors(tvs, base)
    groups = grouping.groups(base)
    layer_of = {n: l for l, members in groups.items() for n in members}
    coef = merge_coefficients(tvs, spec, list(groups), grouping)
    phis = transformed_task_vectors(tvs, spec)
    out = {}
    for name in base:
        acc = base[name].astype(np.float64)
        layer = layer_of[name]
        for phi in phis:
            acc = acc + coef[(phi.task_id, layer)] * phi.delta[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    weights = WeightMap(out)
    weights.check_finite()
    return MergedModel(weights, spec, [tv.task_id for tv in tvs], base.digest().hex)
