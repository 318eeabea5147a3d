"""Gradient-based search for merging coefficients that minimizes a feature alignment loss.

The loss compares the merged encoder with each fine-tuned encoder on unlabeled
inputs: features are standardized per dimension with running (EMA) statistics,
then scored with cosine dissimilarity. Gradients with respect to the
coefficients are computed analytically through the merge and the toy encoder.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SpecError
from .task_vector import DEFAULT_GROUPING, LayerGrouping, TaskVector, check_task_vectors
from .tensor_store import WeightMap
from .toy_bench import ToyEncoderConfig, check_schema, config_from_weights, encoder_backward, forward_activations, rng

STRUCTURES = ("per_task", "per_task_per_layer")


@dataclass(frozen=True)
class AdaConfig:
    lambda_structure: str = "per_task"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    iterations: int = 500
    ema_decay: float = 0.99
    norm_eps: float = 1e-5
    seed: int = 0
    trace_every: int = 1

    def __post_init__(self):
        if self.lambda_structure not in STRUCTURES:
            raise SpecError(f"unknown lambda structure {self.lambda_structure!r}")
        if not self.lr > 0:
            raise SpecError("lr must be positive")
        if self.iterations < 1 or self.batch_size < 2 or self.trace_every < 1:
            raise SpecError("need iterations >= 1, batch_size >= 2 and trace_every >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise SpecError("ema_decay must lie in (0, 1)")

    def to_json_obj(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension mean and variance of one feature stream."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def of(cls, feats: np.ndarray) -> "FeatureStats":
        return cls(feats.mean(axis=0), feats.var(axis=0))

    def update(self, feats: np.ndarray, decay: float) -> "FeatureStats":
        return FeatureStats(
            decay * self.mean + (1.0 - decay) * feats.mean(axis=0),
            decay * self.var + (1.0 - decay) * feats.var(axis=0),
        )

    def standardize(self, feats: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
        scale = 1.0 / np.sqrt(self.var + eps)
        return (feats - self.mean) * scale, scale


@dataclass(frozen=True)
class TaskStats:
    student: FeatureStats
    teacher: FeatureStats


class AdaProblem:
    """Merge ``base + sum_t lambda_t * tau_t`` with one coefficient per task (or per task and layer)."""

    def __init__(
        self,
        base: WeightMap,
        tvs: list[TaskVector],
        structure: str = "per_task",
        encoder: ToyEncoderConfig | None = None,
        grouping: LayerGrouping = DEFAULT_GROUPING,
        norm_eps: float = 1e-5,
    ):
        if not tvs:
            raise SpecError("need at least one task vector")
        if structure not in STRUCTURES:
            raise SpecError(f"unknown lambda structure {structure!r}")
        check_task_vectors(tvs, base)
        self.encoder = encoder or config_from_weights(base)
        check_schema(base, self.encoder)
        self.task_ids = [tv.task_id for tv in tvs]
        self.structure = structure
        self.norm_eps = norm_eps
        groups = grouping.groups(base.names)
        self.layers = list(groups) if structure == "per_task_per_layer" else ["ALL"]
        self._layer_of = {n: (layer if structure == "per_task_per_layer" else "ALL") for layer, ms in groups.items() for n in ms}
        self.base = {k: v.astype(np.float64) for k, v in base.items()}
        self.deltas = [{k: v.astype(np.float64) for k, v in tv.delta.items()} for tv in tvs]
        self.teachers = {
            t: {k: self.base[k] + d[k] for k in self.base} for t, d in zip(self.task_ids, self.deltas)
        }

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.task_ids), len(self.layers))

    def init_lambda(self) -> np.ndarray:
        return np.full(self.shape, 1.0 / len(self.task_ids))

    def _check_lambda(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape == (self.shape[0],) and self.shape[1] == 1:
            lam = lam[:, None]
        if lam.shape != self.shape:
            raise SpecError(f"lambda has shape {lam.shape}, expected {self.shape}")
        return lam

    def merged_params(self, lam) -> dict[str, np.ndarray]:
        lam = self._check_lambda(lam)
        col = {layer: j for j, layer in enumerate(self.layers)}
        out = {}
        for k, b in self.base.items():
            j = col[self._layer_of[k]]
            acc = b.copy()
            for t, d in enumerate(self.deltas):
                acc += lam[t, j] * d[k]
            out[k] = acc
        return out

    def lambda_dict(self, lam) -> dict:
        lam = self._check_lambda(lam)
        if self.structure == "per_task":
            return {t: float(lam[i, 0]) for i, t in enumerate(self.task_ids)}
        return {t: {layer: float(lam[i, j]) for j, layer in enumerate(self.layers)} for i, t in enumerate(self.task_ids)}

    def teacher_features(self, task_id: str, X: np.ndarray) -> np.ndarray:
        return forward_activations(self.teachers[task_id], X, self.encoder.n_layers)[-1]


def _cosine_rows(s: np.ndarray, t: np.ndarray):
    ns = np.linalg.norm(s, axis=1)
    nt = np.linalg.norm(t, axis=1)
    if np.any(ns == 0) or np.any(nt == 0):
        raise NumericalError("cosine dissimilarity is undefined for a zero normalized feature row")
    cos = np.einsum("ij,ij->i", s, t) / (ns * nt)
    return cos, ns, nt


def _evaluate(problem: AdaProblem, lam, batches, stats, teacher_feats=None, want_grad=True, decay=None):
    """Shared core: loss, per-task losses, gradient and the statistics that were used."""
    lam = problem._check_lambda(lam)
    missing = sorted(set(problem.task_ids) - set(batches))
    if missing:
        raise SpecError(f"no batch for tasks {missing}")
    params = problem.merged_params(lam)
    n_layers = problem.encoder.n_layers
    per_task, used, g_theta = {}, {}, None
    T = len(problem.task_ids)
    for t in problem.task_ids:
        X = np.asarray(batches[t], dtype=np.float64)
        if X.ndim != 2 or len(X) == 0:
            raise SpecError(f"batch for task {t!r} is empty or not 2-D")
        acts = forward_activations(params, X, n_layers)
        S = acts[-1]
        Tf = teacher_feats[t] if teacher_feats is not None else problem.teacher_features(t, X)
        st = (stats or {}).get(t)
        if st is None:
            st = TaskStats(FeatureStats.of(S), FeatureStats.of(Tf))
        elif decay is not None:
            st = TaskStats(st.student.update(S, decay), st.teacher.update(Tf, decay))
        used[t] = st
        s_hat, s_scale = st.student.standardize(S, problem.norm_eps)
        t_hat, _ = st.teacher.standardize(Tf, problem.norm_eps)
        cos, ns, nt = _cosine_rows(s_hat, t_hat)
        per_task[t] = math.fsum((1.0 - cos).tolist()) / len(cos)
        if want_grad:
            # d(1 - cos)/ds = -(t/(|s||t|) - cos * s/|s|^2), averaged over rows and tasks
            g_hat = -(t_hat / (ns * nt)[:, None] - (cos / ns**2)[:, None] * s_hat) / (len(cos) * T)
            g = encoder_backward(params, X, acts, g_hat * s_scale)
            if g_theta is None:
                g_theta = g
            else:
                for k in g_theta:
                    g_theta[k] += g[k]
    loss = math.fsum(per_task[t] for t in problem.task_ids) / T
    grad = None
    if want_grad:
        grad = np.zeros(problem.shape)
        col = {layer: j for j, layer in enumerate(problem.layers)}
        for k, g in g_theta.items():
            j = col[problem._layer_of[k]]
            for i, d in enumerate(problem.deltas):
                grad[i, j] += float(np.dot(g.ravel(), d[k].ravel()))
    return loss, per_task, grad, used


def batch_stats(problem: AdaProblem, lam, batches: dict) -> dict:
    """Student and teacher feature statistics of each task's batch at ``lam``."""
    params = problem.merged_params(problem._check_lambda(lam))
    out = {}
    for t in problem.task_ids:
        X = np.asarray(batches[t], dtype=np.float64)
        S = forward_activations(params, X, problem.encoder.n_layers)[-1]
        out[t] = TaskStats(FeatureStats.of(S), FeatureStats.of(problem.teacher_features(t, X)))
    return out


def tap_loss(problem: AdaProblem, lam, batches: dict, stats: dict | None = None) -> tuple[float, dict]:
    """Average over tasks of the mean cosine dissimilarity of standardized features.

    ``stats`` maps task ids to :class:`TaskStats`; tasks without an entry are
    standardized with the statistics of their own batch.
    """
    loss, per_task, _, _ = _evaluate(problem, lam, batches, stats, want_grad=False)
    return loss, per_task


def tap_loss_grad(problem: AdaProblem, lam, batches: dict, stats: dict | None = None) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient w.r.t. ``lam``; statistics are held constant."""
    loss, _, grad, _ = _evaluate(problem, lam, batches, stats)
    return loss, grad


@dataclass
class AdaTrace:
    task_ids: list[str]
    layers: list[str]
    structure: str
    total_loss: list[float] = field(default_factory=list)
    task_loss: list[dict] = field(default_factory=list)
    lambdas: dict[int, np.ndarray] = field(default_factory=dict)
    # largest absolute change of any running mean/variance at each iteration
    ema_delta: list[float] = field(default_factory=list)
    metadata: dict = field(
        default_factory=lambda: {
            "normalization": "ema_standardize_per_dimension",
            "teacher_stats": "online",
            "student_stats": "per_task",
            "dissimilarity": "cosine",
        }
    )

    def __len__(self) -> int:
        return len(self.total_loss)

    def _lambda_columns(self) -> list[str]:
        if self.structure == "per_task":
            return [f"lambda_{t}" for t in self.task_ids]
        return [f"lambda_{t}_{layer}" for t in self.task_ids for layer in self.layers]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "total_loss", *(f"loss_{t}" for t in self.task_ids), *self._lambda_columns()])
        for it, total in enumerate(self.total_loss):
            row = [it, repr(total), *(repr(self.task_loss[it][t]) for t in self.task_ids)]
            lam = self.lambdas.get(it)
            row += [repr(float(v)) for v in lam.ravel()] if lam is not None else [""] * len(self._lambda_columns())
            w.writerow(row)
        return buf.getvalue()


def sample_batches(pools: dict, batch_size: int, seed: int, iteration: int) -> dict:
    """One mini-batch per task, drawn without replacement from that task's pool."""
    out = {}
    for t in sorted(pools):
        n = len(pools[t])
        if batch_size > n:
            raise SpecError(f"batch size {batch_size} exceeds the {n} inputs of task {t!r}")
        idx = np.sort(rng(seed, "ada-batch", t, iteration).choice(n, batch_size, replace=False))
        out[t] = idx
    return out


def _stats_delta(prev: dict | None, cur: dict) -> float:
    if prev is None:
        return 0.0
    return max(
        float(np.max(np.abs(getattr(getattr(cur[t], side), f) - getattr(getattr(prev[t], side), f))))
        for t in cur
        for side in ("student", "teacher")
        for f in ("mean", "var")
    )


def optimize(
    base: WeightMap,
    tvs: list[TaskVector],
    tasks,
    config: AdaConfig = AdaConfig(),
    encoder: ToyEncoderConfig | None = None,
    grouping: LayerGrouping = DEFAULT_GROUPING,
) -> tuple[np.ndarray, AdaTrace]:
    """Adam on the coefficients, starting from ``1/T``.

    ``tasks`` maps task ids to unlabeled input pools, or is a list of toy tasks
    (their training inputs are used). Each trace row records the loss and the
    coefficients before that iteration's update. A non-finite loss raises
    :class:`NumericalError` whose ``trace`` attribute holds the rows so far.
    """
    problem = AdaProblem(base, tvs, config.lambda_structure, encoder, grouping, config.norm_eps)
    pools = tasks if isinstance(tasks, dict) else {t.task_id: t.X_train for t in tasks}
    pools = {t: np.asarray(pools[t], dtype=np.float64) for t in problem.task_ids}
    teacher_pool = {t: problem.teacher_features(t, pools[t]) for t in problem.task_ids}
    lam = problem.init_lambda()
    m = np.zeros_like(lam)
    v = np.zeros_like(lam)
    stats = None
    trace = AdaTrace(problem.task_ids, problem.layers, problem.structure)
    for it in range(config.iterations):
        idx = sample_batches(pools, config.batch_size, config.seed, it)
        batches = {t: pools[t][idx[t]] for t in problem.task_ids}
        teach = {t: teacher_pool[t][idx[t]] for t in problem.task_ids}
        prev = stats
        loss, per_task, grad, stats = _evaluate(problem, lam, batches, stats, teach, decay=config.ema_decay)
        trace.ema_delta.append(_stats_delta(prev, stats))
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            err = NumericalError(f"non-finite alignment loss at iteration {it}")
            err.trace = trace
            raise err
        trace.total_loss.append(loss)
        trace.task_loss.append(per_task)
        if it % config.trace_every == 0:
            trace.lambdas[it] = lam.copy()
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad**2
        m_hat = m / (1.0 - config.beta1 ** (it + 1))
        v_hat = v / (1.0 - config.beta2 ** (it + 1))
        lam = lam - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return lam, trace


def lambda_obj(tr: AdaTrace, lam: np.ndarray) -> dict:
    """Coefficients as ``{task: value}`` or ``{task: {layer: value}}``, the merge-spec layout."""
    lam = np.asarray(lam).reshape(len(tr.task_ids), len(tr.layers))
    if tr.structure == "per_task":
        return {t: float(lam[i, 0]) for i, t in enumerate(tr.task_ids)}
    return {t: {layer: float(lam[i, j]) for j, layer in enumerate(tr.layers)} for i, t in enumerate(tr.task_ids)}


def result_json(tr: AdaTrace, lam: np.ndarray, config: AdaConfig) -> str:
    """Final coefficients, configuration and first/last losses as JSON text."""
    obj = {
        "lambda": lambda_obj(tr, lam),
        "config": config.to_json_obj(),
        "initial_loss": tr.total_loss[0],
        "final_loss": tr.total_loss[-1],
        "iterations": len(tr),
        "metadata": tr.metadata,
    }
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
