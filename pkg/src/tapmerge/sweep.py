"""Hyperparameter sweeps scored with TAP and, optionally, with downstream evaluation."""
from __future__ import annotations

import csv
import io
import itertools
import json
import os
import shlex
import subprocess
import tempfile
import time
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ProviderError, SpecError, TapMergeError
from .merge_methods import MU_DEFAULTS, MergeSpec, canonical_method, merge
from .tap import DEFAULT_METRIC, DEFAULT_N_SAMPLES, METRICS, FeatureSet, load_features, tap_average, tap_task
from .task_vector import TaskVector
from .tensor_store import WeightMap, save_checkpoint
from .toy_bench import Bench, encode, evaluate

EVAL_MODES = ("tap_only", "tap_and_eval")
DEFAULT_MAX_CANDIDATES = 10_000


@dataclass(frozen=True)
class SweepConfig:
    method: str
    grid: dict
    metric: str = DEFAULT_METRIC
    n_samples: int = DEFAULT_N_SAMPLES
    seed: int = 0
    eval_mode: str = "tap_only"
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    # inputs for the external-provider route; unused with a toy bench
    base: str | None = None
    tasks: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        grid = {k: list(v) for k, v in self.grid.items()}
        if "lambda" not in grid:
            raise SpecError("sweep grid must contain a 'lambda' axis")
        allowed = {"lambda"} | set(MU_DEFAULTS[self.method])
        unknown = set(grid) - allowed
        if unknown:
            raise SpecError(f"grid keys {sorted(unknown)} are not hyperparameters of {self.method}")
        if any(not v for v in grid.values()):
            raise SpecError("every grid axis needs at least one value")
        object.__setattr__(self, "grid", grid)
        if self.metric not in METRICS:
            raise SpecError(f"unknown metric {self.metric!r}")
        if self.eval_mode not in EVAL_MODES:
            raise SpecError(f"unknown eval_mode {self.eval_mode!r}")
        if self.n_samples < 1:
            raise SpecError("n_samples must be >= 1")

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for v in self.grid.values()], dtype=object))

    def to_json_obj(self) -> dict:
        obj = {
            "method": self.method,
            "grid": self.grid,
            "metric": self.metric,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "eval_mode": self.eval_mode,
            "max_candidates": self.max_candidates,
        }
        if self.base is not None:
            obj.update(base=self.base, tasks=self.tasks, samples=self.samples)
        return obj

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "SweepConfig":
        known = {"method", "grid", "metric", "n_samples", "seed", "eval_mode", "max_candidates", "base", "tasks", "samples"}
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown sweep config keys {sorted(unknown)}")
        if "method" not in obj or "grid" not in obj:
            raise SpecError("sweep config needs 'method' and 'grid'")
        return cls(**obj)


def generate_grid(config: SweepConfig) -> list[MergeSpec]:
    """Cartesian product of the grid, lambda outermost, then mu keys in sorted order."""
    if config.size > config.max_candidates:
        raise SpecError(f"grid has {config.size} candidates, limit is {config.max_candidates}")
    mu_keys = sorted(k for k in config.grid if k != "lambda")
    axes = [config.grid["lambda"]] + [config.grid[k] for k in mu_keys]
    return [
        MergeSpec(config.method, combo[0], dict(zip(mu_keys, combo[1:])))
        for combo in itertools.product(*axes)
    ]


# -- feature sources ---------------------------------------------------------

class ToyBenchSource:
    """Features and downstream scores from the in-process toy encoder."""

    supports_eval = True
    higher_is_better = True

    def __init__(self, bench: Bench, n_samples: int = DEFAULT_N_SAMPLES, seed: int = 0):
        self.bench = bench
        self.config = bench.config.encoder
        self._tasks = {t.task_id: t for t in bench.tasks}
        self._samples = {t.task_id: t.tap_samples(n_samples, seed) for t in bench.tasks}

    def task_ids(self) -> list[str]:
        return list(self._tasks)

    def features(self, weights: WeightMap, task_id: str) -> FeatureSet:
        X, digest = self._samples[task_id]
        return FeatureSet(task_id, encode(weights, X, self.config), digest, "toy_encoder")

    def teacher_features(self, task_id: str) -> FeatureSet:
        return self.features(self.bench.finetuned[task_id], task_id)

    def evaluate(self, weights: WeightMap, task_id: str) -> float:
        """Retrain a probe on ``weights`` and score it (one decoder training)."""
        return evaluate(weights, self._tasks[task_id], ridge_penalty=self.bench.config.ridge_penalty, config=self.config)

    def finetuned_metric(self, task_id: str) -> float:
        return self.evaluate(self.bench.finetuned[task_id], task_id)


class ExternalProviderSource:
    """Features computed by an external executable.

    The command is invoked as ``<command...> <checkpoint_path> <samples_path> <output_path>``
    and must write an FTS1 feature file; a nonzero exit status is an error.
    """

    supports_eval = False

    def __init__(self, command, samples: Mapping[str, str], finetuned: Mapping[str, str], workdir: str | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise SpecError("empty feature provider command")
        self.samples = dict(samples)
        self.finetuned = dict(finetuned)
        missing = sorted(set(self.finetuned) - set(self.samples))
        if missing:
            raise SpecError(f"no samples file for tasks {missing}")
        self.workdir = workdir

    def task_ids(self) -> list[str]:
        return sorted(self.finetuned)

    def _run(self, ckpt_path: str, task_id: str, tmp: str) -> FeatureSet:
        out = os.path.join(tmp, f"features-{task_id}.fts")
        proc = subprocess.run(
            [*self.command, ckpt_path, self.samples[task_id], out], capture_output=True, text=True
        )
        if proc.returncode != 0:
            raise ProviderError(
                f"feature provider exited with status {proc.returncode} for task {task_id!r}: {proc.stderr.strip()[-500:]}"
            )
        try:
            return load_features(out, task_id)
        except FileNotFoundError:
            raise ProviderError(f"feature provider wrote no output for task {task_id!r}") from None

    def features(self, weights: WeightMap, task_id: str) -> FeatureSet:
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            ckpt = os.path.join(tmp, "merged.mkt")
            save_checkpoint(weights, ckpt)
            return self._run(ckpt, task_id, tmp)

    def teacher_features(self, task_id: str) -> FeatureSet:
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            return self._run(self.finetuned[task_id], task_id, tmp)


# -- report ------------------------------------------------------------------

@dataclass
class SweepRow:
    index: int
    spec: MergeSpec
    tap_average: float
    per_task_tap: dict
    eval: dict | None = None
    normalized_performance: float | None = None


@dataclass
class SweepReport:
    config: SweepConfig
    rows: list[SweepRow]
    selected_by_tap: int
    selected_by_eval: int | None
    cost: dict
    finetuned_eval: dict | None = None

    @property
    def selected_spec(self) -> MergeSpec:
        return self.rows[self.selected_by_tap].spec

    def to_json_obj(self, include_timing: bool = False) -> dict:
        cost = dict(self.cost)
        if not include_timing:
            cost.pop("wall_clock_ms", None)
        return {
            "config": self.config.to_json_obj(),
            "rows": [
                {
                    "candidate_index": r.index,
                    "spec": r.spec.to_json_obj(),
                    "tap_average": r.tap_average,
                    "per_task_tap": r.per_task_tap,
                    "eval": r.eval,
                    "normalized_performance": r.normalized_performance,
                }
                for r in self.rows
            ],
            "selected_by_tap": {"candidate_index": self.selected_by_tap, "spec": self.selected_spec.to_json_obj()},
            "selected_by_eval": None
            if self.selected_by_eval is None
            else {"candidate_index": self.selected_by_eval, "spec": self.rows[self.selected_by_eval].spec.to_json_obj()},
            "finetuned_eval": self.finetuned_eval,
            "cost": cost,
        }

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_json_obj(include_timing), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        mu_keys = sorted(k for k in self.config.grid if k != "lambda")
        tasks = sorted(self.rows[0].per_task_tap) if self.rows else []
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["candidate_index", "lambda", *mu_keys, "tap_average", *(f"tap_{t}" for t in tasks)]
        if self.selected_by_eval is not None:
            header += [f"eval_{t}" for t in tasks] + ["normalized_performance"]
        w.writerow(header)
        for r in self.rows:
            line = [r.index, r.spec.lam, *(r.spec.mu[k] for k in mu_keys), repr(r.tap_average)]
            line += [repr(r.per_task_tap[t]) for t in tasks]
            if self.selected_by_eval is not None:
                line += [repr(r.eval[t]) for t in tasks] + [repr(r.normalized_performance)]
            w.writerow(line)
        return buf.getvalue()


def normalized_performance(merged: Mapping[str, float], finetuned: Mapping[str, float], higher_is_better: bool = True) -> float:
    """Mean over tasks of merged/finetuned (finetuned/merged when lower is better)."""
    ratios = [
        merged[t] / finetuned[t] if higher_is_better else finetuned[t] / merged[t] for t in sorted(finetuned)
    ]
    return float(np.mean(ratios))


def _argmax_first(values) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def run_sweep(
    base: WeightMap, tvs: list[TaskVector], config: SweepConfig, source, jobs: int = 1
) -> SweepReport:
    """Score every grid candidate with TAP (and optionally downstream evaluation).

    Teacher features are computed once; each candidate then needs one forward
    pass per TAP sample and task. Rows keep candidate order whatever ``jobs`` is.
    """
    start = time.perf_counter()
    specs = generate_grid(config)
    task_ids = [tv.task_id for tv in tvs]
    if sorted(task_ids) != sorted(source.task_ids()):
        raise SpecError(f"task vectors {sorted(task_ids)} do not match feature source tasks {sorted(source.task_ids())}")
    do_eval = config.eval_mode == "tap_and_eval"
    if do_eval and not getattr(source, "supports_eval", False):
        raise SpecError("evaluation requested but the feature source has no trainable benchmark")

    teachers = {t: source.teacher_features(t) for t in task_ids}
    for t, fs in teachers.items():
        if fs.n != config.n_samples:
            raise SpecError(f"task {t!r} has {fs.n} TAP samples, config asks for {config.n_samples}")
    forward = sum(fs.n for fs in teachers.values())
    trainings = 0
    finetuned_eval = None
    if do_eval:
        finetuned_eval = {t: source.finetuned_metric(t) for t in task_ids}
        trainings += len(task_ids)

    def score(item):
        idx, spec = item
        try:
            weights = merge(base, tvs, spec).weights
            feats = {t: source.features(weights, t) for t in task_ids}
            per_task = {t: tap_task(feats[t], teachers[t], config.metric) for t in sorted(task_ids)}
            row = SweepRow(idx, spec, tap_average(per_task), per_task)
            n_fwd, n_train = sum(f.n for f in feats.values()), 0
            if do_eval:
                row.eval = {t: source.evaluate(weights, t) for t in sorted(task_ids)}
                row.normalized_performance = normalized_performance(
                    row.eval, finetuned_eval, getattr(source, "higher_is_better", True)
                )
                n_train = len(task_ids)
        except TapMergeError as exc:
            raise type(exc)(f"candidate {idx}: {exc}") from exc
        return row, n_fwd, n_train

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score, enumerate(specs)))
    else:
        results = [score(item) for item in enumerate(specs)]

    rows = [r for r, _, _ in results]
    forward += sum(n for _, n, _ in results)
    trainings += sum(n for _, _, n in results)
    sel_tap = min(range(len(rows)), key=lambda i: (rows[i].tap_average, i))
    sel_eval = _argmax_first([r.normalized_performance for r in rows]) if do_eval else None
    cost = {
        "encoder_forward_passes": forward,
        "decoder_trainings": trainings,
        "wall_clock_ms": int(round((time.perf_counter() - start) * 1000)),
    }
    return SweepReport(config, rows, sel_tap, sel_eval, cost, finetuned_eval)
