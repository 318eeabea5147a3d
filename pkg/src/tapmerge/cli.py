"""Command-line entry point: ``python -m tapmerge <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .ada_tap import AdaConfig, lambda_obj, optimize, result_json
from .errors import FormatError, NumericalError, SpecError, TapMergeError
from .merge_methods import MergeSpec, merge
from .tap import METRICS, load_features, tap_report
from .task_vector import compute_task_vector, cosine_analysis, norms
from .tensor_store import atomic_write_bytes, load_checkpoint, save_checkpoint
from .sweep import ExternalProviderSource, SweepConfig, ToyBenchSource, run_sweep
from .toy_bench import BenchConfig, build_bench, load_bench, save_bench


class UsageError(Exception):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pair(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep or not name or not value:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    return name, value


def _pairs(items, flag: str) -> dict[str, str]:
    out = {}
    for name, value in items or []:
        if name in out:
            raise UsageError(f"{flag} given twice for {name!r}")
        out[name] = value
    return out


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _load_tasks(base, pairs: dict[str, str]):
    return [compute_task_vector(base, load_checkpoint(p), name) for name, p in pairs.items()]


# -- subcommands ---------------------------------------------------------------

def cmd_merge(args) -> None:
    base = load_checkpoint(args.base)
    tvs = _load_tasks(base, _pairs(args.task, "--task"))
    mu = {k: _json_value(v) for k, v in _pairs(args.mu, "--mu").items()}
    spec = MergeSpec(args.method, _json_value(args.lam), mu)
    save_checkpoint(merge(base, tvs, spec).weights, args.out)


def cmd_sweep(args) -> None:
    with open(args.config, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed sweep config: {exc}") from None
    if args.seed is not None:
        obj["seed"] = args.seed
    config = SweepConfig.from_json_obj(obj)
    os.makedirs(args.out, exist_ok=True)
    if args.bench_manifest:
        bench = load_bench(args.bench_manifest)
        base, tvs = bench.base, bench.task_vectors
        source = ToyBenchSource(bench, config.n_samples, config.seed)
    else:
        if config.base is None or not config.tasks:
            raise SpecError("the feature-provider route needs 'base', 'tasks' and 'samples' in the sweep config")
        root = os.path.dirname(os.path.abspath(args.config))
        at = lambda p: os.path.join(root, p)  # noqa: E731
        base = load_checkpoint(at(config.base))
        tasks = {t: at(p) for t, p in sorted(config.tasks.items())}
        tvs = _load_tasks(base, tasks)
        source = ExternalProviderSource(
            args.feature_provider, {t: at(p) for t, p in config.samples.items()}, tasks, workdir=args.out
        )
    report = run_sweep(base, tvs, config, source, jobs=args.jobs)
    _write_text(os.path.join(args.out, "report.json"), report.to_json(include_timing=args.record_timing))
    _write_text(os.path.join(args.out, "report.csv"), report.to_csv())


def cmd_tap(args) -> None:
    teacher_paths = _pairs(args.teacher_features, "--teacher-features")
    merged_paths = {}
    for item in args.merged_features:
        name, sep, path = item.partition("=")
        if sep:
            merged_paths[name] = path
        elif len(teacher_paths) == 1:
            merged_paths[next(iter(teacher_paths))] = item
        else:
            raise UsageError("--merged-features needs name=path when several teachers are given")
    teachers = {t: load_features(p, t) for t, p in teacher_paths.items()}
    merged = {t: load_features(p, t) for t, p in merged_paths.items()}
    _write_text(args.out, tap_report(merged, teachers, args.metric).to_json())


def cmd_analyze(args) -> None:
    base = load_checkpoint(args.base)
    tvs = _load_tasks(base, _pairs(args.task, "--task"))
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "norms.csv"), norms(tvs, args.scope).to_csv())
    if len(tvs) >= 2:
        _write_text(os.path.join(args.out, "cosine.csv"), cosine_analysis(tvs).to_csv())


def cmd_bench(args) -> None:
    bench = build_bench(BenchConfig(seed=args.seed, n_tasks=args.tasks))
    save_bench(bench, args.out_dir)


def cmd_adamerge(args) -> None:
    bench = load_bench(args.bench_manifest)
    config = AdaConfig(
        lambda_structure=args.structure,
        lr=args.lr,
        batch_size=args.batch,
        iterations=args.iterations,
        seed=args.seed,
    )
    lam, trace = optimize(bench.base, bench.task_vectors, bench.tasks, config, bench.config.encoder)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "trace.csv"), trace.to_csv())
    _write_text(os.path.join(args.out, "result.json"), result_json(trace, lam, config))
    merged = merge(bench.base, bench.task_vectors, MergeSpec("TA", lambda_obj(trace, lam)))
    save_checkpoint(merged.weights, os.path.join(args.out, "merged.mkt"))


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")

    parser = _Parser(prog="tapmerge", description=__doc__.splitlines()[0], allow_abbrev=False, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("merge", cmd_merge, "merge fine-tuned checkpoints into one")
    p.add_argument("--base", required=True, help="base checkpoint (MKT1)")
    p.add_argument("--task", type=_pair, action="append", required=True, metavar="NAME=PATH", help="fine-tuned checkpoint")
    p.add_argument("--method", required=True, help="Avg, TA, TIES, Breadcrumbs, Consensus, Lines, STAR, TSV or NormAvg")
    p.add_argument("--lambda", dest="lam", default="1.0", help="scalar, or JSON object per task / per task and layer")
    p.add_argument("--mu", type=_pair, action="append", metavar="KEY=VALUE", help="transform hyperparameter")
    p.add_argument("--out", required=True, help="output checkpoint path")

    p = add("sweep", cmd_sweep, "score a hyperparameter grid with TAP")
    p.add_argument("--config", required=True, help="sweep config JSON")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bench-manifest", help="toy bench manifest.json")
    src.add_argument("--feature-provider", help="command run as CMD CHECKPOINT SAMPLES OUTPUT")
    p.add_argument("--out", required=True, help="output directory for report.json and report.csv")
    p.add_argument("--jobs", type=int, default=1, help="parallel candidate workers (default 1)")
    p.add_argument("--seed", type=int, default=None, help="override the config's sampling seed")
    p.add_argument("--record-timing", action="store_true", help="include wall_clock_ms in report.json")

    p = add("tap", cmd_tap, "TAP score of merged features against teacher features")
    p.add_argument("--merged-features", action="append", required=True, metavar="[NAME=]PATH", help="merged-model features (FTS1)")
    p.add_argument("--teacher-features", type=_pair, action="append", required=True, metavar="NAME=PATH", help="fine-tuned features (FTS1)")
    p.add_argument("--metric", choices=METRICS, default="l2")
    p.add_argument("--out", required=True, help="output JSON path")

    p = add("analyze", cmd_analyze, "task-vector norms and cosine similarities")
    p.add_argument("--base", required=True, help="base checkpoint (MKT1)")
    p.add_argument("--task", type=_pair, action="append", required=True, metavar="NAME=PATH", help="fine-tuned checkpoint")
    p.add_argument("--scope", choices=("global", "per-layer"), default="global")
    p.add_argument("--out", required=True, help="output directory for norms.csv and cosine.csv")

    p = add("bench", cmd_bench, "build the toy benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", type=int, default=3, help="number of tasks")
    p.add_argument("--out-dir", required=True)

    p = add("adamerge", cmd_adamerge, "learn merging coefficients by minimizing the alignment loss")
    p.add_argument("--bench-manifest", required=True, help="toy bench manifest.json")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--structure", choices=("per_task", "per_task_per_layer"), default="per_task")
    p.add_argument("--seed", type=int, default=0, help="mini-batch sampling seed")
    p.add_argument("--out", required=True, help="output directory for trace.csv, result.json and merged.mkt")
    return parser


def _report(exc: BaseException, code: int, as_json: bool) -> None:
    if as_json:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        _report(exc, 1, as_json)
        return 1
    except NumericalError as exc:
        _report(exc, 3, as_json)
        return 3
    except (TapMergeError, OSError, json.JSONDecodeError, np.linalg.LinAlgError) as exc:
        code = 3 if isinstance(exc, np.linalg.LinAlgError) else getattr(exc, "exit_code", 2)
        _report(exc, code, as_json)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
