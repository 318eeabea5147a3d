# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Choosing merge coefficients without labels
#
# The usual way to choose the merge coefficient is to train a decoder on each task
# for every candidate and keep the best one. The task alignment proxy (TAP) skips
# that: it measures how far the merged encoder's features sit from each fine-tuned
# encoder's features on a handful of unlabeled inputs, and the candidate with the
# smallest distance wins.
#
# The toy bench has three regression tasks on a small tanh encoder, so both routes
# are cheap and can be compared directly.

# %%
from tapmerge.sweep import SweepConfig, ToyBenchSource, run_sweep
from tapmerge.toy_bench import BenchConfig, build_bench

bench = build_bench(BenchConfig(seed=7))
print("tasks:", bench.task_ids)

# %% [markdown]
# ## One sweep, both selection rules
#
# `tap_and_eval` scores every candidate with TAP and also retrains a ridge probe
# per task, giving normalized performance (merged R² over fine-tuned R²).

# %%
grid = [round(0.1 * i, 1) for i in range(11)]
config = SweepConfig("TA", {"lambda": grid}, seed=7, eval_mode="tap_and_eval")
report = run_sweep(bench.base, bench.task_vectors, config, ToyBenchSource(bench, config.n_samples, 7))

print(f"{'lambda':>6} {'TAP':>8} {'norm. perf':>10}")
for row in report.rows:
    print(f"{row.spec.lam:6.1f} {row.tap_average:8.4f} {row.normalized_performance:10.4f}")
print("picked by TAP: ", grid[report.selected_by_tap])
print("picked by eval:", grid[report.selected_by_eval])

# %% [markdown]
# ## What it cost
#
# TAP needs forward passes only. The teacher features are computed once per task
# and reused for every candidate.

# %%
print(report.cost)

# %% [markdown]
# ## How many samples are enough?
#
# The selected coefficient barely depends on the number of unlabeled samples or on
# the distance used.

# %%
for metric in ("l1", "l2", "cosine"):
    for n in (16, 32, 64, 128):
        cfg = SweepConfig("TA", {"lambda": grid}, metric=metric, n_samples=n, seed=7)
        rep = run_sweep(bench.base, bench.task_vectors, cfg, ToyBenchSource(bench, n, 7))
        print(f"{metric:>6} N={n:<3} -> lambda {grid[rep.selected_by_tap]}")

# %% [markdown]
# ## Transform hyperparameters too
#
# The same sweep works on a joint grid, here TIES with its keep fraction.

# %%
cfg = SweepConfig("TIES", {"lambda": [0.6, 0.8, 1.0], "keep_fraction": [0.2, 0.5, 1.0]}, seed=7)
rep = run_sweep(bench.base, bench.task_vectors, cfg, ToyBenchSource(bench, cfg.n_samples, 7))
best = rep.rows[rep.selected_by_tap]
print("TIES choice:", best.spec.lam, best.spec.mu, round(best.tap_average, 4))
