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
# # Learning the coefficients by gradient descent
#
# Instead of a grid, the coefficients can be optimized directly. The loss is the
# alignment between merged and fine-tuned features after standardizing each
# feature dimension with running statistics. The gradient is exact: the merge is
# linear in the coefficients and the toy encoder is differentiable.

# %%
import numpy as np

from tapmerge.ada_tap import AdaConfig, AdaProblem, batch_stats, optimize, tap_loss, tap_loss_grad
from tapmerge.toy_bench import BenchConfig, build_bench

bench = build_bench(BenchConfig(seed=7))
problem = AdaProblem(bench.base, bench.task_vectors)
pools = {t.task_id: t.X_train for t in bench.tasks}

# %% [markdown]
# ## Gradient check
#
# Central differences against the analytic gradient at a random point. The
# standardization statistics are held fixed, exactly as inside one optimizer step.

# %%
lam = np.array([[0.2], [0.5], [0.4]])
stats = batch_stats(problem, problem.init_lambda(), pools)
loss, grad = tap_loss_grad(problem, lam, pools, stats)
h = 1e-5
fd = np.array([
    [(tap_loss(problem, lam + h * np.eye(3)[:, [i]], pools, stats)[0] - tap_loss(problem, lam - h * np.eye(3)[:, [i]], pools, stats)[0]) / (2 * h)]
    for i in range(3)
])
print("analytic:", grad.ravel())
print("finite differences:", fd.ravel())

# %% [markdown]
# ## Optimize
#
# Adam from `1/T`, mini-batches of 16 inputs per task. The per-step loss is noisy
# because each step sees a different batch, so the full-pool loss before and after
# is the clearer summary.

# %%
lam_final, trace = optimize(bench.base, bench.task_vectors, bench.tasks, AdaConfig(iterations=500))
print("final coefficients:", lam_final.ravel())
print("full-pool loss at 1/T:  ", tap_loss(problem, problem.init_lambda(), pools)[0])
print("full-pool loss at final:", tap_loss(problem, lam_final, pools)[0])
window = 50
smooth = np.convolve(trace.total_loss, np.ones(window) / window, mode="valid")
print("smoothed trace, every 100 steps:", np.round(smooth[::100], 4))

# %% [markdown]
# ## Per-layer coefficients
#
# One coefficient per task and per layer gives the optimizer more room.

# %%
lam_pl, trace_pl = optimize(
    bench.base, bench.task_vectors, bench.tasks, AdaConfig(lambda_structure="per_task_per_layer", iterations=300)
)
print(trace_pl.layers)
print(np.round(lam_pl, 4))
