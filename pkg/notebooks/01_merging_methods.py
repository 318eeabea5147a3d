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
# # Merging fine-tuned checkpoints
#
# A task vector is the difference between a fine-tuned checkpoint and the base it
# started from. Every merge method here adds a (possibly transformed) weighted sum
# of task vectors back onto the base. This notebook builds a few tiny hand-made
# checkpoints and shows what each method does to them.

# %%
import numpy as np

from tapmerge import MergeSpec, TaskVector, WeightMap, cosine_analysis, merge, norms
from tapmerge.merge_methods import lambda_normavg, transform_ties

rng = np.random.default_rng(0)
shapes = {"layer0.weight": (4, 3), "layer0.bias": (4,), "layer1.weight": (2, 4), "layer1.bias": (2,)}
base = WeightMap({k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()})
tvs = [
    TaskVector(f"task{i}", WeightMap({k: (0.1 * (i + 1) * rng.standard_normal(s)).astype(np.float32) for k, s in shapes.items()}))
    for i in range(3)
]

# %% [markdown]
# ## How different are the task vectors?
#
# Norms per layer and pairwise cosine similarity are cheap diagnostics. Vectors
# that are nearly orthogonal interfere little when summed.

# %%
print(norms(tvs, "per-layer").to_csv())
print(cosine_analysis(tvs).to_csv())

# %% [markdown]
# ## Coefficients
#
# With `lambda = 0` every method returns the base unchanged. Avg is Task
# Arithmetic with every coefficient equal to `1/T`.

# %%
for method in ("Avg", "TA", "TSV", "NormAvg"):
    merged = merge(base, tvs, MergeSpec(method, 0.0)).weights
    print(method, "lambda=0 gives base:", merged == base)

avg = merge(base, tvs, MergeSpec("Avg", 1.0)).weights
ta = merge(base, tvs, MergeSpec("TA", 1 / 3)).weights
print("Avg vs TA(1/3), max abs diff:", max(float(np.max(np.abs(avg[k] - ta[k]))) for k in base))

# %% [markdown]
# ## Sparsifying transforms
#
# TIES keeps the largest-magnitude entries of each task vector, elects a sign per
# coordinate from the sum of what was kept, and drops entries that disagree with it.

# %%
pruned = transform_ties(tvs, keep_fraction=0.3)
for tv in pruned:
    nz = sum(int(np.count_nonzero(a)) for a in tv.delta.values())
    total = sum(a.size for a in tv.delta.values())
    print(f"{tv.task_id}: {nz}/{total} entries survive")

# %% [markdown]
# NormAvg rescales each task vector, layer by layer, down to the smallest norm
# among the tasks for that layer.

# %%
for task, per_layer in lambda_normavg(tvs).items():
    print(task, {k: round(v, 3) for k, v in per_layer.items()})
