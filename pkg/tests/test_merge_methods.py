import itertools
import json

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from tapmerge.errors import SchemaMismatchError, SpecError
from tapmerge.merge_methods import (
    METHODS,
    MergeSpec,
    breadcrumbs_tensor,
    lambda_lines,
    lambda_normavg,
    merge,
    star_matrix,
    transform_breadcrumbs,
    transform_consensus,
    transform_star,
    transform_ties,
    transform_tsv,
    tsv_components,
)
from tapmerge.task_vector import TaskVector, layer_norms
from tapmerge.tensor_store import WeightMap

from conftest import tv, wm

# dyadic values keep every sum exact, and repeats exercise tie-breaking
dyadic = st.sampled_from([-3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0])
small_shapes = st.sampled_from([(1,), (2,), (3,), (4,), (5,), (6,), (7,), (8,), (2, 2), (2, 3), (3, 2), (2, 4), (4, 2)])
fractions = st.sampled_from([0.1, 0.125, 0.2, 0.25, 1 / 3, 0.4, 0.5, 0.6, 2 / 3, 0.75, 0.9, 1.0])


@st.composite
def task_tensors(draw, min_tasks=1, max_tasks=4):
    shape = draw(small_shapes)
    T = draw(st.integers(min_tasks, max_tasks))
    return [draw(hnp.arrays(np.float32, shape, elements=dyadic)) for _ in range(T)]


# -- spec ---------------------------------------------------------------------

def test_spec_normalization_and_json():
    s = MergeSpec("ties", 0.5, {"keep_fraction": 0.3})
    assert s.method == "TIES" and s.structure == "scalar"
    obj = json.loads(s.to_json())
    assert obj == {"method": "TIES", "lambda": 0.5, "mu": {"keep_fraction": 0.3}}
    assert MergeSpec.from_json(s.to_json()) == s
    assert MergeSpec("TA", {"a": 1, "b": 2}).structure == "per_task"
    assert MergeSpec("TA", {"a": {"l0": 1}}).structure == "per_task_per_layer"


@pytest.mark.parametrize(
    "method, lam, mu",
    [
        ("nope", 1.0, {}),
        ("TA", 1.0, {"keep_fraction": 0.1}),
        ("TIES", 1.0, {"keep_fraction": 0.0}),
        ("TIES", 1.0, {"keep_fraction": 1.5}),
        ("Breadcrumbs", 1.0, {"top_cut": 0.5, "bottom_cut": 0.5}),
        ("Consensus", 1.0, {"agreement": 1}),
        ("Lines", 1.0, {"lambda_min": 1.0, "lambda_max": 0.0}),
        ("STAR", 1.0, {"energy_fraction": 0.0}),
        ("TSV", 1.0, {"rank_policy": "full"}),
        ("TA", float("nan"), {}),
        ("TA", {}, {}),
    ],
)
def test_spec_rejects_invalid(method, lam, mu):
    with pytest.raises(SpecError):
        MergeSpec(method, lam, mu)


# -- merge ----------------------------------------------------------------------

BASE = wm(**{"l0.weight": [[1, 2], [3, 4]], "l0.bias": [0.5, -0.5], "l1.weight": [[1, -1]], "l1.bias": [2]})


def _tvs():
    rng = np.random.default_rng(0)
    return [
        TaskVector(t, WeightMap({k: rng.standard_normal(v.shape) for k, v in BASE.items()})) for t in ("a", "b", "c")
    ]


@pytest.mark.parametrize("method", METHODS)
def test_zero_lambda_returns_base(method):
    assert merge(BASE, _tvs(), MergeSpec(method, 0.0)).weights == BASE


def test_avg_example_and_equivalence():
    out = merge(wm(w=[0, 0]), [tv("a", w=[2, 0]), tv("b", w=[0, 4])], MergeSpec("Avg")).weights
    assert out["w"].tolist() == [1.0, 2.0]
    tvs = _tvs()
    avg = merge(BASE, tvs, MergeSpec("Avg")).weights
    ta = merge(BASE, tvs, MergeSpec("TA", {t.task_id: 1 / 3 for t in tvs})).weights
    for k in BASE:
        np.testing.assert_allclose(avg[k], ta[k], rtol=1e-6)


def test_single_task_identity():
    ft = WeightMap({k: v + 0.25 for k, v in BASE.items()})
    t = TaskVector("a", WeightMap({k: ft[k] - BASE[k] for k in BASE}))
    out = merge(BASE, [t], MergeSpec("TA", 1.0)).weights
    for k in BASE:
        np.testing.assert_allclose(out[k], ft[k], rtol=1e-6)


def test_merge_schema_mismatch():
    with pytest.raises(SchemaMismatchError):
        merge(BASE, [tv("a", w=[1.0])], MergeSpec("TA"))


def test_lambda_tasks_must_match():
    with pytest.raises(SpecError):
        merge(BASE, _tvs(), MergeSpec("TA", {"a": 1.0}))
    with pytest.raises(SpecError):
        merge(BASE, _tvs(), MergeSpec("TA", {t: {"l0": 1.0} for t in "abc"}))


def test_per_layer_lambda():
    tvs = _tvs()
    lam = {t.task_id: {"l0": 0.5, "l1": 2.0} for t in tvs}
    out = merge(BASE, tvs, MergeSpec("TA", lam)).weights
    for k in BASE:
        c = 0.5 if k.startswith("l0") else 2.0
        expect = BASE[k].astype(np.float64) + sum(c * t.delta[k].astype(np.float64) for t in tvs)
        np.testing.assert_allclose(out[k], expect.astype(np.float32), rtol=1e-6)


@pytest.mark.parametrize("method", ["TA", "TIES", "Breadcrumbs", "Consensus", "Lines", "STAR", "TSV", "NormAvg", "Avg"])
@given(a=st.floats(-2, 2), b=st.floats(-2, 2))
def test_affine_in_lambda(method, a, b):
    tvs = _tvs()
    l1 = {t.task_id: v for t, v in zip(tvs, (0.3, -0.7, 1.1))}
    l2 = {t.task_id: v for t, v in zip(tvs, (0.9, 0.2, -0.4))}
    mix = {t: a * l1[t] + b * l2[t] for t in l1}
    m = lambda lam: merge(BASE, tvs, MergeSpec(method, lam)).weights  # noqa: E731
    m1, m2, mm = m(l1), m(l2), m(mix)
    for k in BASE:
        b0 = BASE[k].astype(np.float64)
        expect = b0 + a * (m1[k] - b0) + b * (m2[k] - b0)
        scale = np.abs(m1[k] - b0).max() + np.abs(m2[k] - b0).max() + np.abs(b0).max()
        np.testing.assert_allclose(mm[k], expect, atol=1e-5 * scale * (1 + abs(a) + abs(b)))


@pytest.mark.parametrize("method", METHODS)
def test_merge_is_bitwise_deterministic(method):
    tvs = _tvs()
    a = merge(BASE, tvs, MergeSpec(method, 0.4)).weights
    b = merge(BASE, tvs, MergeSpec(method, 0.4)).weights
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


# -- TIES -----------------------------------------------------------------------

def test_ties_examples():
    out = transform_ties([tv("a", w=[2, -1]), tv("b", w=[1.5, 2])], 1.0)
    assert out[0].delta["w"].tolist() == [2.0, 0.0]
    assert out[1].delta["w"].tolist() == [1.5, 2.0]
    single = tv("a", w=[1, -2, 3])
    assert transform_ties([single], 1.0)[0].delta == single.delta
    out = transform_ties([tv("a", w=[1, 2, 3, 4]), tv("b", w=[4, 3, 2, 1])], 0.5)
    assert [int(np.count_nonzero(o.delta["w"])) for o in out] == [2, 2]


@given(task_tensors(), fractions)
def test_ties_matches_oracle(tensors, k):
    tvs = [tv(f"t{i}", w=x) for i, x in enumerate(tensors)]
    got = [o.delta["w"] for o in transform_ties(tvs, k)]
    for g, e in zip(got, oracles.ties(tensors, k)):
        assert np.array_equal(g, e)


# -- Breadcrumbs ------------------------------------------------------------------

def test_breadcrumbs_examples():
    assert breadcrumbs_tensor(np.array([1, 2, 3, 4], np.float32), 0.25, 0.25).tolist() == [0, 2, 3, 0]
    assert breadcrumbs_tensor(np.array([5, 5, 5, 5], np.float32), 0.25, 0.0).tolist() == [0, 5, 5, 5]
    x = tv("a", w=[3, -1, 2])
    assert transform_breadcrumbs(x, 0.0, 0.0).delta == x.delta
    with pytest.raises(SpecError):
        transform_breadcrumbs(x, 0.6, 0.4)


def test_breadcrumbs_exhaustive_small():
    cuts = [(0.0, 0.0), (0.25, 0.25), (0.2, 0.5), (1 / 3, 1 / 3), (0.0, 0.9), (0.5, 0.0), (0.1, 0.1)]
    for d in range(1, 6):
        for values in itertools.product([0.0, 1.0, -2.0], repeat=d):
            x = np.array(values, np.float32)
            for top, bottom in cuts:
                assert np.array_equal(breadcrumbs_tensor(x, top, bottom), oracles.breadcrumbs(x, top, bottom))


@given(task_tensors(max_tasks=1), fractions, fractions)
def test_breadcrumbs_matches_oracle_and_count(tensors, top, bottom):
    if top + bottom >= 1:
        return
    x = tensors[0]
    got = breadcrumbs_tensor(x, top, bottom)
    assert np.array_equal(got, oracles.breadcrumbs(x, top, bottom))
    band = np.flatnonzero(got != 0)
    assert np.all(got.ravel()[band] == x.ravel()[band])
    # with no zeros in the input, the kept band has exactly ceil((1 - top - bottom) * d) entries
    keep = int(np.ceil(float(oracles.frac(1 - top - bottom) * x.size)))
    dense = np.where(x == 0, np.float32(0.25), x)
    assert np.count_nonzero(breadcrumbs_tensor(dense, top, bottom)) == keep


# -- Consensus --------------------------------------------------------------------

def test_consensus_examples():
    mask, pruned = transform_consensus([tv("a", w=[9, 1, 5]), tv("b", w=[8, 6, 0.1])], 2 / 3, 2)
    assert mask["w"].tolist() == [1, 0, 0]
    assert pruned[0].delta["w"].tolist() == [9, 0, 0]
    mask, _ = transform_consensus([tv("a", w=[3, 1, 2]), tv("b", w=[3, 1, 2])], 1 / 3, 2)
    assert mask["w"].tolist() == [1, 0, 0]
    mask, pruned = transform_consensus([tv("a", w=[3, 0]), tv("b", w=[0, 3])], 0.5, 2)
    assert not mask["w"].any() and not any(p.delta["w"].any() for p in pruned)
    with pytest.raises(SpecError):
        transform_consensus([tv("a", w=[1.0])], 0.5, 2)


@given(task_tensors(min_tasks=2), fractions, st.integers(2, 4))
def test_consensus_matches_oracle(tensors, k, agreement):
    if agreement > len(tensors):
        return
    tvs = [tv(f"t{i}", w=x) for i, x in enumerate(tensors)]
    mask, pruned = transform_consensus(tvs, k, agreement)
    expect = oracles.consensus_mask(tensors, k, agreement)
    assert np.array_equal(mask["w"], expect)
    for p, x in zip(pruned, tensors):
        assert np.array_equal(p.delta["w"], np.where(expect == 1, x, 0).astype(np.float32))


# -- Lines / NormAvg ----------------------------------------------------------------

def test_lines_schedule():
    assert lambda_lines(["a", "b", "c"], 0.1, 0.5) == pytest.approx({"a": 0.1, "b": 0.3, "c": 0.5})
    assert lambda_lines(["a"], 0.2, 0.9) == {"a": 0.2}
    assert set(lambda_lines(["a", "b"], 0.4, 0.4).values()) == {0.4}
    with pytest.raises(SpecError):
        lambda_lines([], 0, 1)
    tvs = _tvs()
    lines = merge(BASE, tvs, MergeSpec("Lines", 1.0, {"lambda_min": 0.4, "lambda_max": 0.4})).weights
    ta = merge(BASE, tvs, MergeSpec("TA", 0.4)).weights
    assert lines == ta


def test_normavg_examples():
    lam = lambda_normavg([tv("a", **{"l.w": [2, 0]}), tv("b", **{"l.w": [0, 4]})])
    assert lam == {"a": {"l": 1.0}, "b": {"l": 0.5}}
    lam = lambda_normavg([tv("a", **{"l.w": [1, 0]}), tv("b", **{"l.w": [0, -1]})])
    assert lam == {"a": {"l": 1.0}, "b": {"l": 1.0}}
    assert lambda_normavg([tv("a", **{"l.w": [3, 4]})]) == {"a": {"l": 1.0}}


@given(st.lists(hnp.arrays(np.float32, 6, elements=st.floats(0.125, 10, width=32)), min_size=1, max_size=4))
def test_normavg_equalizes_norms(xs):
    tvs = [tv(f"t{i}", **{"l0.w": x[:4], "l1.w": x[4:]}) for i, x in enumerate(xs)]
    lam = lambda_normavg(tvs)
    mins = {l: min(layer_norms(t.delta)[l] for t in tvs) for l in ("l0", "l1")}
    for t in tvs:
        for l, n in layer_norms(t.delta).items():
            assert lam[t.task_id][l] * n == pytest.approx(mins[l], rel=1e-6)


# -- STAR ------------------------------------------------------------------------

def test_star_examples():
    out = star_matrix(np.diag([4.0, 3.0]).astype(np.float32), 0.6)
    np.testing.assert_allclose(out, np.diag([5.0, 0.0]), atol=1e-6)
    assert np.linalg.norm(out) == pytest.approx(5.0)
    rank1 = np.outer([1, 2, 3], [0.5, -1]).astype(np.float32)
    np.testing.assert_allclose(star_matrix(rank1, 0.3), rank1, atol=1e-5)
    t = tv("a", w=[1, 2, 3], m=[[1, 2], [3, 4]])
    assert np.array_equal(transform_star(t, 0.5).delta["w"], t.delta["w"])


@given(hnp.arrays(np.float32, st.sampled_from([(2, 2), (3, 4), (5, 3), (6, 6)]), elements=st.floats(-5, 5, width=32)),
       st.floats(0.05, 1.0))
def test_star_energy_and_full_reconstruction(m, eta):
    if np.linalg.norm(m) < 1e-3:
        return
    s_in = np.linalg.svd(m.astype(np.float64), compute_uv=False)
    out = star_matrix(m, eta).astype(np.float64)
    s_out = np.linalg.svd(out, compute_uv=False)
    assert np.sum(s_out**2) == pytest.approx(np.sum(s_in**2), rel=1e-6)
    full = star_matrix(m, 1.0).astype(np.float64)
    assert np.linalg.norm(full - m) <= 1e-5 * np.linalg.norm(m)


# -- TSV ------------------------------------------------------------------------

def test_tsv_single_task_and_orthonormal():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((5, 4)).astype(np.float32)
    merged = transform_tsv([tv("a", w=m)])
    assert np.linalg.norm(merged["w"] - m) <= 1e-5 * np.linalg.norm(m)
    mats = [rng.standard_normal((6, 5)) for _ in range(3)]
    _, u, v = tsv_components(mats)
    np.testing.assert_allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-5)
    np.testing.assert_allclose(v.T @ v, np.eye(v.shape[1]), atol=1e-5)


def test_tsv_orthogonal_blocks_sum():
    a = np.zeros((4, 4), np.float32)
    b = np.zeros((4, 4), np.float32)
    a[:2, :2] = [[3, 1], [0, 2]]
    b[2:, 2:] = [[1, 0], [2, 5]]
    merged = transform_tsv([tv("a", w=a), tv("b", w=b)])["w"]
    assert np.linalg.norm(merged - (a + b)) <= 1e-5 * np.linalg.norm(a + b)


@given(st.integers(0, 10_000), st.integers(2, 3), st.sampled_from([(6, 6), (8, 5), (4, 9)]))
def test_tsv_matches_eigh_polar_oracle(seed, T, shape):
    rng = np.random.default_rng(seed)
    mats = [rng.standard_normal(shape).astype(np.float32) for _ in range(T)]
    got = transform_tsv([tv(f"t{i}", w=m) for i, m in enumerate(mats)])["w"]
    expect, cond = oracles.tsv_merged(mats, with_cond=True)
    assume(cond < 100)
    assert np.linalg.norm(got - expect) <= 1e-5 * np.linalg.norm(expect)


def test_tsv_vectors_fall_back_to_sum():
    out = transform_tsv([tv("a", b=[1, 2]), tv("b", b=[3, -1])])
    assert out["b"].tolist() == [4.0, 1.0]
