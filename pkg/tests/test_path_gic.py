import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structured_gic.errors import DegenerateData, PsiBudgetExceeded
from structured_gic.experiments import GroupGlmDesign, gen_group_glm, gen_lowrank, LowRankDesign
from structured_gic.losses import LossProblem, tabular
from structured_gic.model_space import (
    GroupL2,
    GroupPartition,
    GroupSupport,
    LowRank,
    Nuclear,
    same_subspace,
    signed_svd,
)
from structured_gic.path_gic import (
    PenaltySchedule,
    a_n,
    all_group_supports,
    best_group_support,
    default_psi_budget,
    extract_model,
    gic,
    lambda_grid,
    schedule_for,
    select_exhaustive,
    select_on_path,
    xi_n,
)
from structured_gic.solver import SolveOptions


def lstsq_loss(X, y, cols):
    """Independent restricted least-squares loss."""
    if len(cols) == 0:
        return float(y @ y) / (2 * len(y))
    coef = np.linalg.lstsq(X[:, cols], y, rcond=None)[0]
    r = y - X[:, cols] @ coef
    return float(r @ r) / (2 * len(y))


def brute_force(X, y, part, rate, budget):
    best = None
    for k in range(part.G + 1):
        if k > budget:
            break
        for S in combinations(range(part.G), k):
            cols = [c for g in S for c in part.groups[g]]
            val = lstsq_loss(X, y, cols) + rate * k
            if best is None or val < best[0]:
                best = (val, S)
    return best


# --- schedule, grid, threshold --------------------------------------------------------


def test_a_n_examples():
    assert a_n(PenaltySchedule.lowrank(10, 10, 200)) == pytest.approx(0.1)
    assert a_n(PenaltySchedule.lowrank(10, 10, 400)) == pytest.approx(0.05)
    assert a_n(PenaltySchedule.lowrank(10, 10, 400, c_gic=2.0)) == pytest.approx(0.1)
    assert a_n(PenaltySchedule.lowrank(10, 10, 800)) == pytest.approx(0.025)
    assert a_n(PenaltySchedule.group(4, 1, 80)) == pytest.approx(0.05)
    assert a_n(PenaltySchedule.group(4, 20, 200)) == pytest.approx((4 + math.log(20)) / 200)
    assert a_n(PenaltySchedule.group(4, 20, 200, log_n_factor=True)) == pytest.approx(
        (4 + math.log(20)) / 200 * math.log(200))
    assert a_n(PenaltySchedule.custom(0.3)) == 0.3


@given(st.integers(1, 50), st.integers(1, 100), st.integers(1, 10**5))
def test_a_n_halves_when_n_doubles(m, G, n):
    s1, s2 = PenaltySchedule.group(m, G, n), PenaltySchedule.group(m, G, 2 * n)
    assert a_n(s2) == pytest.approx(a_n(s1) / 2)


def test_schedule_validation():
    with pytest.raises(ValueError):
        PenaltySchedule.group(0, 3, 10)
    with pytest.raises(ValueError):
        PenaltySchedule.custom(0.0)
    with pytest.raises(ValueError):
        PenaltySchedule.group(2, 3, 10, c_gic=-1)
    with pytest.raises(ValueError):
        PenaltySchedule("other")


def test_schedule_for_matches_regularizer(rng):
    L = LossProblem(tabular(rng.standard_normal((30, 6)), rng.standard_normal(30)))
    s = schedule_for(L, GroupL2(GroupPartition.equal(3, 2)))
    assert (s.kind, s.m, s.G, s.n) == ("group", 2, 3, 30)


def test_lambda_grid(rng):
    X = rng.standard_normal((40, 6))
    y = rng.standard_normal(40)
    L = LossProblem(tabular(X, y))
    reg = GroupL2(GroupPartition.equal(3, 2))
    grid = lambda_grid(L, reg)
    lam_max = reg.dual(X.T @ y / 40)
    assert grid.size == 50 and grid[0] == lam_max and grid[-1] == 1e-3 * lam_max
    assert np.all(np.diff(grid) < 0)
    np.testing.assert_allclose(np.diff(np.log(grid)), math.log(1e-3) / 49)
    assert lambda_grid(L, reg, K=2, ratio=0.5).tolist() == [lam_max, 0.5 * lam_max]
    with pytest.raises(ValueError):
        lambda_grid(L, reg, K=1)
    with pytest.raises(ValueError):
        lambda_grid(L, reg, ratio=1.0)
    with pytest.raises(DegenerateData):
        lambda_grid(LossProblem(tabular(X, np.zeros(40))), reg)


def test_xi_n():
    assert xi_n(0.3, 1.0) == pytest.approx(0.3)
    assert xi_n(0.2) == pytest.approx(0.1)
    assert xi_n(0.2, 2.0) == pytest.approx(0.4)
    assert xi_n(0.2, 0.0) == 0.0
    with pytest.raises(ValueError):
        xi_n(0.0)


# --- extraction -----------------------------------------------------------------------


def test_extract_group_example():
    part = GroupPartition.equal(3, 2)
    theta = np.array([3.0, 4.0, 0.1, 0.0, 0.0, 3.0])
    M = extract_model(theta, GroupL2(part), 1.0)
    assert M.S == (0, 2)
    assert extract_model(theta, GroupL2(part), 3.0).S == (0,)
    assert extract_model(theta, GroupL2(part), 0.0).S == (0, 1, 2)
    assert extract_model(np.zeros(6), GroupL2(part), 0.0).S == ()
    with pytest.raises(ValueError):
        extract_model(theta, GroupL2(part), -1.0)


def test_extract_lowrank_example(rng):
    U, _ = np.linalg.qr(rng.standard_normal((5, 3)))
    V, _ = np.linalg.qr(rng.standard_normal((4, 3)))
    theta = (U * [4.0, 2.0, 1e-12]) @ V.T
    M = extract_model(theta, Nuclear(), 1e-15)
    assert M.r == 2
    assert same_subspace(M, LowRank(U[:, :2], V[:, :2]), 1e-8)
    assert extract_model(theta, Nuclear(), 3.0).r == 1
    assert extract_model(theta, Nuclear(), 5.0).r == 0
    assert extract_model(np.zeros((5, 4)), Nuclear(), 0.0).r == 0


def test_extract_lowrank_keeps_ties_together(rng):
    U, _ = np.linalg.qr(rng.standard_normal((4, 3)))
    V, _ = np.linalg.qr(rng.standard_normal((4, 3)))
    theta = (U * [3.0, 2.0 + 5e-11, 2.0]) @ V.T
    s = np.linalg.svd(theta, compute_uv=False)
    M = extract_model(theta, Nuclear(), float(s[2]))
    assert M.r == 3
    M = extract_model(theta, Nuclear(), 2.5)
    assert M.r == 1


# --- GIC and exhaustive selection -------------------------------------------------------


def test_gic_of_empty_model(rng):
    y = rng.standard_normal(25)
    L = LossProblem(tabular(rng.standard_normal((25, 4)), y))
    res = gic(L, GroupSupport(GroupPartition.equal(2, 2), ()), 0.3)
    assert res.loss == pytest.approx(float(y @ y) / 50, rel=1e-14)
    assert res.gic == res.loss and res.psi_sq == 0


def test_gic_value_and_budget(rng):
    X, y = rng.standard_normal((25, 6)), rng.standard_normal(25)
    L = LossProblem(tabular(X, y))
    part = GroupPartition.equal(3, 2)
    res = gic(L, GroupSupport(part, (0, 2)), 0.1)
    assert res.loss == pytest.approx(lstsq_loss(X, y, [0, 1, 4, 5]), rel=1e-10)
    assert res.gic == pytest.approx(res.loss + 0.2)
    assert default_psi_budget(L) == 3.0
    with pytest.raises(PsiBudgetExceeded):
        gic(L, GroupSupport(part, (0, 1, 2)), 0.1, psi_budget=2)
    with pytest.raises(ValueError):
        gic(L, GroupSupport(part, ()), 0.0)


def test_exhaustive_matches_brute_force_oracle(rng):
    n, part = 60, GroupPartition.equal(4, 2)
    X = rng.standard_normal((n, 8))
    y = X[:, :2] @ [1.0, -1.0] + X[:, 4:6] @ [0.3, 0.2] + 0.8 * rng.standard_normal(n)
    L = LossProblem(tabular(X, y))
    cands = all_group_supports(part)
    assert len(cands) == 16
    for rate in (0.001, 0.01, 0.05, 0.3):
        M, results = select_exhaustive(L, cands, PenaltySchedule.custom(rate), psi_budget=4)
        for Mc, r in zip(cands, results):
            assert r.gic == pytest.approx(lstsq_loss(X, y, list(Mc.columns())) + rate * Mc.size, abs=1e-12)
        val, S = brute_force(X, y, part, rate, 4)
        assert M.S == S
        ex = best_group_support(L, part, rate, psi_budget=4)
        assert ex.M.S == S and ex.gic == pytest.approx(val, abs=1e-12)


def test_exhaustive_ties_go_to_lexicographic_first(rng):
    n = 40
    x = rng.standard_normal((n, 2))
    X = np.hstack([x, x, rng.standard_normal((n, 2))])
    y = x @ [1.0, 1.0] + 0.1 * rng.standard_normal(n)
    L = LossProblem(tabular(X, y))
    part = GroupPartition.equal(3, 2)
    cands = [GroupSupport(part, (1,)), GroupSupport(part, (0,)), GroupSupport(part, (2,))]
    M, results = select_exhaustive(L, cands, 0.01)
    assert results[0].gic == results[1].gic
    assert M.S == (0,)
    assert best_group_support(L, part, 0.01).M.S == (0,)


def test_single_candidate_is_returned(rng):
    L = LossProblem(tabular(rng.standard_normal((20, 4)), rng.standard_normal(20)))
    M = GroupSupport(GroupPartition.equal(2, 2), (1,))
    chosen, results = select_exhaustive(L, [M], 0.1)
    assert chosen is M and len(results) == 1


def test_huge_penalty_selects_empty_model(rng):
    X, y = rng.standard_normal((30, 6)), rng.standard_normal(30)
    L = LossProblem(tabular(X, y))
    part = GroupPartition.equal(3, 2)
    M, _ = select_exhaustive(L, all_group_supports(part), 1e6)
    assert M.S == ()
    assert best_group_support(L, part, 1e6).M.S == ()


def test_irrelevant_superset_never_displaces(rng):
    n = 50
    Q, _ = np.linalg.qr(rng.standard_normal((n, 6)))
    X = np.sqrt(n) * Q
    y = X[:, :2] @ [1.0, 0.5]
    L = LossProblem(tabular(X, y))
    part = GroupPartition.equal(3, 2)
    for rate in (1e-8, 1e-4, 1e-2):
        M, res = select_exhaustive(L, all_group_supports(part), rate)
        assert M.S == (0,)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_selected_size_non_increasing_in_penalty(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 10))
    y = X[:, :4] @ rng.standard_normal(4) + rng.standard_normal(40)
    L = LossProblem(tabular(X, y))
    part = GroupPartition.equal(5, 2)
    sizes = [best_group_support(L, part, r).M.size for r in (1e-4, 1e-3, 1e-2, 1e-1, 1.0)]
    assert all(b <= a for a, b in zip(sizes, sizes[1:]))


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 0.5))
def test_best_group_support_matches_select_exhaustive(seed, rate):
    rng = np.random.default_rng(seed)
    inst = gen_group_glm(GroupGlmDesign(n=40, G=6, m=2, s_star=2, seed=seed))
    L = LossProblem(inst.data)
    part = inst.M_star.partition
    M, res = select_exhaustive(L, all_group_supports(part, 6), rate, psi_budget=6)
    ex = best_group_support(L, part, rate, psi_budget=6)
    assert ex.M == M
    best = min(r.gic for r in res)
    assert ex.gic == pytest.approx(best, abs=1e-12)
    runner = sorted(r.gic for r in res)[1]
    # the margin certifies the gap from below
    assert 0 < ex.margin <= runner - best + 1e-10


def test_best_group_support_uneven_and_logistic(rng, uneven_groups):
    part = uneven_groups.partition
    X = rng.standard_normal((50, part.p))
    y = X[:, :2] @ [1.0, -1.0] + 0.5 * rng.standard_normal(50)
    L = LossProblem(tabular(X, y))
    M, _ = select_exhaustive(L, all_group_supports(part), 0.02, psi_budget=part.G)
    assert best_group_support(L, part, 0.02, psi_budget=part.G).M == M
    yl = (rng.uniform(size=50) < 1 / (1 + np.exp(-2 * X[:, 0]))).astype(float)
    Ll = LossProblem(tabular(X, yl, "logistic"))
    M, _ = select_exhaustive(Ll, all_group_supports(part), 0.02, psi_budget=part.G)
    assert best_group_support(Ll, part, 0.02, psi_budget=part.G).M == M


def test_best_group_support_respects_budget(rng):
    X = rng.standard_normal((40, 8))
    y = X @ np.ones(8)
    L = LossProblem(tabular(X, y))
    part = GroupPartition.equal(4, 2)
    assert best_group_support(L, part, 1e-3, psi_budget=2).M.size == 2
    assert best_group_support(L, part, 1e-3, psi_budget=4).M.size == 4


def test_lowrank_exhaustive_picks_true_rank():
    inst = gen_lowrank(LowRankDesign(n=400, p1=6, p2=5, r_star=2, sv_min=1.0, noise_sd=0.3, seed=3))
    L = LossProblem(inst.data)
    U, _, V = signed_svd(np.asarray(restrict_free(L)))
    cands = [LowRank(U[:, :r], V[:, :r]) for r in range(5)]
    M, res = select_exhaustive(L, cands, PenaltySchedule.lowrank(6, 5, 400))
    assert M.r == 2
    assert [r.psi_sq for r in res] == [0, 1, 2, 3, 4]


def restrict_free(L):
    """Unrestricted least-squares matrix estimate."""
    coef = np.linalg.lstsq(L._D, L._y, rcond=None)[0]
    return coef.reshape(L.shape)


# --- path selection ---------------------------------------------------------------------


def test_path_on_orthonormal_design_is_nested(rng):
    n = 64
    Q, _ = np.linalg.qr(rng.standard_normal((n, 12)))
    X = np.sqrt(n) * Q
    y = X @ np.repeat([2.0, 1.0, 0.5, 0.25, 0.0, 0.0], 2) + 0.2 * rng.standard_normal(n)
    L = LossProblem(tabular(X, y))
    reg = GroupL2(GroupPartition.equal(6, 2))
    path = select_on_path(L, reg, lambda_grid(L, reg, 30), PenaltySchedule.custom(0.01), psi_budget=6)
    norms_path = np.array([np.linalg.norm(pt.theta.reshape(6, 2), axis=1) for pt in path.points])
    assert np.all(np.diff(norms_path, axis=0) >= -1e-9)
    supports = [set(pt.M.S) for pt in path.points]
    assert all(a <= b for a, b in zip(supports, supports[1:]))
    z = X.T @ y / n
    norms = np.linalg.norm(z.reshape(6, 2), axis=1)
    for pt in path.points:
        assert set(pt.M.S) == set(np.flatnonzero(norms > 1.5 * pt.lam))


def test_path_selects_truth_on_strong_signal():
    inst = gen_group_glm(GroupGlmDesign(n=200, G=10, m=3, s_star=2, signal=2.0, noise_sd=0.3, seed=11))
    L = LossProblem(inst.data)
    reg = GroupL2(inst.M_star.partition)
    path = select_on_path(L, reg, lambda_grid(L, reg), schedule_for(L, reg))
    assert path.model == inst.M_star
    assert path.status[path.index] == "ok"
    assert path.lambda_hat == path.points[path.index].lam
    assert path.selected.gic == min(r.gic for r, s in zip(path.results, path.status) if s == "ok")


def test_path_null_model_with_log_factor():
    hits = 0
    for seed in range(100):
        inst = gen_group_glm(GroupGlmDesign(n=200, G=10, m=4, s_star=0, signal=0.0, seed=seed))
        L = LossProblem(inst.data)
        reg = GroupL2(inst.M_star.partition)
        path = select_on_path(L, reg, lambda_grid(L, reg, 20), schedule_for(L, reg, log_n_factor=True))
        hits += path.model.size == 0
    assert hits >= 90


def test_unconverged_points_are_not_selected(rng):
    X = rng.standard_normal((40, 8))
    y = X[:, :2] @ [1.0, 1.0] + 0.1 * rng.standard_normal(40)
    L = LossProblem(tabular(X, y))
    reg = GroupL2(GroupPartition.equal(4, 2))
    path = select_on_path(L, reg, lambda_grid(L, reg, 10), 0.01, opts=SolveOptions(max_iter=1))
    assert path.status[0] == "ok" and all(s == "unconverged" for s in path.status[1:])
    assert path.index == 0 and path.model.S == ()


def test_over_budget_points_are_flagged(rng):
    X = rng.standard_normal((40, 8))
    y = X @ np.ones(8) + 0.1 * rng.standard_normal(40)
    L = LossProblem(tabular(X, y))
    reg = GroupL2(GroupPartition.equal(4, 2))
    path = select_on_path(L, reg, lambda_grid(L, reg, 20), 1e-4, psi_budget=2)
    for pt, res, status in zip(path.points, path.results, path.status):
        if pt.converged and res.psi_sq > 2:
            assert status == "over_budget"
    assert path.model.size <= 2


def test_path_rejects_empty_grid(rng):
    L = LossProblem(tabular(rng.standard_normal((10, 2)), rng.standard_normal(10)))
    with pytest.raises(ValueError):
        select_on_path(L, GroupL2(GroupPartition.singletons(2)), [], 0.1)


def test_path_gic_equals_exhaustive_gic_exactly():
    inst = gen_group_glm(GroupGlmDesign(n=120, G=8, m=3, s_star=3, seed=4))
    L = LossProblem(inst.data)
    reg = GroupL2(inst.M_star.partition)
    sched = schedule_for(L, reg)
    path = select_on_path(L, reg, lambda_grid(L, reg), sched, psi_budget=8)
    cands = all_group_supports(reg.partition)
    _, results = select_exhaustive(L, cands, sched, psi_budget=8)
    by_support = {M.S: r for M, r in zip(cands, results)}
    for pt, res in zip(path.points, path.results):
        assert res.gic == by_support[pt.M.S].gic


def test_selectors_disagree_only_when_exhaustive_model_is_off_path():
    for seed in range(30):
        inst = gen_group_glm(GroupGlmDesign(n=100, G=8, m=3, s_star=3, signal=0.8, seed=seed))
        L = LossProblem(inst.data)
        reg = GroupL2(inst.M_star.partition)
        sched = schedule_for(L, reg)
        path = select_on_path(L, reg, lambda_grid(L, reg, 30), sched)
        ex = best_group_support(L, reg.partition, a_n(sched))
        on_path = any(pt.M == ex.M for pt, st in zip(path.points, path.status) if st == "ok")
        if on_path:
            assert path.model == ex.M
