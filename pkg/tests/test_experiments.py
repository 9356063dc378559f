import json
import math

import numpy as np
import pytest

from structured_gic.errors import ConfigError
from structured_gic.experiments import (
    A4_PRIME_C_MIN,
    GroupGlmDesign,
    LowRankDesign,
    McConfig,
    SelectorConfig,
    beta_min,
    check_assumptions,
    fmt,
    gen_group_glm,
    gen_lowrank,
    group_normalization,
    heuristic_kappa,
    monte_carlo,
    path_contains_truth,
    run_replicate,
    standard_group_config,
    substream_seed,
)
from structured_gic.losses import LossProblem, rsc_probe
from structured_gic.model_space import GroupL2, GroupSupport, LowRank, Nuclear
from structured_gic.path_gic import PathPoint, lambda_grid, schedule_for, select_on_path
from structured_gic.solver import restricted_fit


# --- generators ---------------------------------------------------------------------


def test_group_generator_is_deterministic():
    d = GroupGlmDesign(n=50, G=6, m=3, s_star=2, seed=9)
    a, b = gen_group_glm(d), gen_group_glm(d)
    np.testing.assert_array_equal(a.data.X, b.data.X)
    np.testing.assert_array_equal(a.data.y, b.data.y)
    assert a.M_star == b.M_star
    c = gen_group_glm(GroupGlmDesign(n=50, G=6, m=3, s_star=2, seed=10))
    assert not np.array_equal(a.data.y, c.data.y)


def test_group_generator_structure():
    d = GroupGlmDesign(n=80, G=6, m=4, s_star=3, signal=1.7, seed=1)
    inst = gen_group_glm(d)
    part = inst.M_star.partition
    norms = part.group_norms(inst.theta_star)
    assert inst.M_star.size == 3
    np.testing.assert_allclose(norms[list(inst.M_star.S)], 1.7)
    assert np.all(norms[[g for g in range(6) if g not in inst.M_star.S]] == 0)
    np.testing.assert_allclose(np.mean(inst.data.X ** 2, axis=0), 1.0)
    assert group_normalization(inst.data.X, part) == pytest.approx(2.0)


def test_zero_signal_gives_null_model():
    inst = gen_group_glm(GroupGlmDesign(n=30, G=4, m=2, s_star=2, signal=0.0, seed=3))
    assert inst.M_star.S == () and not np.any(inst.theta_star)


def test_correlated_covariates():
    inst = gen_group_glm(GroupGlmDesign(n=4000, G=2, m=2, s_star=1, covariate_corr=0.6, seed=2))
    X = inst.data.X
    assert np.corrcoef(X[:, 0], X[:, 1])[0, 1] == pytest.approx(0.6, abs=0.05)
    assert np.corrcoef(X[:, 0], X[:, 2])[0, 1] == pytest.approx(0.36, abs=0.05)


def test_logistic_generator():
    d = GroupGlmDesign(n=200, G=4, m=2, s_star=1, family="logistic", seed=5)
    inst = gen_group_glm(d)
    assert set(np.unique(inst.data.y)) <= {0.0, 1.0}
    g = gen_group_glm(GroupGlmDesign(n=200, G=4, m=2, s_star=1, seed=5))
    np.testing.assert_array_equal(inst.data.X, g.data.X)


def test_design_validation():
    with pytest.raises(ValueError):
        GroupGlmDesign(G=3, s_star=4)
    with pytest.raises(ValueError):
        GroupGlmDesign(covariate_corr=1.0)
    with pytest.raises(ValueError):
        LowRankDesign(p1=3, p2=3, r_star=4)
    with pytest.raises(ValueError):
        LowRankDesign(sv_min=0)


def test_lowrank_generator():
    inst = gen_lowrank(LowRankDesign(n=50, p1=6, p2=5, r_star=2, sv_min=1.5, seed=4))
    s = np.linalg.svd(inst.theta_star, compute_uv=False)
    assert np.linalg.matrix_rank(inst.theta_star) == 2
    np.testing.assert_allclose(s[:2], [3.0, 1.5])
    assert inst.M_star.r == 2 and beta_min(inst.theta_star, inst.M_star) == pytest.approx(1.5)


def test_noiseless_lowrank_restricted_fit_recovers_truth():
    inst = gen_lowrank(LowRankDesign(n=100, p1=6, p2=5, r_star=2, noise_sd=0.0, seed=8))
    L = LossProblem(inst.data)
    np.testing.assert_allclose(restricted_fit(L, inst.M_star), inst.theta_star, atol=1e-8)


def test_substreams_are_independent_of_run_layout():
    assert substream_seed(0, 100, 3) == substream_seed(0, 100, 3)
    seeds = {substream_seed(0, n, r) for n in (50, 100) for r in range(50)}
    assert len(seeds) == 100
    assert substream_seed(1, 100, 3) != substream_seed(0, 100, 3)


# --- assumptions ----------------------------------------------------------------------


def test_zero_signal_fails_beta_min():
    inst = gen_group_glm(GroupGlmDesign(n=100, G=5, m=2, s_star=2, signal=0.0, seed=1))
    rep = check_assumptions(inst, rsc_trials=0)
    assert rep.beta_min == 0 and not rep.a4_holds


def test_margin_scales_with_signal():
    base = GroupGlmDesign(n=200, G=5, m=2, s_star=2, signal=0.5, seed=1)
    r1 = check_assumptions(gen_group_glm(base), rsc_trials=0)
    r10 = check_assumptions(gen_group_glm(GroupGlmDesign(**{**base.__dict__, "signal": 5.0})), rsc_trials=0)
    assert r10.a4_margin == pytest.approx(10 * r1.a4_margin, rel=1e-12)
    assert r1.kappa == r10.kappa


def test_gradient_side_decreases_with_n():
    medians = []
    for n in (100, 200, 400, 800):
        vals = [check_assumptions(gen_group_glm(GroupGlmDesign(n=n, G=10, m=3, s_star=2, seed=s)),
                                  rsc_trials=0).a3_gradient_side for s in range(15)]
        medians.append(np.median(vals))
    assert all(b < a for a, b in zip(medians, medians[1:]))


def test_assumption_report_fields():
    inst = gen_group_glm(GroupGlmDesign(n=400, G=5, m=2, s_star=2, signal=2.0, seed=2))
    rep = check_assumptions(inst, lam=0.01, rsc_trials=50, tau_sq_hyp=0.0, eta_hyp=0.5)
    L = LossProblem(inst.data)
    H = L.hessian(inst.theta_star)
    cols = inst.M_star.columns()
    assert rep.kappa == pytest.approx(0.5 * np.linalg.eigvalsh(H[np.ix_(cols, cols)])[0])
    assert rep.psi_sq_star == 2 and rep.a1_holds
    assert rep.a4_prime_c > A4_PRIME_C_MIN
    assert rep.a4_prime_bound == pytest.approx(rep.a4_prime_c / rep.kappa * 0.01 * math.sqrt(2))
    # kappa is measured on M* only, so full-space directions may violate it when tau_sq = 0
    direct = rsc_probe(L, inst.theta_star, GroupL2(inst.M_star.partition), rep.kappa, 0.0, 0.5, 50, 0)
    assert rep.rsc_violation_rate == direct
    loose = check_assumptions(inst, tau_sq_hyp=1.0, rsc_trials=50)
    assert loose.rsc_violation_rate == 0.0
    assert rep.estimation_tolerance_ok and not loose.estimation_tolerance_ok
    assert rep.selection_tolerance_ok and not loose.selection_tolerance_ok
    d = rep.to_dict()
    assert json.dumps(d, default=str)
    with pytest.raises(ValueError):
        check_assumptions(inst, kappa_hyp=-1.0, rsc_trials=0)


def test_heuristic_kappa_fallback_on_empty_model():
    inst = gen_group_glm(GroupGlmDesign(n=50, G=3, m=2, s_star=0, seed=0))
    L = LossProblem(inst.data)
    assert heuristic_kappa(L, inst.theta_star, inst.M_star) == pytest.approx(0.5)


# --- path coverage ----------------------------------------------------------------------


def test_path_contains_truth_cases(rng):
    inst = gen_group_glm(GroupGlmDesign(n=50, G=4, m=2, s_star=2, seed=1))
    part = inst.M_star.partition
    pts = [PathPoint(1.0, None, GroupSupport(part, S), 0.0, True) for S in [(), (1,), inst.M_star.S]]
    assert path_contains_truth(pts, inst.M_star)
    assert not path_contains_truth(pts[:2], inst.M_star)
    assert not path_contains_truth(pts, inst.M_star, psi_budget=1)
    with pytest.raises(ValueError):
        path_contains_truth([], inst.M_star)
    U, _ = np.linalg.qr(rng.standard_normal((4, 2)))
    V, _ = np.linalg.qr(rng.standard_normal((3, 2)))
    M = LowRank(U, V)
    W, _ = np.linalg.qr(rng.standard_normal((4, 2)))
    other = [PathPoint(1.0, None, LowRank(W, V), 0.0, True)]
    assert path_contains_truth(other, M, angle_tol=None)
    assert not path_contains_truth(other, M, angle_tol=1e-6)


def test_path_contains_truth_ignores_ineligible_points():
    inst = gen_group_glm(GroupGlmDesign(n=200, G=5, m=2, s_star=2, signal=2.0, seed=3))
    L = LossProblem(inst.data)
    reg = GroupL2(inst.M_star.partition)
    path = select_on_path(L, reg, lambda_grid(L, reg, 20), schedule_for(L, reg))
    assert path_contains_truth(path, inst.M_star)
    path.status = ["unconverged"] * len(path.status)
    assert not path_contains_truth(path, inst.M_star)


# --- Monte Carlo ------------------------------------------------------------------------


def _small_config(**kw):
    base = dict(design=GroupGlmDesign(G=6, m=2, s_star=2, signal=1.0), n_values=(60, 120), replicates=4,
                master_seed=3, selector=SelectorConfig(k_grid=20, exhaustive=True))
    base.update(kw)
    return McConfig(**base)


def test_monte_carlo_deterministic_and_thread_invariant():
    cfg = _small_config()
    a = monte_carlo(cfg, threads=1)
    b = monte_carlo(cfg, threads=2)
    assert json.dumps(a.to_dict(), default=str) == json.dumps(b.to_dict(), default=str)
    assert [r.n for r in a.rows] == [60, 120] and a.rows[0].replicates == 4


def test_replicate_depends_only_on_its_substream():
    cfg = _small_config()
    other = _small_config(n_values=(120,), replicates=6)
    assert run_replicate(cfg, 120, 2) == run_replicate(other, 120, 2)


def test_report_files(tmp_path):
    rep = monte_carlo(_small_config(replicates=2))
    rep.write(tmp_path, verbose=True)
    header = (tmp_path / "report.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["n", "replicates", "failures"] and "agreement_rate" in header
    obj = json.loads((tmp_path / "report.json").read_text())
    assert McConfig.from_dict(obj["config"]) == rep.config
    assert len((tmp_path / "replicates.csv").read_text().splitlines()) == 5


def test_mc_config_round_trip_and_validation():
    cfg = standard_group_config(replicates=7)
    assert McConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError, match="bogus: unknown key"):
        McConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="design.nn: unknown key"):
        McConfig.from_dict({"design": {"nn": 1}})
    with pytest.raises(ConfigError, match="selector.x: unknown key"):
        McConfig.from_dict({"selector": {"x": 1}})
    with pytest.raises(ConfigError):
        McConfig.from_dict({"replicates": 0})
    with pytest.raises(ConfigError):
        McConfig.from_dict({"kind": "lowrank", "selector": {"exhaustive": True}})
    with pytest.raises(ConfigError):
        McConfig.from_dict({"design": {"G": 2, "s_star": 5}})


def test_fmt():
    assert fmt(True) == "1" and fmt(np.int64(3)) == "3" and fmt(None) == ""
    assert fmt(float("nan")) == "" and fmt(1 / 3) == "0.333333333333"
    assert fmt(np.float64(2.5)) == "2.5"
