"""Synthetic designs, assumption diagnostics and Monte-Carlo selection studies.

Randomness comes from numpy's PCG64 generator. A Monte-Carlo replicate for
sample size ``n`` and index ``rep`` draws its data from the substream
``SeedSequence(master_seed, spawn_key=(n, rep))``, so a replicate's data
depend neither on execution order nor on which other sizes are run.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

import numpy as np

from .errors import ConfigError
from .losses import Dataset, LossProblem, rsc_probe
from .model_space import (
    GroupL2,
    GroupPartition,
    GroupSupport,
    ModelSubspace,
    Nuclear,
    RegularizerSpec,
    error_norm,
    psi_sq,
    random_lowrank_subspace,
    same_subspace,
)
from .path_gic import (
    PathSelection,
    PenaltySchedule,
    a_n,
    best_group_support,
    default_psi_budget,
    lambda_grid,
    schedule_for,
    select_on_path,
)
from .solver import SolveOptions

log = logging.getLogger(__name__)

# smallest admissible constant in the strengthened beta-min condition
A4_PRIME_C_MIN = 3.0 * (3.0 + math.sqrt(2.0)) / (2.0 * math.sqrt(2.0))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def substream_seed(master_seed: int, n: int, rep: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(n), int(rep)))
    return int(ss.generate_state(1, np.uint64)[0])


# --------------------------------------------------------------------------
# Designs and generators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupGlmDesign:
    n: int = 200
    G: int = 20
    m: int = 4
    s_star: int = 3
    signal: float = 1.0
    family: str = "gaussian"
    noise_sd: float = 0.5
    covariate_corr: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.G, self.m) < 1:
            raise ValueError("n, G and m must be >= 1")
        if not 0 <= self.s_star <= self.G:
            raise ValueError("s_star must lie in 0..G")
        if not 0 <= self.covariate_corr < 1:
            raise ValueError("covariate_corr must lie in [0, 1)")
        if self.family not in ("gaussian", "logistic"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.signal < 0 or self.noise_sd < 0:
            raise ValueError("signal and noise_sd must be nonnegative")

    @property
    def p(self) -> int:
        return self.G * self.m


@dataclass(frozen=True)
class LowRankDesign:
    n: int = 800
    p1: int = 20
    p2: int = 20
    r_star: int = 2
    sv_min: float = 2.0
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.r_star <= min(self.p1, self.p2):
            raise ValueError("r_star must lie in 0..min(p1, p2)")
        if not self.sv_min > 0:
            raise ValueError("sv_min must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")


class Instance(NamedTuple):
    data: Dataset
    theta_star: np.ndarray
    M_star: ModelSubspace


def group_normalization(X: np.ndarray, partition: GroupPartition) -> float:
    """``max_g ||X_g||_F / sqrt(n)``."""
    n = X.shape[0]
    return float(max(np.linalg.norm(X[:, list(g)]) for g in partition.groups) / math.sqrt(n))


def gen_group_glm(d: GroupGlmDesign) -> Instance:
    """Group-sparse GLM instance.

    Covariates follow a stationary AR(1) across columns with correlation
    ``covariate_corr`` and are rescaled to unit empirical second moment, so
    the group normalization constant is exactly ``sqrt(m)``. The true
    support is ``s_star`` groups chosen at random, every entry equal to
    ``signal / sqrt(m)``.
    """
    rng = make_rng(d.seed)
    n, p = d.n, d.p
    Z = rng.standard_normal((n, p))
    X = np.empty_like(Z)
    X[:, 0] = Z[:, 0]
    rho = d.covariate_corr
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + math.sqrt(1.0 - rho * rho) * Z[:, j]
    X *= math.sqrt(n) / np.linalg.norm(X, axis=0)
    support = np.sort(rng.choice(d.G, size=d.s_star, replace=False))
    noise = rng.standard_normal(n)
    part = GroupPartition.equal(d.G, d.m)
    theta = np.zeros(p)
    if d.signal > 0:
        theta[part.mask(support)] = d.signal / math.sqrt(d.m)
    else:
        support = support[:0]
    eta = X @ theta
    if d.family == "gaussian":
        y = eta + d.noise_sd * noise
    else:
        # uniforms derived from the same noise draw keep the stream layout family-independent
        from scipy.special import expit, ndtr

        y = (ndtr(noise) < expit(eta)).astype(float)
    return Instance(Dataset(X, y, d.family), theta, GroupSupport(part, tuple(support)))


def gen_lowrank(d: LowRankDesign) -> Instance:
    """Trace-regression instance ``y_i = <X_i, Theta*> + w_i`` with Gaussian ``X_i``.

    ``Theta* = U* diag(s) V*^T`` with Haar-like orthonormal factors and
    singular values evenly spaced on ``[sv_min, 2 sv_min]``.
    """
    rng = make_rng(d.seed)
    X = rng.standard_normal((d.n, d.p1, d.p2))
    M = random_lowrank_subspace(d.p1, d.p2, d.r_star, rng)
    s = np.linspace(2.0 * d.sv_min, d.sv_min, d.r_star)
    theta = (M.U * s) @ M.V.T
    w = d.noise_sd * rng.standard_normal(d.n)
    y = X.reshape(d.n, -1) @ theta.ravel() + w
    return Instance(Dataset(X, y, "gaussian"), theta, M)


def regularizer_for(M: ModelSubspace) -> RegularizerSpec:
    if isinstance(M, GroupSupport):
        return GroupL2(M.partition)
    return Nuclear(M.shape)


# --------------------------------------------------------------------------
# Assumption diagnostics
# --------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    """Empirical audit of the selection assumptions on a synthetic instance.

    Every check stores both sides of its inequality. ``kappa`` is the
    curvature used throughout (user hypothesis or the Hessian heuristic).
    """

    kappa: float
    a_n: float
    psi_sq_star: float
    psi_budget: float
    a1_holds: bool
    a3_sqrt_a_n: float
    a3_gradient_side: float
    a3_holds: bool
    beta_min: float
    a4_bound: float
    a4_holds: bool
    a4_margin: float
    lam: Optional[float] = None
    a4_prime_c: float = float("nan")
    a4_prime_bound: float = float("nan")
    a4_prime_holds: Optional[bool] = None
    rsc_violation_rate: float = float("nan")
    tau_sq: float = 0.0
    eta: float = 1.0
    selection_tolerance_ok: bool = False
    selection_radius_ok: bool = False
    estimation_tolerance_ok: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _subspace_basis(M: ModelSubspace) -> np.ndarray:
    if isinstance(M, GroupSupport):
        cols = M.columns()
        B = np.zeros((M.partition.p, cols.size))
        B[cols, np.arange(cols.size)] = 1.0
        return B
    return M.basis()


def heuristic_kappa(L: LossProblem, theta_star, M_star: ModelSubspace, M_hat: ModelSubspace = None) -> float:
    """Curvature proxy: half the smallest Hessian eigenvalue over ``M* + M_hat``.

    The factor one half matches the ``kappa ||D||^2`` form of the curvature
    bound against the second-order term ``D^T H D / 2``. If the combined
    subspace is trivial, the smallest diagonal Hessian entry is used.
    """
    H = L.hessian(theta_star)
    bases = [_subspace_basis(M_star)]
    if M_hat is not None:
        bases.append(_subspace_basis(M_hat))
    B = np.hstack(bases)
    if B.shape[1] == 0:
        return 0.5 * float(np.min(np.diag(H)))
    u, s, _ = np.linalg.svd(B, full_matrices=False)
    Q = u[:, s > 1e-10 * s[0]]
    return 0.5 * float(np.linalg.eigvalsh(Q.T @ H @ Q)[0])


def beta_min(theta_star, M_star: ModelSubspace) -> float:
    """Smallest signal carried by a nonzero sub-model of ``M*`` (0 for the zero model)."""
    if M_star.size == 0:
        return 0.0
    if isinstance(M_star, GroupSupport):
        norms = M_star.partition.group_norms(np.asarray(theta_star, dtype=float))
        return float(norms[list(M_star.S)].min())
    s = np.linalg.svd(np.asarray(theta_star, dtype=float), compute_uv=False)
    return float(s[M_star.r - 1])


def check_assumptions(instance: Instance, kappa_hyp: float = None, tau_sq_hyp: float = 0.0,
                      eta_hyp: float = 1.0, schedule: PenaltySchedule = None, lam: float = None,
                      psi_budget: float = None, c_prime: float = None, M_hat: ModelSubspace = None,
                      rsc_trials: int = 200, seed: int = 0) -> AssumptionReport:
    data, theta_star, M_star = instance
    L = LossProblem(data)
    reg = regularizer_for(M_star)
    kappa = heuristic_kappa(L, theta_star, M_star, M_hat) if kappa_hyp is None else float(kappa_hyp)
    if not kappa > 0:
        raise ValueError(f"curvature must be positive, got {kappa}")
    schedule = schedule or schedule_for(L, reg)
    rate = a_n(schedule)
    budget = default_psi_budget(L) if psi_budget is None else psi_budget
    pstar = psi_sq(M_star)
    grad_side = 2.0 / kappa * reg.dual(L.grad(theta_star))
    bmin = beta_min(theta_star, M_star)
    a4_bound = 2.0 / kappa * math.sqrt(rate) * math.sqrt(pstar)
    if a4_bound > 0:
        margin = bmin / a4_bound
    else:
        margin = 0.0 if bmin == 0 else math.inf
    rep = AssumptionReport(
        kappa=kappa,
        a_n=rate,
        psi_sq_star=pstar,
        psi_budget=budget,
        a1_holds=pstar <= budget,
        a3_sqrt_a_n=math.sqrt(rate),
        a3_gradient_side=grad_side,
        a3_holds=math.sqrt(rate) >= grad_side,
        beta_min=bmin,
        a4_bound=a4_bound,
        a4_holds=bmin > a4_bound,
        a4_margin=margin,
        tau_sq=tau_sq_hyp,
        eta=eta_hyp,
        selection_tolerance_ok=8 * tau_sq_hyp * budget <= kappa,
        selection_radius_ok=kappa * eta_hyp > 4 * math.sqrt(rate * budget),
        # sample-size condition of the penalized estimation bound, 16 tau^2 Psi^2(M_bar*) <= kappa / 4
        estimation_tolerance_ok=64 * tau_sq_hyp * pstar <= kappa,
    )
    if lam is not None:
        c = A4_PRIME_C_MIN * (1 + 1e-9) if c_prime is None else c_prime
        # Psi(M_bar*) = Psi(M*) for both group supports and low-rank pairs
        bound = c / kappa * lam * math.sqrt(pstar)
        rep.lam, rep.a4_prime_c, rep.a4_prime_bound = lam, c, bound
        rep.a4_prime_holds = bmin > bound
    if rsc_trials > 0:
        rep.rsc_violation_rate = rsc_probe(L, theta_star, reg, kappa, tau_sq_hyp, eta_hyp, rsc_trials, seed)
    return rep


# --------------------------------------------------------------------------
# Path coverage
# --------------------------------------------------------------------------


def path_contains_truth(path, M_star: ModelSubspace, angle_tol: Optional[float] = 1e-6,
                        psi_budget: float = None) -> bool:
    """Whether some point of the path extracted exactly ``M*``.

    ``path`` is a :class:`PathSelection` (only converged, within-budget
    points count) or a plain list of path points. Low-rank models match on
    rank and, unless ``angle_tol`` is None, on principal angles.
    """
    if psi_budget is not None and psi_sq(M_star) > psi_budget:
        return False
    if isinstance(path, PathSelection):
        points = [pt for pt, st in zip(path.points, path.status) if st in ("ok", "fit_failed")]
    else:
        points = list(path)
    if not points and not isinstance(path, PathSelection):
        raise ValueError("path is empty")
    return any(same_subspace(pt.M, M_star, angle_tol) for pt in points)


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectorConfig:
    k_grid: int = 50
    ratio: float = 1e-3
    c_gic: float = 1.0
    c_xi: float = 0.5
    log_n: bool = False
    psi_budget: Optional[float] = None
    exhaustive: bool = False
    max_iter: int = 5000
    tol_kkt: float = 1e-7


@dataclass(frozen=True)
class McConfig:
    kind: str = "group"
    design: Union[GroupGlmDesign, LowRankDesign] = field(default_factory=GroupGlmDesign)
    n_values: tuple = (50, 100, 200, 400)
    replicates: int = 100
    master_seed: int = 0
    selector: SelectorConfig = field(default_factory=SelectorConfig)

    def __post_init__(self):
        if self.kind not in ("group", "lowrank"):
            raise ConfigError(f"kind: expected 'group' or 'lowrank', got {self.kind!r}")
        want = GroupGlmDesign if self.kind == "group" else LowRankDesign
        if not isinstance(self.design, want):
            raise ConfigError(f"design: expected {want.__name__} for kind={self.kind!r}")
        if self.replicates < 1:
            raise ConfigError("replicates: must be >= 1")
        if not self.n_values:
            raise ConfigError("n_values: must be nonempty")
        if self.selector.exhaustive and self.kind != "group":
            raise ConfigError("selector.exhaustive: only defined for group supports")
        object.__setattr__(self, "n_values", tuple(int(v) for v in self.n_values))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n_values"] = list(self.n_values)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "McConfig":
        obj = dict(obj)
        _reject_unknown(obj, cls, "")
        kind = obj.get("kind", "group")
        design_cls = GroupGlmDesign if kind == "group" else LowRankDesign
        design = obj.get("design", {})
        _reject_unknown(design, design_cls, "design.")
        selector = obj.get("selector", {})
        _reject_unknown(selector, SelectorConfig, "selector.")
        try:
            return cls(
                kind=kind,
                design=design_cls(**design),
                n_values=tuple(obj.get("n_values", (50, 100, 200, 400))),
                replicates=int(obj.get("replicates", 100)),
                master_seed=int(obj.get("master_seed", 0)),
                selector=SelectorConfig(**selector),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def _reject_unknown(obj, cls, prefix):
    if not isinstance(obj, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a JSON object")
    known = {f.name for f in fields(cls)}
    for key in obj:
        if key not in known:
            raise ConfigError(f"{prefix}{key}: unknown key")


def standard_group_config(**overrides) -> McConfig:
    """Canonical group experiment: G=20, m=4, s*=3, signal 1, noise 0.5."""
    kw = dict(kind="group", design=GroupGlmDesign(G=20, m=4, s_star=3, signal=1.0, noise_sd=0.5),
              n_values=(50, 100, 200, 400), replicates=100)
    return McConfig(**{**kw, **overrides})


def standard_lowrank_config(**overrides) -> McConfig:
    """Canonical low-rank experiment: 20x20, r*=2, sv_min 2, noise 0.5."""
    kw = dict(kind="lowrank", design=LowRankDesign(p1=20, p2=20, r_star=2, sv_min=2.0, noise_sd=0.5),
              n_values=(200, 400, 800), replicates=100)
    return McConfig(**{**kw, **overrides})


@dataclass
class ReplicateResult:
    n: int
    rep: int
    seed: int
    ok: bool = True
    error: str = ""
    selected_size: float = float("nan")
    recovered: bool = False
    hamming: float = float("nan")
    error_norm: float = float("nan")
    path_contains_truth: bool = False
    unconverged_points: int = 0
    exhaustive_size: float = float("nan")
    exhaustive_recovered: bool = False
    exhaustive_unique: bool = False
    agree: bool = False


def _hamming(M_hat, M_star) -> float:
    if isinstance(M_star, GroupSupport):
        return float(len(set(M_hat.S) ^ set(M_star.S)))
    return float(abs(M_hat.r - M_star.r))


def run_replicate(config: McConfig, n: int, rep: int) -> ReplicateResult:
    seed = substream_seed(config.master_seed, n, rep)
    out = ReplicateResult(n=n, rep=rep, seed=seed)
    sel = config.selector
    try:
        design = type(config.design)(**{**asdict(config.design), "n": n, "seed": seed})
        inst = gen_group_glm(design) if config.kind == "group" else gen_lowrank(design)
        L = LossProblem(inst.data)
        reg = regularizer_for(inst.M_star)
        schedule = schedule_for(L, reg, sel.c_gic, sel.log_n)
        opts = SolveOptions(max_iter=sel.max_iter, tol_kkt=sel.tol_kkt)
        angle_tol = None
        if config.kind == "lowrank" and config.design.noise_sd == 0:
            angle_tol = 1e-6
        grid = lambda_grid(L, reg, sel.k_grid, sel.ratio)
        path = select_on_path(L, reg, grid, schedule, sel.c_xi, opts, sel.psi_budget)
        out.unconverged_points = sum(not pt.converged for pt in path.points)
        out.path_contains_truth = path_contains_truth(path, inst.M_star, angle_tol)
        if path.model is not None:
            M_hat = path.model
            out.selected_size = float(M_hat.size)
            out.recovered = same_subspace(M_hat, inst.M_star, angle_tol)
            out.hamming = _hamming(M_hat, inst.M_star)
            out.error_norm = error_norm(path.selected.theta - inst.theta_star)
        else:
            out.ok, out.error = False, "no eligible path point"
        if sel.exhaustive:
            ex = best_group_support(L, reg.partition, a_n(schedule), sel.psi_budget)
            out.exhaustive_size = float(ex.M.size)
            out.exhaustive_recovered = ex.M == inst.M_star
            out.exhaustive_unique = ex.unique
            out.agree = path.model is not None and path.model == ex.M
    except Exception as exc:  # per-replicate failures are aggregated, not fatal
        log.warning("replicate n=%d rep=%d failed: %s", n, rep, exc)
        out.ok, out.error = False, f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class McRow:
    n: int
    replicates: int
    failures: int
    exact_recovery_rate: float
    mean_support_hamming: float
    mean_error_norm: float
    mean_selected_size: float
    path_coverage_rate: float
    mean_unconverged_points: float
    exhaustive_recovery_rate: Optional[float] = None
    agreement_rate: Optional[float] = None
    unique_minimizer_rate: Optional[float] = None


@dataclass
class McReport:
    config: McConfig
    rows: List[McRow]
    details: List[ReplicateResult]

    def row(self, n: int) -> McRow:
        return next(r for r in self.rows if r.n == n)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "rows": [asdict(r) for r in self.rows],
            "details": [asdict(d) for d in self.details],
        }

    def csv_columns(self) -> List[str]:
        cols = [f.name for f in fields(McRow)]
        if not self.config.selector.exhaustive:
            cols = [c for c in cols if c not in ("exhaustive_recovery_rate", "agreement_rate", "unique_minimizer_rate")]
        return cols

    def write(self, out_dir, verbose: bool = False) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = self.csv_columns()
        with (out_dir / "report.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([fmt(getattr(r, c)) for c in cols])
        (out_dir / "report.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n")
        if verbose:
            dcols = [f.name for f in fields(ReplicateResult)]
            with (out_dir / "replicates.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(dcols)
                for d in self.details:
                    w.writerow([fmt(getattr(d, c)) for c in dcols])


def fmt(v) -> str:
    """Fixed 12-significant-digit formatting for table cells; missing values are empty."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        # non-finite cells (e.g. a rate with zero successful replicates) stay empty
        return f"{float(v):.12g}" if math.isfinite(v) else ""
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _mean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def aggregate(config: McConfig, details: List[ReplicateResult]) -> McReport:
    rows = []
    for n in config.n_values:
        reps = [d for d in details if d.n == n]
        good = [d for d in reps if d.ok]
        k = len(good)
        rate = (lambda attr: sum(getattr(d, attr) for d in good) / k) if k else (lambda attr: float("nan"))
        row = McRow(
            n=n,
            replicates=len(reps),
            failures=len(reps) - k,
            exact_recovery_rate=rate("recovered"),
            mean_support_hamming=_mean([d.hamming for d in good]),
            mean_error_norm=_mean([d.error_norm for d in good]),
            mean_selected_size=_mean([d.selected_size for d in good]),
            path_coverage_rate=rate("path_contains_truth"),
            mean_unconverged_points=_mean([float(d.unconverged_points) for d in good]),
        )
        if config.selector.exhaustive:
            row.exhaustive_recovery_rate = rate("exhaustive_recovered")
            row.agreement_rate = rate("agree")
            row.unique_minimizer_rate = rate("exhaustive_unique")
        rows.append(row)
    return McReport(config, rows, details)


def _run_task(args):
    config, n, rep = args
    return run_replicate(config, n, rep)


def default_threads() -> int:
    env = os.environ.get("STRUCTURED_GIC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def monte_carlo(config: McConfig, threads: int = 1) -> McReport:
    """Run every ``(n, replicate)`` task and aggregate per ``n``.

    Tasks are independent; with ``threads > 1`` they run in worker
    processes. The report is identical either way.
    """
    tasks = [(config, n, rep) for n in config.n_values for rep in range(config.replicates)]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            details = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    else:
        details = [_run_task(t) for t in tasks]
    details.sort(key=lambda d: (config.n_values.index(d.n), d.rep))
    return aggregate(config, details)
