"""Generalized information criterion and regularization-path model selection.

``GIC(M) = L(theta_hat(M)) + a_n * psi_sq(M)`` where ``theta_hat(M)`` is the
unpenalized fit restricted to ``M``. Models are either enumerated directly
(:func:`select_exhaustive`, :func:`best_group_support`) or read off a
penalized solution path (:func:`select_on_path`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateData, NotConverged, PsiBudgetExceeded
from .losses import LossProblem
from .model_space import (
    TIE_TOL,
    GroupL2,
    GroupPartition,
    GroupSupport,
    LowRank,
    ModelSubspace,
    RegularizerSpec,
    as_point,
    psi_sq,
    signed_svd,
)
from .solver import SolveOptions, fit_restricted, solve_regularized

DEFAULT_K = 50
DEFAULT_RATIO = 1e-3
DEFAULT_C_XI = 0.5
RANK_TOL = 1e-12
_CHUNK = 4096


@dataclass(frozen=True)
class PenaltySchedule:
    """Rate ``a_n`` of the GIC complexity penalty.

    ``kind="group"`` gives ``c_gic * (m + log G) / n``, ``kind="lowrank"``
    gives ``c_gic * (p1 + p2) / n``, both optionally inflated by ``log n``;
    ``kind="custom"`` returns ``value`` unchanged.
    """

    kind: str
    n: int = 1
    m: int = 1
    G: int = 1
    p1: int = 1
    p2: int = 1
    value: float = float("nan")
    c_gic: float = 1.0
    log_n_factor: bool = False

    def __post_init__(self):
        if self.kind not in ("group", "lowrank", "custom"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "custom":
            if not self.value > 0:
                raise ValueError("custom a_n must be positive")
        elif min(self.n, self.m, self.G, self.p1, self.p2) < 1:
            raise ValueError("n and dimensions must be >= 1")
        if not self.c_gic > 0:
            raise ValueError("c_gic must be positive")

    @classmethod
    def group(cls, m, G, n, c_gic=1.0, log_n_factor=False):
        return cls("group", n=n, m=m, G=G, c_gic=c_gic, log_n_factor=log_n_factor)

    @classmethod
    def lowrank(cls, p1, p2, n, c_gic=1.0, log_n_factor=False):
        return cls("lowrank", n=n, p1=p1, p2=p2, c_gic=c_gic, log_n_factor=log_n_factor)

    @classmethod
    def custom(cls, value):
        return cls("custom", value=value)


def a_n(schedule: PenaltySchedule) -> float:
    s = schedule
    if s.kind == "custom":
        return float(s.value)
    if s.kind == "group":
        rate = (s.m + math.log(s.G)) / s.n
    else:
        rate = (s.p1 + s.p2) / s.n
    if s.log_n_factor:
        rate *= math.log(s.n)
    return s.c_gic * rate


def schedule_for(L: LossProblem, reg: RegularizerSpec, c_gic=1.0, log_n_factor=False) -> PenaltySchedule:
    """Schedule matching the regularizer: group rate for group norms, low-rank rate for nuclear."""
    if isinstance(reg, GroupL2):
        return PenaltySchedule.group(reg.partition.m, reg.partition.G, L.n, c_gic, log_n_factor)
    p1, p2 = L.shape
    return PenaltySchedule.lowrank(p1, p2, L.n, c_gic, log_n_factor)


def default_psi_budget(L: LossProblem) -> float:
    """Default cap on ``psi_sq``: ``min(p, n) / 2`` with ``p`` the ambient dimension."""
    return min(L.dim, L.n) / 2.0


@dataclass(frozen=True)
class GicResult:
    M: ModelSubspace
    loss: float
    psi_sq: float
    a_n: float
    gic: float
    singular: bool = False
    theta: np.ndarray = field(default=None, repr=False, compare=False)


@dataclass
class PathPoint:
    lam: float
    theta: np.ndarray
    M: ModelSubspace
    kkt: float
    converged: bool


@dataclass
class PathSelection:
    """Solution path with per-point GIC and the selected point.

    ``status[i]`` is ``"ok"`` for points eligible for selection, otherwise
    ``"unconverged"``, ``"over_budget"`` or ``"fit_failed"``. ``results[i]``
    is None only for ``"fit_failed"`` points.
    """

    points: List[PathPoint]
    results: List[Optional[GicResult]]
    status: List[str]
    index: Optional[int] = None

    @property
    def lambda_hat(self) -> Optional[float]:
        return None if self.index is None else self.points[self.index].lam

    @property
    def model(self) -> Optional[ModelSubspace]:
        return None if self.index is None else self.points[self.index].M

    @property
    def selected(self) -> Optional[GicResult]:
        return None if self.index is None else self.results[self.index]


def lambda_grid(L: LossProblem, reg: RegularizerSpec, K: int = DEFAULT_K, ratio: float = DEFAULT_RATIO) -> np.ndarray:
    """Log-uniform decreasing grid from ``phi*(grad L(0))`` down to ``ratio`` times it."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    lam_max = reg.dual(L.grad(np.zeros(L.shape)))
    if not lam_max > 0:
        raise DegenerateData("gradient of the loss vanishes at zero; the path is trivial")
    grid = lam_max * np.logspace(0.0, math.log10(ratio), K)
    grid[0], grid[-1] = lam_max, ratio * lam_max
    return grid


def xi_n(lam: float, c_xi: float = DEFAULT_C_XI) -> float:
    """Extraction threshold, linear in the regularization level."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    return c_xi * lam


def _tie_blocks(s: np.ndarray):
    """Split descending singular values into blocks of values within TIE_TOL of their neighbour."""
    blocks = []
    start = 0
    for i in range(1, s.size + 1):
        if i == s.size or s[i - 1] - s[i] > TIE_TOL:
            blocks.append((start, i))
            start = i
    return blocks


def extract_model(theta, reg: RegularizerSpec, xi: float) -> ModelSubspace:
    """Largest model subspace whose every sub-model carries more than ``xi`` of ``theta``.

    For the group norm this is ``{g : ||theta_g|| > xi}``. For the nuclear
    norm it is the span of the singular pairs with ``sigma_i > xi``; singular
    values tied to within 1e-10 are kept or dropped together, and values below
    ``1e-12 * sigma_1`` count as zero.
    """
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    if isinstance(reg, GroupL2):
        theta = as_point(theta, reg.shape)
        norms = reg.partition.group_norms(theta)
        return GroupSupport(reg.partition, tuple(np.flatnonzero(norms > xi)))
    theta = as_point(theta, reg.shape)
    U, s, V = signed_svd(theta)
    floor = RANK_TOL * max(1.0, s[0]) if s.size else 0.0
    r = 0
    for a, b in _tie_blocks(s):
        if s[a] > xi and s[a] > floor:
            r = b
    return LowRank(U[:, :r], V[:, :r])


def _gic_result(L, M, rate, opts=None) -> GicResult:
    theta, singular = fit_restricted(L, M, opts)
    loss = L.value(theta)
    pen = psi_sq(M)
    return GicResult(M, loss, pen, rate, loss + rate * pen, singular, theta)


def gic(L: LossProblem, M: ModelSubspace, a_n: float, psi_budget: float = None,
        opts: SolveOptions = None) -> GicResult:
    """``GIC(M) = L(theta_hat(M)) + a_n * psi_sq(M)``.

    Raises :class:`PsiBudgetExceeded` when ``psi_sq(M)`` exceeds
    ``psi_budget`` (default :func:`default_psi_budget`).
    """
    if not a_n > 0:
        raise ValueError("a_n must be positive")
    budget = default_psi_budget(L) if psi_budget is None else psi_budget
    if psi_sq(M) > budget:
        raise PsiBudgetExceeded(f"psi_sq(M) = {psi_sq(M)} exceeds budget {budget}")
    return _gic_result(L, M, a_n, opts)


def _lex_key(M: ModelSubspace, idx: int):
    return M.S if isinstance(M, GroupSupport) else (idx,)


def select_exhaustive(L: LossProblem, candidates: Sequence[ModelSubspace], schedule, psi_budget=None):
    """Minimize GIC over an explicit candidate list.

    Ties go to the smaller ``psi_sq`` and then to the lexicographically
    smaller group support (candidate order for low-rank models).

    Returns ``(M_hat, results)`` with ``results`` aligned to ``candidates``.
    """
    if not candidates:
        raise ValueError("candidate list is empty")
    rate = a_n(schedule) if isinstance(schedule, PenaltySchedule) else float(schedule)
    results = [gic(L, M, rate, psi_budget) for M in candidates]
    best = min(range(len(results)), key=lambda i: (results[i].gic, results[i].psi_sq, _lex_key(candidates[i], i)))
    return candidates[best], results


def all_group_supports(partition: GroupPartition, max_size: int = None) -> List[GroupSupport]:
    """Every group support with at most ``max_size`` groups, by size then lexicographically."""
    top = partition.G if max_size is None else min(partition.G, max_size)
    return [GroupSupport(partition, S) for k in range(top + 1) for S in combinations(range(partition.G), k)]


def select_on_path(L: LossProblem, reg: RegularizerSpec, grid, schedule, c_xi: float = DEFAULT_C_XI,
                   opts: SolveOptions = None, psi_budget: float = None) -> PathSelection:
    """Warm-started path over ``grid`` with GIC selection of the extracted models.

    Points whose solve did not converge, whose model exceeds the budget or
    whose restricted fit failed are reported but never selected. Ties go to
    the smaller ``psi_sq`` and then the larger ``lam``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("grid is empty")
    rate = a_n(schedule) if isinstance(schedule, PenaltySchedule) else float(schedule)
    budget = default_psi_budget(L) if psi_budget is None else psi_budget
    opts = opts or SolveOptions()
    theta = np.zeros(L.shape)
    points, results, status = [], [], []
    cache = {}
    for lam in grid:
        sol = solve_regularized(L, reg, float(lam), init=theta, opts=opts)
        theta = sol.theta
        M = extract_model(theta, reg, xi_n(float(lam), c_xi))
        points.append(PathPoint(float(lam), theta, M, sol.kkt, sol.converged))
        key = M.S if isinstance(M, GroupSupport) else None
        try:
            if key is not None and key in cache:
                res = cache[key]
            else:
                res = _gic_result(L, M, rate, opts)
                if key is not None:
                    cache[key] = res
        except NotConverged:
            res = None
        results.append(res)
        if res is None:
            status.append("fit_failed")
        elif not sol.converged:
            status.append("unconverged")
        elif res.psi_sq > budget:
            status.append("over_budget")
        else:
            status.append("ok")
    eligible = [i for i, st in enumerate(status) if st == "ok"]
    index = None
    if eligible:
        index = min(eligible, key=lambda i: (results[i].gic, results[i].psi_sq, -points[i].lam))
    return PathSelection(points, results, status, index)


# --------------------------------------------------------------------------
# Exact enumeration over group supports with a safe pruning bound
# --------------------------------------------------------------------------


@dataclass
class ExhaustiveGroupResult:
    """Exact GIC minimizer over all group supports within the budget.

    ``margin`` is a lower bound on the gap between the best and the
    runner-up GIC among all supports; it is exact unless the pruning bound
    cut the search short, and ``inf`` when there is no competitor.
    ``evaluated`` counts restricted fits performed.
    """

    M: GroupSupport
    gic: float
    margin: float
    evaluated: int
    sizes_searched: int = field(default=0)

    @property
    def unique(self) -> bool:
        return self.margin > 0


class _GaussianSubsetLoss:
    """Restricted squared loss on column subsets via the Gram matrix."""

    def __init__(self, L: LossProblem, partition: GroupPartition):
        D, y = L._D, L._y
        self.n = L.n
        self.D = D
        self.y = y
        self.gram = D.T @ D / L.n
        self.b = D.T @ y / L.n
        self.yy = float(y @ y) / (2 * L.n)
        self.partition = partition
        sizes = partition.sizes
        self.cols_by_group = None
        if np.all(sizes == sizes[0]):
            self.cols_by_group = np.array(partition.groups, dtype=int)

    def _solve_ok(self, c, A) -> bool:
        return np.min(np.abs(np.diag(c))) > 1e-7 * math.sqrt(np.max(np.diag(A)))

    def one(self, cols: np.ndarray) -> float:
        if cols.size == 0:
            return self.yy
        A = self.gram[np.ix_(cols, cols)]
        try:
            c = np.linalg.cholesky(A)
            if self._solve_ok(c, A):
                w = solve_triangular(c, self.b[cols], lower=True, check_finite=False)
                return max(self.yy - 0.5 * float(w @ w), 0.0)
        except np.linalg.LinAlgError:
            pass
        Z = self.D[:, cols]
        a = np.linalg.lstsq(Z, self.y, rcond=None)[0]
        r = self.y - Z @ a
        return float(r @ r) / (2 * self.n)

    def many(self, supports: np.ndarray) -> np.ndarray:
        """Losses for a ``(C, k)`` array of group supports of equal-size groups."""
        C, k = supports.shape
        if k == 0:
            return np.full(C, self.yy)
        cols = self.cols_by_group[supports].reshape(C, -1)
        A = self.gram[cols[:, :, None], cols[:, None, :]]
        rhs = self.b[cols]
        out = np.empty(C)
        try:
            c = np.linalg.cholesky(A)
            diag = np.abs(np.diagonal(c, axis1=1, axis2=2))
            scale = np.sqrt(np.max(np.diagonal(A, axis1=1, axis2=2), axis=1))
            good = np.min(diag, axis=1) > 1e-7 * scale
        except np.linalg.LinAlgError:
            good = np.zeros(C, dtype=bool)
        if good.any():
            w = np.linalg.solve(A[good], rhs[good][:, :, None])[:, :, 0]
            out[good] = np.maximum(self.yy - 0.5 * np.einsum("ij,ij->i", rhs[good], w), 0.0)
        for i in np.flatnonzero(~good):
            out[i] = self.one(cols[i])
        return out


def best_group_support(L: LossProblem, partition: GroupPartition, a_n: float, psi_budget: float = None,
                       max_evaluations: int = 2_000_000) -> ExhaustiveGroupResult:
    """Exact GIC minimizer over every group support with ``|S| <= psi_budget``.

    Supports are visited by increasing size. Since ``L(theta_hat(S))`` is at
    least the unrestricted minimum ``L_min``, a size ``k`` with
    ``L_min + a_n * k`` above the incumbent GIC can hold no minimizer (nor a
    tie), and the search stops there. Ties resolve to the smaller support and
    then lexicographically, as in :func:`select_exhaustive`.
    """
    if not a_n > 0:
        raise ValueError("a_n must be positive")
    budget = default_psi_budget(L) if psi_budget is None else psi_budget
    top = min(partition.G, int(math.floor(budget)))
    if L.family == "gaussian":
        subset_loss = _GaussianSubsetLoss(L, partition)
        lower = subset_loss.one(np.arange(L.dim)) - 1e-12 * max(1.0, subset_loss.yy)
    else:
        subset_loss = None
        lower = 0.0

    def losses_of(supports):
        if subset_loss is not None and subset_loss.cols_by_group is not None:
            out = []
            for start in range(0, len(supports), _CHUNK):
                chunk = supports[start:start + _CHUNK]
                out.append(subset_loss.many(np.array(chunk, dtype=int).reshape(len(chunk), k)))
            return np.concatenate(out) if out else np.empty(0)
        vals = []
        for S in supports:
            M = GroupSupport(partition, S)
            if subset_loss is not None:
                vals.append(subset_loss.one(M.columns()))
            else:
                theta, _ = fit_restricted(L, M)
                vals.append(L.value(theta))
        return np.array(vals)

    best_val, best_S, second = math.inf, None, math.inf
    evaluated = 0
    k_done = 0
    for k in range(top + 1):
        if lower + a_n * k > best_val:
            second = min(second, lower + a_n * k)
            break
        supports = list(combinations(range(partition.G), k))
        evaluated += len(supports)
        if evaluated > max_evaluations:
            raise RuntimeError(f"exhaustive search exceeded {max_evaluations} restricted fits")
        vals = losses_of(supports) + a_n * k
        # stable sort: on ties the earlier (lexicographically smaller) support wins
        order = np.argsort(vals, kind="stable")
        v0 = float(vals[order[0]])
        v1 = float(vals[order[1]]) if len(order) > 1 else math.inf
        if v0 < best_val:
            second = min(best_val, v1)
            best_val, best_S = v0, supports[order[0]]
        else:
            second = min(second, v0)
        k_done = k + 1
    return ExhaustiveGroupResult(GroupSupport(partition, best_S), best_val, second - best_val, evaluated, k_done)
