"""Proximal-gradient solver for ``min L(theta) + lam * phi(theta)`` and restricted fits.

The penalized problem is solved by FISTA with backtracking and an
objective-based adaptive restart: whenever a momentum step would increase the
objective, the momentum is dropped and the step is retaken from the last
accepted iterate. Accepted iterates therefore have non-increasing objective,
up to floating-point rounding in the final digits.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import InvalidShape, NotConverged, SingularFitWarning
from .losses import LossProblem
from .model_space import (
    GroupL2,
    GroupSupport,
    ModelSubspace,
    Nuclear,
    RegularizerSpec,
    as_point,
    signed_svd,
)


@dataclass(frozen=True)
class SolveOptions:
    max_iter: int = 5000
    tol_kkt: float = 1e-7
    backtrack: float = 0.5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol_kkt > 0:
            raise ValueError("tol_kkt must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class SolveResult:
    """Outcome of :func:`solve_regularized`.

    ``theta`` is the last accepted iterate; ``converged`` is False when
    ``max_iter`` was reached before ``kkt <= tol_kkt``.
    """

    theta: np.ndarray
    kkt: float
    objective: float
    n_iter: int
    converged: bool


def objective(L: LossProblem, reg: RegularizerSpec, lam: float, theta) -> float:
    return L.value(theta) + lam * reg.phi(theta)


def _active_rank(s: np.ndarray) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > 1e-12 * max(1.0, s[0])))


def _kkt(reg: RegularizerSpec, lam: float, theta: np.ndarray, g: np.ndarray) -> float:
    if isinstance(reg, GroupL2):
        part = reg.partition
        gnorms = part.group_norms(g)
        tnorms = part.group_norms(theta)
        slack = max(0.0, float(gnorms.max()) - lam)
        active = tnorms > 0
        if not active.any():
            return slack
        direction = theta / part.expand(np.where(active, tnorms, 1.0))
        dev = part.group_norms(g + lam * direction)
        return slack + float(dev[active].sum())
    U, s, V = signed_svd(theta)
    slack = max(0.0, float(np.linalg.svd(g, compute_uv=False)[0]) - lam)
    r = _active_rank(s)
    if r == 0:
        return slack
    Ur, Vr = U[:, :r], V[:, :r]
    off = g - Ur @ (Ur.T @ g)
    off = off - (off @ Vr) @ Vr.T
    return slack + float(np.linalg.norm(lam * Ur @ Vr.T + g - off))


def kkt_residual(L: LossProblem, reg: RegularizerSpec, lam: float, theta) -> float:
    """Optimality residual for the penalized problem; zero exactly at a minimizer.

    Sum of the dual-norm slack ``max(0, phi*(grad) - lam)`` and the deviation
    ``||grad_B + lam * dir_B||`` over the active blocks ``B`` (groups with
    nonzero norm, or the tangent space of the nonzero singular values).
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    theta = as_point(theta, L.shape)
    return _kkt(reg, lam, theta, L.grad(theta))


def _check_reg(L: LossProblem, reg: RegularizerSpec):
    if isinstance(reg, GroupL2) and L.shape != reg.shape:
        raise InvalidShape(f"group norm over p={reg.shape[0]} but loss parameters have shape {L.shape}")
    if isinstance(reg, Nuclear) and len(L.shape) != 2:
        raise InvalidShape(f"nuclear norm needs matrix parameters, loss has shape {L.shape}")


def _group_newton(L: LossProblem, reg: GroupL2, lam: float, x: np.ndarray, ftol: float, iters: int = 20):
    """Newton on the stationarity equations of the active groups (gaussian, Gram cached).

    On a fixed active set the optimality condition ``G_AA t - b_A + lam * t_g/||t_g|| = 0``
    is smooth; Newton from a near-optimal FISTA iterate converges in a few
    steps. Returns a full-length candidate or None; the caller certifies it.
    """
    part = reg.partition
    active = part.group_norms(x) > 0
    idx = np.flatnonzero(active[part._labels])
    if idx.size == 0:
        return None
    labels = part._labels[idx]
    same = labels[:, None] == labels[None, :]
    G = L._gram[np.ix_(idx, idx)]
    b = L._Dty[idx]
    t = x[idx].copy()
    diag = np.arange(idx.size)
    prev = math.inf
    for _ in range(iters):
        gn = np.sqrt(np.bincount(labels, t * t, minlength=part.G))[labels]
        if not np.all(gn > 0):
            return None
        u = t / gn
        F = G @ t - b + lam * u
        res = float(np.linalg.norm(F))
        if res <= ftol:
            break
        if res >= prev:
            # not in the quadratic-convergence region
            return None
        prev = res
        J = G - (lam * same) * (u[:, None] * (u / gn)[None, :])
        J[diag, diag] += lam / gn
        try:
            t = t - scipy.linalg.solve(J, F, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
    else:
        return None
    out = np.zeros_like(x)
    out[idx] = t
    return out


def solve_regularized(L: LossProblem, reg: RegularizerSpec, lam: float, init=None,
                      opts: SolveOptions = None, trace=None) -> SolveResult:
    """Minimize ``L(theta) + lam * phi(theta)``.

    Parameters
    ----------
    init : array, optional
        Warm start; zero by default.
    trace : writable text stream, optional
        Receives one JSON line per accepted iterate with keys
        ``iter, objective, kkt_residual, step``.

    Notes
    -----
    For gaussian losses with a group norm, once the active groups have been
    stable for a few iterations the solver also tries Newton's method on the
    smooth stationarity equations of the active set. The Newton point is only
    accepted if it passes the same KKT test and does not raise the objective.

    The loss is evaluated through ``aux = A @ theta`` (Gram matrix or design),
    which is linear in ``theta``; extrapolated points reuse it, so each
    iteration costs one product with ``A`` plus backtracking retries. The exact
    KKT residual (an SVD for the nuclear norm) is only computed once the
    prox-gradient mapping residual, which bounds it up to a factor of two, is
    small.
    """
    if not lam > 0:
        raise ValueError("lam must be positive; use restricted_fit for the unpenalized problem")
    opts = opts or SolveOptions()
    _check_reg(L, reg)
    shape = L.shape
    x = np.zeros(L.dim) if init is None else as_point(init, shape).ravel().copy()
    step = 1.0 / max(L.step_bound(), 1e-300)
    screen = 100.0 * opts.tol_kkt
    # rounding scale of the Gram-form loss value, which cancels near interpolation
    fscale = L._yy if L._gram is not None else 0.0

    def pen(v):
        return reg._phi(v.reshape(shape))

    def exact_kkt(v, g):
        return _kkt(reg, lam, v.reshape(shape), g.reshape(shape))

    ax = L._aux(x)
    fx = L._f_aux(x, ax)
    Fx = fx + lam * pen(x)
    gx = L._g_aux(x, ax)
    kkt = exact_kkt(x, gx)
    if kkt <= opts.tol_kkt:
        return _result(L, reg, lam, x, kkt, 0, True)

    y, ay, fy, gy = x, ax, fx, gx
    t = 1.0
    it = 0
    polish = isinstance(reg, GroupL2) and L._gram is not None
    stable, last_try, pattern = 0, -10, None
    while it < opts.max_iter:
        it += 1
        while True:
            z = reg._prox((y - step * gy).reshape(shape), step * lam).ravel()
            d = z - y
            az = L._aux(z)
            fz = L._f_aux(z, az)
            dd = float(d @ d)
            if dd == 0 or fz <= fy + float(gy @ d) + dd / (2 * step) + 1e-12 * (abs(fy) + fscale):
                break
            step *= opts.backtrack
        Fz = fz + lam * pen(z)
        # a plain proximal step from x (y is x) provably descends once the
        # backtracking test passes, so an apparent increase there is rounding
        if Fz > Fx + 1e-15 * max(1.0, abs(Fx)) and y is not x:
            y, ay, fy, gy, t = x, ax, fx, gx, 1.0
            continue
        x_prev, ax_prev = x, ax
        x, ax, fx, Fx = z, az, fz, Fz
        gx = L._g_aux(x, ax)
        # element of grad f(x) + lam * subdifferential(phi)(x)
        mapping = float(np.linalg.norm(-d / step + gx - gy))
        if trace is not None or mapping <= screen:
            kkt = exact_kkt(x, gx)
        else:
            kkt = math.inf
        if trace is not None:
            trace.write(json.dumps({"iter": it, "objective": Fx, "kkt_residual": kkt, "step": step}) + "\n")
        if kkt <= opts.tol_kkt:
            return _result(L, reg, lam, x, kkt, it, True)
        if polish:
            now = reg.partition.group_norms(x) > 0
            stable = stable + 1 if pattern is not None and np.array_equal(now, pattern) else 0
            pattern = now
            if stable >= 3 and it - last_try >= 10:
                last_try = it
                cand = _group_newton(L, reg, lam, x, 0.1 * opts.tol_kkt / math.sqrt(reg.partition.G))
                if cand is not None:
                    ac = L._aux(cand)
                    gc = L._g_aux(cand, ac)
                    Fc = L._f_aux(cand, ac) + lam * pen(cand)
                    kc = exact_kkt(cand, gc)
                    if kc <= opts.tol_kkt and Fc <= Fx + 1e-12 * (abs(Fx) + fscale):
                        return _result(L, reg, lam, cand, kc, it, True)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        y = x + beta * (x - x_prev)
        ay = ax + beta * (ax - ax_prev)
        t = t_next
        fy = L._f_aux(y, ay)
        gy = L._g_aux(y, ay)
    kkt = exact_kkt(x, gx)
    return _result(L, reg, lam, x, kkt, it, kkt <= opts.tol_kkt)


def _result(L, reg, lam, x, kkt, it, converged) -> SolveResult:
    theta = x.reshape(L.shape)
    return SolveResult(theta, kkt, objective(L, reg, lam, theta), it, bool(converged))


# --------------------------------------------------------------------------
# Restricted fits
# --------------------------------------------------------------------------


def _reduced_design(L: LossProblem, M: ModelSubspace):
    """Design in the coordinates of ``M`` and the map back to flat parameters."""
    if tuple(M.shape) != tuple(L.shape):
        raise InvalidShape(f"subspace shape {M.shape} does not match parameters {L.shape}")
    D = L._D
    if isinstance(M, GroupSupport):
        cols = M.columns()

        def lift(a):
            t = np.zeros(L.dim)
            t[cols] = a
            return t

        return D[:, cols], lift
    B = M.basis()
    return D @ B, lambda a: B @ a


def _fit_gaussian(Z, y):
    a, _, rank, _ = np.linalg.lstsq(Z, y, rcond=None)
    return a, rank < Z.shape[1]


def _fit_gaussian_gram(L: LossProblem, M: ModelSubspace):
    """Normal-equation fit through the cached Gram matrix.

    Returns None when the reduced system looks ill conditioned, so the caller
    can fall back to a least-squares solve on the reduced design.
    """
    G, b = L._gram, L._Dty
    if isinstance(M, GroupSupport):
        cols = M.columns()
        K, h = G[np.ix_(cols, cols)], b[cols]
    else:
        B = M.basis()
        K, h = B.T @ G @ B, B.T @ b
    try:
        c = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return None
    diag = np.diag(c)
    if diag.min() <= 1e-5 * diag.max():
        return None
    a = scipy.linalg.cho_solve((c, True), h)
    if isinstance(M, GroupSupport):
        t = np.zeros(L.dim)
        t[cols] = a
        return t
    return B @ a


def _fit_logistic(Z, y, max_iter=100, tol=1e-8):
    n, k = Z.shape
    singular = np.linalg.matrix_rank(Z) < k
    a = np.zeros(k)

    def value(a):
        z = Z @ a
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    f = value(a)
    lip = max(np.linalg.norm(Z, 2) ** 2 / (4 * n), 1e-12)
    for _ in range(max_iter):
        mu = expit(Z @ a)
        g = Z.T @ (mu - y) / n
        if np.linalg.norm(g) <= tol:
            return a, singular, True
        w = mu * (1.0 - mu)
        H = (Z.T * w) @ Z / n
        try:
            c = np.linalg.cholesky(H)
            direction = -np.linalg.solve(c.T, np.linalg.solve(c, g))
        except np.linalg.LinAlgError:
            direction = -g / lip
        s = 1.0
        while True:
            cand = a + s * direction
            fc = value(cand)
            if fc <= f + 1e-4 * s * float(g @ direction) or s < 1e-10:
                break
            s *= 0.5
        a, f = cand, fc
    mu = expit(Z @ a)
    g = Z.T @ (mu - y) / n
    return a, singular, bool(np.linalg.norm(g) <= tol)


def fit_restricted(L: LossProblem, M: ModelSubspace, opts: SolveOptions = None):
    """Restricted fit returning ``(theta, singular)`` without warning.

    Raises :class:`NotConverged` if the logistic Newton iteration fails.
    """
    if M.size == 0:
        return np.zeros(L.shape), False
    if L.family == "gaussian" and L._gram is not None:
        t = _fit_gaussian_gram(L, M)
        if t is not None:
            return t.reshape(L.shape), False
    Z, lift = _reduced_design(L, M)
    y = L._y
    if L.family == "gaussian":
        a, singular = _fit_gaussian(Z, y)
    else:
        a, singular, ok = _fit_logistic(Z, y)
        if not ok:
            raise NotConverged("logistic restricted fit did not converge", theta=lift(a).reshape(L.shape))
    return lift(a).reshape(L.shape), bool(singular)


def restricted_fit(L: LossProblem, M: ModelSubspace, opts: SolveOptions = None) -> np.ndarray:
    """``argmin_{theta in M} L(theta)``.

    Group supports are fit by least squares (gaussian) or damped Newton
    (logistic) on the retained columns. A low-rank subspace ``(U, V)`` is
    parametrized as ``U A V^T`` and solved for the ``r x r`` matrix ``A``.
    Rank-deficient systems get the minimum-norm solution and a
    :class:`SingularFitWarning`.
    """
    theta, singular = fit_restricted(L, M, opts)
    if singular:
        warnings.warn("restricted normal system is rank deficient; using minimum-norm solution",
                      SingularFitWarning, stacklevel=2)
    return theta
