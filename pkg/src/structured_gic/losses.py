"""Convex empirical losses: squared error, logistic GLM and trace regression.

All three share one representation. A matrix-regression dataset with
covariates ``X_i`` of shape ``(p1, p2)`` is stored as an ``n x (p1*p2)``
design whose rows are the row-major flattened ``X_i``, so that
``<X_i, Theta> = design[i] @ Theta.ravel()``. Parameters keep their natural
shape at the public surface.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import InvalidShape
from .model_space import RegularizerSpec, as_point, inner

FAMILIES = ("gaussian", "logistic")
MAX_MATRIX_ENTRIES = 10**7
_GRAM_MAX_DIM = 2000


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``(X, y)``.

    ``X`` is ``(n, p)`` for tabular data or ``(n, p1, p2)`` for matrix
    regression (always the gaussian family).
    """

    X: np.ndarray
    y: np.ndarray
    family: str = "gaussian"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim not in (2, 3):
            raise InvalidShape(f"X must be (n, p) or (n, p1, p2), got shape {X.shape}")
        if X.shape[0] != y.size or y.size < 1:
            raise InvalidShape(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if X.ndim == 3 and self.family != "gaussian":
            raise ValueError("matrix regression is only defined for the gaussian family")
        if X.ndim == 3 and X.size > MAX_MATRIX_ENTRIES:
            raise ValueError(f"matrix regression capped at {MAX_MATRIX_ENTRIES} covariate entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("data contain non-finite entries")
        if self.family == "logistic" and not np.all((y == 0) | (y == 1)):
            raise ValueError("logistic responses must be 0/1")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def is_matrix(self) -> bool:
        return self.X.ndim == 3

    @property
    def param_shape(self) -> tuple:
        return self.X.shape[1:]

    @property
    def design(self) -> np.ndarray:
        return self.X.reshape(self.n, -1)


def tabular(X, y, family="gaussian") -> Dataset:
    return Dataset(np.asarray(X, dtype=float), y, family)


def matrix_regression(X, y) -> Dataset:
    return Dataset(np.asarray(X, dtype=float), y, "gaussian")


class LossProblem:
    """Empirical loss over a dataset.

    Squared losses are normalized by ``1/(2n)``, the logistic negative
    log-likelihood by ``1/n``.
    """

    def __init__(self, data: Dataset):
        self.data = data
        self.family = data.family
        self.shape = data.param_shape
        self.n = data.n
        self._D = data.design
        self._y = data.y
        self.dim = self._D.shape[1]
        self._gram = None
        self._Dty = None
        self._yy = 0.0
        if self.family == "gaussian" and self.dim <= _GRAM_MAX_DIM:
            self._gram = self._D.T @ self._D / self.n
            self._Dty = self._D.T @ self._y / self.n
            self._yy = float(self._y @ self._y) / (2 * self.n)
        self._lipschitz = None

    def _flat(self, theta) -> np.ndarray:
        return as_point(theta, self.shape).ravel()

    def value(self, theta) -> float:
        return self._value_flat(self._flat(theta))

    def grad(self, theta) -> np.ndarray:
        return self._grad_flat(self._flat(theta)).reshape(self.shape)

    def _value_flat(self, t: np.ndarray) -> float:
        z = self._D @ t
        if self.family == "gaussian":
            r = self._y - z
            return float(r @ r) / (2 * self.n)
        return float(np.mean(np.logaddexp(0.0, z) - self._y * z))

    def _grad_flat(self, t: np.ndarray) -> np.ndarray:
        if self._gram is not None:
            return self._gram @ t - self._Dty
        z = self._D @ t
        if self.family == "gaussian":
            return self._D.T @ (z - self._y) / self.n
        return self._D.T @ (expit(z) - self._y) / self.n

    # Linear-oracle interface used by the solver: the loss depends on a flat
    # parameter only through aux = A @ t (A the Gram matrix or the design), so
    # momentum points get their aux by linear combination.

    def _aux(self, t: np.ndarray) -> np.ndarray:
        return self._gram @ t if self._gram is not None else self._D @ t

    def _f_aux(self, t: np.ndarray, aux: np.ndarray) -> float:
        if self._gram is not None:
            return 0.5 * float(t @ aux) - float(self._Dty @ t) + self._yy
        if self.family == "gaussian":
            r = self._y - aux
            return float(r @ r) / (2 * self.n)
        return float(np.mean(np.logaddexp(0.0, aux) - self._y * aux))

    def _g_aux(self, t: np.ndarray, aux: np.ndarray) -> np.ndarray:
        if self._gram is not None:
            return aux - self._Dty
        if self.family == "gaussian":
            return self._D.T @ (aux - self._y) / self.n
        return self._D.T @ (expit(aux) - self._y) / self.n

    def hessian(self, theta) -> np.ndarray:
        """Hessian with respect to the flattened parameter."""
        if self.family == "gaussian":
            return self._gram if self._gram is not None else self._D.T @ self._D / self.n
        w = expit(self._D @ self._flat(theta))
        w = w * (1.0 - w)
        return (self._D.T * w) @ self._D / self.n

    def step_bound(self, tol: float = 1e-6) -> float:
        """Upper bound on the Lipschitz constant of the gradient."""
        if self._lipschitz is None:
            lam = _power_iteration(self._D, self._gram, tol) / self.n
            self._lipschitz = lam * (1.0 + tol)
        return self._lipschitz if self.family == "gaussian" else self._lipschitz / 4.0


def _power_iteration(D, gram, tol, max_iter=10_000) -> float:
    """Largest eigenvalue of ``D^T D`` by power iteration on a fixed start vector."""
    d = D.shape[1]
    if d == 0 or not np.any(D):
        return 0.0
    apply = (lambda v: gram @ v * D.shape[0]) if gram is not None else (lambda v: D.T @ (D @ v))
    v = np.random.default_rng(0).standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = apply(v)
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if abs(new - lam) <= tol * 1e-3 * abs(new):
            lam = new
            break
        lam = new
    return lam


def loss_value(L: LossProblem, theta) -> float:
    return L.value(theta)


def loss_grad(L: LossProblem, theta) -> np.ndarray:
    return L.grad(theta)


def step_bound(L: LossProblem) -> float:
    return L.step_bound()


def rsc_probe(L: LossProblem, theta_star, reg: RegularizerSpec, kappa: float, tau_sq: float,
              eta: float, trials: int = 1000, seed: int = 0) -> float:
    """Fraction of random perturbations violating restricted strong convexity.

    Draws ``trials`` perturbations uniformly from the ball of radius ``eta``
    and checks ``L(theta*+D) - L(theta*) - <grad L(theta*), D> >= kappa ||D||^2 -
    tau_sq phi(D)^2`` up to a slack of 1e-10.
    """
    if not (kappa > 0 and tau_sq >= 0 and eta > 0):
        raise ValueError("need kappa > 0, tau_sq >= 0, eta > 0")
    rng = np.random.default_rng(seed)
    theta_star = as_point(theta_star, L.shape)
    base = L.value(theta_star)
    g = L.grad(theta_star)
    d = theta_star.size
    violations = 0
    for _ in range(trials):
        direction = rng.standard_normal(L.shape)
        direction /= np.linalg.norm(direction)
        delta = direction * eta * rng.uniform() ** (1.0 / d)
        lhs = L.value(theta_star + delta) - base - inner(g, delta)
        rhs = kappa * inner(delta, delta) - tau_sq * reg.phi(delta) ** 2
        if lhs < rhs - 1e-10:
            violations += 1
    return violations / trials


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def read_csv_dataset(path, family="gaussian") -> Dataset:
    """Read a tabular CSV with header ``x1,...,xp,y``."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidShape(f"{path}: empty file, expected header x1..xp,y")
    header = [h.strip() for h in rows[0]]
    p = len(header) - 1
    expected = [f"x{j}" for j in range(1, p + 1)] + ["y"]
    if p < 1 or header != expected:
        raise InvalidShape(f"{path}: expected header x1..x{max(p, 1)},y, got {','.join(header)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise InvalidShape(f"{path}: no data rows, expected n >= 1 rows of {p + 1} columns")
    for i, r in enumerate(body, start=2):
        if len(r) != p + 1:
            raise InvalidShape(f"{path}: line {i} has {len(r)} columns, expected {p + 1}")
    arr = np.array(body, dtype=float)
    return Dataset(arr[:, :p], arr[:, p], family)


def write_csv_dataset(data: Dataset, path) -> None:
    if data.is_matrix:
        raise ValueError("matrix-regression data are stored as JSON")
    p = data.X.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(1, p + 1)] + ["y"])
        for xi, yi in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def read_matrix_json(path) -> Dataset:
    """Read ``{"p1": int, "p2": int, "X": [[...]], "y": [...]}`` with each X_i flattened row-major."""
    path = Path(path)
    obj = json.loads(path.read_text())
    try:
        p1, p2 = int(obj["p1"]), int(obj["p2"])
        X = np.array(obj["X"], dtype=float)
        y = np.array(obj["y"], dtype=float)
    except KeyError as exc:
        raise InvalidShape(f"{path}: missing key {exc.args[0]!r}") from None
    if X.ndim != 2 or X.shape != (y.size, p1 * p2):
        raise InvalidShape(f"{path}: X has shape {X.shape}, expected ({y.size}, {p1 * p2}) = (n, p1*p2)")
    return Dataset(X.reshape(y.size, p1, p2), y, "gaussian")


def write_matrix_json(data: Dataset, path) -> None:
    p1, p2 = data.param_shape
    obj = {"p1": p1, "p2": p2, "X": data.design.tolist(), "y": data.y.tolist()}
    Path(path).write_text(json.dumps(obj))
