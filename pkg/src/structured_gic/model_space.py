"""Parameter space, model subspaces and decomposable norms.

Parameter points are plain numpy arrays: a length-``p`` vector for grouped
problems or a ``(p1, p2)`` matrix for low-rank problems. The inner product is
the Euclidean (trace) inner product in both cases.

Two families of model subspaces are supported:

``GroupSupport``
    ``M(S) = {theta : theta_g = 0 for g not in S}`` for a subset ``S`` of the
    groups of a partition. Here ``M_bar = M`` and ``M_bar_perp = M(G \\ S)``.
``LowRank``
    ``M(U, V) = {U A V^T}``, the matrices whose column space lies in span(U)
    and row space in span(V). ``M_bar_perp`` holds the matrices whose column
    and row spaces are orthogonal to U and V.

Each is paired with the norm it decomposes: the group l1/l2 norm
(``GroupL2``, with plain l1 as the singleton-group special case) and the
nuclear norm (``Nuclear``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import InvalidShape

ORTHONORMAL_TOL = 1e-10
TIE_TOL = 1e-10


def as_point(u, shape=None) -> np.ndarray:
    """Coerce ``u`` to a finite float array, optionally checking its shape."""
    arr = np.asarray(u, dtype=float)
    if arr.ndim not in (1, 2):
        raise InvalidShape(f"parameter points are vectors or matrices, got ndim={arr.ndim}")
    if shape is not None and arr.shape != tuple(shape):
        raise InvalidShape(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidShape("parameter point has non-finite entries")
    return arr


def inner(u, v) -> float:
    """Euclidean / trace inner product."""
    return float(np.vdot(u, v))


def error_norm(u) -> float:
    return float(np.linalg.norm(np.ravel(u)))


def signed_svd(A: np.ndarray):
    """Full SVD with a deterministic sign convention.

    Each left singular vector is flipped (together with its right partner)
    so that its first entry with magnitude above 1e-12 is positive.
    """
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if U.shape[1]:
        big = np.abs(U) > 1e-12
        first = np.argmax(big, axis=0)
        lead = U[first, np.arange(U.shape[1])]
        flip = np.where(big.any(axis=0) & (lead < 0), -1.0, 1.0)
        U = U * flip
        Vt = Vt * flip[:, None]
    return U, s, Vt.T


# --------------------------------------------------------------------------
# Group partitions and subspaces
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupPartition:
    """Ordered partition of ``{0, ..., p-1}`` into nonempty disjoint groups."""

    groups: tuple
    _perm: np.ndarray = field(init=False, repr=False, compare=False)
    _starts: np.ndarray = field(init=False, repr=False, compare=False)
    _sizes: np.ndarray = field(init=False, repr=False, compare=False)
    _labels: np.ndarray = field(init=False, repr=False, compare=False)
    _block: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        groups = tuple(tuple(int(j) for j in g) for g in self.groups)
        if not groups:
            raise ValueError("partition needs at least one group")
        if any(len(g) == 0 for g in groups):
            raise ValueError("groups must be nonempty")
        flat = [j for g in groups for j in g]
        p = len(flat)
        if sorted(flat) != list(range(p)):
            raise ValueError("groups must be disjoint and cover 0..p-1")
        object.__setattr__(self, "groups", groups)
        sizes = np.array([len(g) for g in groups])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        labels = np.empty(p, dtype=int)
        for i, g in enumerate(groups):
            labels[list(g)] = i
        object.__setattr__(self, "_perm", np.array(flat, dtype=int))
        object.__setattr__(self, "_starts", starts)
        object.__setattr__(self, "_sizes", sizes)
        object.__setattr__(self, "_labels", labels)
        # equal contiguous groups allow reshape-based reductions
        contiguous = flat == list(range(p)) and len(set(sizes.tolist())) == 1
        object.__setattr__(self, "_block", int(sizes[0]) if contiguous else 0)

    @classmethod
    def equal(cls, G: int, m: int) -> "GroupPartition":
        """``G`` contiguous groups of size ``m``."""
        return cls(tuple(tuple(range(i * m, (i + 1) * m)) for i in range(G)))

    @classmethod
    def singletons(cls, p: int) -> "GroupPartition":
        return cls(tuple((j,) for j in range(p)))

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "GroupPartition":
        """Build from a per-coordinate group label; groups ordered by first appearance."""
        order: dict = {}
        for j, lab in enumerate(labels):
            order.setdefault(lab, []).append(j)
        return cls(tuple(tuple(v) for v in order.values()))

    @property
    def p(self) -> int:
        return int(self._perm.size)

    @property
    def G(self) -> int:
        return len(self.groups)

    @property
    def m(self) -> int:
        return int(self._sizes.max())

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes.copy()

    @property
    def labels(self) -> np.ndarray:
        return self._labels.copy()

    def group_norms(self, u: np.ndarray) -> np.ndarray:
        if self._block:
            b = u.reshape(-1, self._block)
            return np.sqrt((b * b).sum(axis=1))
        return np.sqrt(np.add.reduceat(u[self._perm] ** 2, self._starts))

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        """Broadcast one value per group back to a length-``p`` vector."""
        if self._block:
            return np.repeat(per_group, self._block)
        return np.asarray(per_group)[self._labels]

    def mask(self, S) -> np.ndarray:
        keep = np.zeros(self.G, dtype=bool)
        keep[list(S)] = True
        return keep[self._labels]


@dataclass(frozen=True, eq=False)
class GroupSupport:
    """Model subspace ``M(S)`` of vectors supported on the groups in ``S``."""

    partition: GroupPartition
    S: tuple = ()

    def __post_init__(self):
        S = tuple(sorted({int(g) for g in self.S}))
        if S and (S[0] < 0 or S[-1] >= self.partition.G):
            raise ValueError(f"support {S} not within 0..{self.partition.G - 1}")
        object.__setattr__(self, "S", S)

    @property
    def shape(self):
        return (self.partition.p,)

    @property
    def dim(self) -> int:
        return int(sum(self.partition.sizes[list(self.S)]))

    @property
    def size(self) -> int:
        return len(self.S)

    def columns(self) -> np.ndarray:
        """Coordinates spanned by the subspace, in increasing order."""
        return np.flatnonzero(self.partition.mask(self.S))

    def __eq__(self, other):
        if not isinstance(other, GroupSupport):
            return NotImplemented
        return self.S == other.S and self.partition == other.partition

    def __hash__(self):
        return hash((self.partition.groups, self.S))

    def __repr__(self):
        return f"GroupSupport(S={list(self.S)}, G={self.partition.G})"


@dataclass(frozen=True, eq=False)
class LowRank:
    """Model subspace ``M(U, V) = {U A V^T : A in R^{r x r}}``."""

    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=float, ndmin=2)
        V = np.array(self.V, dtype=float, ndmin=2)
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
            raise InvalidShape(f"U and V need the same number of columns, got {U.shape}, {V.shape}")
        r = U.shape[1]
        if r > min(U.shape[0], V.shape[0]):
            raise InvalidShape("rank exceeds min(p1, p2)")
        eye = np.eye(r)
        if r and (np.abs(U.T @ U - eye).max() > ORTHONORMAL_TOL or np.abs(V.T @ V - eye).max() > ORTHONORMAL_TOL):
            raise ValueError("U and V must have orthonormal columns")
        U.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    @classmethod
    def zero(cls, p1: int, p2: int) -> "LowRank":
        return cls(np.zeros((p1, 0)), np.zeros((p2, 0)))

    @property
    def r(self) -> int:
        return int(self.U.shape[1])

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def dim(self) -> int:
        return self.r * self.r

    @property
    def size(self) -> int:
        return self.r

    def basis(self) -> np.ndarray:
        """Orthonormal basis of ``M`` acting on row-major vectorized matrices.

        ``vec(U A V^T) = kron(U, V) @ vec(A)`` for row-major ``vec``.
        """
        return np.kron(self.U, self.V)

    def __eq__(self, other):
        if not isinstance(other, LowRank):
            return NotImplemented
        return same_subspace(self, other, angle_tol=1e-8)

    __hash__ = None

    def __repr__(self):
        return f"LowRank(r={self.r}, shape={self.shape})"


ModelSubspace = Union[GroupSupport, LowRank]


def max_principal_angle(A: np.ndarray, B: np.ndarray) -> float:
    """Largest principal angle (radians) between the column spans of orthonormal A and B."""
    if A.shape[1] != B.shape[1]:
        return float(np.pi / 2)
    if A.shape[1] == 0:
        return 0.0
    C = A.T @ B
    cos = np.linalg.svd(C, compute_uv=False).min()
    if cos < 0.8:
        return float(np.arccos(np.clip(cos, -1.0, 1.0)))
    # arccos is ill conditioned near 0; the residual of B off span(A) gives the sine
    sin = np.linalg.norm(B - A @ C, 2)
    return float(np.arcsin(min(sin, 1.0)))


def same_subspace(M1: ModelSubspace, M2: ModelSubspace, angle_tol=1e-6) -> bool:
    """Whether two model subspaces coincide.

    Group supports compare by their group sets. Low-rank subspaces need equal
    rank and, unless ``angle_tol`` is None, principal angles between both the
    column and the row spaces no larger than ``angle_tol``.
    """
    if isinstance(M1, GroupSupport) and isinstance(M2, GroupSupport):
        return M1.S == M2.S and M1.partition == M2.partition
    if isinstance(M1, LowRank) and isinstance(M2, LowRank):
        if M1.shape != M2.shape or M1.r != M2.r:
            return False
        if angle_tol is None:
            return True
        return max(max_principal_angle(M1.U, M2.U), max_principal_angle(M1.V, M2.V)) <= angle_tol
    return False


# --------------------------------------------------------------------------
# Decomposable norms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupL2:
    """Group l1/l2 norm ``sum_g ||u_g||_2``; dual ``max_g ||u_g||_2``."""

    partition: GroupPartition

    @property
    def shape(self):
        return (self.partition.p,)

    def _check(self, u):
        return as_point(u, self.shape)

    def phi(self, u) -> float:
        return self._phi(self._check(u))

    def dual(self, v) -> float:
        return float(self.partition.group_norms(self._check(v)).max())

    def prox(self, u, t: float) -> np.ndarray:
        return self._prox(self._check(u), t)

    def _phi(self, u: np.ndarray) -> float:
        return float(self.partition.group_norms(u).sum())

    def _prox(self, u: np.ndarray, t: float) -> np.ndarray:
        norms = self.partition.group_norms(u)
        scale = 1.0 - t / np.maximum(norms, t)
        return u * self.partition.expand(scale)


def ElementwiseL1(p: int) -> GroupL2:
    """Plain l1 norm, the group norm with singleton groups."""
    return GroupL2(GroupPartition.singletons(p))


@dataclass(frozen=True)
class Nuclear:
    """Nuclear norm (sum of singular values); dual is the operator norm."""

    shape: tuple = None

    def _check(self, u):
        arr = as_point(u, self.shape)
        if arr.ndim != 2:
            raise InvalidShape(f"nuclear norm needs a matrix, got shape {arr.shape}")
        return arr

    def phi(self, u) -> float:
        return self._phi(self._check(u))

    def _phi(self, u: np.ndarray) -> float:
        return float(np.linalg.svd(u, compute_uv=False).sum())

    def dual(self, v) -> float:
        v = self._check(v)
        if v.size == 0:
            return 0.0
        return float(np.linalg.svd(v, compute_uv=False)[0])

    def prox(self, u, t: float) -> np.ndarray:
        return self._prox(self._check(u), t)

    def _prox(self, u: np.ndarray, t: float) -> np.ndarray:
        U, s, V = np.linalg.svd(u, full_matrices=False)
        V = V.T
        s = np.maximum(s - t, 0.0)
        keep = s > 0
        return (U[:, keep] * s[keep]) @ V[:, keep].T


RegularizerSpec = Union[GroupL2, Nuclear]


def phi(reg: RegularizerSpec, u) -> float:
    return reg.phi(u)


def phi_dual(reg: RegularizerSpec, v) -> float:
    return reg.dual(v)


def prox(reg: RegularizerSpec, u, t: float) -> np.ndarray:
    """``argmin_x 0.5 ||x - u||^2 + t * phi(x)``."""
    if not t > 0:
        raise ValueError(f"prox step must be positive, got {t}")
    return reg.prox(u, t)


def psi_sq(M: ModelSubspace) -> float:
    """Squared subspace compatibility constant: ``|S|`` for group supports, ``r`` for low rank."""
    return float(M.size)


def _check_shape(u, M):
    return as_point(u, M.shape)


def project(u, M: ModelSubspace) -> np.ndarray:
    """Orthogonal projection onto ``M``."""
    u = _check_shape(u, M)
    if isinstance(M, GroupSupport):
        return np.where(M.partition.mask(M.S), u, 0.0)
    return M.U @ (M.U.T @ u @ M.V) @ M.V.T


def project_perp(u, M: ModelSubspace) -> np.ndarray:
    """Orthogonal projection onto the paired complement ``M_bar_perp``."""
    u = _check_shape(u, M)
    if isinstance(M, GroupSupport):
        return np.where(M.partition.mask(M.S), 0.0, u)
    left = u - M.U @ (M.U.T @ u)
    return left - (left @ M.V) @ M.V.T


def decompose_check(reg: RegularizerSpec, M: ModelSubspace, theta, gamma, rtol=1e-9) -> bool:
    """Check ``phi(theta + gamma) == phi(theta) + phi(gamma)`` for theta in M, gamma in M_bar_perp.

    The inputs are projected onto ``M`` and ``M_bar_perp`` first.
    """
    theta = project(theta, M)
    gamma = project_perp(gamma, M)
    a, b = reg.phi(theta), reg.phi(gamma)
    return abs(reg.phi(theta + gamma) - a - b) <= rtol * (1.0 + a + b)


def compatibility_witness(M: ModelSubspace) -> np.ndarray:
    """A unit-norm point of ``M`` attaining ``phi(u) / ||u|| = sqrt(psi_sq(M))``.

    Equal mass on every group of ``S``, or ``U V^T`` for low rank. The zero
    subspace has no nonzero point; a zero array is returned.
    """
    if isinstance(M, GroupSupport):
        part = M.partition
        u = np.zeros(part.p)
        for g in M.S:
            idx = list(part.groups[g])
            u[idx] = 1.0 / np.sqrt(len(idx))
    else:
        u = M.U @ M.V.T
    nrm = error_norm(u)
    return u / nrm if nrm > 0 else u


def subspace_to_json(M: ModelSubspace) -> dict:
    if isinstance(M, GroupSupport):
        return {"variant": "group", "S": list(M.S)}
    return {"variant": "lowrank", "r": M.r, "U": M.U.tolist(), "V": M.V.tolist()}


def subspace_from_json(obj: dict, partition: GroupPartition = None, shape=None) -> ModelSubspace:
    variant = obj.get("variant")
    if variant == "group":
        if partition is None:
            raise ValueError("a group partition is needed to rebuild a group support")
        return GroupSupport(partition, tuple(obj["S"]))
    if variant == "lowrank":
        r = int(obj["r"])
        if r == 0:
            if shape is None:
                raise ValueError("shape is needed to rebuild a rank-0 subspace")
            return LowRank.zero(*shape)
        M = LowRank(np.array(obj["U"], dtype=float), np.array(obj["V"], dtype=float))
        if M.r != r:
            raise ValueError(f"declared rank {r} does not match U, V with {M.r} columns")
        return M
    raise ValueError(f"unknown subspace variant {variant!r}")


def random_point_in(M: ModelSubspace, rng: np.random.Generator) -> np.ndarray:
    """Gaussian random point of ``M``."""
    return project(rng.standard_normal(M.shape), M)


def random_point_in_perp(M: ModelSubspace, rng: np.random.Generator) -> np.ndarray:
    """Gaussian random point of ``M_bar_perp``."""
    return project_perp(rng.standard_normal(M.shape), M)


def random_lowrank_subspace(p1: int, p2: int, r: int, rng: np.random.Generator) -> LowRank:
    if r == 0:
        return LowRank.zero(p1, p2)
    U, _ = np.linalg.qr(rng.standard_normal((p1, r)))
    V, _ = np.linalg.qr(rng.standard_normal((p2, r)))
    return LowRank(U, V)
