"""Quadratic forms in independent coordinates: evaluation, exact moment algebra,
centered-form vectors with their exact covariance, and Lipschitz-parameterized
families with a gridded supremum surrogate.

For a symmetric Q and independent mean-0 variance-1 coordinates with fourth
moments mu4_i, the exact second-moment identities used throughout are

    Var(z'Qz)        = sum_i mu4_i q_ii^2 - 3 sum_i q_ii^2 + 2 tr(Q^2)
    Cov(z'Az, z'Bz)  = sum_i (mu4_i - 3) a_ii b_ii + 2 tr(AB)

(the third-moment contributions cancel for independent coordinates).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import UnsupportedLawError
from .laws import SubGaussianLaw

#: dimension above which the operator norm switches to power iteration
_EIG_DIM_LIMIT = 2048
#: tolerance on the smallest eigenvalue, relative to the operator norm
PSD_RTOL = 1e-8


def operator_norm(M: np.ndarray) -> float:
    """Spectral norm of a symmetric matrix.

    Dense symmetric eigensolve up to dimension 2048; deterministic power
    iteration (tol 1e-10, at most 1e4 iterations) above that.
    """
    d = M.shape[0]
    if d <= _EIG_DIM_LIMIT:
        w = np.linalg.eigvalsh(M)
        return float(max(abs(w[0]), abs(w[-1])))
    rng = np.random.Generator(np.random.Philox(key=np.array([0, 0], dtype=np.uint64)))
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(10_000):
        w = M @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - prev) <= 1e-10 * max(1.0, norm):
            break
        prev = norm
    return norm


@dataclass
class QuadraticForm:
    """A symmetric PSD matrix with its commonly needed scalars cached."""

    matrix: np.ndarray
    diag: np.ndarray = field(init=False)
    trace: float = field(init=False)
    trace_sq: float = field(init=False)
    op_norm: float = field(init=False)
    hs_norm: float = field(init=False)

    def __post_init__(self) -> None:
        Q = np.asarray(self.matrix, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {Q.shape}")
        asym = float(np.max(np.abs(Q - Q.T))) if Q.size else 0.0
        if asym >= 1e-10:
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
        Q = 0.5 * (Q + Q.T)
        self.matrix = Q
        self.diag = np.ascontiguousarray(np.diag(Q))
        self.trace = float(np.trace(Q))
        self.trace_sq = float(np.sum(Q * Q))  # tr(Q^2) for symmetric Q
        self.op_norm = operator_norm(Q)
        self.hs_norm = float(np.linalg.norm(Q, "fro"))
        self._check_psd()

    def _check_psd(self) -> None:
        d = self.dim
        if d <= _EIG_DIM_LIMIT:
            min_eig = float(np.linalg.eigvalsh(self.matrix)[0])
            if min_eig < -PSD_RTOL * max(self.op_norm, 1e-300):
                raise ValueError(
                    f"matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})"
                )
        else:
            shift = PSD_RTOL * max(self.op_norm, 1e-300)
            try:
                np.linalg.cholesky(self.matrix + shift * np.eye(d))
            except np.linalg.LinAlgError:
                raise ValueError("matrix is not positive semidefinite") from None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def eval_qf(qf: QuadraticForm, z: np.ndarray) -> float:
    """z'Qz, computed as (Qz).z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (qf.dim,):
        raise ValueError(f"dimension mismatch: form is {qf.dim}, vector is {z.shape}")
    return float((qf.matrix @ z) @ z)


def _resolve_mu(
    moments: SubGaussianLaw | Sequence[float] | np.ndarray, d: int
) -> tuple[float | None, np.ndarray | float]:
    """Normalize a moments argument to (mu3 or None, scalar or per-coordinate mu4)."""
    if isinstance(moments, SubGaussianLaw):
        mu3, mu4 = moments.mu3, moments.mu4
    elif isinstance(moments, np.ndarray) and moments.ndim == 1 and moments.size == d:
        mu3, mu4 = None, np.asarray(moments, dtype=np.float64)
    else:
        seq = tuple(float(x) for x in moments)
        if len(seq) < 2:
            raise ValueError("moments must provide at least (mu3, mu4)")
        mu3, mu4 = seq[0], seq[1]
    if np.any(np.asarray(mu4) < 1.0):
        raise ValueError("fourth moment below 1 is impossible for a variance-1 law")
    return mu3, mu4


def qf_variance(
    qf: QuadraticForm, moments: SubGaussianLaw | Sequence[float] | np.ndarray
) -> float:
    """Exact Var(z'Qz) for independent mean-0 variance-1 coordinates.

    ``moments`` is a law, a (mu3, mu4, ...) tuple, or a length-d array of
    per-coordinate fourth moments.
    """
    _, mu4 = _resolve_mu(moments, qf.dim)
    q = qf.diag
    return float(np.sum(mu4 * q * q) - 3.0 * np.sum(q * q) + 2.0 * qf.trace_sq)


def qf_covariance(
    qfA: QuadraticForm,
    qfB: QuadraticForm,
    moments: SubGaussianLaw | Sequence[float] | np.ndarray,
) -> float:
    """Exact Cov(z'Az, z'Bz) for independent symmetric-third-moment coordinates.

    Restricted to mu3 = 0 laws (all shipped families); per-coordinate fourth
    moments are accepted as an array.
    """
    if qfA.dim != qfB.dim:
        raise ValueError(f"dimension mismatch: {qfA.dim} vs {qfB.dim}")
    mu3, mu4 = _resolve_mu(moments, qfA.dim)
    if mu3 is not None and mu3 != 0.0:
        raise UnsupportedLawError(
            f"qf_covariance requires a symmetric law (mu3 = 0), got mu3 = {mu3}"
        )
    a, b = qfA.diag, qfB.diag
    tr_ab = float(np.sum(qfA.matrix * qfB.matrix))
    return float(np.sum((mu4 - 3.0) * a * b) + 2.0 * tr_ab)


@dataclass
class WVector:
    """Centered quadratic-form vector (w_k, w_check_k) and its exact covariance.

    ``w_k = z'Q_k z - tr(Q_k)`` and ``w_check_k = z'diag(Q_k)z - tr(Q_k)``;
    both are mean zero by construction.  ``v_cov`` is the exact 2K x 2K
    covariance for the supplied coordinate moments.
    """

    qforms: list[QuadraticForm]
    v_cov: np.ndarray
    mu4: float

    @property
    def k(self) -> int:
        return len(self.qforms)

    @property
    def dim(self) -> int:
        return self.qforms[0].dim

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: forms are {self.dim}, vector is {z.shape}")
        z_sq = z * z
        out = np.empty(2 * self.k)
        for i, qf in enumerate(self.qforms):
            full = float((qf.matrix @ z) @ z)
            diag_part = float(qf.diag @ z_sq)
            out[2 * i] = full - qf.trace
            out[2 * i + 1] = diag_part - qf.trace
        return out


def build_w(
    qforms: Sequence[QuadraticForm],
    moments: SubGaussianLaw | Sequence[float],
) -> WVector:
    """Assemble the 2K centered-form vector and its exact covariance.

    Block entries, for gamma2-free independent coordinates with common mu4:
    Cov(w_k, w_l) = (mu4-3) d_k.d_l + 2 tr(Q_k Q_l), and every entry touching
    a diagonal part reduces to (mu4-1) d_k.d_l.
    """
    if not qforms:
        raise ValueError("need at least one quadratic form")
    d = qforms[0].dim
    if any(qf.dim != d for qf in qforms):
        raise ValueError("all quadratic forms must share one dimension")
    mu3, mu4 = _resolve_mu(moments, d)
    if isinstance(mu4, np.ndarray):
        raise ValueError("build_w expects a common scalar fourth moment")
    if mu3 is not None and mu3 != 0.0:
        raise UnsupportedLawError("build_w requires a symmetric law (mu3 = 0)")

    kk = len(qforms)
    v_cov = np.empty((2 * kk, 2 * kk))
    diags = [qf.diag for qf in qforms]
    for i, j in itertools.product(range(kk), range(kk)):
        dd = float(diags[i] @ diags[j])
        tr_ij = float(np.sum(qforms[i].matrix * qforms[j].matrix))
        v_cov[2 * i, 2 * j] = (mu4 - 3.0) * dd + 2.0 * tr_ij
        v_cov[2 * i, 2 * j + 1] = (mu4 - 1.0) * dd
        v_cov[2 * i + 1, 2 * j] = (mu4 - 1.0) * dd
        v_cov[2 * i + 1, 2 * j + 1] = (mu4 - 1.0) * dd
    v_cov = 0.5 * (v_cov + v_cov.T)

    scale = operator_norm(v_cov)
    min_eig = float(np.linalg.eigvalsh(v_cov)[0])
    if min_eig < -PSD_RTOL * max(scale, 1e-300):
        raise ValueError(f"covariance not PSD (min eigenvalue {min_eig:.3e})")
    return WVector(qforms=list(qforms), v_cov=v_cov, mu4=float(mu4))


def sigma_k_sq(qf: QuadraticForm, gamma2: float) -> float:
    """Var(z'Qz) written through the excess kurtosis: 2 tr(Q^2) + gamma2 tr(diag(Q)^2)."""
    return float(2.0 * qf.trace_sq + gamma2 * (qf.diag @ qf.diag))


def napprox_rate(
    qforms: Sequence[QuadraticForm],
    d: int,
    gamma: float,
    f_norms: tuple[float, float],
) -> float:
    """Constant-free normal-approximation rate quantity for a K-form vector.

    (gamma+1)^8 { K^{3/2} d^{1/2} |f|_2 qmax^2  +  K^3 d |f|_3 qmax^3 }
    with qmax the largest operator norm among the forms.  The unknown absolute
    constant is omitted; only the scaling is meaningful.
    """
    f2, f3 = f_norms
    if f2 < 0 or f3 < 0:
        raise ValueError("derivative norms must be nonnegative")
    kk = len(qforms)
    qmax = max(qf.op_norm for qf in qforms)
    return float(
        (gamma + 1.0) ** 8
        * (kk**1.5 * d**0.5 * f2 * qmax**2 + kk**3 * d * f3 * qmax**3)
    )


@dataclass
class QFFamily:
    """Family Q(u) = V diag(t(u)) V' over the box [0, R]^K.

    ``t_fn`` maps a K-vector u to the m diagonal values; each component is
    L-Lipschitz on the box.
    """

    V: np.ndarray
    t_fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    radius: float
    k_dim: int

    def __post_init__(self) -> None:
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.V.ndim != 2:
            raise ValueError("V must be a d x m matrix")
        if self.radius <= 0 or self.lipschitz < 0 or self.k_dim < 1:
            raise ValueError("need radius > 0, lipschitz >= 0, k_dim >= 1")

    @property
    def m(self) -> int:
        return self.V.shape[1]

    def _check_u(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        if u.shape != (self.k_dim,):
            raise ValueError(f"u must have length {self.k_dim}, got shape {u.shape}")
        if np.any(u < 0.0) or np.any(u > self.radius):
            raise ValueError(f"u outside [0, {self.radius}]^{self.k_dim}")
        return u

    def lipschitz_violation(self, n_pairs: int = 1000, seed: int = 0) -> float:
        """Largest observed |t_i(u)-t_i(u')| - L||u-u'|| over random pairs (<= 0 when valid)."""
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 1], dtype=np.uint64)))
        worst = -np.inf
        for _ in range(n_pairs):
            u = rng.uniform(0.0, self.radius, self.k_dim)
            v = rng.uniform(0.0, self.radius, self.k_dim)
            gap = float(np.max(np.abs(self.t_fn(u) - self.t_fn(v))))
            worst = max(worst, gap - self.lipschitz * float(np.linalg.norm(u - v)))
        return worst


def family_eval(fam: QFFamily, u: np.ndarray) -> QuadraticForm:
    """Materialize Q(u) = V diag(t(u)) V' as a QuadraticForm."""
    u = fam._check_u(u)
    t = np.asarray(fam.t_fn(u), dtype=np.float64)
    if t.shape != (fam.m,):
        raise ValueError(f"t(u) must have length {fam.m}, got shape {t.shape}")
    return QuadraticForm((fam.V * t) @ fam.V.T)


def sup_deviation(
    fam: QFFamily,
    z: np.ndarray,
    grid: int,
    moments: SubGaussianLaw | Sequence[float] | None = None,
) -> float:
    """Max over a uniform grid^K lattice of |z'Q(u)z - tr Q(u)|.

    The centering tr Q(u) is the expectation for unit-variance coordinates;
    ``moments`` is accepted for interface symmetry and only sanity-checked.
    K > 2 is rejected (the lattice grows as grid^K).
    """
    if grid < 2:
        raise ValueError("need at least 2 grid points per axis")
    if fam.k_dim > 2:
        raise ValueError(f"grid evaluation limited to K <= 2, got K={fam.k_dim}")
    if moments is not None:
        _resolve_mu(moments, z.shape[0] if hasattr(z, "shape") else len(z))
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (fam.V.shape[0],):
        raise ValueError(f"z must have length {fam.V.shape[0]}, got shape {z.shape}")

    vz_sq = (fam.V.T @ z) ** 2  # (V'z)_i^2, so z'Q(u)z = sum_i t_i (V'z)_i^2
    col_sq = np.sum(fam.V**2, axis=0)  # tr Q(u) = sum_i t_i ||v_i||^2
    axis = np.linspace(0.0, fam.radius, grid)
    worst = 0.0
    for point in itertools.product(axis, repeat=fam.k_dim):
        t = np.asarray(fam.t_fn(np.array(point)), dtype=np.float64)
        dev = abs(float(t @ vz_sq) - float(t @ col_sq))
        worst = max(worst, dev)
    return worst


def sup_deviation_grid_bound(fam: QFFamily, z: np.ndarray, grid: int) -> float:
    """Deterministic bound on what the lattice can miss of the true supremum:
    L R sqrt(K) / grid * ||V'V|| * ||z||^2."""
    z = np.asarray(z, dtype=np.float64)
    vtv_norm = operator_norm(fam.V.T @ fam.V)
    return float(
        fam.lipschitz
        * fam.radius
        * np.sqrt(fam.k_dim)
        / grid
        * vtv_norm
        * float(z @ z)
    )
