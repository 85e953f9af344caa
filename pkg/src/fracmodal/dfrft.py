"""Discrete fractional Fourier transform for fixed signal lengths.

A plan carries the shared eigenbasis of the unitary DFT: the eigenvectors of
the circulant-tridiagonal matrix S that commutes with the DFT (second
difference plus a 2*cos(2*pi*n/N) diagonal). Those vectors are discrete
counterparts of the Hermite-Gaussian functions; ordering them by their number
of sign changes assigns each one an integer index k with DFT eigenvalue
exp(-j*pi*k/2), and the fractional-power transform is then

    F_p = sum_k  v_k * exp(-j*pi*k*p/2) * v_k^T

which is unitary, 4-periodic and additive in the order p.

For even N the matrix S has an exact eigenvalue shared between an even- and
an odd-symmetric eigenvector (N=4: eigenvalue -4), so a plain full
eigendecomposition can return mixed vectors with ill-defined crossing counts.
The construction therefore splits S into its even- and odd-symmetric blocks
first; each block has a simple spectrum, and sorting block eigenvalues in
descending order reproduces the crossing-count order exactly.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor, ComplexTensor, constant, cos, sin, matmul, mul, sym_eig
from .errors import DimensionError


class FractionalOrder:
    """The transform order p and whether training may update it.

    Orders 0 and 1 (plain embedding and plain frequency space) are kept
    fixed; any other initial value is treated as a trainable scalar.
    """

    __slots__ = ("value", "trainable")

    def __init__(self, value: float, trainable: bool | None = None):
        value = float(value)
        if not np.isfinite(value):
            raise DimensionError("fractional order must be finite")
        if trainable is None:
            trainable = value not in (0.0, 1.0)
        self.value = Tensor(value, requires_grad=bool(trainable))
        self.trainable = bool(trainable)

    @property
    def p(self) -> float:
        return float(self.value.data)


def commuting_matrix(n: int) -> np.ndarray:
    """The circulant second-difference matrix with diag 2cos(2*pi*k/n) - 4."""
    s = np.zeros((n, n))
    idx = np.arange(n)
    s[idx, idx] = 2.0 * np.cos(2.0 * np.pi * idx / n) - 4.0
    # += so the n=2 case, where both neighbours wrap to the same entry, stays
    # a true circulant second difference (and keeps commuting with the DFT)
    np.add.at(s, (idx, (idx + 1) % n), 1.0)
    np.add.at(s, (idx, (idx - 1) % n), 1.0)
    return s


def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix W[m, k] = exp(-2j*pi*m*k/n) / sqrt(n)."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def zero_crossings(v: np.ndarray, rel_tol: float = 1e-8) -> int:
    """Sign changes of ``v`` read as one period of a circular signal.

    Entries below ``rel_tol`` of the peak are treated as exact zeros. A
    vector that is odd-symmetric about index 0 carries one extra transition
    where its two tails of opposite sign meet; that structural wrap change
    is subtracted so the count matches the underlying oscillation order.
    """
    v = np.asarray(v, dtype=np.float64)
    n = len(v)
    significant = v[np.abs(v) > rel_tol * np.abs(v).max()]
    signs = np.sign(significant)
    circular = int(np.count_nonzero(signs != np.roll(signs, 1)))
    reversed_v = v[(-np.arange(n)) % n]
    odd_symmetric = np.linalg.norm(v - reversed_v) > np.linalg.norm(v + reversed_v)
    return circular - 1 if odd_symmetric else circular


def _symmetry_bases(n: int):
    """Orthonormal bases of the even- and odd-symmetric subspaces (v[k] = ±v[n-k])."""
    half = np.sqrt(0.5)
    even_cols = [np.eye(n)[:, 0]]
    odd_cols = []
    for k in range(1, (n + 1) // 2):
        e = np.zeros(n)
        e[k] = half
        e[n - k] = half
        even_cols.append(e)
        o = np.zeros(n)
        o[k] = half
        o[n - k] = -half
        odd_cols.append(o)
    if n % 2 == 0:
        mid = np.zeros(n)
        mid[n // 2] = 1.0
        even_cols.append(mid)
    odd = np.column_stack(odd_cols) if odd_cols else np.zeros((n, 0))
    return np.column_stack(even_cols), odd


class DfrftPlan:
    """Immutable eigenbasis and index assignment for one signal length."""

    def __init__(self, n: int):
        if n < 2:
            raise DimensionError(f"plan length must be >= 2, got {n}")
        self.n = n
        s = commuting_matrix(n)
        even_basis, odd_basis = _symmetry_bases(n)

        even_vals, even_vecs = sym_eig(even_basis.T @ s @ even_basis)
        # descending eigenvalue of S within each block = increasing oscillation
        even_full = (even_basis @ even_vecs)[:, ::-1]
        even_vals = even_vals[::-1]
        if odd_basis.shape[1] > 0:
            odd_vals, odd_vecs = sym_eig(odd_basis.T @ s @ odd_basis)
            odd_full = (odd_basis @ odd_vecs)[:, ::-1]
            odd_vals = odd_vals[::-1]
        else:
            odd_full = odd_basis
            odd_vals = np.zeros(0)

        if n % 2 == 0:
            even_index = list(range(0, n - 1, 2)) + [n]
            odd_index = list(range(1, n - 2, 2))
        else:
            even_index = list(range(0, n, 2))
            odd_index = list(range(1, n - 1, 2))

        triples = sorted(
            [(k, even_full[:, i], even_vals[i]) for i, k in enumerate(even_index)]
            + [(k, odd_full[:, i], odd_vals[i]) for i, k in enumerate(odd_index)],
            key=lambda kv: kv[0],
        )
        vectors = np.column_stack([v for _, v, _ in triples])
        # sign convention: first significant entry positive, for reproducibility
        for j in range(n):
            col = vectors[:, j]
            lead = col[np.abs(col) > 1e-10 * np.abs(col).max()][0]
            if lead < 0:
                vectors[:, j] = -col

        self.vectors = vectors
        self.hermite_index = np.array([k for k, _, _ in triples], dtype=np.int64)
        self.s_eigenvalues = np.array([w for _, _, w in triples])
        self.dft = dft_matrix(n)
        self._cache_p: float | None = None
        self._cache_mat: np.ndarray | None = None


def build_plan(n: int) -> DfrftPlan:
    return DfrftPlan(n)


def fractional_matrix(plan: DfrftPlan, p) -> np.ndarray:
    """Dense N x N matrix of the order-p transform.

    The most recent order is cached on the plan (the order changes at most
    once per training step, and plans are used single-threaded).
    """
    p = p.p if isinstance(p, FractionalOrder) else float(p)
    if plan._cache_p is not None and abs(p - plan._cache_p) <= 1e-15:
        return plan._cache_mat
    phases = np.exp(-0.5j * np.pi * plan.hermite_index * p)
    mat = (plan.vectors * phases) @ plan.vectors.T
    plan._cache_p = p
    plan._cache_mat = mat
    return mat


def apply(plan: DfrftPlan, p, x: np.ndarray) -> np.ndarray:
    """Transform a length-N signal: fractional_matrix(plan, p) @ x."""
    x = np.asarray(x)
    if x.shape[0] != plan.n:
        raise DimensionError(f"signal length {x.shape[0]} != plan length {plan.n}")
    return fractional_matrix(plan, p) @ x


def order_gradient(plan: DfrftPlan, p) -> np.ndarray:
    """Derivative of the transform matrix with respect to the order p."""
    p = p.p if isinstance(p, FractionalOrder) else float(p)
    k = plan.hermite_index
    phases = (-0.5j * np.pi * k) * np.exp(-0.5j * np.pi * k * p)
    return (plan.vectors * phases) @ plan.vectors.T


def fractional_planes(plan: DfrftPlan, p: Tensor) -> ComplexTensor:
    """Differentiable synthesis of F_p as (real plane, imaginary plane).

    Gradients with respect to a trainable order flow through the cos/sin of
    the per-index phase angles.
    """
    k = constant(plan.hermite_index.astype(np.float64) * (np.pi / 2.0))
    angle = mul(k, p)  # shape (N,)
    v = constant(plan.vectors)
    vt = constant(plan.vectors.T)
    re = matmul(mul(v, cos(angle)), vt)
    im = matmul(mul(v, -sin(angle)), vt)
    return ComplexTensor(re, im)


def continuous_kernel(p: float, u0: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Closed-form kernel of the continuous transform away from integer-pi angles.

    Documentation-level evaluator only; the discrete path above is what the
    model computes with.
    """
    alpha = p * np.pi / 2.0
    if abs(np.sin(alpha)) < 1e-12:
        raise DimensionError("kernel is a delta distribution at alpha = n*pi")
    cot = np.cos(alpha) / np.sin(alpha)
    csc = 1.0 / np.sin(alpha)
    amplitude = np.sqrt((1.0 - 1j * cot) / (2.0 * np.pi))
    u0 = np.asarray(u0, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    phase = 0.5 * u0**2 * cot - up * u0 * csc + 0.5 * up**2 * cot
    return amplitude * np.exp(1j * phase)
