# Copyright 2024 The spd-gcp-geometry Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Dense symmetric and triangular linear algebra for the SPD manifold code.

Everything here is a pure function of immutable matrix values.  The matrix
types wrap read-only double precision ``numpy`` arrays and check their
structural invariants (symmetry, positive definiteness, triangularity) when
they are constructed, so downstream code can rely on them.

Matrix functions and their differentials are computed in the eigenbasis of
the argument.  For a symmetric ``P = U diag(λ) Uᵀ`` the differential of
``P ↦ f(P)`` in direction ``V`` is ``U (K ∘ Uᵀ V U) Uᵀ`` where ``K`` is the
first divided difference (Loewner) matrix of ``f`` at ``λ``.
"""

from __future__ import annotations

__all__ = [
    "DomainError",
    "EigDecomp",
    "LowerTri",
    "NotPositiveDefinite",
    "NumericFailure",
    "ShapeError",
    "SpdMatrix",
    "SymMatrix",
    "cholesky",
    "dchol",
    "dchol_adjoint",
    "diag_part",
    "dlog_diag",
    "dmat_fun",
    "dmat_fun_inv",
    "dmlog",
    "dmpow",
    "dmpow_inv",
    "gen_lyapunov",
    "identity",
    "log_function",
    "lyapunov",
    "mat_fun",
    "mexp",
    "mlog",
    "mpow",
    "newton_schulz_sqrt",
    "power_function",
    "spd_inverse",
    "strict_lower",
    "sym_eig",
    "sym_fun",
    "vec_sym",
]

from typing import Optional, Union

import numpy as np
from attrs import define, field, frozen
from numpy.typing import ArrayLike
from scipy.linalg import (
    cho_solve,
    solve,
    solve_continuous_lyapunov,
    solve_sylvester,
    solve_triangular,
)
from scipy.linalg.lapack import dpotrf

from ._types import Attribute, FloatArray, ScalarFunction
from .validators import finite_array, square_matrix

# Relative tolerance for accepting a nearly symmetric array as symmetric.
SYMMETRY_TOLERANCE = 1e-12

# Relative reconstruction residual above which an eigendecomposition is
# reported as failed.
EIG_RESIDUAL_TOLERANCE = 1e-10

# Relative backward error above which a Lyapunov solution is rejected.
LYAPUNOV_RESIDUAL_TOLERANCE = 1e-10

# Condition number of M above which the generalized Lyapunov operator is
# considered too ill-conditioned to solve.
GEN_LYAPUNOV_CONDITION_LIMIT = 1e12

# Eigenvalues closer than this (relative) use the derivative in the Loewner
# matrix instead of the divided difference.
DIVIDED_DIFFERENCE_TOLERANCE = 1e-8


@define(auto_exc=False, str=True)
class NumericFailure(Exception):
    """
    A kernel operation could not produce a result to the required accuracy.

    :ivar operation: The name of the failing operation.
    :ivar residual: The relative residual or backward error observed.
    :ivar condition: A condition number estimate, when one is available.
    """

    operation: str
    residual: float
    condition: Optional[float] = None


@define(auto_exc=False, str=True)
class NotPositiveDefinite(Exception):
    """
    A matrix required to be positive definite is not.

    :ivar pivot: The zero-based index of the first nonpositive Cholesky pivot.
    """

    pivot: int


@define(auto_exc=False, str=True)
class DomainError(Exception):
    """
    A scalar function was applied outside of its domain.

    :ivar operation: The name of the operation.
    :ivar value: The offending input value.
    """

    operation: str
    value: float


@define(auto_exc=False, str=True)
class ShapeError(Exception):
    """
    Arrays with incompatible shapes were combined.
    """

    expected: tuple[int, ...]
    actual: tuple[int, ...]


def _readonly(value: ArrayLike) -> FloatArray:
    """
    Copy a value into a fresh read-only float64 array.
    """
    a = np.array(value, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _symmetrize_if_close(value: ArrayLike) -> FloatArray:
    """
    Symmetrize a square array whose asymmetry is within round-off.  Other
    arrays are passed through unchanged for the validators to reject.
    """
    a = np.array(value, dtype=np.float64, copy=True)
    if a.ndim == 2 and a.shape[0] == a.shape[1] and np.all(np.isfinite(a)):
        scale = max(1.0, float(np.linalg.norm(a)))
        if np.max(np.abs(a - a.T), initial=0.0) <= SYMMETRY_TOLERANCE * scale:
            a = (a + a.T) / 2
    a.setflags(write=False)
    return a


def _is_symmetric(inst: object, attr: Attribute[FloatArray], value: FloatArray) -> None:
    if not np.array_equal(value, value.T):
        raise ValueError(f"{attr.name} must be symmetric")


def _is_lower_triangular(
    inst: object, attr: Attribute[FloatArray], value: FloatArray
) -> None:
    if np.any(np.triu(value, k=1) != 0):
        raise ValueError(f"{attr.name} must be lower triangular")


def _potrf(a: FloatArray) -> FloatArray:
    """
    Compute the lower Cholesky factor of a symmetric array.

    :raise NotPositiveDefinite: If a pivot is not positive.
    """
    c, info = dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(pivot=int(info) - 1)
    if info < 0:
        raise ValueError(f"dpotrf rejected argument {-info}")
    return np.asarray(c, dtype=np.float64)


@frozen(eq=False)
class SymMatrix:
    """
    A real symmetric matrix.

    :ivar entries: The dense, read-only, exactly symmetric ``n × n`` array.
    """

    entries: FloatArray = field(
        converter=_symmetrize_if_close,
        validator=[square_matrix, _is_symmetric],
    )

    @property
    def n(self) -> int:
        return int(self.entries.shape[0])

    def __add__(self, other: SymMatrix) -> SymMatrix:
        return SymMatrix(self.entries + other.entries)

    def __sub__(self, other: SymMatrix) -> SymMatrix:
        return SymMatrix(self.entries - other.entries)

    def scaled(self, c: float) -> SymMatrix:
        return SymMatrix(c * self.entries)

    def norm(self) -> float:
        """
        :return: The Frobenius norm.
        """
        return float(np.linalg.norm(self.entries))

    def trace(self) -> float:
        return float(np.trace(self.entries))


@frozen(eq=False)
class SpdMatrix(SymMatrix):
    """
    A real symmetric positive definite matrix.

    Positive definiteness is established by a successful Cholesky
    factorization at construction time.
    """

    def __attrs_post_init__(self) -> None:
        _potrf(self.entries)


@frozen(eq=False)
class LowerTri:
    """
    A lower triangular matrix, usually a Cholesky factor.
    """

    entries: FloatArray = field(
        converter=_readonly,
        validator=[square_matrix, _is_lower_triangular],
    )

    @property
    def n(self) -> int:
        return int(self.entries.shape[0])


@frozen(eq=False)
class EigDecomp:
    """
    The eigendecomposition ``U diag(lam) Uᵀ`` of a symmetric matrix.

    :ivar U: The orthogonal matrix of eigenvectors (as columns).
    :ivar lam: The eigenvalues in descending order.
    """

    U: FloatArray = field(converter=_readonly, validator=finite_array)
    lam: FloatArray = field(converter=_readonly, validator=finite_array)

    def recompose(self, values: FloatArray) -> FloatArray:
        """
        :return: ``U diag(values) Uᵀ``, exactly symmetric.
        """
        a = (self.U * values) @ self.U.T
        return (a + a.T) / 2

    def to_eigenbasis(self, V: FloatArray) -> FloatArray:
        return self.U.T @ V @ self.U

    def from_eigenbasis(self, Vt: FloatArray) -> FloatArray:
        a = self.U @ Vt @ self.U.T
        return (a + a.T) / 2


MatrixLike = Union[FloatArray, SymMatrix, LowerTri]


def _entries(X: MatrixLike) -> FloatArray:
    if isinstance(X, (SymMatrix, LowerTri)):
        return X.entries
    return np.asarray(X, dtype=np.float64)


def identity(n: int) -> SpdMatrix:
    return SpdMatrix(np.eye(n))


def sym_eig(S: SymMatrix) -> EigDecomp:
    """
    Compute the eigendecomposition of a symmetric matrix.

    :raise NumericFailure: If the solver does not converge or the
        decomposition does not reproduce ``S`` to within
        ``EIG_RESIDUAL_TOLERANCE`` relative Frobenius error.
    """
    a = S.entries
    try:
        lam, U = np.linalg.eigh(a)
    except np.linalg.LinAlgError:
        raise NumericFailure("sym_eig", float("inf"))
    lam = np.ascontiguousarray(lam[::-1])
    U = np.ascontiguousarray(U[:, ::-1])
    scale = max(float(np.linalg.norm(a)), np.finfo(np.float64).tiny)
    residual = float(np.linalg.norm((U * lam) @ U.T - a)) / scale
    if residual > EIG_RESIDUAL_TOLERANCE:
        raise NumericFailure("sym_eig", residual)
    return EigDecomp(U, lam)


def _apply(eig: EigDecomp, f: ScalarFunction, operation: str) -> FloatArray:
    values = np.asarray(f(eig.lam), dtype=np.float64)
    bad = ~np.isfinite(values)
    if np.any(bad):
        raise DomainError(operation, float(eig.lam[np.argmax(bad)]))
    return eig.recompose(values)


def sym_fun(S: SymMatrix, f: ScalarFunction) -> SymMatrix:
    """
    Apply a scalar function to the eigenvalues of a symmetric matrix.

    :raise DomainError: If ``f`` is not finite at some eigenvalue.
    """
    return SymMatrix(_apply(sym_eig(S), f, "sym_fun"))


def mat_fun(P: SpdMatrix, f: ScalarFunction) -> SymMatrix:
    """
    Apply a scalar function to the eigenvalues of an SPD matrix.

    :raise DomainError: If ``f`` is not finite at some eigenvalue.
    """
    return SymMatrix(_apply(sym_eig(P), f, "mat_fun"))


def mlog(P: SpdMatrix) -> SymMatrix:
    """
    The principal matrix logarithm.
    """
    return SymMatrix(_apply(sym_eig(P), np.log, "mlog"))


def mexp(V: SymMatrix) -> SpdMatrix:
    """
    The matrix exponential of a symmetric matrix.
    """
    return SpdMatrix(_apply(sym_eig(V), np.exp, "mexp"))


def mpow(P: SpdMatrix, theta: float) -> SpdMatrix:
    """
    The matrix power ``P^θ``.

    :raise DomainError: If ``theta`` is zero.
    """
    if theta == 0:
        raise DomainError("mpow", theta)
    if theta == 1:
        return P
    return SpdMatrix(_apply(sym_eig(P), lambda x: x**theta, "mpow"))


def spd_inverse(P: SpdMatrix) -> SpdMatrix:
    """
    Invert an SPD matrix through its Cholesky factor.
    """
    L = _potrf(P.entries)
    return SpdMatrix(cho_solve((L, True), np.eye(P.n)))


def log_function() -> tuple[ScalarFunction, ScalarFunction]:
    """
    :return: ``log`` and its derivative, for use with ``dmat_fun``.
    """
    return np.log, np.reciprocal


def power_function(theta: float) -> tuple[ScalarFunction, ScalarFunction]:
    """
    :return: ``x ↦ x^θ`` and its derivative, for use with ``dmat_fun``.
    """
    return (lambda x: x**theta), (lambda x: theta * x ** (theta - 1))


def cholesky(P: SpdMatrix) -> LowerTri:
    """
    The Cholesky factor ``L`` with positive diagonal and ``L Lᵀ = P``.

    :raise NotPositiveDefinite: With the index of the first bad pivot.
    """
    return LowerTri(_potrf(P.entries))


def _relative_backward_error(residual: FloatArray, *terms: FloatArray) -> float:
    scale = max(
        max(float(np.linalg.norm(t)) for t in terms), np.finfo(np.float64).tiny
    )
    return float(np.linalg.norm(residual)) / scale


def lyapunov(P: SpdMatrix, V: SymMatrix) -> SymMatrix:
    """
    Solve the Lyapunov equation ``P X + X P = V`` for symmetric ``X``.

    This is the operator ``L_P[V]`` of the Bures-Wasserstein metric.
    """
    p, v = P.entries, V.entries
    x = solve_continuous_lyapunov(p, v)
    x = (x + x.T) / 2
    px = p @ x
    error = _relative_backward_error(px + px.T - v, v, px)
    if error > LYAPUNOV_RESIDUAL_TOLERANCE:
        raise NumericFailure("lyapunov", error)
    return SymMatrix(x)


def gen_lyapunov(P: SpdMatrix, M: SpdMatrix, V: SymMatrix) -> SymMatrix:
    """
    Solve the generalized Lyapunov equation ``M X P + P X M = V``.

    Multiplying through by ``M⁻¹`` on both sides turns this into the
    Sylvester equation ``(M⁻¹P) X + X (P M⁻¹) = M⁻¹ V M⁻¹``.

    :raise NumericFailure: If ``M`` is too ill-conditioned or the solution
        does not satisfy the equation to the required accuracy.
    """
    p, m, v = P.entries, M.entries, V.entries
    mlam = np.linalg.eigvalsh(m)
    condition = float(mlam[-1] / mlam[0])
    if condition > GEN_LYAPUNOV_CONDITION_LIMIT:
        raise NumericFailure("gen_lyapunov", float("inf"), condition)
    a = solve(m, p, assume_a="pos")
    q = solve(m, solve(m, v, assume_a="pos").T, assume_a="pos").T
    x = solve_sylvester(a, a.T, q)
    x = (x + x.T) / 2
    mxp = m @ x @ p
    error = _relative_backward_error(mxp + mxp.T - v, v, mxp)
    if error > LYAPUNOV_RESIDUAL_TOLERANCE:
        raise NumericFailure("gen_lyapunov", error, condition)
    return SymMatrix(x)


def newton_schulz_sqrt(P: SpdMatrix, iters: int) -> SpdMatrix:
    """
    Approximate ``P^{1/2}`` with the coupled Newton-Schulz iteration.

    The input is divided by its spectral norm first, which puts every
    eigenvalue in ``(0, 1]`` where the iteration converges and leaves the
    identity fixed, and the result is multiplied by the square root of the
    norm afterwards.

    :param iters: The number of iterations to run, at least one.

    :raise NumericFailure: If the residual ``‖I - Z Y‖`` grows.
    """
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    a = P.entries
    eye = np.eye(P.n)
    scale = float(np.linalg.norm(a, 2))
    y = a / scale
    z = eye
    previous = float(np.linalg.norm(eye - y))
    for _ in range(iters):
        t = 0.5 * (3.0 * eye - z @ y)
        y = y @ t
        z = t @ z
        residual = float(np.linalg.norm(eye - z @ y))
        if not np.isfinite(residual) or (
            residual > previous * (1 + 1e-6) and residual > 1e-8
        ):
            raise NumericFailure("newton_schulz_sqrt", residual)
        previous = residual
    return SpdMatrix(y * np.sqrt(scale))


def _loewner(lam: FloatArray, f: ScalarFunction, fprime: ScalarFunction) -> FloatArray:
    """
    The first divided difference matrix of ``f`` at ``lam``.
    """
    fl = np.asarray(f(lam), dtype=np.float64)
    li = lam[:, None]
    lj = lam[None, :]
    diff = li - lj
    close = np.abs(diff) < DIVIDED_DIFFERENCE_TOLERANCE * np.maximum(
        np.abs(li), np.abs(lj)
    )
    safe = np.where(close, 1.0, diff)
    divided = (fl[:, None] - fl[None, :]) / safe
    derivative = np.asarray(fprime((li + lj) / 2), dtype=np.float64)
    return np.where(close, derivative, divided)


def dmat_fun(
    P: SpdMatrix, f: ScalarFunction, fprime: ScalarFunction, V: SymMatrix
) -> SymMatrix:
    """
    The differential of ``P ↦ f(P)`` at ``P`` applied to ``V``.

    This map is self-adjoint with respect to the Frobenius inner product.
    """
    eig = sym_eig(P)
    K = _loewner(eig.lam, f, fprime)
    return SymMatrix(eig.from_eigenbasis(K * eig.to_eigenbasis(V.entries)))


def dmat_fun_inv(
    P: SpdMatrix, f: ScalarFunction, fprime: ScalarFunction, V: SymMatrix
) -> SymMatrix:
    """
    The inverse of ``dmat_fun(P, f, fprime, ·)`` applied to ``V``.

    :raise DomainError: If the differential is singular.
    """
    eig = sym_eig(P)
    K = _loewner(eig.lam, f, fprime)
    if np.any(K == 0) or not np.all(np.isfinite(K)):
        raise DomainError("dmat_fun_inv", float(np.min(np.abs(K))))
    return SymMatrix(eig.from_eigenbasis(eig.to_eigenbasis(V.entries) / K))


def dmlog(P: SpdMatrix, V: SymMatrix) -> SymMatrix:
    return dmat_fun(P, *log_function(), V)


def dmpow(P: SpdMatrix, theta: float, V: SymMatrix) -> SymMatrix:
    return dmat_fun(P, *power_function(theta), V)


def dmpow_inv(P: SpdMatrix, theta: float, V: SymMatrix) -> SymMatrix:
    return dmat_fun_inv(P, *power_function(theta), V)


def _phi(x: FloatArray) -> FloatArray:
    """
    Keep the strictly lower part and half of the diagonal.
    """
    return np.tril(x, k=-1) + np.diag(np.diag(x)) / 2


def dchol(P: SpdMatrix, V: SymMatrix) -> LowerTri:
    """
    The differential of the Cholesky map at ``P`` applied to ``V``:
    ``L Φ(L⁻¹ V L⁻ᵀ)`` with ``L = chol(P)``.
    """
    L = _potrf(P.entries)
    x = solve_triangular(L, V.entries, lower=True)
    x = solve_triangular(L, x.T, lower=True).T
    return LowerTri(L @ _phi(x))


def dchol_adjoint(P: SpdMatrix, G: FloatArray) -> SymMatrix:
    """
    The Frobenius adjoint of ``dchol(P, ·)`` applied to a gradient ``G`` with
    respect to the Cholesky factor.

    :return: ``sym(L⁻ᵀ Φ(Lᵀ G) L⁻¹)``, the gradient with respect to ``P``.
    """
    L = _potrf(P.entries)
    y = _phi(L.T @ G)
    y = solve_triangular(L, y, lower=True, trans="T")
    y = solve_triangular(L, y.T, lower=True, trans="T").T
    return SymMatrix((y + y.T) / 2)


def strict_lower(X: MatrixLike) -> FloatArray:
    """
    ``⌊X⌋``, the strictly lower triangular part.
    """
    return np.tril(_entries(X), k=-1)


def diag_part(X: MatrixLike) -> FloatArray:
    """
    ``D(X)``, the diagonal part as a diagonal matrix.
    """
    return np.diag(np.diag(_entries(X)))


def dlog_diag(D: MatrixLike) -> FloatArray:
    """
    The elementwise logarithm of the diagonal, as a diagonal matrix.

    :raise DomainError: If a diagonal entry is not positive.
    """
    d = np.diag(_entries(D))
    if np.any(d <= 0):
        raise DomainError("dlog_diag", float(d[np.argmax(d <= 0)]))
    return np.diag(np.log(d))


def vec_sym(S: SymMatrix) -> FloatArray:
    """
    The full row-major ``n²`` flattening.
    """
    return S.entries.flatten()
