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
Parameterized Riemannian metrics on the manifold of SPD matrices.

Seven families are supported, described by a ``MetricSpec``:

* ``LEM`` - the (α,β) log-Euclidean metric.
* ``AIM`` - the (θ,α,β) affine-invariant metric.
* ``EM`` - the (θ,α,β) power-Euclidean metric.
* ``MPEM`` - the mixed-power-Euclidean metric with powers (θ₁, θ₂).
* ``LCM`` - the θ log-Cholesky metric.
* ``BWM`` - the θ Bures-Wasserstein metric.
* ``GBWM`` - the (2θ, M) generalized Bures-Wasserstein metric.

Every deformed family is the pullback of its undeformed ("base") version by
the matrix power ``P ↦ P^p`` scaled by ``1/p²``, where ``p = θ`` except for
the Bures-Wasserstein families where ``p = 2θ``.  Logarithms of a pullback
metric are pulled back with the inverse differential of the power map.
"""

from __future__ import annotations

__all__ = [
    "MetricFamily",
    "MetricSpec",
    "NonCommuting",
    "OutOfDomain",
    "TangentAt",
    "UnsupportedDistance",
    "UnsupportedMetric",
    "gbwm_aim_check",
    "geodesic_dist",
    "inner_ab",
    "metric_at",
    "rieexp_at",
    "rieexp_identity",
    "rielog_at",
    "rielog_identity",
]

from enum import Enum
from typing import Optional

import numpy as np
from attrs import define, field, frozen

from ._types import FloatArray
from .config import ConfigError
from .symlin import (
    NotPositiveDefinite,
    SpdMatrix,
    SymMatrix,
    cholesky,
    dchol,
    dlog_diag,
    dmat_fun_inv,
    dmlog,
    dmpow,
    dmpow_inv,
    gen_lyapunov,
    identity,
    log_function,
    lyapunov,
    mexp,
    mlog,
    mpow,
    strict_lower,
)

# Relative commutator size above which two matrices are considered not to
# commute.
COMMUTATOR_TOLERANCE = 1e-8


class MetricFamily(Enum):
    LEM = "LEM"
    AIM = "AIM"
    EM = "EM"
    MPEM = "MPEM"
    LCM = "LCM"
    BWM = "BWM"
    GBWM = "GBWM"


# Families whose metric tensor accepts an (α, β) inner product.
_AB_FAMILIES = frozenset({MetricFamily.LEM, MetricFamily.AIM, MetricFamily.EM})

# Families deformed through pow_{2θ} with a 1/(4θ²) scale.
_BURES_FAMILIES = frozenset({MetricFamily.BWM, MetricFamily.GBWM})


@define(auto_exc=False, str=True)
class OutOfDomain(Exception):
    """
    A tangent vector lies outside the domain of a Riemannian exponential.

    :ivar eigenvalue: The smallest eigenvalue of the matrix that had to be
        positive definite.
    """

    eigenvalue: float


@define(auto_exc=False, str=True)
class NonCommuting(Exception):
    """
    An operation defined only for commuting matrices was given a
    non-commuting pair.

    :ivar commutator: The relative Frobenius norm of ``PQ - QP``.
    """

    commutator: float


@define(auto_exc=False, str=True)
class UnsupportedDistance(Exception):
    """
    No closed-form geodesic distance is available for this metric and
    these points.
    """

    family: str
    reason: str


@define(auto_exc=False, str=True)
class UnsupportedMetric(Exception):
    """
    An operation is not implemented for this metric.
    """

    family: str
    operation: str


@frozen(eq=False)
class MetricSpec:
    """
    One member of one of the seven metric families.

    :ivar family: The family.

    :ivar theta: The deformation power.  For ``MPEM`` this is θ₁.  ``LEM``
        ignores it.

    :ivar alpha: The weight of the Frobenius term of the (α,β) inner
        product.

    :ivar beta: The weight of the trace term of the (α,β) inner product.

    :ivar theta2: θ₂ of ``MPEM``; ``None`` for every other family.

    :ivar M: The fixed SPD matrix of ``GBWM``.  When ``None`` the matrix is
        tied to the base point (``M = P^{2θ}`` at ``P``).
    """

    family: MetricFamily
    theta: float = 1.0
    alpha: float = 1.0
    beta: float = 0.0
    theta2: Optional[float] = None
    M: Optional[SpdMatrix] = None

    def __attrs_post_init__(self) -> None:
        if not np.isfinite(self.theta) or self.theta == 0:
            raise ConfigError("theta", f"must be finite and nonzero, got {self.theta}")
        if not self.alpha > 0:
            raise ConfigError("alpha", f"must be positive, got {self.alpha}")
        if self.family is MetricFamily.MPEM:
            if self.theta2 is None or self.theta2 == 0:
                raise ConfigError("theta2", "MPEM requires a nonzero theta2")
            if self.theta + self.theta2 == 0:
                raise ConfigError("theta2", "MPEM requires theta1 + theta2 != 0")
        elif self.theta2 is not None:
            raise ConfigError("theta2", f"only MPEM takes theta2, not {self.family.value}")
        if self.M is not None and self.family is not MetricFamily.GBWM:
            raise ConfigError("M", f"only GBWM takes M, not {self.family.value}")
        if self.family not in _AB_FAMILIES and (self.alpha, self.beta) != (1.0, 0.0):
            raise ConfigError(
                "alpha",
                f"{self.family.value} supports only (alpha, beta) = (1, 0)",
            )

    @property
    def theta0(self) -> float:
        """
        The effective power of the logarithm at the identity.
        """
        if self.theta2 is not None:
            return (self.theta + self.theta2) / 2
        return self.theta

    @property
    def power(self) -> float:
        """
        The power ``p`` of the map this metric is pulled back through.
        """
        if self.family in _BURES_FAMILIES:
            return 2 * self.theta
        return self.theta

    def check_dimension(self, n: int) -> None:
        """
        :raise ConfigError: If the (α,β) inner product is not positive
            definite on ``n × n`` symmetric matrices or ``M`` has the wrong
            size.
        """
        _check_ab(n, self.alpha, self.beta)
        if self.M is not None and self.M.n != n:
            raise ConfigError("M", f"expected {n}x{n}, got {self.M.n}x{self.M.n}")


@frozen(eq=False)
class TangentAt:
    """
    A tangent vector together with its base point.
    """

    base: SpdMatrix
    vec: SymMatrix = field()

    @vec.validator
    def _same_size(self, attribute: object, value: SymMatrix) -> None:
        if value.n != self.base.n:
            raise ValueError(f"vec is {value.n}x{value.n}, base is {self.base.n}x{self.base.n}")


def _check_ab(n: int, alpha: float, beta: float) -> None:
    if not alpha > 0:
        raise ConfigError("alpha", f"must be positive, got {alpha}")
    if not alpha + n * beta > 0:
        raise ConfigError("beta", f"alpha + n*beta must be positive, got {alpha + n * beta}")


def _inner_ab(v: FloatArray, w: FloatArray, alpha: float, beta: float) -> float:
    return float(alpha * np.sum(v * w) + beta * np.trace(v) * np.trace(w))


def inner_ab(V: SymMatrix, W: SymMatrix, alpha: float, beta: float) -> float:
    """
    The O(n)-invariant inner product ``α⟨V, W⟩ + β tr(V) tr(W)``.

    :raise ConfigError: If ``α ≤ 0`` or ``α + nβ ≤ 0``.
    """
    _check_ab(V.n, alpha, beta)
    return _inner_ab(V.entries, W.entries, alpha, beta)


def _norm_ab(v: FloatArray, alpha: float, beta: float) -> float:
    return float(np.sqrt(max(_inner_ab(v, v, alpha, beta), 0.0)))


def _congruence(C: SymMatrix, X: SymMatrix) -> FloatArray:
    return C.entries @ X.entries @ C.entries


def _gbwm_m(spec: MetricSpec, base: SpdMatrix) -> SpdMatrix:
    return spec.M if spec.M is not None else base


def _base_metric(spec: MetricSpec, P: SpdMatrix, V: SymMatrix, W: SymMatrix) -> float:
    family = spec.family
    if family is MetricFamily.LEM:
        return _inner_ab(dmlog(P, V).entries, dmlog(P, W).entries, spec.alpha, spec.beta)
    if family is MetricFamily.AIM:
        C = mpow(P, -0.5)
        return _inner_ab(_congruence(C, V), _congruence(C, W), spec.alpha, spec.beta)
    if family is MetricFamily.EM:
        return _inner_ab(V.entries, W.entries, spec.alpha, spec.beta)
    if family is MetricFamily.LCM:
        ldiag = np.diag(cholesky(P).entries)
        v = dchol(P, V).entries
        w = dchol(P, W).entries
        return float(
            np.sum(strict_lower(v) * strict_lower(w)) + np.sum(np.diag(v) * np.diag(w) / ldiag**2)
        )
    if family is MetricFamily.BWM:
        return 0.5 * float(np.sum(lyapunov(P, V).entries * W.entries))
    if family is MetricFamily.GBWM:
        X = gen_lyapunov(P, _gbwm_m(spec, P), V)
        return 0.5 * float(np.sum(X.entries * W.entries))
    raise UnsupportedMetric(family.value, "metric_at")


def metric_at(spec: MetricSpec, P: SpdMatrix, V: SymMatrix, W: SymMatrix) -> float:
    """
    Evaluate the metric tensor ``g_P(V, W)``.
    """
    spec.check_dimension(P.n)
    if spec.family is MetricFamily.MPEM:
        assert spec.theta2 is not None
        t1, t2 = spec.theta, spec.theta2
        return float(np.sum(dmpow(P, t1, V).entries * dmpow(P, t2, W).entries)) / (t1 * t2)
    if spec.family is MetricFamily.LEM or spec.power == 1:
        return _base_metric(spec, P, V, W)
    p = spec.power
    return _base_metric(spec, mpow(P, p), dmpow(P, p, V), dmpow(P, p, W)) / p**2


def _lcm_chart(L: FloatArray) -> FloatArray:
    """
    ``⌊L⌋ + ⌊L⌋ᵀ + 2 dlog(D(L))``: the log-Cholesky image of a factor.
    """
    lower = strict_lower(L)
    return lower + lower.T + 2 * dlog_diag(L)


def rielog_identity(spec: MetricSpec, P: SpdMatrix) -> SymMatrix:
    """
    The Riemannian logarithm at the identity, in closed form.
    """
    spec.check_dimension(P.n)
    family = spec.family
    if family in (MetricFamily.LEM, MetricFamily.AIM):
        return mlog(P)
    if family is MetricFamily.LCM:
        theta = spec.theta
        return SymMatrix(_lcm_chart(cholesky(mpow(P, theta)).entries) / theta)
    if family is MetricFamily.GBWM and spec.M is not None:
        p = spec.power
        return _bures_log(spec.M, identity(P.n), mpow(P, p)).scaled(1 / p)
    t0 = spec.theta0
    return SymMatrix((mpow(P, t0).entries - np.eye(P.n)) / t0)


def _require_spd(a: FloatArray) -> SpdMatrix:
    try:
        return SpdMatrix(a)
    except NotPositiveDefinite:
        raise OutOfDomain(float(np.linalg.eigvalsh((a + a.T) / 2)[0]))


def rieexp_identity(spec: MetricSpec, V: SymMatrix) -> SpdMatrix:
    """
    The Riemannian exponential at the identity; the inverse of
    ``rielog_identity``.

    :raise OutOfDomain: For the power families, if ``I + θ₀V`` is not
        positive definite.
    """
    spec.check_dimension(V.n)
    family = spec.family
    n = V.n
    if family in (MetricFamily.LEM, MetricFamily.AIM):
        return mexp(V)
    if family is MetricFamily.LCM:
        theta = spec.theta
        x = theta * V.entries
        L = strict_lower(x) + np.diag(np.exp(np.diag(x) / 2))
        return mpow(SpdMatrix(L @ L.T), 1 / theta)
    if family is MetricFamily.GBWM and spec.M is not None:
        p = spec.power
        return mpow(_bures_exp(spec.M, identity(n), V.scaled(p)), 1 / p)
    t0 = spec.theta0
    return mpow(_require_spd(np.eye(n) + t0 * V.entries), 1 / t0)


def _bw_log(P: SpdMatrix, Q: SpdMatrix) -> SymMatrix:
    """
    ``(PQ)^{1/2} + (QP)^{1/2} - 2P``.
    """
    half = mpow(P, 0.5).entries
    inv_half = mpow(P, -0.5).entries
    root = mpow(SpdMatrix(half @ Q.entries @ half), 0.5).entries
    z = half @ root @ inv_half
    return SymMatrix(z + z.T - 2 * P.entries)


def _bw_exp(P: SpdMatrix, X: SymMatrix) -> SpdMatrix:
    """
    ``P + X + L_P[X] P L_P[X]``, defined while ``I + L_P[X]`` is positive
    definite.
    """
    L = lyapunov(P, X).entries
    _require_spd(np.eye(P.n) + L)
    return SpdMatrix(P.entries + X.entries + L @ P.entries @ L)


def _bw_dist(P: SpdMatrix, Q: SpdMatrix) -> float:
    half = mpow(P, 0.5).entries
    root = mpow(SpdMatrix(half @ Q.entries @ half), 0.5)
    return float(np.sqrt(max(P.trace() + Q.trace() - 2 * root.trace(), 0.0)))


def _bures_log(M: SpdMatrix, P: SpdMatrix, Q: SpdMatrix) -> SymMatrix:
    """
    The generalized Bures-Wasserstein logarithm, as the pullback of the
    Bures-Wasserstein one by ``X ↦ M^{-1/2} X M^{-1/2}``.
    """
    C = mpow(M, -0.5)
    D = mpow(M, 0.5)
    log = _bw_log(SpdMatrix(_congruence(C, P)), SpdMatrix(_congruence(C, Q)))
    return SymMatrix(_congruence(D, log))


def _bures_exp(M: SpdMatrix, P: SpdMatrix, V: SymMatrix) -> SpdMatrix:
    C = mpow(M, -0.5)
    D = mpow(M, 0.5)
    q = _bw_exp(SpdMatrix(_congruence(C, P)), SymMatrix(_congruence(C, V)))
    return SpdMatrix(_congruence(D, q))


def _check_commuting(P: SpdMatrix, Q: SpdMatrix) -> None:
    p, q = P.entries, Q.entries
    commutator = float(np.linalg.norm(p @ q - q @ p)) / (P.norm() * Q.norm())
    if commutator > COMMUTATOR_TOLERANCE:
        raise NonCommuting(commutator)


def _base_log(spec: MetricSpec, P: SpdMatrix, Q: SpdMatrix) -> SymMatrix:
    family = spec.family
    if family is MetricFamily.AIM:
        half = mpow(P, 0.5)
        inv_half = mpow(P, -0.5)
        inner = mlog(SpdMatrix(_congruence(inv_half, Q)))
        return SymMatrix(_congruence(half, inner))
    if family is MetricFamily.EM:
        return Q - P
    if family is MetricFamily.LCM:
        L = cholesky(P).entries
        K = cholesky(Q).entries
        dl = np.diag(L)
        x = strict_lower(K) - strict_lower(L) + np.diag(dl * np.log(np.diag(K) / dl))
        y = x @ L.T
        return SymMatrix(y + y.T)
    if family is MetricFamily.BWM:
        return _bw_log(P, Q)
    if family is MetricFamily.GBWM:
        return _bures_log(_gbwm_m(spec, P), P, Q)
    raise UnsupportedMetric(family.value, "rielog_at")


def rielog_at(spec: MetricSpec, P: SpdMatrix, Q: SpdMatrix) -> TangentAt:
    """
    The Riemannian logarithm of ``Q`` at ``P``.

    :raise NonCommuting: For ``MPEM`` when ``P`` and ``Q`` do not commute.
    """
    spec.check_dimension(P.n)
    family = spec.family
    if family is MetricFamily.LEM:
        vec = dmat_fun_inv(P, *log_function(), mlog(Q) - mlog(P))
    elif family is MetricFamily.MPEM:
        _check_commuting(P, Q)
        t0 = spec.theta0
        vec = dmpow_inv(P, t0, mpow(Q, t0) - mpow(P, t0))
    elif spec.power == 1:
        vec = _base_log(spec, P, Q)
    else:
        p = spec.power
        vec = dmpow_inv(P, p, _base_log(spec, mpow(P, p), mpow(Q, p)))
    return TangentAt(P, vec)


def rieexp_at(spec: MetricSpec, P: SpdMatrix, V: SymMatrix) -> SpdMatrix:
    """
    The Riemannian exponential at a general base point, for the ``LEM``,
    ``AIM`` and ``EM`` families.

    :raise OutOfDomain: For ``EM`` if the step leaves the cone in the
        power-deformed coordinates.

    :raise UnsupportedMetric: For any other family.
    """
    spec.check_dimension(P.n)
    family = spec.family
    if family is MetricFamily.LEM:
        return mexp(mlog(P) + dmlog(P, V))
    if family not in (MetricFamily.AIM, MetricFamily.EM):
        raise UnsupportedMetric(family.value, "rieexp_at")
    p = spec.power
    if p != 1:
        P, V = mpow(P, p), dmpow(P, p, V)
    if family is MetricFamily.AIM:
        half = mpow(P, 0.5)
        inv_half = mpow(P, -0.5)
        moved = SpdMatrix(_congruence(half, mexp(SymMatrix(_congruence(inv_half, V)))))
    else:
        moved = _require_spd(P.entries + V.entries)
    return moved if p == 1 else mpow(moved, 1 / p)


def geodesic_dist(spec: MetricSpec, P: SpdMatrix, Q: SpdMatrix) -> float:
    """
    The geodesic distance between ``P`` and ``Q``.

    :raise UnsupportedDistance: For ``GBWM`` with a base-point-tied ``M`` and
        for ``MPEM`` with non-commuting points.
    """
    spec.check_dimension(P.n)
    family = spec.family
    alpha, beta = spec.alpha, spec.beta
    scale = 1 / abs(spec.theta)
    if family is MetricFamily.LEM:
        return _norm_ab(mlog(P).entries - mlog(Q).entries, alpha, beta)
    if family is MetricFamily.AIM:
        p, q = mpow(P, spec.theta), mpow(Q, spec.theta)
        inner = mlog(SpdMatrix(_congruence(mpow(p, -0.5), q)))
        return scale * _norm_ab(inner.entries, alpha, beta)
    if family is MetricFamily.EM:
        diff = mpow(P, spec.theta).entries - mpow(Q, spec.theta).entries
        return scale * _norm_ab(diff, alpha, beta)
    if family is MetricFamily.MPEM:
        try:
            _check_commuting(P, Q)
        except NonCommuting as e:
            raise UnsupportedDistance(
                family.value, f"points do not commute (relative commutator {e.commutator})"
            )
        t0 = spec.theta0
        return float(np.linalg.norm(mpow(P, t0).entries - mpow(Q, t0).entries)) / abs(t0)
    if family is MetricFamily.LCM:
        L = cholesky(mpow(P, spec.theta)).entries
        K = cholesky(mpow(Q, spec.theta)).entries
        lower = np.linalg.norm(strict_lower(K) - strict_lower(L))
        diag = np.linalg.norm(np.log(np.diag(K)) - np.log(np.diag(L)))
        return scale * float(np.hypot(lower, diag))
    p, q = mpow(P, spec.power), mpow(Q, spec.power)
    if family is MetricFamily.GBWM:
        if spec.M is None:
            raise UnsupportedDistance(
                family.value, "M tied to the base point does not define a fixed metric"
            )
        C = mpow(spec.M, -0.5)
        p, q = SpdMatrix(_congruence(C, p)), SpdMatrix(_congruence(C, q))
    return scale / 2 * _bw_dist(p, q)


def gbwm_aim_check(
    theta: float, P: SpdMatrix, V: SymMatrix, W: SymMatrix
) -> tuple[float, float]:
    """
    Evaluate both sides of the identity relating the power-deformed GBWM
    with ``M = P^{2θ}`` to a quarter of the ``2θ``-deformed AIM.

    :return: ``(g^{GBWM}_P(V, W), g^{AIM}_P(V, W) / 4)``.
    """
    gbwm = MetricSpec(MetricFamily.GBWM, theta=theta)
    aim = MetricSpec(MetricFamily.AIM, theta=2 * theta)
    return metric_at(gbwm, P, V, W), metric_at(aim, P, V, W) / 4
