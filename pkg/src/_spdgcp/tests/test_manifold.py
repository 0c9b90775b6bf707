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
Tests for ``_spdgcp.manifold``.
"""

from math import log

import numpy as np
from hypothesis import assume, given
from hypothesis.strategies import floats, sampled_from
from testtools import TestCase
from testtools.matchers import AllMatch, Equals, GreaterThan, LessThan

from ..config import ConfigError
from ..manifold import (
    MetricFamily,
    MetricSpec,
    NonCommuting,
    OutOfDomain,
    TangentAt,
    UnsupportedDistance,
    UnsupportedMetric,
    gbwm_aim_check,
    geodesic_dist,
    inner_ab,
    metric_at,
    rieexp_at,
    rieexp_identity,
    rielog_at,
    rielog_identity,
)
from ..symlin import SpdMatrix, SymMatrix, dmpow, identity, mlog, mpow
from .matchers import close_to_array, raises, raises_with
from .strategies import metric_specs, spd_matrices, sym_matrices, thetas

_EXPONENTIAL_FAMILIES = [MetricFamily.LEM, MetricFamily.AIM, MetricFamily.EM]

# Families with a closed-form distance for arbitrary point pairs.
_DISTANCE_FAMILIES = [
    MetricFamily.LEM,
    MetricFamily.AIM,
    MetricFamily.EM,
    MetricFamily.LCM,
    MetricFamily.BWM,
]


def _diag(*values: float) -> SpdMatrix:
    return SpdMatrix(np.diag(values))


class MetricSpecTests(TestCase):
    """
    Tests for ``MetricSpec`` parameter validation.
    """

    def test_zero_theta(self) -> None:
        """
        A zero deformation power is rejected.
        """
        self.assertThat(
            lambda: MetricSpec(MetricFamily.EM, theta=0.0),
            raises_with(ConfigError, option=Equals("theta")),
        )

    def test_mpem_needs_theta2(self) -> None:
        """
        ``MPEM`` requires a second power.
        """
        self.assertThat(
            lambda: MetricSpec(MetricFamily.MPEM, theta=0.5),
            raises_with(ConfigError, option=Equals("theta2")),
        )

    def test_mpem_opposite_powers(self) -> None:
        """
        ``MPEM`` powers which cancel out are rejected.
        """
        self.assertThat(
            lambda: MetricSpec(MetricFamily.MPEM, theta=0.5, theta2=-0.5),
            raises(ConfigError),
        )

    def test_theta2_elsewhere(self) -> None:
        """
        Only ``MPEM`` accepts a second power.
        """
        self.assertThat(
            lambda: MetricSpec(MetricFamily.EM, theta=0.5, theta2=1.0),
            raises(ConfigError),
        )

    def test_m_elsewhere(self) -> None:
        """
        Only ``GBWM`` accepts a fixed ``M``.
        """
        self.assertThat(
            lambda: MetricSpec(MetricFamily.BWM, M=identity(2)),
            raises_with(ConfigError, option=Equals("M")),
        )

    def test_ab_only_for_ab_families(self) -> None:
        """
        A non-default (α,β) pair is refused by the families built on the
        plain Frobenius product.
        """
        self.assertThat(
            lambda: MetricSpec(MetricFamily.LCM, alpha=2.0),
            raises(ConfigError),
        )

    def test_mpem_theta0(self) -> None:
        """
        The effective power of ``MPEM`` is the mean of its two powers.
        """
        self.assertThat(
            MetricSpec(MetricFamily.MPEM, theta=0.5, theta2=1.5).theta0,
            Equals(1.0),
        )

    def test_bures_power(self) -> None:
        """
        The Bures families are pulled back through ``pow_{2θ}``.
        """
        self.assertThat(MetricSpec(MetricFamily.BWM, theta=0.25).power, Equals(0.5))

    def test_dimension_mismatch(self) -> None:
        """
        A ``GBWM`` matrix of the wrong size is refused.
        """
        spec = MetricSpec(MetricFamily.GBWM, M=identity(3))
        self.assertThat(lambda: spec.check_dimension(2), raises(ConfigError))


class TangentAtTests(TestCase):
    """
    Tests for ``TangentAt``.
    """

    def test_size_mismatch(self) -> None:
        """
        A vector of a different size from its base point is rejected.
        """
        self.assertThat(
            lambda: TangentAt(identity(2), SymMatrix(np.eye(3))),
            raises(ValueError),
        )


class InnerProductTests(TestCase):
    """
    Tests for ``inner_ab``.
    """

    def test_frobenius(self) -> None:
        """
        ``inner_ab(I₂, I₂, 1, 0) = 2``.
        """
        self.assertThat(inner_ab(identity(2), identity(2), 1.0, 0.0), Equals(2.0))

    def test_trace_term(self) -> None:
        """
        ``inner_ab(I₂, I₂, 1, 1) = 2 + 4``.
        """
        self.assertThat(inner_ab(identity(2), identity(2), 1.0, 1.0), Equals(6.0))

    def test_alpha_nonpositive(self) -> None:
        """
        ``α ≤ 0`` is rejected.
        """
        self.assertThat(
            lambda: inner_ab(identity(2), identity(2), 0.0, 0.0),
            raises_with(ConfigError, option=Equals("alpha")),
        )

    def test_beta_too_negative(self) -> None:
        """
        ``α + nβ ≤ 0`` is rejected.
        """
        self.assertThat(
            lambda: inner_ab(identity(2), identity(2), 1.0, -0.5),
            raises_with(ConfigError, option=Equals("beta")),
        )

    @given(sym_matrices(3), floats(0.1, 3.0), floats(-0.3, 3.0))
    def test_positive(self, V: SymMatrix, alpha: float, beta: float) -> None:
        """
        The inner product is positive definite whenever ``α + nβ > 0``.
        """
        self.assertThat(inner_ab(V, V, alpha, beta), GreaterThan(0.0))


class MetricTests(TestCase):
    """
    Tests for ``metric_at``.
    """

    @given(sym_matrices(3), sym_matrices(3))
    def test_lem_identity(self, V: SymMatrix, W: SymMatrix) -> None:
        """
        At the identity the log-Euclidean metric is the Frobenius product.
        """
        spec = MetricSpec(MetricFamily.LEM)
        self.assertThat(
            metric_at(spec, identity(3), V, W),
            close_to_array(float(np.sum(V.entries * W.entries)), rtol=1e-12, atol=1e-15),
        )

    @given(sym_matrices(3), sym_matrices(3))
    def test_bwm_identity(self, V: SymMatrix, W: SymMatrix) -> None:
        """
        At the identity the Bures-Wasserstein metric is a quarter of the
        Frobenius product.
        """
        spec = MetricSpec(MetricFamily.BWM, theta=0.5)
        self.assertThat(
            metric_at(spec, identity(3), V, W),
            close_to_array(float(np.sum(V.entries * W.entries)) / 4, rtol=1e-10, atol=1e-15),
        )

    @given(spd_matrices(n=3), sym_matrices(3), thetas())
    def test_deformed_euclidean(self, P: SpdMatrix, V: SymMatrix, theta: float) -> None:
        """
        The power-deformed Euclidean metric is the Frobenius norm of the
        differential of ``P^θ`` divided by ``θ²``.
        """
        spec = MetricSpec(MetricFamily.EM, theta=theta)
        expected = float(np.sum(dmpow(P, theta, V).entries ** 2)) / theta**2
        self.assertThat(metric_at(spec, P, V, V), close_to_array(expected, rtol=1e-10))

    @given(metric_specs(), spd_matrices(n=3), sym_matrices(3))
    def test_positive(self, spec: MetricSpec, P: SpdMatrix, V: SymMatrix) -> None:
        """
        Every family gives a positive squared length to a nonzero vector.
        """
        self.assertThat(metric_at(spec, P, V, V), GreaterThan(0.0))

    @given(metric_specs(), spd_matrices(n=3), sym_matrices(3), sym_matrices(3))
    def test_symmetric(self, spec: MetricSpec, P: SpdMatrix, V: SymMatrix, W: SymMatrix) -> None:
        """
        The metric tensor is symmetric in its two vectors.
        """
        a = metric_at(spec, P, V, W)
        b = metric_at(spec, P, W, V)
        self.assertThat(abs(a - b), LessThan(1e-9 * max(1.0, abs(a))))


class GbwmAimTests(TestCase):
    """
    Tests for ``gbwm_aim_check``.
    """

    def test_identity(self) -> None:
        """
        At the identity with ``θ = 1/2`` and ``V = W = I`` both sides are
        ``n/4``.
        """
        I = identity(3)
        gbwm, aim = gbwm_aim_check(0.5, I, I, I)
        self.assertThat(gbwm, close_to_array(0.75, rtol=1e-12))
        self.assertThat(aim, close_to_array(0.75, rtol=1e-12))

    @given(spd_matrices(n=3), sym_matrices(3), sym_matrices(3), thetas())
    def test_agree(self, P: SpdMatrix, V: SymMatrix, W: SymMatrix, theta: float) -> None:
        """
        The power-deformed GBWM with ``M = P^{2θ}`` is a quarter of the
        ``2θ``-deformed AIM.
        """
        gbwm, aim = gbwm_aim_check(theta, P, V, W)
        self.assertThat(gbwm, close_to_array(aim, rtol=1e-8, atol=1e-12))


class LogIdentityTests(TestCase):
    """
    Tests for ``rielog_identity`` and ``rieexp_identity``.
    """

    @given(metric_specs())
    def test_identity_to_zero(self, spec: MetricSpec) -> None:
        """
        Every family maps the identity to the zero vector.
        """
        self.assertThat(
            rielog_identity(spec, identity(3)).entries,
            close_to_array(np.zeros((3, 3)), atol=1e-14),
        )

    @given(metric_specs())
    def test_zero_to_identity(self, spec: MetricSpec) -> None:
        """
        Every family maps the zero vector to the identity.
        """
        self.assertThat(
            rieexp_identity(spec, SymMatrix(np.zeros((3, 3)))).entries,
            close_to_array(np.eye(3), rtol=1e-14),
        )

    def test_power_euclidean(self) -> None:
        """
        ``(0.5,1,0)-EM`` sends ``diag(4, 1)`` to ``diag(2, 0)``.
        """
        spec = MetricSpec(MetricFamily.EM, theta=0.5)
        self.assertThat(
            rielog_identity(spec, _diag(4.0, 1.0)).entries,
            close_to_array(np.diag([2.0, 0.0]), atol=1e-14),
        )

    def test_power_euclidean_exp(self) -> None:
        """
        ``(0.5,1,0)-EM`` sends ``diag(2, 0)`` back to ``diag(4, 1)``.
        """
        spec = MetricSpec(MetricFamily.EM, theta=0.5)
        self.assertThat(
            rieexp_identity(spec, SymMatrix(np.diag([2.0, 0.0]))).entries,
            close_to_array(np.diag([4.0, 1.0]), rtol=1e-14),
        )

    @given(thetas())
    def test_lcm_diagonal(self, theta: float) -> None:
        """
        On diagonal matrices the log-Cholesky logarithm is the matrix
        logarithm.
        """
        P = _diag(3.0, 0.5, 2.0)
        spec = MetricSpec(MetricFamily.LCM, theta=theta)
        self.assertThat(
            rielog_identity(spec, P).entries,
            close_to_array(mlog(P).entries, rtol=1e-12),
        )

    @given(thetas(), spd_matrices(n=3))
    def test_aim_independent_of_theta(self, theta: float, P: SpdMatrix) -> None:
        """
        The affine-invariant logarithm at the identity is ``mlog`` whatever
        the power.
        """
        spec = MetricSpec(MetricFamily.AIM, theta=theta)
        self.assertThat(
            rielog_identity(spec, P).entries,
            close_to_array(mlog(P).entries, rtol=1e-10, atol=1e-14),
        )

    @given(metric_specs(), sym_matrices(3, max_norm=0.5))
    def test_round_trip(self, spec: MetricSpec, V: SymMatrix) -> None:
        """
        ``rielog_identity ∘ rieexp_identity`` is the identity map inside the
        domain of the exponential.
        """
        self.assertThat(
            rielog_identity(spec, rieexp_identity(spec, V)).entries,
            close_to_array(V.entries, rtol=1e-9, atol=1e-12),
        )

    def test_out_of_domain(self) -> None:
        """
        A power-family vector taking ``I + θV`` out of the cone is refused
        with the offending eigenvalue.
        """
        spec = MetricSpec(MetricFamily.EM, theta=0.5)
        self.assertThat(
            lambda: rieexp_identity(spec, SymMatrix(-4 * np.eye(2))),
            raises_with(OutOfDomain, eigenvalue=close_to_array(-1.0, rtol=1e-12)),
        )

    def test_fixed_m_identity(self) -> None:
        """
        ``GBWM`` with ``M = I`` at the identity matches the
        base-point-tied convention there.
        """
        Q = SpdMatrix(np.array([[2.0, 0.3], [0.3, 1.0]]))
        fixed = MetricSpec(MetricFamily.GBWM, theta=0.5, M=identity(2))
        tied = MetricSpec(MetricFamily.GBWM, theta=0.5)
        self.assertThat(
            rielog_identity(fixed, Q).entries,
            close_to_array(rielog_identity(tied, Q).entries, rtol=1e-10),
        )


class LogAtTests(TestCase):
    """
    Tests for ``rielog_at`` and ``rieexp_at``.
    """

    @given(metric_specs(), spd_matrices(n=3))
    def test_matches_identity(self, spec: MetricSpec, Q: SpdMatrix) -> None:
        """
        At the identity the general logarithm agrees with the closed form.
        """
        at = rielog_at(spec, identity(3), Q)
        self.assertThat(
            at.vec.entries,
            close_to_array(rielog_identity(spec, Q).entries, rtol=1e-10, atol=1e-12),
        )

    @given(metric_specs(), spd_matrices(n=3))
    def test_self_log(self, spec: MetricSpec, P: SpdMatrix) -> None:
        """
        The logarithm of a point at itself is zero.
        """
        self.assertThat(
            rielog_at(spec, P, P).vec.entries,
            close_to_array(np.zeros((3, 3)), atol=1e-9 * P.norm()),
        )

    def test_bwm_identity(self) -> None:
        """
        The Bures-Wasserstein logarithm at the identity is
        ``2(Q^{1/2} - I)``.
        """
        Q = SpdMatrix(np.array([[3.0, 1.0], [1.0, 2.0]]))
        spec = MetricSpec(MetricFamily.BWM, theta=0.5)
        self.assertThat(
            rielog_at(spec, identity(2), Q).vec.entries,
            close_to_array(2 * (mpow(Q, 0.5).entries - np.eye(2)), rtol=1e-12),
        )

    def test_base_point(self) -> None:
        """
        The result carries its base point.
        """
        P = _diag(2.0, 3.0)
        at = rielog_at(MetricSpec(MetricFamily.LEM), P, identity(2))
        self.assertThat(at.base, Equals(P))

    @given(
        sampled_from([MetricFamily.LEM, MetricFamily.AIM]),
        spd_matrices(n=3),
        spd_matrices(n=3),
        floats(0.1, 10.0),
    )
    def test_scaling(self, family: MetricFamily, P: SpdMatrix, Q: SpdMatrix, a: float) -> None:
        """
        Scaling the metric does not change the logarithm.
        """
        base = rielog_at(MetricSpec(family), P, Q).vec.entries
        scaled = rielog_at(MetricSpec(family, alpha=a), P, Q).vec.entries
        self.assertThat(scaled, close_to_array(base, rtol=1e-14, atol=1e-15))

    def test_mpem_commuting(self) -> None:
        """
        ``MPEM`` logarithms between commuting points use the mean power.
        """
        spec = MetricSpec(MetricFamily.MPEM, theta=0.25, theta2=0.75)
        P, Q = _diag(4.0, 1.0), _diag(1.0, 9.0)
        expected = rielog_at(MetricSpec(MetricFamily.EM, theta=0.5), P, Q).vec.entries
        self.assertThat(
            rielog_at(spec, P, Q).vec.entries,
            close_to_array(expected, rtol=1e-12),
        )

    def test_mpem_non_commuting(self) -> None:
        """
        ``MPEM`` refuses a pair of points that do not commute.
        """
        spec = MetricSpec(MetricFamily.MPEM, theta=0.25, theta2=0.75)
        Q = SpdMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        self.assertThat(
            lambda: rielog_at(spec, _diag(4.0, 1.0), Q),
            raises(NonCommuting),
        )

    @given(sampled_from(_EXPONENTIAL_FAMILIES), thetas(), spd_matrices(n=3), spd_matrices(n=3))
    def test_exp_inverts_log(
        self, family: MetricFamily, theta: float, P: SpdMatrix, Q: SpdMatrix
    ) -> None:
        """
        ``rieexp_at`` undoes ``rielog_at``.
        """
        spec = MetricSpec(family, theta=theta)
        V = rielog_at(spec, P, Q).vec
        self.assertThat(
            rieexp_at(spec, P, V).entries,
            close_to_array(Q.entries, rtol=1e-8),
        )

    def test_exp_unsupported(self) -> None:
        """
        ``rieexp_at`` is implemented only for the (α,β) families.
        """
        self.assertThat(
            lambda: rieexp_at(MetricSpec(MetricFamily.LCM), identity(2), SymMatrix(np.eye(2))),
            raises_with(UnsupportedMetric, family=Equals("LCM")),
        )


class DistanceTests(TestCase):
    """
    Tests for ``geodesic_dist``.
    """

    def test_power_euclidean(self) -> None:
        """
        The ``θ = 0.5`` power-Euclidean distance from ``diag(4, 1)`` to ``I``
        is 2.
        """
        spec = MetricSpec(MetricFamily.EM, theta=0.5)
        self.assertThat(
            geodesic_dist(spec, _diag(4.0, 1.0), identity(2)),
            close_to_array(2.0, rtol=1e-14),
        )

    def test_log_euclidean(self) -> None:
        """
        The log-Euclidean distance from ``diag(4, 1)`` to ``I`` is ``ln 4``.
        """
        self.assertThat(
            geodesic_dist(MetricSpec(MetricFamily.LEM), _diag(4.0, 1.0), identity(2)),
            close_to_array(log(4.0), rtol=1e-14),
        )

    @given(metric_specs(), spd_matrices(n=3))
    def test_zero_at_same_point(self, spec: MetricSpec, P: SpdMatrix) -> None:
        """
        The distance from a point to itself is zero.
        """
        assume(spec.family is not MetricFamily.GBWM)
        self.assertThat(geodesic_dist(spec, P, P), LessThan(1e-6 * max(1.0, P.norm())))

    @given(sampled_from(_DISTANCE_FAMILIES), thetas(), spd_matrices(n=3), spd_matrices(n=3))
    def test_symmetric(
        self, family: MetricFamily, theta: float, P: SpdMatrix, Q: SpdMatrix
    ) -> None:
        """
        Distances are symmetric and nonnegative.
        """
        spec = MetricSpec(family, theta=theta)
        forward = geodesic_dist(spec, P, Q)
        backward = geodesic_dist(spec, Q, P)
        self.assertThat([forward, backward], AllMatch(GreaterThan(-1e-15)))
        self.assertThat(forward, close_to_array(backward, rtol=1e-8, atol=1e-12))

    @given(spd_matrices(n=4), spd_matrices(n=4))
    def test_small_power_limit(self, P: SpdMatrix, Q: SpdMatrix) -> None:
        """
        As the power goes to zero the power-Euclidean distance approaches the
        log-Euclidean one.
        """
        lem = geodesic_dist(MetricSpec(MetricFamily.LEM), P, Q)
        assume(lem > 1e-3)
        pem = geodesic_dist(MetricSpec(MetricFamily.EM, theta=1e-3), P, Q)
        self.assertThat(abs(pem - lem) / lem, LessThan(1e-2))

    @given(sampled_from(_EXPONENTIAL_FAMILIES), spd_matrices(n=3), spd_matrices(n=3))
    def test_log_length(self, family: MetricFamily, P: SpdMatrix, Q: SpdMatrix) -> None:
        """
        The distance is the metric length of the logarithm.
        """
        spec = MetricSpec(family, theta=0.5)
        V = rielog_at(spec, P, Q).vec
        length = float(np.sqrt(metric_at(spec, P, V, V)))
        self.assertThat(
            geodesic_dist(spec, P, Q),
            close_to_array(length, rtol=1e-7, atol=1e-12),
        )

    def test_gbwm_tied(self) -> None:
        """
        ``GBWM`` with a base-point-tied ``M`` has no distance.
        """
        self.assertThat(
            lambda: geodesic_dist(MetricSpec(MetricFamily.GBWM), identity(2), _diag(2.0, 1.0)),
            raises(UnsupportedDistance),
        )

    def test_gbwm_identity_m(self) -> None:
        """
        ``GBWM`` with ``M = I`` has the Bures-Wasserstein distance.
        """
        P = _diag(2.0, 1.0)
        Q = SpdMatrix(np.array([[1.0, 0.2], [0.2, 3.0]]))
        fixed = MetricSpec(MetricFamily.GBWM, theta=0.5, M=identity(2))
        self.assertThat(
            geodesic_dist(fixed, P, Q),
            close_to_array(
                geodesic_dist(MetricSpec(MetricFamily.BWM, theta=0.5), P, Q), rtol=1e-12
            ),
        )

    def test_mpem_non_commuting(self) -> None:
        """
        ``MPEM`` has no distance between non-commuting points.
        """
        spec = MetricSpec(MetricFamily.MPEM, theta=0.25, theta2=0.75)
        Q = SpdMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        self.assertThat(
            lambda: geodesic_dist(spec, _diag(4.0, 1.0), Q),
            raises_with(UnsupportedDistance, family=Equals("MPEM")),
        )
