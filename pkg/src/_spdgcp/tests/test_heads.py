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
Tests for ``_spdgcp.heads``.
"""

from math import log

import numpy as np
from hypothesis import assume, given
from hypothesis.strategies import DataObject, data, floats, integers, sampled_from
from numpy.random import PCG64, Generator
from testtools import TestCase
from testtools.matchers import Equals, LessThan

from ..config import ConfigError
from ..heads import (
    DegenerateDirection,
    EuclideanMlrParams,
    HeadKind,
    HeadTag,
    SpdMlrParams,
    anchors_from_params,
    bias_to_anchor,
    emlr_logits,
    emlr_logits_anchor,
    emlr_logits_margin,
    fc_backward,
    fc_logits,
    head_features,
    head_features_vjp,
    head_forward,
    pem_mlr_as_fc,
    softmax_xent,
    softmax_xent_batch,
    spd_mlr_logits_lem,
    spd_mlr_logits_pem,
)
from ..symlin import (
    NumericFailure,
    ShapeError,
    SpdMatrix,
    SymMatrix,
    identity,
    mpow,
    spd_inverse,
    vec_sym,
)
from .matchers import close_to_array, raises, raises_with
from .strategies import head_kinds, seeds, spd_matrices, sym_matrices, thetas


def _rng(seed: int) -> Generator:
    return Generator(PCG64(seed))


def _euclidean(seed: int, classes: int = 4, d: int = 6) -> EuclideanMlrParams:
    rng = _rng(seed)
    return EuclideanMlrParams(rng.standard_normal((classes, d)), rng.standard_normal(classes))


def _spd_params(seed: int, classes: int = 3, n: int = 3) -> SpdMlrParams:
    rng = _rng(seed)
    anchors = []
    directions = []
    for _ in range(classes):
        r = rng.standard_normal((n, n))
        anchors.append(SpdMatrix(r @ r.T / n + np.eye(n)))
        s = rng.standard_normal((n, n))
        directions.append(SymMatrix((s + s.T) / 2))
    return SpdMlrParams(anchors, directions)


class ParamsTests(TestCase):
    """
    Tests for the parameter types.
    """

    def test_zero_direction(self) -> None:
        """
        A zero direction row is refused with its class index.
        """
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        self.assertThat(
            lambda: EuclideanMlrParams(a, np.zeros(2)),
            raises_with(DegenerateDirection, index=Equals(1)),
        )

    def test_bias_shape(self) -> None:
        """
        The bias vector must have one entry per class.
        """
        self.assertThat(
            lambda: EuclideanMlrParams(np.eye(2), np.zeros(3)),
            raises(ShapeError),
        )

    def test_spd_zero_direction(self) -> None:
        """
        A zero SPD direction is refused.
        """
        self.assertThat(
            lambda: SpdMlrParams([identity(2)], [SymMatrix(np.zeros((2, 2)))]),
            raises_with(DegenerateDirection, index=Equals(0)),
        )

    def test_spd_count_mismatch(self) -> None:
        """
        Anchors and directions pair up one to one.
        """
        self.assertThat(
            lambda: SpdMlrParams([identity(2)], []),
            raises(ShapeError),
        )

    def test_head_zero_theta(self) -> None:
        """
        Power heads need a nonzero power.
        """
        self.assertThat(
            lambda: HeadKind(HeadTag.PowEMLR, theta=0.0),
            raises_with(ConfigError, option=Equals("theta")),
        )

    def test_newton_schulz_only_square_root(self) -> None:
        """
        Newton-Schulz iterations are only accepted for ``θ = 1/2``.
        """
        self.assertThat(
            lambda: HeadKind(HeadTag.PowEMLR, theta=0.25, ns_iters=5),
            raises_with(ConfigError, option=Equals("ns_iters")),
        )

    def test_shared_anchor_only_prime(self) -> None:
        """
        Only the shared-anchor head takes a shared anchor.
        """
        self.assertThat(
            lambda: HeadKind(HeadTag.PowEMLR, shared_P=identity(2)),
            raises(ConfigError),
        )


class EuclideanMlrTests(TestCase):
    """
    Tests for the three equivalent forms of Euclidean MLR.
    """

    def test_unit_directions(self) -> None:
        """
        Unit directions with zero bias pick out coordinates.
        """
        params = EuclideanMlrParams(np.eye(3), np.zeros(3))
        self.assertThat(
            list(emlr_logits(np.array([1.0, 0.0, 0.0]), params)),
            Equals([1.0, 0.0, 0.0]),
        )

    @given(seeds(), floats(-10, 10))
    def test_bias_shift(self, seed: int, c: float) -> None:
        """
        Adding a constant to every bias shifts every logit by its negation
        and leaves the loss unchanged.
        """
        params = _euclidean(seed)
        x = _rng(seed + 1).standard_normal(6)
        shifted = EuclideanMlrParams(params.a, params.b + c)
        before = emlr_logits(x, params)
        after = emlr_logits(x, shifted)
        self.assertThat(after, close_to_array(before - c, rtol=1e-12, atol=1e-12))
        self.assertThat(
            softmax_xent(after, 2)[0],
            close_to_array(softmax_xent(before, 2)[0], rtol=1e-10, atol=1e-12),
        )

    def test_bias_to_anchor(self) -> None:
        """
        ``a = (2, 0), b = 4`` has the anchor ``(2, 0)``.
        """
        self.assertThat(
            list(bias_to_anchor(np.array([2.0, 0.0]), 4.0)),
            Equals([2.0, 0.0]),
        )

    def test_zero_bias_anchor(self) -> None:
        """
        A zero bias puts the anchor at the origin.
        """
        self.assertThat(
            list(bias_to_anchor(np.array([1.0, -3.0]), 0.0)),
            Equals([0.0, 0.0]),
        )

    def test_zero_direction_anchor(self) -> None:
        """
        A zero direction has no hyperplane.
        """
        self.assertThat(
            lambda: bias_to_anchor(np.zeros(2), 1.0),
            raises(DegenerateDirection),
        )

    @given(seeds())
    def test_anchor_on_hyperplane(self, seed: int) -> None:
        """
        The anchor satisfies ``⟨a, p⟩ = b``.
        """
        params = _euclidean(seed)
        anchors = anchors_from_params(params)
        self.assertThat(
            np.sum(params.a * anchors, axis=1),
            close_to_array(params.b, rtol=1e-12, atol=1e-12),
        )

    @given(seeds())
    def test_three_forms(self, seed: int) -> None:
        """
        The bias, anchor and margin forms give the same logits.
        """
        params = _euclidean(seed)
        x = _rng(seed + 1).standard_normal(6)
        anchors = anchors_from_params(params)
        expected = emlr_logits(x, params)
        self.assertThat(
            emlr_logits_anchor(x, anchors, params.a),
            close_to_array(expected, rtol=1e-12, atol=1e-12),
        )
        self.assertThat(
            emlr_logits_margin(x, anchors, params.a),
            close_to_array(expected, rtol=1e-12, atol=1e-12),
        )

    def test_zero_anchor(self) -> None:
        """
        Zero anchors reduce to zero-bias logits.
        """
        params = _euclidean(3)
        x = _rng(4).standard_normal(6)
        self.assertThat(
            emlr_logits_anchor(x, np.zeros_like(params.a), params.a),
            close_to_array(params.a @ x, rtol=1e-15),
        )

    def test_on_hyperplane(self) -> None:
        """
        A point on a class hyperplane has a zero logit for that class.
        """
        params = _euclidean(5)
        anchors = anchors_from_params(params)
        self.assertThat(
            emlr_logits_margin(anchors[1], anchors, params.a)[1],
            close_to_array(0.0, atol=1e-12),
        )

    @given(seeds())
    def test_margin_antisymmetric(self, seed: int) -> None:
        """
        Negating a direction negates its logit.
        """
        params = _euclidean(seed)
        x = _rng(seed + 1).standard_normal(6)
        anchors = anchors_from_params(params)
        flipped = params.a.copy()
        flipped[0] = -flipped[0]
        self.assertThat(
            emlr_logits_margin(x, anchors, flipped)[0],
            close_to_array(-emlr_logits_margin(x, anchors, params.a)[0], rtol=1e-12, atol=1e-14),
        )

    def test_shape_mismatch(self) -> None:
        """
        A feature vector of the wrong length is refused.
        """
        self.assertThat(
            lambda: emlr_logits(np.zeros(5), _euclidean(0)),
            raises(ShapeError),
        )


class HeadFeaturesTests(TestCase):
    """
    Tests for ``head_features``, ``head_features_vjp`` and ``head_forward``.
    """

    @given(spd_matrices(n=3), thetas(), seeds())
    def test_pow_scalepow_forward(self, S: SpdMatrix, theta: float, seed: int) -> None:
        """
        Pow-EMLR with ``(A, b)`` and ScalePow-EMLR with ``(θA, b)`` give the
        same logits.
        """
        rng = _rng(seed)
        A = rng.standard_normal((4, 9))
        b = rng.standard_normal(4)
        pow_logits = head_forward(HeadKind(HeadTag.PowEMLR, theta), S, A, b)
        scale_logits = head_forward(HeadKind(HeadTag.ScalePowEMLR, theta), S, theta * A, b)
        self.assertThat(scale_logits, close_to_array(pow_logits, rtol=1e-13, atol=1e-13))

    @given(sampled_from([HeadTag.PowTMLR, HeadTag.LogEMLR, HeadTag.ChoTMLR]), thetas())
    def test_identity_vanishes(self, tag: HeadTag, theta: float) -> None:
        """
        The tangent heads feed zeros to the FC layer at the identity, leaving
        only the biases.
        """
        b = np.array([0.5, -1.0, 2.0])
        A = _rng(0).standard_normal((3, 4))
        self.assertThat(
            head_forward(HeadKind(tag, theta), identity(2), A, b),
            close_to_array(-b, atol=1e-14),
        )

    @given(spd_matrices(n=3), seeds())
    def test_power_one(self, S: SpdMatrix, seed: int) -> None:
        """
        Pow-EMLR at ``θ = 1`` is the FC layer on the flattened covariance.
        """
        rng = _rng(seed)
        A = rng.standard_normal((2, 9))
        b = rng.standard_normal(2)
        self.assertThat(
            head_forward(HeadKind(HeadTag.PowEMLR, 1.0), S, A, b),
            close_to_array(fc_logits(vec_sym(S), A, b), rtol=1e-15),
        )

    @given(spd_matrices(n=3))
    def test_inverse_power(self, S: SpdMatrix) -> None:
        """
        ``θ = -1`` feeds the inverse covariance.
        """
        self.assertThat(
            head_features(HeadKind(HeadTag.PowEMLR, -1.0), S).entries,
            close_to_array(spd_inverse(S).entries, rtol=1e-10),
        )

    def test_newton_schulz(self) -> None:
        """
        The Newton-Schulz square root agrees with the eigendecomposition one.
        """
        S = SpdMatrix(np.array([[3.0, 1.0], [1.0, 2.0]]))
        ns = head_features(HeadKind(HeadTag.PowEMLR, 0.5, ns_iters=20), S)
        self.assertThat(ns.entries, close_to_array(mpow(S, 0.5).entries, rtol=1e-10))

    def test_shared_anchor(self) -> None:
        """
        The shared-anchor head subtracts its anchor and ignores the biases.
        """
        S = SpdMatrix(np.diag([4.0, 9.0]))
        P = SpdMatrix(np.diag([1.0, 4.0]))
        A = np.array([[1.0, 0.0, 0.0, 2.0]])
        kind = HeadKind(HeadTag.PowEMLRPrime, 0.5, shared_P=P)
        self.assertThat(
            head_forward(kind, S, A, np.array([7.0])),
            close_to_array([(2.0 - 1.0) + 2 * (3.0 - 4.0)], atol=1e-14),
        )

    @given(head_kinds(), spd_matrices(n=3), sym_matrices(3), data())
    def test_vjp_finite_difference(
        self, kind: HeadKind, S: SpdMatrix, V: SymMatrix, data: DataObject
    ) -> None:
        """
        The pulled-back gradient matches central differences of the
        features.
        """
        G = _rng(data.draw(seeds())).standard_normal((3, 3))
        h = 1e-5
        plus = head_features(kind, SpdMatrix(S.entries + h * V.entries)).entries
        minus = head_features(kind, SpdMatrix(S.entries - h * V.entries)).entries
        expected = float(np.sum(G * (plus - minus))) / (2 * h)
        actual = float(np.sum(head_features_vjp(kind, S, G).entries * V.entries))
        self.assertThat(abs(actual - expected), LessThan(1e-5 * max(1.0, abs(expected))))


class SpdMlrTests(TestCase):
    """
    Tests for the Riemannian SPD MLR logits.
    """

    def test_lem_at_anchor(self) -> None:
        """
        A point at its class anchor has a zero logit.
        """
        params = _spd_params(0)
        logits = spd_mlr_logits_lem(params.anchors[1], params, 1.0, 0.0)
        self.assertThat(logits[1], close_to_array(0.0, atol=1e-12))

    @given(spd_matrices(n=3), seeds())
    def test_lem_identity_anchor(self, S: SpdMatrix, seed: int) -> None:
        """
        Identity anchors reduce the log-Euclidean MLR to Log-EMLR with zero
        biases.
        """
        params = _spd_params(seed)
        at_identity = SpdMlrParams([identity(3)] * 3, params.directions)
        A = np.stack([vec_sym(D) for D in params.directions])
        self.assertThat(
            spd_mlr_logits_lem(S, at_identity, 1.0, 0.0),
            close_to_array(
                head_forward(HeadKind(HeadTag.LogEMLR), S, A, np.zeros(3)),
                rtol=1e-12,
                atol=1e-12,
            ),
        )

    @given(spd_matrices(n=3), seeds(), floats(-3, 3))
    def test_lem_linear(self, S: SpdMatrix, seed: int, c: float) -> None:
        """
        Scaling a direction scales its logit.
        """
        assume(c != 0)
        params = _spd_params(seed)
        scaled = SpdMlrParams(
            params.anchors,
            (params.directions[0].scaled(c),) + params.directions[1:],
        )
        self.assertThat(
            spd_mlr_logits_lem(S, scaled, 1.0, 0.0)[0],
            close_to_array(c * spd_mlr_logits_lem(S, params, 1.0, 0.0)[0], rtol=1e-12, atol=1e-12),
        )

    def test_pem_hand_value(self) -> None:
        """
        ``θ = 1/2``, ``P = I``, ``A = I`` and ``S = diag(4, 1)`` give 2.
        """
        params = SpdMlrParams([identity(2)], [identity(2)])
        self.assertThat(
            spd_mlr_logits_pem(SpdMatrix(np.diag([4.0, 1.0])), params, 0.5, 1.0, 0.0),
            close_to_array([2.0], rtol=1e-14),
        )

    def test_pem_at_anchor(self) -> None:
        """
        A point at its class anchor has a zero logit.
        """
        params = _spd_params(1)
        self.assertThat(
            spd_mlr_logits_pem(params.anchors[2], params, 0.5, 1.0, 0.0)[2],
            close_to_array(0.0, atol=1e-12),
        )

    @given(seeds())
    def test_pem_small_power_limit(self, seed: int) -> None:
        """
        As ``θ`` goes to zero the power-Euclidean MLR approaches the
        log-Euclidean one.
        """
        params = _spd_params(seed)
        S = _spd_params(seed + 1).anchors[0]
        lem = spd_mlr_logits_lem(S, params, 1.0, 0.0)
        pem = spd_mlr_logits_pem(S, params, 1e-3, 1.0, 0.0)
        self.assertThat(
            float(np.linalg.norm(pem - lem)),
            LessThan(1e-2 * max(float(np.linalg.norm(lem)), 1.0)),
        )

    @given(spd_matrices(n=3), seeds(), thetas())
    def test_pem_as_scalepow(self, S: SpdMatrix, seed: int, theta: float) -> None:
        """
        The power-Euclidean MLR is a ScalePow-EMLR head with weights
        ``vec(A_k)`` and biases ``⟨P_k^θ, A_k⟩/θ``.
        """
        params = _spd_params(seed)
        A, b = pem_mlr_as_fc(params, theta)
        self.assertThat(
            head_forward(HeadKind(HeadTag.ScalePowEMLR, theta), S, A, b),
            close_to_array(spd_mlr_logits_pem(S, params, theta, 1.0, 0.0), rtol=1e-12, atol=1e-12),
        )

    @given(spd_matrices(n=3), seeds())
    def test_pem_inverse(self, S: SpdMatrix, seed: int) -> None:
        """
        ``θ = -1`` classifies with inverse covariances.
        """
        params = _spd_params(seed)
        expected = np.array(
            [
                float(np.sum((spd_inverse(S).entries - spd_inverse(P).entries) * D.entries))
                for P, D in zip(params.anchors, params.directions)
            ]
        )
        self.assertThat(
            spd_mlr_logits_pem(S, params, -1.0, 1.0, 0.0),
            close_to_array(expected, rtol=1e-10, atol=1e-12),
        )

    def test_pem_zero_power(self) -> None:
        """
        ``θ = 0`` is refused.
        """
        self.assertThat(
            lambda: spd_mlr_logits_pem(identity(2), _spd_params(0, n=2), 0.0, 1.0, 0.0),
            raises(ConfigError),
        )


class SoftmaxTests(TestCase):
    """
    Tests for ``softmax_xent`` and ``softmax_xent_batch``.
    """

    @given(integers(min_value=2, max_value=20), floats(-5, 5))
    def test_uniform(self, classes: int, value: float) -> None:
        """
        Uniform logits over ``C`` classes cost ``ln C``.
        """
        loss, _ = softmax_xent(np.full(classes, value), 0)
        self.assertThat(loss, close_to_array(log(classes), rtol=1e-12))

    @given(seeds())
    def test_gradient_sums_to_zero(self, seed: int) -> None:
        """
        The gradient has zero sum.
        """
        _, grad = softmax_xent(_rng(seed).standard_normal(5), 3)
        self.assertThat(abs(float(np.sum(grad))), LessThan(1e-14))

    @given(seeds())
    def test_finite_difference(self, seed: int) -> None:
        """
        The gradient matches central differences.
        """
        logits = _rng(seed).standard_normal(5)
        _, grad = softmax_xent(logits, 1)
        h = 1e-6
        numeric = np.array(
            [
                (softmax_xent(logits + h * e, 1)[0] - softmax_xent(logits - h * e, 1)[0]) / (2 * h)
                for e in np.eye(5)
            ]
        )
        self.assertThat(numeric, close_to_array(grad, rtol=1e-6, atol=1e-9))

    def test_non_finite(self) -> None:
        """
        Non-finite logits are a numeric failure.
        """
        self.assertThat(
            lambda: softmax_xent(np.array([0.0, np.inf]), 0),
            raises(NumericFailure),
        )

    @given(seeds())
    def test_batch_mean(self, seed: int) -> None:
        """
        The batch loss and gradient are the means of the per-example ones.
        """
        rng = _rng(seed)
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 2])
        loss, grad = softmax_xent_batch(logits, labels)
        singles = [softmax_xent(row, int(label)) for row, label in zip(logits, labels)]
        self.assertThat(
            loss,
            close_to_array(sum(s[0] for s in singles) / 4, rtol=1e-12),
        )
        self.assertThat(grad, close_to_array(np.stack([s[1] for s in singles]) / 4, rtol=1e-12))


class FcTests(TestCase):
    """
    Tests for ``fc_logits`` and ``fc_backward``.
    """

    @given(seeds())
    def test_backward(self, seed: int) -> None:
        """
        The FC gradients match the linear map's derivatives.
        """
        rng = _rng(seed)
        x = rng.standard_normal(4)
        g = rng.standard_normal(3)
        dA, db = fc_backward(x, g)
        self.assertThat(dA, close_to_array(np.outer(g, x)))
        self.assertThat(db, close_to_array(-g))

    def test_weight_shape(self) -> None:
        """
        Weights with the wrong width are refused.
        """
        self.assertThat(
            lambda: fc_logits(np.zeros(3), np.zeros((2, 4)), np.zeros(2)),
            raises(ShapeError),
        )
