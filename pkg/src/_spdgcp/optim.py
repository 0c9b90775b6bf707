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
Euclidean and Riemannian stochastic gradient descent.

Riemannian SGD is provided for metrics which are pullbacks of a Euclidean
metric by a diffeomorphism ``φ``: the power-Euclidean metrics
``(θ,1,0)-EM`` (``φ(P) = P^θ / |θ|``) and the ``(1,0)-LEM`` metric
(``φ = mlog``).  For such a metric the Riemannian gradient of ``f`` at ``P``
is ``φ_{*,P}⁻¹ (φ_{*,P}^*)⁻¹ ∇f`` and an exponential step becomes the
Euclidean step ``φ(P') = φ(P) - γ (φ_{*,P}^*)⁻¹ ∇f`` in ``φ`` coordinates.

This module also holds the paired-run harnesses which compare two training
procedures step by step and report how far apart they drift.
"""

from __future__ import annotations

__all__ = [
    "EquivalenceReport",
    "RsgdState",
    "SgdConfig",
    "StepRejected",
    "egrad_to_rgrad",
    "phi",
    "phi_inv",
    "powtmlr_divergence",
    "rsgd_equivalence",
    "rsgd_step",
    "scalepow_equivalence",
    "scaled_init",
    "scheduled_lr",
    "sgd_step",
]

from typing import Optional, Sequence

import numpy as np
from attrs import define, field, frozen

from ._types import FloatArray, IntArray
from .config import ConfigError
from .eliot import EQUIVALENCE_CHECK, INVARIANT_VIOLATION, STEP_REJECTED
from .heads import (
    HeadKind,
    HeadTag,
    SpdMlrParams,
    fc_backward,
    fc_logits,
    head_features,
    softmax_xent,
    softmax_xent_batch,
    spd_mlr_logits_pem,
)
from .manifold import MetricFamily, MetricSpec, UnsupportedMetric, rieexp_identity
from .symlin import (
    NotPositiveDefinite,
    NumericFailure,
    ShapeError,
    SpdMatrix,
    SymMatrix,
    dmat_fun_inv,
    dmpow,
    dmpow_inv,
    log_function,
    mexp,
    mlog,
    mpow,
    vec_sym,
)
from .validators import non_negative, positive


@define(auto_exc=False, str=True)
class StepRejected(Exception):
    """
    A Riemannian step would have left the SPD cone.

    :ivar eigenvalue: The smallest eigenvalue of the rejected iterate in
        ``φ`` coordinates.
    """

    eigenvalue: float


@frozen
class SgdConfig:
    """
    Plain SGD hyperparameters.

    :ivar lr: The base learning rate γ.  Zero is accepted and turns a
        training run into an evaluation.
    :ivar classifier_factor: The multiplier k applied to the learning rate of
        the FC layer.
    :ivar seed: The seed for initialization and shuffling.
    """

    lr: float = field(validator=non_negative)
    classifier_factor: float = field(default=1.0, validator=positive)
    seed: int = 0


@define
class RsgdState:
    """
    The parameters of an SPD MLR trained with Riemannian SGD on its anchors
    and Euclidean SGD on its directions.
    """

    spec: MetricSpec
    anchors: list[SpdMatrix]
    directions: list[SymMatrix]

    def params(self) -> SpdMlrParams:
        return SpdMlrParams(self.anchors, self.directions)


def sgd_step(param: FloatArray, grad: FloatArray, lr: float) -> FloatArray:
    """
    One plain SGD update, ``param - lr * grad``.

    :raise NumericFailure: If the gradient is not finite.
    """
    if param.shape != grad.shape:
        raise ShapeError(param.shape, grad.shape)
    if not np.all(np.isfinite(grad)):
        raise NumericFailure("sgd_step", float("inf"))
    return np.asarray(param - lr * grad, dtype=np.float64)


def scheduled_lr(
    lr: float, epoch: int, schedule: Sequence[tuple[int, float]]
) -> float:
    """
    The learning rate in effect during ``epoch`` after dividing ``lr`` by
    every divisor whose milestone epoch has been reached.
    """
    for milestone, divisor in schedule:
        if epoch >= milestone:
            lr /= divisor
    return lr


def _check_rsgd(spec: MetricSpec) -> None:
    if (spec.alpha, spec.beta) != (1.0, 0.0) or spec.family not in (
        MetricFamily.EM,
        MetricFamily.LEM,
    ):
        raise UnsupportedMetric(spec.family.value, "rsgd")


def phi(spec: MetricSpec, P: SpdMatrix) -> SymMatrix:
    """
    The chart ``φ`` the metric is pulled back through.
    """
    _check_rsgd(spec)
    if spec.family is MetricFamily.LEM:
        return mlog(P)
    return mpow(P, spec.theta).scaled(1 / abs(spec.theta))


def phi_inv(spec: MetricSpec, Y: SymMatrix) -> SpdMatrix:
    """
    The inverse of ``φ``.

    :raise StepRejected: If ``Y`` is outside the image of ``φ``.
    """
    _check_rsgd(spec)
    if spec.family is MetricFamily.LEM:
        return mexp(Y)
    theta = spec.theta
    try:
        base = SpdMatrix(abs(theta) * Y.entries)
    except NotPositiveDefinite:
        raise StepRejected(float(np.linalg.eigvalsh(Y.entries)[0]))
    return mpow(base, 1 / theta)


def _phi_star_inv(spec: MetricSpec, P: SpdMatrix, G: SymMatrix) -> SymMatrix:
    """
    ``φ_{*,P}⁻¹``, which is also the inverse of its adjoint.
    """
    if spec.family is MetricFamily.LEM:
        return dmat_fun_inv(P, *log_function(), G)
    return dmpow_inv(P, spec.theta, G).scaled(abs(spec.theta))


def egrad_to_rgrad(spec: MetricSpec, P: SpdMatrix, egrad: SymMatrix) -> SymMatrix:
    """
    Map a Euclidean gradient at ``P`` to the Riemannian gradient.

    :raise UnsupportedMetric: Unless ``spec`` is ``(θ,1,0)-EM`` or
        ``(1,0)-LEM``.
    """
    _check_rsgd(spec)
    return _phi_star_inv(spec, P, _phi_star_inv(spec, P, egrad))


def rsgd_step(spec: MetricSpec, P: SpdMatrix, egrad: SymMatrix, lr: float) -> SpdMatrix:
    """
    One Riemannian SGD step, ``φ⁻¹(φ(P) - lr (φ_{*,P}^*)⁻¹ egrad)``.

    :raise StepRejected: If the step leaves the SPD cone.
    """
    _check_rsgd(spec)
    if not np.all(np.isfinite(egrad.entries)):
        raise NumericFailure("rsgd_step", float("inf"))
    moved = phi(spec, P) - _phi_star_inv(spec, P, egrad).scaled(lr)
    return phi_inv(spec, moved)


def scaled_init(A0: FloatArray, lr: float, theta: float) -> tuple[FloatArray, float]:
    """
    The ScalePow-EMLR weights and FC-weight learning rate that train in
    lockstep with Pow-EMLR started from ``A0`` at learning rate ``lr``.

    :return: ``(θ A0, θ² lr)``.
    """
    if not theta > 0:
        raise ConfigError("theta", f"must be positive, got {theta}")
    return theta * A0, theta**2 * lr


@frozen
class EquivalenceReport:
    """
    The outcome of running two procedures side by side.

    :ivar which: The name of the equivalence checked.
    :ivar theta: The matrix power used.
    :ivar tolerance: The largest acceptable deviation (or, for a divergence
        check, the smallest acceptable divergence).
    :ivar deviations: The measured deviation after each step or instance.
    :ivar loss_deviations: Absolute loss differences per step, where
        applicable.
    :ivar first_failure: The index of the first step violating the
        tolerance, or ``None``.
    """

    which: str
    theta: float
    seed: int
    tolerance: float
    deviations: list[float]
    loss_deviations: list[float]
    first_failure: Optional[int]

    @property
    def passed(self) -> bool:
        return self.first_failure is None

    @property
    def max_deviation(self) -> float:
        return max(self.deviations, default=0.0)


def _first_failure(values: Sequence[float], tolerance: float, above: bool) -> Optional[int]:
    for i, value in enumerate(values):
        bad = value <= tolerance if above else value > tolerance
        if bad or not np.isfinite(value):
            return i
    return None


def _batches(count: int, batch_size: int, step: int) -> IntArray:
    """
    The sample indexes of a step, cycling through the samples in order.
    """
    start = (step * batch_size) % count
    return (start + np.arange(min(batch_size, count))) % count


def scalepow_equivalence(
    samples: Sequence[SpdMatrix],
    labels: Sequence[int],
    classes: int,
    theta: float,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 8,
    tolerance: float = 1e-6,
) -> EquivalenceReport:
    """
    Train Pow-EMLR and ScalePow-EMLR side by side, the latter started from
    ``scaled_init``, and measure ``max |A_t - Ā_t / θ| / max |A_t|`` and the
    loss difference after every step.
    """
    with EQUIVALENCE_CHECK(which="scalepow", theta=float(theta), seed=seed) as action:
        pow_kind = HeadKind(HeadTag.PowEMLR, theta)
        scale_kind = HeadKind(HeadTag.ScalePowEMLR, theta)
        x = np.stack([vec_sym(head_features(pow_kind, S)) for S in samples])
        xbar = np.stack([vec_sym(head_features(scale_kind, S)) for S in samples])
        y = np.asarray(labels, dtype=np.int64)

        rng = np.random.default_rng(seed)
        A = rng.normal(scale=0.01, size=(classes, x.shape[1]))
        b = np.zeros(classes)
        Abar, lr_bar = scaled_init(A, lr, theta)
        bbar = b.copy()

        deviations = []
        loss_deviations = []
        for step in range(steps):
            idx = _batches(len(samples), batch_size, step)
            loss, g = softmax_xent_batch(x[idx] @ A.T - b, y[idx])
            loss_bar, gbar = softmax_xent_batch(xbar[idx] @ Abar.T - bbar, y[idx])
            A = sgd_step(A, g.T @ x[idx], lr)
            b = sgd_step(b, -g.sum(axis=0), lr)
            Abar = sgd_step(Abar, gbar.T @ xbar[idx], lr_bar)
            bbar = sgd_step(bbar, -gbar.sum(axis=0), lr)
            scale = max(float(np.max(np.abs(A))), np.finfo(np.float64).tiny)
            deviations.append(float(np.max(np.abs(A - Abar / theta))) / scale)
            loss_deviations.append(abs(loss - loss_bar))

        first = _first_failure(
            [max(d, l) for d, l in zip(deviations, loss_deviations)], tolerance, False
        )
        report = EquivalenceReport(
            "scalepow", theta, seed, tolerance, deviations, loss_deviations, first
        )
        _log_failure(report)
        action.add_success_fields(deviation=report.max_deviation)
        return report


def _log_failure(report: EquivalenceReport) -> None:
    if report.first_failure is not None:
        INVARIANT_VIOLATION.log(
            invariant=report.which,
            step=report.first_failure,
            deviation=report.deviations[report.first_failure],
        )


def _random_sym(rng: np.random.Generator, n: int, scale: float) -> SymMatrix:
    r = rng.normal(scale=scale, size=(n, n))
    return SymMatrix((r + r.T) / 2)


def rsgd_equivalence(
    samples: Sequence[SpdMatrix],
    labels: Sequence[int],
    classes: int,
    theta: float,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 8,
    tolerance: float = 1e-8,
) -> EquivalenceReport:
    """
    Train an SPD MLR under ``(θ,1,0)-EM`` with Riemannian SGD on the anchors
    next to a Euclidean MLR on the features ``φ(S)`` with Euclidean anchors
    started at ``φ(P_k)``.

    After every step the deviation is the larger of the worst relative anchor
    gap ``‖φ(P_k) - P̄_k‖ / (1 + ‖P̄_k‖)`` and the worst logit gap over all
    samples.
    """
    with EQUIVALENCE_CHECK(which="rsgd", theta=float(theta), seed=seed) as action:
        spec = MetricSpec(MetricFamily.EM, theta=theta)
        n = samples[0].n
        y = np.asarray(labels, dtype=np.int64)
        rng = np.random.default_rng(seed)
        state = RsgdState(
            spec,
            [rieexp_identity(spec, _random_sym(rng, n, 0.05)) for _ in range(classes)],
            [_random_sym(rng, n, 0.1) for _ in range(classes)],
        )
        features = np.stack([phi(spec, S).entries for S in samples])
        anchors_bar = np.stack([phi(spec, P).entries for P in state.anchors])
        directions_bar = np.stack([A.entries for A in state.directions])

        def euclidean_logits(idx: IntArray) -> FloatArray:
            diff = features[idx][:, None, :, :] - anchors_bar[None, :, :, :]
            return np.asarray(np.einsum("bkij,kij->bk", diff, directions_bar))

        def riemannian_logits(idx: IntArray) -> FloatArray:
            params = state.params()
            return np.stack([spd_mlr_logits_pem(samples[i], params, theta, 1.0, 0.0) for i in idx])

        everything = np.arange(len(samples))
        deviations = []
        for step in range(steps):
            idx = _batches(len(samples), batch_size, step)

            _, g = softmax_xent_batch(riemannian_logits(idx), y[idx])
            weight = g.sum(axis=0)
            anchor_grads = [
                dmpow(P, theta, A).scaled(-weight[k] / abs(theta))
                for k, (P, A) in enumerate(zip(state.anchors, state.directions))
            ]
            direction_grads = [
                np.einsum("b,bij->ij", g[:, k], features[idx]) - weight[k] * phi(spec, P).entries
                for k, P in enumerate(state.anchors)
            ]
            for k in range(classes):
                try:
                    state.anchors[k] = rsgd_step(spec, state.anchors[k], anchor_grads[k], lr)
                except StepRejected as e:
                    STEP_REJECTED.log(step=step, eigenvalue=e.eigenvalue)
                    raise
            for k in range(classes):
                state.directions[k] = SymMatrix(
                    sgd_step(state.directions[k].entries, direction_grads[k], lr)
                )

            _, gbar = softmax_xent_batch(euclidean_logits(idx), y[idx])
            weight_bar = gbar.sum(axis=0)
            grad_directions_bar = np.einsum(
                "bk,bij->kij", gbar, features[idx]
            ) - weight_bar[:, None, None] * anchors_bar
            grad_anchors_bar = -weight_bar[:, None, None] * directions_bar
            anchors_bar = sgd_step(anchors_bar, grad_anchors_bar, lr)
            directions_bar = sgd_step(directions_bar, grad_directions_bar, lr)

            anchor_gap = max(
                float(np.linalg.norm(phi(spec, P).entries - Pbar))
                / (1 + float(np.linalg.norm(Pbar)))
                for P, Pbar in zip(state.anchors, anchors_bar)
            )
            logit_gap = float(
                np.max(np.abs(riemannian_logits(everything) - euclidean_logits(everything)))
            )
            deviations.append(max(anchor_gap, logit_gap))

        first = _first_failure(deviations, tolerance, False)
        report = EquivalenceReport("rsgd", theta, seed, tolerance, deviations, [], first)
        _log_failure(report)
        action.add_success_fields(deviation=report.max_deviation)
        return report


def _powtmlr_step_gap(
    S: SpdMatrix, label: int, A: FloatArray, b: FloatArray, theta: float, lr: float
) -> float:
    """
    Run one SGD step of Pow-TMLR and of the Pow-EMLR with the rewritten
    parameters ``Ã = A/θ``, ``b̃ = b + A vec(I)/θ``, and compare the
    Pow-EMLR weights each implies afterwards.

    Pow-TMLR uses the FC-weight learning rate ``θ² lr`` which makes its
    update as close as it can be to the Pow-EMLR one.
    """
    x = vec_sym(head_features(HeadKind(HeadTag.PowEMLR, theta), S))
    t = vec_sym(head_features(HeadKind(HeadTag.PowTMLR, theta), S))

    _, g = softmax_xent(fc_logits(t, A, b), label)
    dA, _ = fc_backward(t, g)
    A_tmlr = sgd_step(A, dA, theta**2 * lr)

    A_rewritten = A / theta
    b_rewritten = b + A @ vec_sym(SymMatrix(np.eye(S.n))) / theta
    _, g_e = softmax_xent(fc_logits(x, A_rewritten, b_rewritten), label)
    dA_e, _ = fc_backward(x, g_e)
    A_emlr = sgd_step(A_rewritten, dA_e, lr)

    return float(np.max(np.abs(A_tmlr / theta - A_emlr)))


def powtmlr_divergence(
    instances: Sequence[tuple[SpdMatrix, int, FloatArray, FloatArray]],
    theta: float,
    lr: float,
    seed: int,
    tolerance: float = 1e-6,
    required_fraction: float = 0.95,
) -> EquivalenceReport:
    """
    Measure how far one Pow-TMLR step departs from the step of the
    reparameterized Pow-EMLR on each instance ``(S, label, A, b)``.

    Here a *large* deviation is expected.  The check fails when fewer than
    ``required_fraction`` of the instances diverge by more than
    ``tolerance``; ``first_failure`` then names the first instance whose
    updates agreed.
    """
    with EQUIVALENCE_CHECK(which="powtmlr", theta=float(theta), seed=seed) as action:
        gaps = [
            _powtmlr_step_gap(S, label, A, b, theta, lr) for S, label, A, b in instances
        ]
        diverged = sum(1 for gap in gaps if gap > tolerance)
        first = None
        if diverged < required_fraction * len(gaps):
            first = _first_failure(gaps, tolerance, True)
        report = EquivalenceReport("powtmlr", theta, seed, tolerance, gaps, [], first)
        action.add_success_fields(deviation=min(gaps, default=0.0))
        return report
