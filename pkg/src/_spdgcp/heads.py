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
Classifier heads for covariance features.

Three families live here:

* Euclidean multinomial logistic regression in its bias, anchor and margin
  forms (all three give the same logits).
* The global covariance pooling heads: a matrix function of the pooled
  covariance ``S``, flattened and fed to a fully connected layer.  Logits
  follow the convention ``⟨A_k, x⟩ - b_k``.
* SPD multinomial logistic regressions under the log-Euclidean and
  power-Euclidean metrics.
"""

from __future__ import annotations

__all__ = [
    "DegenerateDirection",
    "EuclideanMlrParams",
    "HeadKind",
    "HeadTag",
    "SpdMlrParams",
    "anchors_from_params",
    "bias_to_anchor",
    "emlr_logits",
    "emlr_logits_anchor",
    "emlr_logits_margin",
    "fc_backward",
    "fc_logits",
    "head_features",
    "head_features_vjp",
    "head_forward",
    "pem_mlr_as_fc",
    "softmax_xent",
    "softmax_xent_batch",
    "spd_mlr_logits_lem",
    "spd_mlr_logits_pem",
]

from enum import Enum
from typing import Optional

import numpy as np
from attrs import define, field, frozen
from numpy.typing import ArrayLike
from scipy.special import logsumexp, softmax

from ._types import FloatArray, IntArray
from .config import ConfigError
from .manifold import inner_ab
from .symlin import (
    NumericFailure,
    ShapeError,
    SpdMatrix,
    SymMatrix,
    cholesky,
    dchol_adjoint,
    dlog_diag,
    dmlog,
    dmpow,
    identity,
    mlog,
    mpow,
    newton_schulz_sqrt,
    strict_lower,
    vec_sym,
)


@define(auto_exc=False, str=True)
class DegenerateDirection(Exception):
    """
    A classifier direction vector is zero, so its hyperplane is undefined.

    :ivar index: The class index of the offending direction.
    """

    index: int


def _float_array(value: ArrayLike) -> FloatArray:
    a = np.array(value, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _check_directions(directions: FloatArray) -> None:
    norms = np.linalg.norm(directions, axis=1)
    if np.any(norms == 0):
        raise DegenerateDirection(int(np.argmin(norms)))


@frozen(eq=False)
class EuclideanMlrParams:
    """
    Euclidean MLR parameters.

    :ivar a: The ``C × d`` array whose rows are the class directions.
    :ivar b: The length ``C`` vector of biases.
    """

    a: FloatArray = field(converter=_float_array)
    b: FloatArray = field(converter=_float_array)

    def __attrs_post_init__(self) -> None:
        if self.a.ndim != 2 or self.b.shape != (self.a.shape[0],):
            raise ShapeError((self.a.shape[0],), self.b.shape)
        _check_directions(self.a)

    @property
    def classes(self) -> int:
        return int(self.a.shape[0])


@frozen(eq=False)
class SpdMlrParams:
    """
    SPD MLR parameters: one anchor and one direction per class.
    """

    anchors: tuple[SpdMatrix, ...] = field(converter=tuple)
    directions: tuple[SymMatrix, ...] = field(converter=tuple)

    def __attrs_post_init__(self) -> None:
        if len(self.anchors) != len(self.directions) or not self.anchors:
            raise ShapeError((len(self.anchors),), (len(self.directions),))
        n = self.anchors[0].n
        for k, (P, A) in enumerate(zip(self.anchors, self.directions)):
            if P.n != n or A.n != n:
                raise ShapeError((n, n), (A.n, A.n))
            if not np.any(A.entries):
                raise DegenerateDirection(k)


class HeadTag(Enum):
    LogEMLR = "log"
    PowEMLR = "pow"
    ScalePowEMLR = "scalepow"
    PowTMLR = "powtmlr"
    ChoTMLR = "chotmlr"
    PowEMLRPrime = "powprime"


@frozen(eq=False)
class HeadKind:
    """
    Which matrix function a GCP head applies before its FC layer.

    :ivar tag: The head.
    :ivar theta: The matrix power; unused by ``LogEMLR``.
    :ivar shared_P: The anchor shared by every class of ``PowEMLRPrime``.
    :ivar ns_iters: If positive, compute ``S^{1/2}`` with this many
        Newton-Schulz iterations instead of an eigendecomposition.  Only
        valid when ``theta`` is one half.
    """

    tag: HeadTag
    theta: float = 1.0
    shared_P: Optional[SpdMatrix] = None
    ns_iters: int = 0

    def __attrs_post_init__(self) -> None:
        if self.tag is not HeadTag.LogEMLR and (
            not np.isfinite(self.theta) or self.theta == 0
        ):
            raise ConfigError("theta", f"must be finite and nonzero, got {self.theta}")
        if self.shared_P is not None and self.tag is not HeadTag.PowEMLRPrime:
            raise ConfigError("shared_P", f"only powprime takes shared_P, not {self.tag.value}")
        if self.ns_iters < 0:
            raise ConfigError("ns_iters", f"must not be negative, got {self.ns_iters}")
        if self.ns_iters and (self.tag is HeadTag.LogEMLR or self.theta != 0.5):
            raise ConfigError("ns_iters", "Newton-Schulz is only available for theta = 0.5")


def emlr_logits(x: FloatArray, params: EuclideanMlrParams) -> FloatArray:
    """
    ``⟨a_k, x⟩ - b_k`` for every class.
    """
    if x.shape != (params.a.shape[1],):
        raise ShapeError((params.a.shape[1],), x.shape)
    return np.asarray(params.a @ x - params.b, dtype=np.float64)


def _check_anchor_shapes(x: FloatArray, anchors: FloatArray, directions: FloatArray) -> None:
    if anchors.shape != directions.shape:
        raise ShapeError(directions.shape, anchors.shape)
    if anchors.ndim != 2 or x.shape != (anchors.shape[1],):
        raise ShapeError((anchors.shape[-1],), x.shape)


def emlr_logits_anchor(
    x: FloatArray, anchors: FloatArray, directions: FloatArray
) -> FloatArray:
    """
    ``⟨a_k, x - p_k⟩`` for every class.
    """
    _check_anchor_shapes(x, anchors, directions)
    return np.asarray(np.sum(directions * (x - anchors), axis=1), dtype=np.float64)


def bias_to_anchor(a: FloatArray, b: float) -> FloatArray:
    """
    The minimum-norm point ``p`` with ``⟨a, p⟩ = b``.

    :raise DegenerateDirection: If ``a`` is zero.
    """
    sq = float(a @ a)
    if sq == 0:
        raise DegenerateDirection(0)
    return np.asarray((b / sq) * a, dtype=np.float64)


def anchors_from_params(params: EuclideanMlrParams) -> FloatArray:
    """
    The minimum-norm anchor of every class.
    """
    return np.stack([bias_to_anchor(a, b) for a, b in zip(params.a, params.b)])


def emlr_logits_margin(
    x: FloatArray, anchors: FloatArray, directions: FloatArray
) -> FloatArray:
    """
    The signed, direction-weighted distance from ``x`` to each class
    hyperplane ``{y: ⟨a_k, y - p_k⟩ = 0}``.
    """
    _check_anchor_shapes(x, anchors, directions)
    _check_directions(directions)
    signed = np.sum(directions * (x - anchors), axis=1)
    norms = np.linalg.norm(directions, axis=1)
    distance = np.abs(signed) / norms
    return np.asarray(np.sign(signed) * norms * distance, dtype=np.float64)


def _power(kind: HeadKind, S: SpdMatrix) -> SpdMatrix:
    if kind.ns_iters:
        return newton_schulz_sqrt(S, kind.ns_iters)
    return mpow(S, kind.theta)


def _log_cholesky_chart(L: FloatArray) -> FloatArray:
    lower = strict_lower(L)
    return lower + lower.T + 2 * dlog_diag(L)


def head_features(kind: HeadKind, S: SpdMatrix) -> SymMatrix:
    """
    Apply the head's matrix function to a pooled covariance.
    """
    tag = kind.tag
    theta = kind.theta
    if tag is HeadTag.LogEMLR:
        return mlog(S)
    if tag is HeadTag.ChoTMLR:
        return SymMatrix(_log_cholesky_chart(cholesky(_power(kind, S)).entries) / theta)
    power = _power(kind, S)
    if tag is HeadTag.ScalePowEMLR:
        return power.scaled(1 / abs(theta))
    if tag is HeadTag.PowTMLR:
        return SymMatrix((power.entries - np.eye(S.n)) / theta)
    return power


def head_features_vjp(kind: HeadKind, S: SpdMatrix, G: FloatArray) -> SymMatrix:
    """
    Pull a gradient with respect to ``head_features(kind, S)`` back to a
    gradient with respect to ``S``.
    """
    tag = kind.tag
    theta = kind.theta
    g = SymMatrix((G + G.T) / 2)
    if tag is HeadTag.LogEMLR:
        return dmlog(S, g)
    if tag is HeadTag.ChoTMLR:
        power = mpow(S, theta)
        ldiag = np.diag(cholesky(power).entries)
        lbar = (strict_lower(G + G.T) + 2 * np.diag(np.diag(G) / ldiag)) / theta
        return dmpow(S, theta, dchol_adjoint(power, lbar))
    back = dmpow(S, theta, g)
    if tag is HeadTag.ScalePowEMLR:
        return back.scaled(1 / abs(theta))
    if tag is HeadTag.PowTMLR:
        return back.scaled(1 / theta)
    return back


def _check_fc_shapes(x: FloatArray, A: FloatArray, b: FloatArray) -> None:
    if A.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ShapeError((A.shape[0], x.shape[0]), A.shape)
    if b.shape != (A.shape[0],):
        raise ShapeError((A.shape[0],), b.shape)


def fc_logits(x: FloatArray, A: FloatArray, b: FloatArray) -> FloatArray:
    """
    The FC layer: ``A x - b``.
    """
    _check_fc_shapes(x, A, b)
    return np.asarray(A @ x - b, dtype=np.float64)


def fc_backward(
    x: FloatArray, grad_logits: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """
    Gradients of a scalar loss with respect to the FC weights and biases.

    :return: ``(dA, db)``.
    """
    return np.outer(grad_logits, x), -grad_logits


def head_forward(
    kind: HeadKind, S: SpdMatrix, A: FloatArray, b: FloatArray
) -> FloatArray:
    """
    Compute the logits of a GCP head for one pooled covariance.

    :param A: The ``C × n²`` FC weight matrix.
    :param b: The length ``C`` bias vector.  ``PowEMLRPrime`` ignores it and
        subtracts the shared anchor from the features instead.
    """
    x = vec_sym(head_features(kind, S))
    if kind.tag is HeadTag.PowEMLRPrime:
        anchor = kind.shared_P if kind.shared_P is not None else identity(S.n)
        x = x - vec_sym(anchor)
        b = np.zeros_like(b)
    return fc_logits(x, A, b)


def spd_mlr_logits_lem(
    S: SpdMatrix, params: SpdMlrParams, alpha: float, beta: float
) -> FloatArray:
    """
    ``⟨mlog(S) - mlog(P_k), A_k⟩_{α,β}`` for every class.
    """
    log_s = mlog(S)
    return np.array(
        [
            inner_ab(log_s - mlog(P), A, alpha, beta)
            for P, A in zip(params.anchors, params.directions)
        ]
    )


def spd_mlr_logits_pem(
    S: SpdMatrix, params: SpdMlrParams, theta: float, alpha: float, beta: float
) -> FloatArray:
    """
    ``(1/|θ|) ⟨S^θ - P_k^θ, A_k⟩_{α,β}`` for every class.

    For positive ``θ`` this is the (θ,α,β) power-Euclidean MLR; a negative
    ``θ`` classifies with inverse powers, for instance ``θ = -1`` uses the
    inverse covariance.

    :raise ConfigError: If ``θ`` is zero.
    """
    if theta == 0 or not np.isfinite(theta):
        raise ConfigError("theta", f"must be finite and nonzero, got {theta}")
    power_s = mpow(S, theta)
    return np.array(
        [
            inner_ab(power_s - mpow(P, theta), A, alpha, beta) / abs(theta)
            for P, A in zip(params.anchors, params.directions)
        ]
    )


def pem_mlr_as_fc(params: SpdMlrParams, theta: float) -> tuple[FloatArray, FloatArray]:
    """
    The ScalePow-EMLR FC weights and biases computing the same logits as
    ``spd_mlr_logits_pem(·, params, theta, 1, 0)``.

    :return: ``(A, b)`` with rows ``vec_sym(A_k)`` and biases
        ``⟨P_k^θ, A_k⟩ / |θ|``.
    """
    A = np.stack([vec_sym(D) for D in params.directions])
    b = np.array(
        [
            float(np.sum(mpow(P, theta).entries * D.entries)) / abs(theta)
            for P, D in zip(params.anchors, params.directions)
        ]
    )
    return A, b


def softmax_xent(logits: FloatArray, label: int) -> tuple[float, FloatArray]:
    """
    Softmax cross-entropy of one example.

    :return: The loss and its gradient ``softmax(logits) - onehot(label)``.
    """
    if not np.all(np.isfinite(logits)):
        raise NumericFailure("softmax_xent", float("inf"))
    loss = float(logsumexp(logits) - logits[label])
    grad = np.asarray(softmax(logits), dtype=np.float64)
    grad[label] -= 1.0
    return loss, grad


def softmax_xent_batch(
    logits: FloatArray, labels: IntArray
) -> tuple[float, FloatArray]:
    """
    Mean softmax cross-entropy of a batch.

    :param logits: A ``B × C`` array.
    :param labels: A length ``B`` array of class indexes.

    :return: The mean loss and its gradient with respect to ``logits``.
    """
    if not np.all(np.isfinite(logits)):
        raise NumericFailure("softmax_xent", float("inf"))
    rows = np.arange(logits.shape[0])
    losses = logsumexp(logits, axis=1) - logits[rows, labels]
    grad = np.asarray(softmax(logits, axis=1), dtype=np.float64)
    grad[rows, labels] -= 1.0
    batch = logits.shape[0]
    return float(np.sum(losses)) / batch, grad / batch
