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
Global covariance pooling at toy scale.

Feature maps are pooled into covariance matrices, passed through a head's
matrix function and classified by an FC layer trained with SGD.  Datasets
come from the seeded synthetic generator or from feature files in one of
two formats:

``csv``
    A header line ``d,N,C`` and then one line per sample holding the label
    followed by the ``d·N`` entries of ``X`` in row-major order.

``f64bin``
    The magic ``SPDF1``, the little-endian ``u32`` values ``d``, ``N``,
    ``C`` and the sample count, and then for each sample a ``u32`` label and
    ``d·N`` little-endian ``float64`` values.
"""

from __future__ import annotations

__all__ = [
    "CSV",
    "F64BIN",
    "BenchmarkResult",
    "Dataset",
    "EpochRecord",
    "FeatureParseError",
    "FeatureSample",
    "GcpModel",
    "Gradients",
    "RunRecord",
    "TrainConfig",
    "TrainingAborted",
    "benchmark_heads",
    "covariance_pool",
    "default_ridge",
    "evaluate",
    "load_features",
    "loss_and_gradients",
    "run_record_from_json",
    "save_features",
    "synth_dataset",
    "topk_accuracy",
    "train",
    "write_run",
]

from math import isqrt
from time import perf_counter
from typing import Any, Optional, Sequence

import numpy as np
from attrs import define, evolve, field, frozen
from cattrs.gen import make_dict_unstructure_fn, override
from cattrs.preconf import json
from numpy.random import PCG64, Generator, SeedSequence
from numpy.typing import ArrayLike
from twisted.python.filepath import FilePath

from ._types import FloatArray, IntArray
from .config import (
    Config,
    ConfigError,
    read_float,
    read_int,
    read_optional_int,
    read_schedule,
)
from .eliot import (
    EPOCH_SUMMARY,
    LOAD_FEATURES,
    NUMERIC_FAILURE,
    TRAIN,
    TRAIN_EPOCH,
)
from .heads import HeadKind, HeadTag, head_features, head_features_vjp, softmax_xent_batch
from .manifold import MetricFamily, MetricSpec, OutOfDomain, rieexp_identity
from .optim import SgdConfig, scheduled_lr, sgd_step
from .symlin import (
    DomainError,
    NotPositiveDefinite,
    NumericFailure,
    ShapeError,
    SpdMatrix,
    SymMatrix,
    mpow,
    vec_sym,
)
from .validators import finite_array, non_negative_integer, positive_integer

CSV = "csv"
F64BIN = "f64bin"
FORMATS = (CSV, F64BIN)

DEFAULT_POSITIONS = 64
DEFAULT_RIDGE_FACTOR = 1e-6
DEFAULT_LR_SCHEDULE = ((20, 5.0), (25, 5.0))
DEFAULT_LR_GRID = (0.02, 0.05, 0.1)

_MAGIC = b"SPDF1"
_HEADER = np.dtype([("d", "<u4"), ("N", "<u4"), ("C", "<u4"), ("count", "<u4")])

_EPOCH_COLUMNS = ("epoch", "loss", "train_top1", "train_top5", "val_top1", "val_top5")


@define(auto_exc=False, str=True)
class FeatureParseError(Exception):
    """
    A feature file could not be parsed.

    :ivar reason: What is wrong.
    :ivar line: The one-based line of a ``csv`` file, or ``0`` for ``f64bin``.
    :ivar offset: The zero-based field index on ``line`` of a ``csv`` file,
        or the byte offset into an ``f64bin`` file.
    """

    reason: str
    line: int
    offset: int


@define(auto_exc=False, str=True)
class TrainingAborted(Exception):
    """
    A numeric failure stopped a training run.
    """

    epoch: int
    batch: int
    cause: str


def _float_array(value: ArrayLike) -> FloatArray:
    a = np.array(value, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@frozen(eq=False)
class FeatureSample:
    """
    One ``d × N`` feature map and its class.
    """

    X: FloatArray = field(converter=_float_array, validator=finite_array)
    label: int = field(converter=int, validator=non_negative_integer)

    def __attrs_post_init__(self) -> None:
        if self.X.ndim != 2 or self.X.shape[1] < 2:
            raise ShapeError((self.X.shape[0], 2), self.X.shape)


@frozen(eq=False)
class Dataset:
    """
    Feature samples with a common shape.

    :ivar classes: The number of classes ``C``.  Every label is below it.
    """

    samples: tuple[FeatureSample, ...] = field(converter=tuple)
    classes: int = field(validator=positive_integer)

    def __attrs_post_init__(self) -> None:
        if not self.samples:
            raise ShapeError((1,), (0,))
        shape = self.samples[0].X.shape
        for sample in self.samples:
            if sample.X.shape != shape:
                raise ShapeError(shape, sample.X.shape)
            if sample.label >= self.classes:
                raise ShapeError((self.classes,), (sample.label + 1,))

    @property
    def d(self) -> int:
        return int(self.samples[0].X.shape[0])

    @property
    def N(self) -> int:
        return int(self.samples[0].X.shape[1])

    @property
    def labels(self) -> IntArray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indexes: Sequence[int]) -> Dataset:
        return Dataset([self.samples[i] for i in indexes], self.classes)

    def same_as(self, other: Dataset) -> bool:
        """
        Whether both datasets hold exactly the same samples.
        """
        return (
            self.classes == other.classes
            and len(self) == len(other)
            and all(
                a.label == b.label and np.array_equal(a.X, b.X)
                for a, b in zip(self.samples, other.samples)
            )
        )


def _check_config(option: str, ok: bool, reason: str) -> None:
    if not ok:
        raise ConfigError(option, reason)


@frozen
class TrainConfig:
    """
    Everything that determines a training run.

    :ivar eps_reg: The covariance ridge, or ``None`` for the scale-aware
        default ``1e-6·tr(Σ)/d`` of each sample.
    :ivar lr_schedule: ``(epoch, divisor)`` pairs; from each listed epoch on
        every learning rate is divided by the divisor.
    :ivar init_scale: The standard deviation of the FC weight init.
    :ivar weight_lr: If given, the base learning rate of the FC weights in
        place of ``sgd.lr``.  Biases keep ``sgd.lr``.
    :ivar reduce_dim: If given, learn a ``reduce_dim × d`` map applied to the
        features before pooling.
    """

    head: HeadKind
    epochs: int
    batch_size: int
    sgd: SgdConfig
    weight_decay: float = 1e-4
    eps_reg: Optional[float] = None
    lr_schedule: tuple[tuple[int, float], ...] = field(
        default=DEFAULT_LR_SCHEDULE, converter=lambda s: tuple((int(e), float(d)) for e, d in s)
    )
    init_scale: float = 0.01
    weight_lr: Optional[float] = None
    reduce_dim: Optional[int] = None

    def __attrs_post_init__(self) -> None:
        _check_config("epochs", self.epochs >= 1, f"must be at least 1, got {self.epochs}")
        _check_config(
            "batch_size", self.batch_size >= 1, f"must be at least 1, got {self.batch_size}"
        )
        _check_config(
            "weight_decay", self.weight_decay >= 0, f"must not be negative, got {self.weight_decay}"
        )
        _check_config(
            "eps_reg",
            self.eps_reg is None or self.eps_reg >= 0,
            f"must not be negative, got {self.eps_reg}",
        )
        _check_config(
            "init_scale", self.init_scale >= 0, f"must not be negative, got {self.init_scale}"
        )
        _check_config(
            "weight_lr",
            self.weight_lr is None or self.weight_lr >= 0,
            f"must not be negative, got {self.weight_lr}",
        )
        _check_config(
            "reduce_dim",
            self.reduce_dim is None or self.reduce_dim >= 1,
            f"must be at least 1, got {self.reduce_dim}",
        )
        for epoch, divisor in self.lr_schedule:
            _check_config(
                "lr_schedule", divisor > 0, f"divisor for epoch {epoch} must be positive"
            )

    @property
    def seed(self) -> int:
        return self.sgd.seed

    @classmethod
    def from_config(cls, cfg: Config, head: HeadKind) -> TrainConfig:
        """
        Read the ``train.*`` options of the ``[spdgcp]`` section.
        """
        try:
            sgd = SgdConfig(
                lr=read_float(cfg, "train.lr", 0.1),
                classifier_factor=read_float(cfg, "train.classifier-factor", 1.0),
                seed=read_int(cfg, "train.seed", 0),
            )
        except ValueError as e:
            raise ConfigError("train.lr", str(e))
        return cls(
            head=head,
            epochs=read_int(cfg, "train.epochs", 30),
            batch_size=read_int(cfg, "train.batch-size", 16),
            sgd=sgd,
            weight_decay=read_float(cfg, "train.weight-decay", 1e-4),
            eps_reg=read_float(cfg, "train.eps-reg", None),
            lr_schedule=read_schedule(cfg, "train.lr-schedule", DEFAULT_LR_SCHEDULE),
            init_scale=read_float(cfg, "train.init-scale", 0.01),
            weight_lr=read_float(cfg, "train.weight-lr", None),
            reduce_dim=read_optional_int(cfg, "train.reduce-dim"),
        )

    def to_dict(self) -> dict[str, Any]:
        return _converter.unstructure(self)  # type: ignore[no-any-return]

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> TrainConfig:
        return _converter.structure(values, cls)


@frozen
class EpochRecord:
    epoch: int
    loss: float
    train_top1: float
    train_top5: float
    val_top1: Optional[float] = None
    val_top5: Optional[float] = None

    def csv_row(self) -> str:
        values = [
            self.epoch,
            self.loss,
            self.train_top1,
            self.train_top5,
            self.val_top1,
            self.val_top5,
        ]
        return ",".join("" if v is None else repr(v) for v in values)


@frozen
class RunRecord:
    """
    What a training run did.

    ``wall_times`` are kept out of the JSON form so that two runs with the
    same configuration serialize to the same bytes.
    """

    config: TrainConfig
    seed: int
    epochs: list[EpochRecord]
    wall_times: list[float] = field(factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_json(self) -> bytes:
        return _dumps(self)

    def epochs_csv(self) -> bytes:
        lines = [",".join(_EPOCH_COLUMNS)] + [e.csv_row() for e in self.epochs]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def timing_json(self) -> bytes:
        return _dumps({"seed": self.seed, "wall_times": self.wall_times})


def _unstructure_head(head: HeadKind) -> dict[str, Any]:
    return {
        "tag": head.tag.value,
        "theta": head.theta,
        "ns_iters": head.ns_iters,
        "shared_P": None if head.shared_P is None else head.shared_P.entries.tolist(),
    }


def _structure_head(values: dict[str, Any], _: type) -> HeadKind:
    shared = values.get("shared_P")
    return HeadKind(
        HeadTag(values["tag"]),
        float(values["theta"]),
        None if shared is None else SpdMatrix(shared),
        int(values.get("ns_iters", 0)),
    )


_converter = json.make_converter(forbid_extra_keys=True)
_converter.register_unstructure_hook(HeadKind, _unstructure_head)
_converter.register_structure_hook(HeadKind, _structure_head)
_converter.register_unstructure_hook(
    RunRecord,
    make_dict_unstructure_fn(RunRecord, _converter, wall_times=override(omit=True)),
)


def _dumps(content: Any) -> bytes:
    return (_converter.dumps(content, sort_keys=True, indent=2) + "\n").encode("utf-8")


def run_record_from_json(data: bytes) -> RunRecord:
    """
    Load the JSON written by ``RunRecord.to_json``.
    """
    return _converter.loads(data, RunRecord)


def write_run(record: RunRecord, directory: FilePath, timing: bool = True) -> None:
    """
    Write ``run.json``, ``epochs.csv`` and ``timing.json`` into
    ``directory``, creating it if needed.

    :param timing: If ``False``, leave ``timing.json`` out so that seeded
        reruns produce an identical directory.
    """
    directory.makedirs(ignoreExistingDirectory=True)
    directory.child("run.json").setContent(record.to_json())
    directory.child("epochs.csv").setContent(record.epochs_csv())
    if timing:
        directory.child("timing.json").setContent(record.timing_json())


def default_ridge(X: FloatArray) -> float:
    """
    ``1e-6·tr(Σ)/d`` for the unregularized covariance ``Σ`` of ``X``, or
    ``1e-6`` when that trace is zero.
    """
    centered = X - X.mean(axis=1, keepdims=True)
    trace = float(np.sum(centered * centered)) / X.shape[1]
    if trace == 0:
        return DEFAULT_RIDGE_FACTOR
    return DEFAULT_RIDGE_FACTOR * trace / X.shape[0]


def covariance_pool(X: FloatArray, eps_reg: float) -> SpdMatrix:
    """
    ``(1/N) X̄ X̄ᵀ + eps_reg·I`` for the column-centered ``X̄``.

    :raise NotPositiveDefinite: If the result is singular, which happens for
        ``eps_reg = 0`` whenever ``N ≤ d``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ShapeError((X.shape[0], 2), X.shape)
    if eps_reg < 0:
        raise ConfigError("eps_reg", f"must not be negative, got {eps_reg}")
    centered = X - X.mean(axis=1, keepdims=True)
    sigma = centered @ centered.T / X.shape[1]
    sigma = (sigma + sigma.T) / 2 + eps_reg * np.eye(X.shape[0])
    return SpdMatrix(sigma)


def synth_dataset(
    classes: int,
    dim: int,
    positions: int,
    per_class: int,
    spread: float,
    seed: int,
) -> Dataset:
    """
    Draw a dataset whose class ``c`` has feature columns ``G_c^{1/2} z`` for
    standard normal ``z`` and ``G_c = mexp(spread·B_c)``, with ``B_c`` a
    random symmetric matrix of Frobenius norm ``√d``.

    Samples are ordered by class.
    """
    if spread < 0:
        raise ConfigError("spread", f"must not be negative, got {spread}")
    rng = Generator(PCG64(seed))
    lem = MetricSpec(MetricFamily.LEM)
    roots = []
    for _ in range(classes):
        r = rng.standard_normal((dim, dim))
        B = (r + r.T) / 2
        B *= np.sqrt(dim) / np.linalg.norm(B)
        roots.append(mpow(rieexp_identity(lem, SymMatrix(spread * B)), 0.5).entries)
    samples = [
        FeatureSample(roots[c] @ rng.standard_normal((dim, positions)), c)
        for c in range(classes)
        for _ in range(per_class)
    ]
    return Dataset(samples, classes)


def _parse_csv(data: bytes) -> Dataset:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FeatureParseError("not UTF-8", 0, e.start)
    lines = text.split("\n")
    if lines[-1] != "":
        raise FeatureParseError("missing final newline", len(lines), 0)
    lines = lines[:-1]
    if not lines:
        raise FeatureParseError("missing header", 1, 0)

    header = lines[0].split(",")
    if len(header) != 3:
        raise FeatureParseError("header must be d,N,C", 1, len(header))
    dims = []
    for i, value in enumerate(header):
        try:
            dims.append(int(value))
        except ValueError:
            raise FeatureParseError(f"header field {value!r} is not an integer", 1, i)
        if dims[-1] < 1:
            raise FeatureParseError(f"header field {value!r} is not positive", 1, i)
    d, N, C = dims
    if N < 2:
        raise FeatureParseError(f"N={N} is below 2 positions", 1, 1)

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 1 + d * N:
            raise FeatureParseError(
                f"expected {1 + d * N} fields, got {len(fields)}", lineno, len(fields)
            )
        try:
            label = int(fields[0])
        except ValueError:
            raise FeatureParseError(f"label {fields[0]!r} is not an integer", lineno, 0)
        if not 0 <= label < C:
            raise FeatureParseError(f"label {label} outside 0..{C - 1}", lineno, 0)
        values = np.empty(d * N)
        for i, value in enumerate(fields[1:], start=1):
            try:
                values[i - 1] = float(value)
            except ValueError:
                raise FeatureParseError(f"{value!r} is not a number", lineno, i)
            if not np.isfinite(values[i - 1]):
                raise FeatureParseError(f"{value!r} is not finite", lineno, i)
        samples.append(FeatureSample(values.reshape(d, N), label))
    if not samples:
        raise FeatureParseError("no samples", len(lines) + 1, 0)
    return Dataset(samples, C)


def _parse_f64bin(data: bytes) -> Dataset:
    if data[: len(_MAGIC)] != _MAGIC:
        raise FeatureParseError("bad magic", 0, 0)
    offset = len(_MAGIC)
    if len(data) < offset + _HEADER.itemsize:
        raise FeatureParseError("truncated header", 0, len(data))
    header = np.frombuffer(data, _HEADER, count=1, offset=offset)[0]
    d, N, C, count = (int(header[name]) for name in ("d", "N", "C", "count"))
    offset += _HEADER.itemsize
    if min(d, C, count) < 1 or N < 2:
        raise FeatureParseError(f"bad dimensions d={d} N={N} C={C} count={count}", 0, len(_MAGIC))

    record = np.dtype([("label", "<u4"), ("values", "<f8", (d * N,))])
    expected = offset + count * record.itemsize
    if len(data) < expected:
        raise FeatureParseError(f"truncated: expected {expected} bytes", 0, len(data))
    if len(data) > expected:
        raise FeatureParseError("trailing bytes", 0, expected)

    records = np.frombuffer(data, record, count=count, offset=offset)
    samples = []
    for i, (label, values) in enumerate(zip(records["label"], records["values"])):
        start = offset + i * record.itemsize
        if label >= C:
            raise FeatureParseError(f"label {label} outside 0..{C - 1}", 0, start)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise FeatureParseError("non-finite value", 0, start + 4 + 8 * int(bad[0]))
        samples.append(FeatureSample(values.reshape(d, N), int(label)))
    return Dataset(samples, C)


def _check_format(format: str) -> None:
    if format not in FORMATS:
        raise ConfigError("format", f"expected one of {', '.join(FORMATS)}, got {format!r}")


def load_features(path: FilePath, format: str) -> Dataset:
    """
    Read a feature file.

    :raise FeatureParseError: If the file is malformed in any way.  Nothing
        is returned for a file which is only partly valid.
    """
    _check_format(format)
    with LOAD_FEATURES(path=path.path, format=format) as action:
        data = path.getContent()
        dataset = _parse_csv(data) if format == CSV else _parse_f64bin(data)
        action.add_success_fields(samples=len(dataset))
        return dataset


def _csv_bytes(dataset: Dataset) -> bytes:
    lines = [f"{dataset.d},{dataset.N},{dataset.classes}"]
    for sample in dataset.samples:
        lines.append(",".join([str(sample.label)] + [repr(float(v)) for v in sample.X.ravel()]))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _f64bin_bytes(dataset: Dataset) -> bytes:
    header = np.array([(dataset.d, dataset.N, dataset.classes, len(dataset))], dtype=_HEADER)
    record = np.dtype([("label", "<u4"), ("values", "<f8", (dataset.d * dataset.N,))])
    records = np.empty(len(dataset), dtype=record)
    records["label"] = dataset.labels
    records["values"] = np.stack([s.X.ravel() for s in dataset.samples])
    return _MAGIC + header.tobytes() + records.tobytes()


def save_features(dataset: Dataset, path: FilePath, format: str) -> None:
    """
    Write a feature file that ``load_features`` reads back unchanged.
    """
    _check_format(format)
    path.setContent(_csv_bytes(dataset) if format == CSV else _f64bin_bytes(dataset))


@define(eq=False)
class GcpModel:
    """
    The trainable part of a GCP pipeline.

    :ivar weights: The ``C × n²`` FC weights.
    :ivar biases: The ``C`` FC biases.  ``PowEMLRPrime`` keeps them at zero.
    :ivar eps_reg: The covariance ridge or ``None`` for ``default_ridge``.
    :ivar reduction: The optional ``n × d`` channel reduction map.
    :ivar shared_P: The symmetric anchor shared by every class of
        ``PowEMLRPrime``.
    """

    head: HeadKind
    weights: FloatArray
    biases: FloatArray
    eps_reg: Optional[float] = None
    reduction: Optional[FloatArray] = None
    shared_P: Optional[FloatArray] = None

    @property
    def classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def d(self) -> int:
        """
        The number of feature channels the model accepts.
        """
        if self.reduction is not None:
            return int(self.reduction.shape[1])
        return isqrt(self.weights.shape[1])

    def check_compatible(self, dataset: Dataset) -> None:
        """
        :raise ShapeError: If ``dataset`` has a different channel or class
            count than the model.
        """
        if dataset.d != self.d:
            raise ShapeError((self.d,), (dataset.d,))
        if dataset.classes != self.classes:
            raise ShapeError((self.classes,), (dataset.classes,))

    def copy(self) -> GcpModel:
        return GcpModel(
            self.head,
            self.weights.copy(),
            self.biases.copy(),
            self.eps_reg,
            None if self.reduction is None else self.reduction.copy(),
            None if self.shared_P is None else self.shared_P.copy(),
        )

    def pool(self, X: FloatArray) -> SpdMatrix:
        if self.reduction is not None:
            X = self.reduction @ X
        eps = default_ridge(X) if self.eps_reg is None else self.eps_reg
        return covariance_pool(X, eps)

    def head_vector(self, S: SpdMatrix) -> FloatArray:
        """
        The head's matrix function of ``S``, vectorized.
        """
        return vec_sym(head_features(self.head, S))

    def fc_inputs(self, head_vectors: FloatArray) -> FloatArray:
        if self.shared_P is not None:
            return head_vectors - self.shared_P.ravel()
        return head_vectors

    def logits(self, samples: Sequence[FeatureSample]) -> FloatArray:
        vectors = np.stack([self.head_vector(self.pool(s.X)) for s in samples])
        return self.fc_inputs(vectors) @ self.weights.T - self.biases


def _initial_model(cfg: TrainConfig, d: int, classes: int, rng: Generator) -> GcpModel:
    n = d if cfg.reduce_dim is None else cfg.reduce_dim
    weights = rng.normal(scale=cfg.init_scale, size=(classes, n * n))
    reduction = None
    if cfg.reduce_dim is not None:
        reduction = rng.normal(size=(n, d)) / np.sqrt(d)
    shared_P = None
    if cfg.head.tag is HeadTag.PowEMLRPrime:
        shared = cfg.head.shared_P
        shared_P = np.eye(n) if shared is None else shared.entries.copy()
    return GcpModel(cfg.head, weights, np.zeros(classes), cfg.eps_reg, reduction, shared_P)


@frozen(eq=False)
class Gradients:
    """
    Gradients of a mean batch loss with respect to a ``GcpModel``.
    """

    weights: FloatArray
    biases: FloatArray
    reduction: Optional[FloatArray] = None
    shared_P: Optional[FloatArray] = None


def _fc_gradients(
    model: GcpModel, head_vectors: FloatArray, labels: IntArray
) -> tuple[float, Gradients, FloatArray]:
    x = model.fc_inputs(head_vectors)
    loss, g = softmax_xent_batch(x @ model.weights.T - model.biases, labels)
    shared_grad = None
    biases_grad = -g.sum(axis=0)
    if model.shared_P is not None:
        n = model.shared_P.shape[0]
        back = (g.sum(axis=0) @ model.weights).reshape(n, n)
        shared_grad = -(back + back.T) / 2
        biases_grad = np.zeros_like(biases_grad)
    return loss, Gradients(g.T @ x, biases_grad, None, shared_grad), g


def loss_and_gradients(
    model: GcpModel, samples: Sequence[FeatureSample]
) -> tuple[float, Gradients]:
    """
    The mean cross-entropy of ``samples`` and its gradients.

    When ``model.eps_reg`` is ``None`` the ridge of each pooled covariance is
    treated as a constant with respect to the reduction map.
    """
    pooled = [model.pool(s.X) for s in samples]
    vectors = np.stack([model.head_vector(S) for S in pooled])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    loss, grads, g = _fc_gradients(model, vectors, labels)
    W = model.reduction
    if W is None:
        return loss, grads
    n = W.shape[0]
    reduction_grad = np.zeros_like(W)
    for sample, S, g_i in zip(samples, pooled, g):
        S_bar = head_features_vjp(model.head, S, (g_i @ model.weights).reshape(n, n)).entries
        centered = sample.X - sample.X.mean(axis=1, keepdims=True)
        reduction_grad += 2 * S_bar @ W @ (centered @ centered.T / sample.X.shape[1])
    return loss, evolve(grads, reduction=reduction_grad)


def _update(model: GcpModel, grads: Gradients, cfg: TrainConfig, epoch: int) -> None:
    schedule = cfg.lr_schedule
    factor = cfg.sgd.classifier_factor
    lr = scheduled_lr(cfg.sgd.lr, epoch, schedule)
    weight_base = cfg.sgd.lr if cfg.weight_lr is None else cfg.weight_lr
    weight_lr = scheduled_lr(weight_base, epoch, schedule) * factor
    decay = cfg.weight_decay

    model.weights = sgd_step(model.weights, grads.weights + decay * model.weights, weight_lr)
    model.biases = sgd_step(model.biases, grads.biases, lr * factor)
    if model.shared_P is not None and grads.shared_P is not None:
        model.shared_P = sgd_step(model.shared_P, grads.shared_P, lr * factor)
    if model.reduction is not None and grads.reduction is not None:
        model.reduction = sgd_step(
            model.reduction, grads.reduction + decay * model.reduction, lr
        )


def topk_accuracy(logits: FloatArray, labels: IntArray) -> tuple[float, float]:
    """
    Top-1 and top-5 accuracy, breaking ties in favour of the lower class
    index.
    """
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError((labels.shape[0],), logits.shape)
    if np.any(labels >= logits.shape[1]) or np.any(labels < 0):
        raise ShapeError((logits.shape[1],), (int(labels.max()) + 1,))
    order = np.argsort(-logits, axis=1, kind="stable")
    rank = np.argmax(order == labels[:, None], axis=1)
    return float(np.mean(rank < 1)), float(np.mean(rank < 5))


def evaluate(model: GcpModel, dataset: Dataset) -> tuple[float, float]:
    """
    Top-1 and top-5 accuracy of ``model`` on ``dataset``.
    """
    model.check_compatible(dataset)
    return topk_accuracy(model.logits(dataset.samples), dataset.labels)


def _failure_fields(e: Exception) -> dict[str, Any]:
    operation = e.operation if isinstance(e, (NumericFailure, DomainError)) else type(e).__name__
    residual = float(e.residual) if isinstance(e, NumericFailure) else None
    return {"operation": operation, "residual": residual}


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    validation: Optional[Dataset] = None,
    initial: Optional[GcpModel] = None,
) -> tuple[GcpModel, RunRecord]:
    """
    Train a GCP classifier with mini-batch SGD on softmax cross-entropy.

    Initialization and shuffling draw from independent streams spawned from
    ``cfg.seed``, so a run is a pure function of its arguments.  Pooled
    head features are computed once unless a reduction map is being
    learned.

    :param initial: The model to start from instead of a seeded random
        initialization.  It is not modified.

    :raise TrainingAborted: If a kernel operation fails.
    """
    init_seed, shuffle_seed = SeedSequence(cfg.seed).spawn(2)
    init_rng = Generator(PCG64(init_seed))
    shuffle_rng = Generator(PCG64(shuffle_seed))
    if initial is None:
        model = _initial_model(cfg, dataset.d, dataset.classes, init_rng)
    else:
        initial.check_compatible(dataset)
        model = initial.copy()
    if validation is not None:
        model.check_compatible(validation)
    labels = dataset.labels

    with TRAIN(
        head=cfg.head.tag.value, theta=float(cfg.head.theta), seed=cfg.seed, samples=len(dataset)
    ) as action:
        vectors = None
        if model.reduction is None:
            try:
                vectors = np.stack([model.head_vector(model.pool(s.X)) for s in dataset.samples])
            except (NumericFailure, NotPositiveDefinite, DomainError, OutOfDomain) as e:
                NUMERIC_FAILURE.log(epoch=0, batch=0, **_failure_fields(e))
                raise TrainingAborted(0, 0, str(e))

        epochs = []
        wall_times = []
        for epoch in range(cfg.epochs):
            started = perf_counter()
            with TRAIN_EPOCH(epoch=epoch) as epoch_action:
                order = shuffle_rng.permutation(len(dataset))
                total = 0.0
                for batch, start in enumerate(range(0, len(dataset), cfg.batch_size)):
                    idx = order[start : start + cfg.batch_size]
                    try:
                        if vectors is None:
                            loss, grads = loss_and_gradients(
                                model, [dataset.samples[i] for i in idx]
                            )
                        else:
                            loss, grads, _ = _fc_gradients(model, vectors[idx], labels[idx])
                        _update(model, grads, cfg, epoch)
                    except (NumericFailure, NotPositiveDefinite, DomainError, OutOfDomain) as e:
                        NUMERIC_FAILURE.log(epoch=epoch, batch=batch, **_failure_fields(e))
                        raise TrainingAborted(epoch, batch, str(e))
                    total += loss * len(idx)
                mean_loss = total / len(dataset)
                epoch_action.add_success_fields(loss=mean_loss)

            if vectors is None:
                top1, top5 = evaluate(model, dataset)
            else:
                logits = model.fc_inputs(vectors) @ model.weights.T - model.biases
                top1, top5 = topk_accuracy(logits, labels)
            val_top1 = val_top5 = None
            if validation is not None:
                val_top1, val_top5 = evaluate(model, validation)
            EPOCH_SUMMARY.log(epoch=epoch, loss=mean_loss, top1=top1, top5=top5)
            epochs.append(EpochRecord(epoch, mean_loss, top1, top5, val_top1, val_top5))
            wall_times.append(perf_counter() - started)

        action.add_success_fields(loss=epochs[-1].loss)
    return model, RunRecord(cfg, cfg.seed, epochs, wall_times)


@frozen
class BenchmarkResult:
    """
    The validation top-1 accuracy of one head at its best grid learning
    rate.
    """

    tag: str
    lr: float
    top1: list[float]

    @property
    def mean_top1(self) -> float:
        return float(np.mean(self.top1))


def benchmark_heads(
    tags: Sequence[HeadTag],
    seeds: Sequence[int],
    lr_grid: Sequence[float] = DEFAULT_LR_GRID,
    theta: float = 0.5,
    classes: int = 4,
    dim: int = 8,
    spread: float = 1.0,
    per_class: int = 32,
    epochs: int = 30,
) -> dict[HeadTag, BenchmarkResult]:
    """
    Compare heads on the standard synthetic benchmark.

    Every seed draws its own dataset, trains on half of each class and
    validates on the other half.  Each head is trained at every learning
    rate of ``lr_grid`` and reported at the one with the best mean
    validation top-1 over ``seeds``.
    """
    splits = []
    for seed in seeds:
        data = synth_dataset(classes, dim, DEFAULT_POSITIONS, 2 * per_class, spread, seed)
        splits.append((data.subset(range(0, len(data), 2)), data.subset(range(1, len(data), 2))))

    results = {}
    for tag in tags:
        best: Optional[BenchmarkResult] = None
        for lr in lr_grid:
            scores = []
            for seed, (train_set, validation) in zip(seeds, splits):
                cfg = TrainConfig(
                    HeadKind(tag, theta),
                    epochs=epochs,
                    batch_size=16,
                    sgd=SgdConfig(lr, seed=seed),
                )
                model, _ = train(train_set, cfg)
                scores.append(evaluate(model, validation)[0])
            candidate = BenchmarkResult(tag.value, lr, scores)
            if best is None or candidate.mean_top1 > best.mean_top1:
                best = candidate
        assert best is not None
        results[tag] = best
    return results
