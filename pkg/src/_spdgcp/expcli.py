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
The ``spd-gcp`` command line.

Every subcommand is deterministic given ``--seed``: trials draw from
streams spawned from the master seed and are aggregated in trial order no
matter how many run at once (see ``SPD_GEOM_THREADS``).  Output files are
written whole or not at all and embed the resolved configuration.  The
exit code is 0 exactly when every checked invariant held.
"""

from __future__ import annotations

__all__ = [
    "SAMPLERS",
    "CheckOutcome",
    "DistanceGapConfig",
    "ISpdSampler",
    "LogExpSampler",
    "Options",
    "WishartSampler",
    "check_gbwm_aim",
    "check_logs",
    "closed_form_log",
    "distance_gap",
    "equivalence_samples",
    "main",
    "run_distance_gap",
    "run_equivalence",
    "sampler_named",
    "train_config",
]

import sys
from concurrent.futures import ThreadPoolExecutor
from os import environ as os_environ
from typing import Any, Callable, Mapping, Optional, Sequence, TextIO, TypeVar

import numpy as np
from attrs import evolve, field, frozen
from cattrs.preconf import json
from eliot import FileDestination, add_destinations, remove_destination
from numpy.random import PCG64, Generator, SeedSequence
from scipy.linalg import cholesky as scipy_cholesky
from scipy.linalg import fractional_matrix_power, logm
from twisted.python import usage
from twisted.python.filepath import FilePath
from zope.interface import Attribute, Interface, implementer

from . import __version__
from .config import ConfigError, IniConfig, empty_config, read_thread_cap
from .eliot import DISTGAP_REFERENCE, INVARIANT_VIOLATION, RUN_SUBCOMMAND
from .gcp import (
    CSV,
    F64BIN,
    DEFAULT_POSITIONS,
    FeatureParseError,
    TrainConfig,
    TrainingAborted,
    benchmark_heads,
    covariance_pool,
    default_ridge,
    load_features,
    synth_dataset,
    train,
    write_run,
)
from .heads import DegenerateDirection, HeadKind, HeadTag
from .manifold import (
    MetricFamily,
    MetricSpec,
    NonCommuting,
    OutOfDomain,
    UnsupportedDistance,
    UnsupportedMetric,
    gbwm_aim_check,
    geodesic_dist,
    rielog_at,
    rielog_identity,
    rieexp_identity,
)
from .optim import (
    EquivalenceReport,
    StepRejected,
    powtmlr_divergence,
    rsgd_equivalence,
    scalepow_equivalence,
)
from .symlin import (
    DomainError,
    NotPositiveDefinite,
    NumericFailure,
    ShapeError,
    SpdMatrix,
    SymMatrix,
    identity,
    mexp,
)
from .validators import positive, positive_integer, provides

_T = TypeVar("_T")

LOG_TOLERANCE = 1e-9
GBWM_AIM_TOLERANCE = 1e-8
PERTURBATION = 1e-6

EQUIVALENCE_LR = {"scalepow": 0.1, "rsgd": 0.01, "powtmlr": 0.1}

REFERENCE_MEAN_GAP = 335.84
REFERENCE_STD_GAP = 1.61

_FAILURES = (
    ConfigError,
    DegenerateDirection,
    DomainError,
    FeatureParseError,
    NonCommuting,
    NotPositiveDefinite,
    NumericFailure,
    OSError,
    OutOfDomain,
    ShapeError,
    StepRejected,
    TrainingAborted,
    UnsupportedDistance,
    UnsupportedMetric,
)


class ISpdSampler(Interface):
    """
    A source of random SPD matrices.
    """

    name: str = Attribute("The name the sampler is selected by on the command line.")

    def sample(rng: Generator, n: int) -> SpdMatrix:
        """
        Draw one ``n × n`` SPD matrix.
        """


@implementer(ISpdSampler)
@frozen
class WishartSampler:
    """
    ``A Aᵀ / n + I`` for a standard normal ``A``.
    """

    name = "wishart"

    def sample(self, rng: Generator, n: int) -> SpdMatrix:
        a = rng.standard_normal((n, n))
        return SpdMatrix(a @ a.T / n + np.eye(n))


@implementer(ISpdSampler)
@frozen
class LogExpSampler:
    """
    ``mexp(scale·B)`` for a symmetric ``B`` with standard normal
    off-diagonal entries scaled by ``1/√(2n)``.
    """

    scale: float = 1.0
    name = "logexp"

    def sample(self, rng: Generator, n: int) -> SpdMatrix:
        r = rng.standard_normal((n, n))
        return mexp(SymMatrix(self.scale * (r + r.T) / np.sqrt(2 * n)))


SAMPLERS: dict[str, ISpdSampler] = {
    WishartSampler.name: WishartSampler(),
    LogExpSampler.name: LogExpSampler(),
}


def sampler_named(name: str) -> ISpdSampler:
    """
    :raise ConfigError: If there is no sampler by that name.
    """
    try:
        return SAMPLERS[name]
    except KeyError:
        raise ConfigError("sampler", f"expected one of {', '.join(SAMPLERS)}, got {name!r}")


def _trial_rngs(seed: int, trials: int) -> list[Generator]:
    return [Generator(PCG64(child)) for child in SeedSequence(seed).spawn(trials)]


def _run_trials(
    trial: Callable[[int, Generator], _T], seed: int, trials: int, threads: int
) -> list[_T]:
    """
    Run ``trial`` once per trial index with its own random stream and
    return the results in trial order.
    """
    rngs = _trial_rngs(seed, trials)
    with ThreadPoolExecutor(max_workers=max(1, min(threads, trials))) as pool:
        return list(pool.map(trial, range(trials), rngs))


def _random_sym(rng: Generator, n: int, norm: float) -> SymMatrix:
    r = rng.standard_normal((n, n))
    r = r + r.T
    return SymMatrix(norm * r / np.linalg.norm(r))


def _relative(actual: Any, expected: Any) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.linalg.norm(actual - expected)) / max(1.0, float(np.linalg.norm(expected)))


@frozen
class CheckOutcome:
    """
    One measured invariant.
    """

    invariant: str
    trial: int
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)


@frozen
class DistanceGapConfig:
    n: int = field(validator=positive_integer)
    pairs: int = field(validator=positive_integer)
    theta: float = field(validator=positive)
    sampler: ISpdSampler = field(validator=provides(ISpdSampler))
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "pairs": self.pairs,
            "theta": self.theta,
            "sampler": self.sampler.name,
            "seed": self.seed,
        }


def distance_gap(P: SpdMatrix, Q: SpdMatrix, theta: float) -> tuple[float, float]:
    """
    :return: ``(d_PEM, d_LEM)``, the ``(θ,1,0)``-EM and ``(1,0)``-LEM
        distances between ``P`` and ``Q``.
    """
    pem = geodesic_dist(MetricSpec(MetricFamily.EM, theta=theta), P, Q)
    lem = geodesic_dist(MetricSpec(MetricFamily.LEM), P, Q)
    return pem, lem


def run_distance_gap(config: DistanceGapConfig, threads: int) -> tuple[bytes, dict[str, Any]]:
    """
    Measure the distance gap on random pairs.

    :return: The per-pair CSV and the summary.
    """

    def trial(index: int, rng: Generator) -> tuple[float, float]:
        P = config.sampler.sample(rng, config.n)
        Q = config.sampler.sample(rng, config.n)
        return distance_gap(P, Q, config.theta)

    distances = _run_trials(trial, config.seed, config.pairs, threads)
    gaps = np.array([abs(pem - lem) for pem, lem in distances])
    relative = np.array([abs(pem - lem) / lem for pem, lem in distances])
    lines = ["pair_id,d_pem,d_lem,abs_diff"] + [
        f"{i},{pem!r},{lem!r},{gap!r}" for i, ((pem, lem), gap) in enumerate(zip(distances, gaps))
    ]
    summary = {
        "config": config.to_dict(),
        "mean_gap": float(np.mean(gaps)),
        "std_gap": float(np.std(gaps)),
        "mean_relative_gap": float(np.mean(relative)),
        "reference_mean_gap": REFERENCE_MEAN_GAP,
        "reference_std_gap": REFERENCE_STD_GAP,
    }
    return ("\n".join(lines) + "\n").encode("utf-8"), summary


LOG_CHECK_SPECS = (
    MetricSpec(MetricFamily.LEM),
    MetricSpec(MetricFamily.AIM, theta=0.5),
    MetricSpec(MetricFamily.EM, theta=0.5),
    MetricSpec(MetricFamily.MPEM, theta=0.5, theta2=1.0),
    MetricSpec(MetricFamily.LCM, theta=0.5),
    MetricSpec(MetricFamily.BWM, theta=0.5),
    MetricSpec(MetricFamily.GBWM, theta=0.5),
)


def closed_form_log(spec: MetricSpec, P: SpdMatrix) -> Any:
    """
    The logarithm at the identity evaluated directly from its closed form
    with general-purpose ``scipy.linalg`` matrix functions.
    """
    p = P.entries
    family = spec.family
    if family in (MetricFamily.LEM, MetricFamily.AIM):
        return np.real(logm(p))
    if family is MetricFamily.LCM:
        power = np.real(fractional_matrix_power(p, spec.theta))
        L = scipy_cholesky((power + power.T) / 2, lower=True)
        lower = np.tril(L, -1)
        return (lower + lower.T + 2 * np.diag(np.log(np.diag(L)))) / spec.theta
    t0 = spec.theta0
    return (np.real(fractional_matrix_power(p, t0)) - np.eye(P.n)) / t0


def check_logs(
    n: int, trials: int, seed: int, threads: int, perturb: bool = False
) -> list[CheckOutcome]:
    """
    Check the logarithms and exponentials of every metric family on random
    inputs.

    :param perturb: Corrupt every computed value slightly, which must make
        the check fail.
    """
    sampler = WishartSampler()
    fault = PERTURBATION if perturb else 0.0

    def trial(index: int, rng: Generator) -> list[CheckOutcome]:
        P = sampler.sample(rng, n)
        Q = sampler.sample(rng, n)
        V = _random_sym(rng, n, 0.5)
        outcomes = []

        def record(name: str, actual: Any, expected: Any) -> None:
            deviation = _relative(np.asarray(actual) + fault, expected)
            outcomes.append(CheckOutcome(name, index, deviation, LOG_TOLERANCE))

        for spec in LOG_CHECK_SPECS:
            family = spec.family.value
            log_p = rielog_identity(spec, P)
            record(f"{family}:closed-form", log_p.entries, closed_form_log(spec, P))
            record(
                f"{family}:round-trip",
                rielog_identity(spec, rieexp_identity(spec, V)).entries,
                V.entries,
            )
            record(
                f"{family}:log-at-identity",
                rielog_at(spec, identity(n), P).vec.entries,
                log_p.entries,
            )
            if spec.family in (MetricFamily.LEM, MetricFamily.AIM):
                scaled = evolve(spec, alpha=3.0)
                record(
                    f"{family}:scaling",
                    rielog_at(scaled, P, Q).vec.entries,
                    rielog_at(spec, P, Q).vec.entries,
                )
        return outcomes

    results = _run_trials(trial, seed, trials, threads)
    return [outcome for outcomes in results for outcome in outcomes]


def check_gbwm_aim(
    theta: float, n: int, trials: int, seed: int, threads: int, perturb: bool = False
) -> list[CheckOutcome]:
    """
    Compare the base-point GBWM metric with a quarter of the AIM metric on
    random ``(P, V, W)``.
    """
    sampler = WishartSampler()

    def trial(index: int, rng: Generator) -> CheckOutcome:
        P = sampler.sample(rng, n)
        V = _random_sym(rng, n, 1.0)
        W = _random_sym(rng, n, 1.0)
        gbwm, quarter_aim = gbwm_aim_check(theta, P, V, W)
        if perturb:
            gbwm *= 1 + PERTURBATION
        scale = max(abs(gbwm), abs(quarter_aim), np.finfo(np.float64).tiny)
        return CheckOutcome("gbwm-aim", index, abs(gbwm - quarter_aim) / scale, GBWM_AIM_TOLERANCE)

    return _run_trials(trial, seed, trials, threads)


def _report_failures(outcomes: Sequence[CheckOutcome], stderr: TextIO) -> bool:
    failed = [o for o in outcomes if not o.passed]
    for o in failed:
        INVARIANT_VIOLATION.log(invariant=o.invariant, step=o.trial, deviation=o.deviation)
        stderr.write(
            f"{o.invariant} failed on trial {o.trial}: "
            f"deviation {o.deviation!r} > {o.tolerance!r}\n"
        )
    return not failed


def _write(out: Optional[str], content: bytes) -> None:
    if out is not None:
        FilePath(out).setContent(content)


_converter = json.make_converter()


def _dumps(content: Any) -> bytes:
    return (_converter.dumps(content, sort_keys=True, indent=2) + "\n").encode("utf-8")


class _SeedOptions(usage.Options):
    optParameters = [
        ("seed", None, 0, "The master random seed.", int),
    ]


class DistgapOptions(_SeedOptions):
    synopsis = "[options]"
    optParameters = [
        ("n", None, 256, "The size of the sampled matrices.", int),
        ("pairs", None, 1000, "The number of random pairs.", int),
        ("theta", None, 0.5, "The power of the power-Euclidean metric.", float),
        ("sampler", None, "wishart", "The SPD sampler: wishart or logexp."),
        ("out", None, None, "Write the per-pair CSV here and the summary next to it."),
    ]

    def postOptions(self) -> None:
        if self["n"] < 2:
            raise usage.UsageError("--n must be at least 2")
        if self["pairs"] < 1:
            raise usage.UsageError("--pairs must be at least 1")


class CheckLogsOptions(_SeedOptions):
    synopsis = "[options]"
    optParameters = [
        ("n", None, 8, "The size of the sampled matrices.", int),
        ("trials", None, 100, "The number of random instances.", int),
        ("out", None, None, "Write a JSON report here."),
    ]
    optFlags = [("perturb", None, "Inject a small fault to test the harness itself.")]


class EquivOptions(_SeedOptions):
    synopsis = "[options]"
    optParameters = [
        ("which", None, "scalepow", "The equivalence to check: scalepow, rsgd or powtmlr."),
        ("steps", None, 100, "The number of training steps.", int),
        ("instances", None, 100, "The number of random instances for powtmlr.", int),
        ("theta", None, 0.5, "The matrix power.", float),
        ("lr", None, None, "The learning rate (default: per equivalence).", float),
        ("out", None, None, "Write the JSON report here."),
    ]

    def postOptions(self) -> None:
        if self["which"] not in ("scalepow", "rsgd", "powtmlr"):
            raise usage.UsageError(f"unknown equivalence {self['which']!r}")


class TrainOptions(_SeedOptions):
    synopsis = "[options]"
    optParameters = [
        ("data", None, "synth", "A feature file, or 'synth' for the synthetic benchmark."),
        ("format", None, None, "The feature file format: csv or f64bin (default: by extension)."),
        ("validation", None, None, "An optional validation feature file."),
        ("head", None, "pow", "The head: " + ", ".join(t.value for t in HeadTag) + "."),
        ("theta", None, 0.5, "The matrix power of the head.", float),
        ("ns-iters", None, 0, "Newton-Schulz iterations for theta = 0.5 (0: eig).", int),
        ("epochs", None, None, "The number of epochs.", int),
        ("lr", None, None, "The base learning rate.", float),
        ("batch-size", None, None, "The mini-batch size.", int),
        ("classifier-factor", None, None, "The FC learning rate multiplier.", float),
        ("classes", None, 4, "Synthetic data: the number of classes.", int),
        ("dim", None, 8, "Synthetic data: the number of channels.", int),
        ("per-class", None, 50, "Synthetic data: samples per class.", int),
        ("spread", None, 1.0, "Synthetic data: the class separation.", float),
        ("config", None, None, "An INI file with train.* options."),
        ("out", None, None, "The directory to write the run into."),
    ]
    optFlags = [("no-timing", None, "Do not write timing.json.")]

    def postOptions(self) -> None:
        try:
            HeadTag(self["head"])
        except ValueError:
            raise usage.UsageError(f"unknown head {self['head']!r}")


class GbwmAimOptions(_SeedOptions):
    synopsis = "[options]"
    optParameters = [
        ("theta", None, 0.5, "The deformation power.", float),
        ("n", None, 8, "The size of the sampled matrices.", int),
        ("trials", None, 100, "The number of random triples.", int),
        ("out", None, None, "Write a JSON report here."),
    ]
    optFlags = [("perturb", None, "Inject a small fault to test the harness itself.")]

    def postOptions(self) -> None:
        if self["theta"] == 0:
            raise usage.UsageError("--theta must be nonzero")


class BenchmarkOptions(_SeedOptions):
    synopsis = "[options]"
    optParameters = [
        ("heads", None, "pow,powtmlr,scalepow", "Comma-separated heads to compare."),
        ("seeds", None, 10, "The number of seeds.", int),
        ("theta", None, 0.5, "The matrix power.", float),
        ("epochs", None, 30, "The number of epochs.", int),
        ("out", None, None, "Write the JSON results here."),
    ]


class Options(usage.Options):
    synopsis = "[options] <subcommand> [subcommand options]"
    optParameters = [
        ("log-file", None, None, "Write eliot logs to this file."),
    ]
    subCommands = [
        ("distgap", None, DistgapOptions, "Distance gap between PEM and LEM."),
        ("check-logs", None, CheckLogsOptions, "Check every family's logarithm."),
        ("equiv", None, EquivOptions, "Check a training equivalence."),
        ("train", None, TrainOptions, "Train a GCP classifier."),
        ("gbwm-aim", None, GbwmAimOptions, "Check GBWM against quarter AIM."),
        ("benchmark", None, BenchmarkOptions, "Compare heads on synthetic data."),
    ]

    def opt_version(self) -> None:
        """
        Display the version and exit.
        """
        print(__version__)
        sys.exit(0)

    def postOptions(self) -> None:
        if self.subCommand is None:
            raise usage.UsageError("a subcommand is required")


@frozen
class _Context:
    stdout: TextIO
    stderr: TextIO
    threads: int


def _distgap(options: DistgapOptions, context: _Context) -> int:
    config = DistanceGapConfig(
        options["n"],
        options["pairs"],
        options["theta"],
        sampler_named(options["sampler"]),
        options["seed"],
    )
    rows, summary = run_distance_gap(config, context.threads)
    DISTGAP_REFERENCE.log(
        mean_gap=summary["mean_gap"],
        reference_mean=REFERENCE_MEAN_GAP,
        reference_std=REFERENCE_STD_GAP,
    )
    if options["out"] is not None:
        out = FilePath(options["out"])
        out.setContent(rows)
        out.siblingExtension(".json").setContent(_dumps(summary))
    context.stdout.write(_dumps(summary).decode("utf-8"))
    return 0 if summary["mean_gap"] > 0 else 1


def _outcomes_report(config: dict[str, Any], outcomes: Sequence[CheckOutcome]) -> bytes:
    return _dumps(
        {
            "config": config,
            "passed": all(o.passed for o in outcomes),
            "max_deviation": max((o.deviation for o in outcomes), default=0.0),
            "failures": [_converter.unstructure(o) for o in outcomes if not o.passed],
        }
    )


def _check_logs(options: CheckLogsOptions, context: _Context) -> int:
    outcomes = check_logs(
        options["n"], options["trials"], options["seed"], context.threads, bool(options["perturb"])
    )
    passed = _report_failures(outcomes, context.stderr)
    config = {
        "n": options["n"],
        "trials": options["trials"],
        "seed": options["seed"],
        "perturb": bool(options["perturb"]),
    }
    _write(options["out"], _outcomes_report(config, outcomes))
    return 0 if passed else 1


def _gbwm_aim(options: GbwmAimOptions, context: _Context) -> int:
    outcomes = check_gbwm_aim(
        options["theta"],
        options["n"],
        options["trials"],
        options["seed"],
        context.threads,
        bool(options["perturb"]),
    )
    passed = _report_failures(outcomes, context.stderr)
    config = {
        "theta": options["theta"],
        "n": options["n"],
        "trials": options["trials"],
        "seed": options["seed"],
        "perturb": bool(options["perturb"]),
    }
    _write(options["out"], _outcomes_report(config, outcomes))
    return 0 if passed else 1


def equivalence_samples(seed: int) -> tuple[list[SpdMatrix], list[int]]:
    """
    Pooled covariances of a small synthetic dataset with four classes of
    eight-channel features.
    """
    data = synth_dataset(4, 8, DEFAULT_POSITIONS, 8, 1.0, seed)
    samples = [covariance_pool(s.X, default_ridge(s.X)) for s in data.samples]
    return samples, list(data.labels)


def run_equivalence(
    which: str, theta: float, steps: int, instances: int, lr: Optional[float], seed: int
) -> EquivalenceReport:
    """
    Run one of the equivalence harnesses on ``equivalence_samples(seed)``.

    :param lr: The learning rate, or ``None`` for the harness default.
    """
    if lr is None:
        lr = EQUIVALENCE_LR[which]
    if which != "powtmlr" and not theta > 0:
        raise ConfigError("theta", f"{which} requires a positive theta, got {theta}")
    samples, labels = equivalence_samples(seed)
    if which == "scalepow":
        return scalepow_equivalence(samples, labels, 4, theta, steps, lr, seed)
    if which == "rsgd":
        return rsgd_equivalence(samples, labels, 4, theta, steps, lr, seed)
    rng = Generator(PCG64(seed))
    n = samples[0].n
    cases = [
        (
            samples[i % len(samples)],
            labels[i % len(samples)],
            rng.normal(scale=0.1, size=(4, n * n)),
            rng.normal(size=4),
        )
        for i in range(instances)
    ]
    return powtmlr_divergence(cases, theta, lr, seed)


def _equiv(options: EquivOptions, context: _Context) -> int:
    report = run_equivalence(
        options["which"],
        options["theta"],
        options["steps"],
        options["instances"],
        options["lr"],
        options["seed"],
    )
    content = _converter.unstructure(report)
    content["passed"] = report.passed
    content["config"] = {
        "which": options["which"],
        "theta": options["theta"],
        "steps": options["steps"],
        "instances": options["instances"],
        "lr": EQUIVALENCE_LR[options["which"]] if options["lr"] is None else options["lr"],
        "seed": options["seed"],
    }
    _write(options["out"], _dumps(content))
    if not report.passed:
        context.stderr.write(
            f"{report.which} failed at step {report.first_failure}: "
            f"deviation {report.deviations[report.first_failure]!r}\n"
        )
        return 1
    return 0


def _feature_format(path: str, given: Optional[str]) -> str:
    if given is not None:
        return given
    return F64BIN if path.endswith((".f64bin", ".bin")) else CSV


def train_config(options: TrainOptions) -> TrainConfig:
    """
    The training configuration from ``--config`` with command line flags
    taking precedence.
    """
    cfg = empty_config
    if options["config"] is not None:
        cfg = IniConfig.from_path(FilePath(options["config"]))
    head = HeadKind(HeadTag(options["head"]), options["theta"], ns_iters=options["ns-iters"])
    config = TrainConfig.from_config(cfg, head)
    overrides: dict[str, Any] = {}
    if options["epochs"] is not None:
        overrides["epochs"] = options["epochs"]
    if options["batch-size"] is not None:
        overrides["batch_size"] = options["batch-size"]
    sgd_overrides: dict[str, Any] = {"seed": options["seed"]}
    if options["lr"] is not None:
        sgd_overrides["lr"] = options["lr"]
    if options["classifier-factor"] is not None:
        sgd_overrides["classifier_factor"] = options["classifier-factor"]
    try:
        sgd = evolve(config.sgd, **sgd_overrides)
    except ValueError as e:
        raise ConfigError("lr", str(e))
    return evolve(config, sgd=sgd, **overrides)


def _train(options: TrainOptions, context: _Context) -> int:
    config = train_config(options)
    validation = None
    if options["data"] == "synth":
        data = synth_dataset(
            options["classes"],
            options["dim"],
            DEFAULT_POSITIONS,
            2 * options["per-class"],
            options["spread"],
            options["seed"],
        )
        dataset = data.subset(range(0, len(data), 2))
        validation = data.subset(range(1, len(data), 2))
    else:
        dataset = load_features(
            FilePath(options["data"]), _feature_format(options["data"], options["format"])
        )
    if options["validation"] is not None:
        validation = load_features(
            FilePath(options["validation"]),
            _feature_format(options["validation"], options["format"]),
        )
    _, record = train(dataset, config, validation)
    if options["out"] is not None:
        write_run(record, FilePath(options["out"]), timing=not options["no-timing"])
    last = record.epochs[-1]
    context.stdout.write(
        f"epoch {last.epoch}: loss {last.loss!r} "
        f"top1 {last.train_top1!r} top5 {last.train_top5!r}\n"
    )
    return 0


def _benchmark(options: BenchmarkOptions, context: _Context) -> int:
    try:
        tags = [HeadTag(name.strip()) for name in options["heads"].split(",")]
    except ValueError as e:
        raise ConfigError("heads", str(e))
    seeds = [options["seed"] + i for i in range(options["seeds"])]
    results = benchmark_heads(tags, seeds, theta=options["theta"], epochs=options["epochs"])
    content = {
        "config": {
            "heads": [t.value for t in tags],
            "seeds": seeds,
            "theta": options["theta"],
            "epochs": options["epochs"],
        },
        "results": {
            tag.value: dict(_converter.unstructure(result), mean_top1=result.mean_top1)
            for tag, result in results.items()
        },
    }
    _write(options["out"], _dumps(content))
    context.stdout.write(_dumps(content).decode("utf-8"))
    pow_result = results.get(HeadTag.PowEMLR)
    tmlr_result = results.get(HeadTag.PowTMLR)
    if pow_result is not None and tmlr_result is not None:
        if pow_result.mean_top1 < tmlr_result.mean_top1:
            INVARIANT_VIOLATION.log(
                invariant="pow-over-powtmlr",
                step=0,
                deviation=tmlr_result.mean_top1 - pow_result.mean_top1,
            )
            return 1
    return 0


_COMMANDS: dict[str, Callable[[Any, _Context], int]] = {
    "distgap": _distgap,
    "check-logs": _check_logs,
    "equiv": _equiv,
    "train": _train,
    "gbwm-aim": _gbwm_aim,
    "benchmark": _benchmark,
}


def main(
    argv: Optional[Sequence[str]] = None,
    environ: Optional[Mapping[str, str]] = None,
    stdout: Optional[TextIO] = None,
    stderr: Optional[TextIO] = None,
) -> int:
    """
    Run the command line.

    :return: The process exit code.
    """
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    environ = os_environ if environ is None else environ

    options = Options()
    try:
        options.parseOptions(list(sys.argv[1:] if argv is None else argv))
        threads = read_thread_cap(environ)
    except (usage.UsageError, ConfigError) as e:
        stderr.write(f"{options}\nerror: {e}\n")
        return 1

    destination = None
    log_file = None
    if options["log-file"] is not None:
        try:
            log_file = FilePath(options["log-file"]).open("a")
        except OSError as e:
            stderr.write(f"error: cannot open log file: {e}\n")
            return 1
        destination = FileDestination(file=log_file)
        add_destinations(destination)
    try:
        sub = options.subOptions
        with RUN_SUBCOMMAND(subcommand=options.subCommand, seed=sub["seed"]):
            try:
                return _COMMANDS[options.subCommand](sub, _Context(stdout, stderr, threads))
            except _FAILURES as e:
                stderr.write(f"error: {type(e).__name__}: {e}\n")
                return 1
    finally:
        if destination is not None:
            remove_destination(destination)
        if log_file is not None:
            log_file.close()
