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
Eliot field, message, and action definitions for spd-gcp-geometry.
"""

from json import JSONEncoder
from typing import Any, Callable, TypeVar, cast

from eliot import ActionType, Field, MessageType
from eliot.json import EliotJSONEncoder
from eliot.testing import capture_logging as _capture_logging
from typing_extensions import ParamSpec

EPOCH = Field.for_types("epoch", [int], "A zero-based training epoch index.")

BATCH = Field.for_types("batch", [int], "A zero-based mini-batch index within an epoch.")

STEP = Field.for_types("step", [int], "A zero-based optimization step index.")

LOSS = Field.for_types("loss", [float], "A mean softmax cross-entropy loss.")

TOP1 = Field.for_types("top1", [float, None], "A top-1 accuracy in [0, 1].")

TOP5 = Field.for_types("top5", [float, None], "A top-5 accuracy in [0, 1].")

HEAD = Field.for_types("head", [str], "The tag of a classifier head.")

THETA = Field.for_types("theta", [float], "A matrix power deformation parameter.")

SEED = Field.for_types("seed", [int], "The master random seed of a run.")

SAMPLES = Field.for_types("samples", [int], "A number of samples.")

OPERATION = Field.for_types(
    "operation", [str], "The name of the kernel operation that failed."
)

RESIDUAL = Field.for_types(
    "residual", [float, None], "A relative residual reported by a kernel operation."
)

EIGENVALUE = Field.for_types(
    "eigenvalue", [float], "The smallest eigenvalue of a rejected iterate."
)

INVARIANT = Field.for_types("invariant", [str], "The name of a checked invariant.")

DEVIATION = Field.for_types(
    "deviation", [float], "The measured deviation from an invariant."
)

PATH = Field.for_types("path", [str], "A filesystem path.")

FORMAT = Field.for_types("format", [str], "The name of a feature file format.")

SUBCOMMAND = Field.for_types("subcommand", [str], "The CLI subcommand being run.")

WHICH = Field.for_types("which", [str], "The equivalence being checked.")

REFERENCE_MEAN = Field.for_types(
    "reference_mean", [float], "A published mean distance gap, for comparison."
)

REFERENCE_STD = Field.for_types(
    "reference_std", [float], "A published distance gap standard deviation."
)

MEAN_GAP = Field.for_types("mean_gap", [float], "The measured mean distance gap.")

EPOCH_SUMMARY = MessageType(
    "spdgcp:epoch-summary",
    [EPOCH, LOSS, TOP1, TOP5],
    "A training epoch has finished.",
)

STEP_REJECTED = MessageType(
    "spdgcp:step-rejected",
    [STEP, EIGENVALUE],
    "A Riemannian step would have left the SPD cone and was rejected.",
)

NUMERIC_FAILURE = MessageType(
    "spdgcp:numeric-failure",
    [EPOCH, BATCH, OPERATION, RESIDUAL],
    "A kernel operation failed during training; the run is being aborted.",
)

INVARIANT_VIOLATION = MessageType(
    "spdgcp:invariant-violation",
    [INVARIANT, STEP, DEVIATION],
    "A checked invariant did not hold within its tolerance.",
)

DISTGAP_REFERENCE = MessageType(
    "spdgcp:distgap-reference",
    [MEAN_GAP, REFERENCE_MEAN, REFERENCE_STD],
    "A measured distance gap alongside the published reference gap.",
)

TRAIN = ActionType(
    "spdgcp:train",
    [HEAD, THETA, SEED, SAMPLES],
    [LOSS],
    "A classifier head is being trained on a dataset.",
)

TRAIN_EPOCH = ActionType(
    "spdgcp:train:epoch",
    [EPOCH],
    [LOSS],
    "One pass over the training samples.",
)

LOAD_FEATURES = ActionType(
    "spdgcp:load-features",
    [PATH, FORMAT],
    [SAMPLES],
    "A feature file is being parsed into a dataset.",
)

EQUIVALENCE_CHECK = ActionType(
    "spdgcp:equivalence-check",
    [WHICH, THETA, SEED],
    [DEVIATION],
    "Two training procedures are being run side by side and compared.",
)

RUN_SUBCOMMAND = ActionType(
    "spdgcp:cli:run",
    [SUBCOMMAND, SEED],
    [],
    "A command-line subcommand is running.",
)

T = TypeVar("T")
P = ParamSpec("P")


def capture_logging(
    assertion: Any,
    *assertionArgs: Any,
    encoder_: JSONEncoder = EliotJSONEncoder,
    **assertionKwargs: Any,
) -> Callable[[Callable[P, T]], Callable[P, T]]:
    return cast(
        Callable[[Callable[P, T]], Callable[P, T]],
        _capture_logging(
            assertion, *assertionArgs, encoder_=encoder_, **assertionKwargs
        ),
    )
