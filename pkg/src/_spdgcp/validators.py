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
This module implements validators for ``attrs``-defined attributes.
"""

from math import isfinite
from typing import Callable, Protocol, TypeVar

import numpy as np
from zope.interface import Interface

from ._types import Attribute, FloatArray

_T = TypeVar("_T")

ValidatorType = Callable[[object, Attribute[_T], _T], None]


class Ordered(Protocol):
    def __gt__(self: _T, other: _T) -> bool: ...


def greater_than(expected: Ordered) -> ValidatorType[Ordered]:
    def validate_relation(
        inst: object, attr: Attribute[Ordered], value: Ordered
    ) -> None:
        if value > expected:
            return None

        raise ValueError(
            "{name!r} must be greater than {expected}, instead it was {actual}".format(
                name=attr.name,
                expected=expected,
                actual=value,
            ),
        )

    return validate_relation


positive = greater_than(0.0)


def non_negative(inst: object, attr: Attribute[float], value: float) -> None:
    """
    An attrs validator which accepts finite real values that are zero or
    greater.
    """
    if isfinite(value) and value >= 0:
        return None
    raise ValueError(f"{attr.name} must be non-negative, instead it was {value}")


def bounded_integer(min_bound: int) -> ValidatorType[int]:
    def validator(inst: object, attr: Attribute[int], value: int) -> None:
        """
        An attrs validator which checks an integer value to make sure it
        greater than some minimum bound.
        """
        if not isinstance(value, int):
            raise ValueError(
                f"{attr.name} must be an integer, instead it was {type(value)}",
            )
        if not (value > min_bound):
            raise ValueError(
                f"{attr.name} must be greater than {min_bound}, instead it was {value}",
            )

        return None

    return validator


positive_integer = bounded_integer(0)
non_negative_integer = bounded_integer(-1)


def square_matrix(inst: object, attr: Attribute[FloatArray], value: FloatArray) -> None:
    """
    An attrs validator which accepts two-dimensional square arrays with only
    finite entries.
    """
    if value.ndim != 2 or value.shape[0] != value.shape[1] or value.shape[0] < 1:
        raise ValueError(
            f"{attr.name} must be a non-empty square matrix, instead it has shape {value.shape}"
        )
    finite_array(inst, attr, value)


def finite_array(inst: object, attr: Attribute[FloatArray], value: FloatArray) -> None:
    """
    An attrs validator which rejects arrays holding NaN or infinite values.
    """
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{attr.name} must have only finite entries")


def provides(interface: type[Interface]) -> ValidatorType[object]:
    """
    An attrs validator which accepts only providers of ``interface``.

    :raise TypeError: Naming the attribute and the interface it should
        have provided.
    """

    def validator(inst: object, attr: Attribute[object], value: object) -> None:
        if not interface.providedBy(value):
            raise TypeError(
                f"{attr.name!r} must provide {interface.__name__} which {value!r} doesn't."
            )

    return validator
