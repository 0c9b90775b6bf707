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
Re-usable type definitions for spd-gcp-geometry.
"""

from typing import TYPE_CHECKING, Callable, Generic, TypeVar

import numpy as np
from attrs import Attribute as _Attribute
from numpy.typing import NDArray

_T = TypeVar("_T")

if TYPE_CHECKING:
    Attribute = _Attribute
else:

    class Attribute(_Attribute, Generic[_T]):
        pass


# Every dense array in the package is double precision.
FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

# An elementwise real function applied to a vector of eigenvalues.
ScalarFunction = Callable[[FloatArray], FloatArray]
