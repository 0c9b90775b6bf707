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
Common fixtures to let the test suite focus on application logic.
"""

from os import environ

from attrs import define, field
from fixtures import Fixture, TempDir
from twisted.python.filepath import FilePath

BENCHMARK_ENVIRONMENT_VARIABLE = "SPDGCP_BENCHMARK_TESTS"


def benchmarks_enabled() -> bool:
    """
    Whether the slow statistical benchmarks were asked for.
    """
    return environ.get(BENCHMARK_ENVIRONMENT_VARIABLE) == "1"


@define(slots=False)
class TemporaryDirectory(Fixture):
    """
    Supply an empty temporary directory as a ``FilePath``.

    :ivar path: The directory, available after setup.
    """

    path: FilePath = field(default=None)

    def __attrs_post_init__(self) -> None:
        Fixture.__init__(self)

    def _setUp(self) -> None:
        self.path = FilePath(self.useFixture(TempDir()).path)
