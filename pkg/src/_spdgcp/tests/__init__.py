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
The automated unit test suite.
"""


def _configure_hypothesis() -> None:
    """
    Define Hypothesis profiles and select one based on environment
    variables.
    """
    from os import environ

    from hypothesis import HealthCheck, settings

    base = settings(
        suppress_health_check=[
            # Matrix kernels on shared CI machines run at unpredictable
            # speeds.
            HealthCheck.too_slow,
        ],
        deadline=None,
    )

    settings.register_profile("default", base)

    settings.register_profile(
        "ci",
        base,
        max_examples=200,
    )

    settings.register_profile(
        "fast",
        base,
        max_examples=10,
    )

    settings.register_profile(
        "big",
        base,
        max_examples=2000,
    )

    profile_name = environ.get("SPDGCP_HYPOTHESIS_PROFILE", "fast")
    settings.load_profile(profile_name)
    print("Loaded profile {}".format(profile_name))


_configure_hypothesis()
