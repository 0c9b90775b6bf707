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

__all__ = [
    "__version__",
    "NAME",
]

# The identifier for this package.  This appears in eliot action types,
# configuration section names and the stamp written into result files.
NAME = "spdgcp"

__version__ = "2024.6.1"
