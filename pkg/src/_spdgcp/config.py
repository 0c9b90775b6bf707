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
Helpers for reading values from spd-gcp-geometry configuration files and the
process environment.

Configuration lives in an INI file with a single ``[spdgcp]`` section::

    [spdgcp]
    train.epochs = 30
    train.lr = 0.05
    train.lr-schedule = 20:5, 25:5
"""

from __future__ import annotations

__all__ = [
    "SECTION",
    "THREADS_ENVIRONMENT_VARIABLE",
    "Config",
    "ConfigError",
    "EmptyConfig",
    "IniConfig",
    "empty_config",
    "parse_schedule",
    "read_float",
    "read_int",
    "read_optional_int",
    "read_schedule",
    "read_thread_cap",
]

from configparser import ConfigParser
from configparser import Error as ConfigParserError
from os import cpu_count
from typing import Mapping, Optional, Protocol, TypeVar, Union

from attrs import define, field
from twisted.python.filepath import FilePath

from . import NAME

_T = TypeVar("_T")

SECTION = NAME

# Caps the number of trials run concurrently by the experiment harness.
THREADS_ENVIRONMENT_VARIABLE = "SPD_GEOM_THREADS"


@define(auto_exc=False, str=True)
class ConfigError(Exception):
    """
    A configuration value or parameter combination is not acceptable.

    :ivar option: The name of the offending option or parameter.
    :ivar reason: A human-readable description of what is wrong with it.
    """

    option: str
    reason: str


class Config(Protocol):
    """
    A source of configuration values.
    """

    def get_config(
        self,
        section: str,
        option: str,
        default: object = None,
    ) -> object:
        """
        Read an option from a section of the configuration.
        """


@define
class EmptyConfig:
    """
    Pretend to be a configuration with nothing in it.
    """

    def get_config(
        self,
        section: str,
        option: str,
        default: object = None,
    ) -> object:
        return default


empty_config = EmptyConfig()


@define
class IniConfig:
    """
    Configuration read from an INI file.

    :ivar _parser: The parsed file contents.
    """

    _parser: ConfigParser = field(factory=ConfigParser)

    @classmethod
    def from_path(cls, path: FilePath) -> IniConfig:
        """
        Parse the INI file at the given path.

        :raise ConfigError: If the file cannot be decoded or parsed.
        """
        parser = ConfigParser()
        try:
            parser.read_string(path.getContent().decode("utf-8"), source=path.path)
        except (ConfigParserError, UnicodeDecodeError) as e:
            raise ConfigError(path.path, str(e))
        return cls(parser)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> IniConfig:
        """
        Build a configuration holding the given ``[spdgcp]`` options.
        """
        parser = ConfigParser()
        parser.read_dict({SECTION: dict(values)})
        return cls(parser)

    def get_config(
        self,
        section: str,
        option: str,
        default: object = None,
    ) -> object:
        return self._parser.get(section, option, fallback=default)


def _read_raw(cfg: Config, option: str) -> Optional[str]:
    value = cfg.get_config(section=SECTION, option=option, default=None)
    if value is None:
        return None
    return str(value).strip()


def read_float(cfg: Config, option: str, default: _T) -> Union[float, _T]:
    """
    Read a real number from the ``[spdgcp]`` section.

    :param cfg: The configuration to consult.
    :param option: The name of the option to read.

    :return: ``default`` if the option is missing, otherwise the parsed value.
    """
    value_str = _read_raw(cfg, option)
    if value_str is None:
        return default
    try:
        return float(value_str)
    except ValueError:
        raise ConfigError(option, f"expected a real number, got {value_str!r}")


def read_int(cfg: Config, option: str, default: _T) -> Union[int, _T]:
    """
    Read an integer from the ``[spdgcp]`` section.
    """
    value_str = _read_raw(cfg, option)
    if value_str is None:
        return default
    try:
        return int(value_str)
    except ValueError:
        raise ConfigError(option, f"expected an integer, got {value_str!r}")


def read_optional_int(cfg: Config, option: str) -> Optional[int]:
    """
    Read an integer which may be explicitly disabled with ``none``.
    """
    value_str = _read_raw(cfg, option)
    if value_str is None or value_str.lower() == "none":
        return None
    return read_int(cfg, option, None)


def parse_schedule(value_str: str) -> tuple[tuple[int, float], ...]:
    """
    Parse a learning-rate schedule written as ``epoch:divisor`` pairs
    separated by commas, for example ``20:5,25:5``.

    :raise ValueError: If the text is not in that form.
    """
    steps = []
    for item in value_str.split(","):
        item = item.strip()
        if not item:
            continue
        epoch_str, sep, divisor_str = item.partition(":")
        if not sep:
            raise ValueError(f"schedule item {item!r} is not epoch:divisor")
        steps.append((int(epoch_str), float(divisor_str)))
    return tuple(steps)


def read_schedule(
    cfg: Config, option: str, default: tuple[tuple[int, float], ...]
) -> tuple[tuple[int, float], ...]:
    """
    Read a learning-rate schedule from the ``[spdgcp]`` section.
    """
    value_str = _read_raw(cfg, option)
    if value_str is None:
        return default
    try:
        return parse_schedule(value_str)
    except ValueError as e:
        raise ConfigError(option, str(e))


def read_thread_cap(environ: Mapping[str, str]) -> int:
    """
    Determine how many trials may run concurrently.

    :param environ: The process environment to consult.

    :return: The value of ``SPD_GEOM_THREADS`` if it is set, otherwise the
        number of CPUs.
    """
    value_str = environ.get(THREADS_ENVIRONMENT_VARIABLE)
    if value_str is None:
        return cpu_count() or 1
    try:
        value = int(value_str)
    except ValueError:
        value = 0
    if value < 1:
        raise ConfigError(
            THREADS_ENVIRONMENT_VARIABLE,
            f"expected a positive integer, got {value_str!r}",
        )
    return value
