# -*- coding: utf-8 -*-
"""
This module contains the enumerations and exception types shared by the
cfdglib modules.
"""
from enum import IntEnum
from typing import Optional


class ConditionLabel(IntEnum):
    """Class identifier fed to the denoiser. NULL is the unconditional token."""
    OFFLINE = 0
    ONLINE = 1
    NULL = 2


class SourceTag(IntEnum):
    """Origin of a transition inside a training batch."""
    ONLINE = 0
    OFFLINE = 1
    SYN_ONLINE = 2
    SYN_OFFLINE = 3


class Paradigm(IntEnum):
    CONCAT_5050 = 0
    OORB = 1


class DiffusionSource(IntEnum):
    BOTH = 0
    ONLINE_ONLY = 1


class Generation(IntEnum):
    GUIDED = 0
    UNCONDITIONAL = 1


class FinetuneMode(IntEnum):
    BASELINE = 0
    CFDG = 1
    CFDG_NO_GUIDANCE = 2
    CFDG_NO_OFFLINE_DA = 3
    SYNTHER = 4

    @classmethod
    def from_name(cls, name: str) -> 'FinetuneMode':
        try:
            return cls[name.upper()]
        except KeyError:
            choices = ', '.join(m.name.lower() for m in cls)
            raise ConfigError('mode', f"unknown mode '{name}' (choose from {choices})")


def parse_enum(enum_cls, field: str, value: str):
    """
    Parse a lower-case config token into an enum member.

    Args:
        enum_cls: IntEnum class
        field: Config field name (used in the error message)
        value: Token such as 'concat5050' or 'oorb'

    Returns:
        Enum member
    """
    token = str(value).strip().upper().replace('-', '_')
    aliases = {'CONCAT5050': 'CONCAT_5050'}
    token = aliases.get(token, token)
    try:
        return enum_cls[token]
    except KeyError:
        choices = ', '.join(m.name.lower() for m in enum_cls)
        raise ConfigError(field, f"invalid value '{value}' (choose from {choices})")


class LabException(Exception):
    """
    Base class of all cfdglib errors.
    """
    exit_code = 1

    def __init__(self, msg: str = None):
        super().__init__(msg)

    def __str__(self):
        return f'{type(self).__name__}: {super().__str__()}'


class InvalidInputError(LabException):
    """Arguments violate an operation's preconditions."""
    exit_code = 2


class ConfigError(InvalidInputError):
    """A configuration key or field is unknown or has an invalid value."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


class CompositionError(InvalidInputError):
    """A batch could not be composed because a required buffer is empty."""

    def __init__(self, buffer_name: str, msg: str = None):
        super().__init__(msg or f"buffer '{buffer_name}' is empty")
        self.buffer_name = buffer_name


class LabIOError(LabException):
    """Files could not be read or written."""
    exit_code = 3


class NumericError(LabException):
    """Non-finite values appeared during a computation."""
    exit_code = 4

    def __init__(self, msg: str, layer: Optional[int] = None):
        if layer is not None:
            msg = f"{msg} (layer {layer})"
        super().__init__(msg)
        self.layer = layer
