"""Self-supervised pretraining, fine-tuning and feature-reuse analysis for 3D CT segmentation"""

__version__ = "0.1.0"

from collections.abc import Mapping
from typing import Dict


class CTPretrainException(Exception):
    """Generic ctpretrain exception. Base class for all the others"""

    def __init__(self, message: str = ""):
        self.message = message
        super().__init__(message)

    def details(self) -> Dict:
        """Public attributes of the exception, used for machine-readable error output"""
        return {
            key: value if isinstance(value, (str, int, float, bool, type(None))) else repr(value)
            for key, value in vars(self).items()
            if not key.startswith("_") and key != "message"
        }


class ConfigException(CTPretrainException):
    """Exception relating to configuration errors"""


class ConfigReadError(ConfigException):
    """A config file or folder couldn't be read or parsed"""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"Config read failed for '{path}': {reason}")


class ConfigUnexpectedInputType(ConfigException):
    """Exception caused by config not being a mapping"""

    def __init__(self, config):
        self.config = config
        super().__init__(f"Provided Config isn't a mapping. Config given is:{config}")


class ConfigMissingFields(ConfigException):
    """Exception caused by config having missing fields"""

    def __init__(self, missing_fields, config):
        self.config = config
        self.missing_fields = missing_fields
        super().__init__(
            f"Config dict has fields '{sorted(config.keys())}', "
            + f"missing fields '{sorted(missing_fields)}'"
        )


class ConfigUnexpectedFields(ConfigException):
    """Exception caused by config having unexpected fields"""

    def __init__(self, unexpected_fields, config):
        self.config = config
        self.unexpected_fields = unexpected_fields
        super().__init__(
            f"Config dict has fields '{sorted(config.keys())}', "
            + f"unexpected fields '{sorted(unexpected_fields)}'"
        )


class ConfigValueError(ConfigException):
    """A config value is outside its allowed range or set"""

    def __init__(self, field, value, reason):
        self.field = field
        self.value = value
        self.reason = reason
        super().__init__(f"Invalid value '{value}' for '{field}': {reason}")


class UnknownTapError(ConfigException):
    """A requested activation tap isn't a layer of the network"""

    def __init__(self, tap, valid_taps):
        self.tap = tap
        self.valid_taps = list(valid_taps)
        super().__init__(f"Unknown tap '{tap}'. Valid taps are: {', '.join(self.valid_taps)}")


class ArchitectureMismatch(ConfigException):
    """Two models that must share an architecture don't"""

    def __init__(self, arch_a, arch_b):
        self.arch_a = arch_a
        self.arch_b = arch_b
        super().__init__(f"Architectures differ: '{arch_a}' vs '{arch_b}'")


class InputException(CTPretrainException):
    """Exception caused by input data that can't be processed"""


class GenerationException(CTPretrainException):
    """Phantom generation couldn't satisfy its spec"""

    def __init__(self, placed, requested):
        self.placed = placed
        self.requested = requested
        super().__init__(
            f"Only {placed} of {requested} lesions could be placed without overlap"
        )


class NumericalException(CTPretrainException):
    """A non-finite value was produced"""

    def __init__(self, where, message=""):
        self.where = where
        super().__init__(message or f"Non-finite values produced by '{where}'")


class IntegrityException(CTPretrainException):
    """Stored or paired state doesn't match what was expected"""


class ResolutionException(CTPretrainException):
    """A referenced run or artifact couldn't be found"""

    def __init__(self, reference, reason="not found"):
        self.reference = reference
        super().__init__(f"Couldn't resolve '{reference}': {reason}")


class RunLockedException(CTPretrainException):
    """Another process is writing to the same run directory"""

    def __init__(self, run_dir):
        self.run_dir = str(run_dir)
        super().__init__(f"Run directory '{run_dir}' is locked by another process")


def check_fields(_dict: Dict, mandatory_fields: set, optional_fields: set):
    """
    :raises ConfigUnexpectedInputType: If the config isn't a mapping
    :raises ConfigMissingFields: If there are missing fields
    :raises ConfigUnexpectedFields: If there are unexpected fields
    """
    if not isinstance(_dict, Mapping):
        raise ConfigUnexpectedInputType(_dict)

    missing_fields = mandatory_fields - set(_dict.keys())
    if missing_fields:
        raise ConfigMissingFields(missing_fields, _dict)
    unexpected_fields = set(_dict.keys()) - mandatory_fields - optional_fields
    if unexpected_fields:
        raise ConfigUnexpectedFields(unexpected_fields, _dict)
