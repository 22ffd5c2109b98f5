# -*- coding: utf-8 -*-
"""Error types and small helpers shared across the package."""
import logging
import numbers

import numpy as np

logger = logging.getLogger(__name__)


#
# Errors
#
class ShapeError(ValueError):
    """Array dimensions do not match the model or each other."""


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its valid range."""


class ProtocolError(RuntimeError):
    """Federation bookkeeping was violated."""


class NotReadyError(ProtocolError):
    """A quantity was requested before it could be computed."""


class DegenerateFitError(ValueError):
    """A mixture model cannot be fit to the given values."""


class ConfigError(ValueError):
    """Config file could not be parsed or failed validation.

    :param message: human readable description
    :param lineno: line number in the config file, if known
    :param field: name of the offending field, if known
    """

    def __init__(self, message, lineno=None, field=None):
        self.lineno = lineno
        self.field = field
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


#
# Random streams
#
def make_rng(*keys):
    """Build an independent random stream from a tuple of integer keys.

    Streams built from the same keys are identical, and streams for different
    keys (e.g. (seed, round, client_id)) are statistically independent.
    """
    entropy = [int(k) for k in keys]
    if any(k < 0 for k in entropy):
        raise ParameterError(f"Random stream keys must be nonnegative (got {keys})")
    return np.random.default_rng(entropy)


def derive_seed(*keys):
    """Integer seed for a sub-stream (data, partition, noise, ...) of a run seed."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


#
# Homogenize the label format
#
def to_onehot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    return onehot


def check_probability(name, value, low_inclusive=True, high_inclusive=True):
    """Raise ParameterError unless value lies in [0, 1] (bounds as requested)."""
    if not isinstance(value, numbers.Real) or np.isnan(value):
        raise ParameterError(f"'{name}' must be a real number (got {value!r})")
    lo_ok = value >= 0 if low_inclusive else value > 0
    hi_ok = value <= 1 if high_inclusive else value < 1
    if not (lo_ok and hi_ok):
        lo = "[" if low_inclusive else "("
        hi = "]" if high_inclusive else ")"
        raise ParameterError(f"'{name}' must lie in {lo}0, 1{hi} (got {value})")
    return value
