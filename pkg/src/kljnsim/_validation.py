"""Input validation helpers shared by the simulator, attacks and runner."""

from __future__ import annotations

import math
from collections.abc import Iterable

import numpy as np


class InvalidSpecError(ValueError):
    """A domain object was constructed with physically invalid parameters."""


class IntegrationError(RuntimeError):
    """The loop integrator produced a non-finite state."""


class ConfigError(ValueError):
    """A scenario file failed validation.

    ``diagnostics`` holds ``(key_path, message, hint)`` triples.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = [f"{key}: {msg} ({hint})" if hint else f"{key}: {msg}"
                 for key, msg, hint in self.diagnostics]
        super().__init__("invalid scenario:\n  " + "\n  ".join(lines))


def check_positive(name, value, *, strict=True):
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidSpecError(f"{name} must be a number, got {value!r}") from None
    if not math.isfinite(value):
        raise InvalidSpecError(f"{name} must be finite, got {value}")
    if strict and value <= 0:
        raise InvalidSpecError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise InvalidSpecError(f"{name} must be >= 0, got {value}")
    return value


def check_nonnegative(name, value):
    return check_positive(name, value, strict=False)


def check_count(name, value, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidSpecError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise InvalidSpecError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_probability(p):
    p = float(p)
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    return p


def check_samples(samples, *, min_length=1, name="samples"):
    """Return ``samples`` as a finite 1-D float64 array."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < min_length:
        raise ValueError(f"{name} needs at least {min_length} samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_traces(X):
    """Coerce a single trace or an iterable of traces to a list."""
    from .channel import Trace

    if isinstance(X, Trace):
        return [X]
    if isinstance(X, Iterable):
        traces = list(X)
        for t in traces:
            if not isinstance(t, Trace):
                raise TypeError(f"expected Trace objects, got {type(t).__name__}")
        if not traces:
            raise ValueError("at least one trace is required")
        return traces
    raise TypeError(f"expected a Trace or a sequence of traces, got {type(X).__name__}")


def derive_seed(seed, *key):
    """Counter-based child seed: a pure function of ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
