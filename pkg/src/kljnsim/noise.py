"""Band-limited pseudo-thermal noise, deliberate non-idealities and forensics.

Generators are white sequences shaped by a Kaiser-windowed sinc FIR.  The
output is scaled by the filter's exact power gain (sum of squared taps), so
the variance of a Gaussian generator is known in closed form and never
rescaled from data.  The Johnson convention ties the variance to the
attached resistance: ``var = kappa * R * bandwidth``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import signal as sps
from scipy import special, stats
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import (
    InvalidSpecError,
    check_count,
    check_nonnegative,
    check_positive,
    check_samples,
)

KINDS = ("gaussian", "clipped_gaussian", "uniform_filtered", "custom_table")
LOCATIONS = ("alice_side", "bob_side")

#: minimum ratio sample_rate / bandwidth (quasi-static oversampling)
MIN_OVERSAMPLING = 10.0
#: FIR design target; the acceptance floor is 60 dB
STOPBAND_ATTENUATION_DB = 66.0
#: transition band width of the band-limiting filter, as a fraction of B
TRANSITION_FRACTION = 0.25


@dataclass(frozen=True)
class NoiseSpec:
    """Parameters of one noise generator.

    Parameters
    ----------
    kind : str
        One of ``gaussian``, ``clipped_gaussian``, ``uniform_filtered`` or
        ``custom_table``.
    bandwidth_hz : float
        Noise bandwidth B (-6 dB point of the shaping filter).
    kappa : float
        Intensity in V^2/(Ohm Hz); a resistor R yields variance kappa*R*B.
    sample_rate_hz : float
        Must be at least ten times ``bandwidth_hz``.
    seed : int
        Seed of the generator's PRNG.
    clip_level : float, optional
        Saturation level in multiples of sigma (``clipped_gaussian`` only).
    table : tuple of float, optional
        Amplitude table the white driving sequence is drawn from
        (``custom_table`` only).
    alias_factor : int
        When > 1 the generator runs internally at ``alias_factor`` times the
        sample rate and is decimated without an anti-aliasing filter.
    """

    kind: str = "gaussian"
    bandwidth_hz: float = 5e3
    kappa: float = 1e-7
    sample_rate_hz: float = 5e4
    seed: int = 0
    clip_level: float | None = None
    table: tuple | None = None
    alias_factor: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        check_positive("bandwidth_hz", self.bandwidth_hz)
        check_positive("sample_rate_hz", self.sample_rate_hz)
        check_nonnegative("kappa", self.kappa)
        check_count("alias_factor", self.alias_factor)
        if self.sample_rate_hz < MIN_OVERSAMPLING * self.bandwidth_hz * (1 - 1e-12):
            raise InvalidSpecError(
                f"sample_rate_hz={self.sample_rate_hz:g} undersamples bandwidth_hz="
                f"{self.bandwidth_hz:g}; need sample_rate >= {MIN_OVERSAMPLING:g} x bandwidth")
        if self.kind == "clipped_gaussian":
            if self.clip_level is None:
                raise InvalidSpecError("clipped_gaussian requires clip_level")
            check_positive("clip_level", self.clip_level)
        if self.kind == "custom_table":
            if self.table is None or len(self.table) < 2:
                raise InvalidSpecError("custom_table requires a table of at least two values")
            values = np.asarray(self.table, dtype=float)
            if not np.all(np.isfinite(values)) or np.std(values) == 0:
                raise InvalidSpecError("custom_table values must be finite and not all equal")
            object.__setattr__(self, "table", tuple(float(v) for v in values))

    @property
    def correlation_time(self):
        """tau = 1/(2B), the sample spacing of an ideally band-limited process."""
        return 1.0 / (2.0 * self.bandwidth_hz)

    @property
    def dt(self):
        return 1.0 / self.sample_rate_hz

    def samples_per_correlation_time(self):
        return self.correlation_time * self.sample_rate_hz


@dataclass(frozen=True, eq=False)
class Signal:
    """A uniformly sampled waveform."""

    samples: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "samples", check_samples(self.samples))
        check_positive("dt", self.dt)

    def __len__(self):
        return self.samples.size

    @property
    def n(self):
        return self.samples.size

    @property
    def t(self):
        return np.arange(self.n) * self.dt

    @property
    def duration(self):
        return self.n * self.dt

    @property
    def rms(self):
        return float(np.sqrt(np.mean(self.samples ** 2)))

    def variance(self):
        return float(np.var(self.samples))


@dataclass(frozen=True)
class ParasiticSpec:
    """A deterministic disturbance in series with one generator (ground loop / offset)."""

    dc_offset: float = 0.0
    mains_amplitude: float = 0.0
    mains_freq_hz: float = 50.0
    mains_phase: float = 0.0
    location: str = "alice_side"

    def __post_init__(self):
        if not math.isfinite(self.dc_offset):
            raise InvalidSpecError("dc_offset must be finite")
        check_nonnegative("mains_amplitude", self.mains_amplitude)
        check_nonnegative("mains_freq_hz", self.mains_freq_hz)
        if not math.isfinite(self.mains_phase):
            raise InvalidSpecError("mains_phase must be finite")
        if self.location not in LOCATIONS:
            raise InvalidSpecError(f"location must be one of {LOCATIONS}, got {self.location!r}")

    def waveform(self, n, dt, t0=0.0):
        t = t0 + np.arange(n) * dt
        out = np.full(n, float(self.dc_offset))
        if self.mains_amplitude:
            out += self.mains_amplitude * np.sin(2 * np.pi * self.mains_freq_hz * t
                                                 + self.mains_phase)
        return out


class FilterDesign(NamedTuple):
    taps: np.ndarray
    cutoff_hz: float
    passband_edge_hz: float
    stopband_edge_hz: float
    attenuation_db: float
    power_gain: float


@functools.lru_cache(maxsize=64)
def bandlimit_filter(bandwidth_hz, sample_rate_hz):
    """Kaiser-windowed sinc low-pass with its -6 dB point at ``bandwidth_hz``."""
    nyq = sample_rate_hz / 2.0
    width = TRANSITION_FRACTION * bandwidth_hz
    numtaps, beta = sps.kaiserord(STOPBAND_ATTENUATION_DB, width / nyq)
    numtaps |= 1  # odd length: integer group delay, type I
    taps = sps.firwin(numtaps, bandwidth_hz, window=("kaiser", beta), fs=sample_rate_hz)
    taps.setflags(write=False)
    return FilterDesign(taps, bandwidth_hz, bandwidth_hz - width / 2,
                        bandwidth_hz + width / 2, STOPBAND_ATTENUATION_DB,
                        float(np.sum(taps ** 2)))


@functools.lru_cache(maxsize=64)
def _lowpass_edges(passband_hz, stopband_hz, sample_rate_hz):
    nyq = sample_rate_hz / 2.0
    numtaps, beta = sps.kaiserord(STOPBAND_ATTENUATION_DB, (stopband_hz - passband_hz) / nyq)
    numtaps |= 1
    taps = sps.firwin(numtaps, 0.5 * (passband_hz + stopband_hz), window=("kaiser", beta),
                      fs=sample_rate_hz)
    taps.setflags(write=False)
    return taps


def clipped_normal_moments(level):
    """Second and fourth moments of a unit normal hard-clipped at +/-level."""
    c = float(level)
    phi = math.exp(-0.5 * c * c) / math.sqrt(2 * math.pi)
    inner = math.erf(c / math.sqrt(2))  # P(|X| < c)
    tail = 1.0 - inner
    m2 = inner - 2 * c * phi + c ** 2 * tail
    m4 = 3 * inner - 2 * phi * (c ** 3 + 3 * c) + c ** 4 * tail
    return m2, m4


def clipped_normal_excess_kurtosis(level):
    m2, m4 = clipped_normal_moments(level)
    return m4 / m2 ** 2 - 3.0


def clipped_derivative_excess_kurtosis(level):
    """Continuous-time excess kurtosis of the derivative of a clipped Gaussian process.

    A stationary Gaussian process and its derivative are independent at
    equal times, so the clipped derivative is Gaussian with probability
    ``q = P(|X| < level)`` and exactly zero otherwise, giving
    ``3 / q - 3``.  Sampled central differences smear the flat stretches
    and approach this value from below as the oversampling grows.
    """
    level = check_positive("level", level)
    q = 1.0 - 2.0 * stats.norm.sf(level)
    return 3.0 / q - 3.0


def johnson_variance(R, spec):
    """Variance kappa*R*B of the generator attached to resistance ``R``."""
    R = check_nonnegative("R", R)
    return spec.kappa * R * spec.bandwidth_hz


def _white(rng, spec, size):
    if spec.kind in ("gaussian", "clipped_gaussian"):
        return rng.standard_normal(size)
    if spec.kind == "uniform_filtered":
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size)
    table = np.asarray(spec.table)
    table = (table - table.mean()) / table.std()
    return table[rng.integers(0, table.size, size)]


def generate(spec, n, resistance=1.0):
    """Draw ``n`` samples of band-limited noise for a resistor ``resistance``.

    The result is a pure function of ``(spec, n, resistance)``.  For the
    Gaussian kind the expected variance is ``johnson_variance(resistance, spec)``;
    the other kinds are normalized to the same variance.
    """
    n = check_count("n", n)
    target = johnson_variance(resistance, spec)
    if target == 0.0:
        return Signal(np.zeros(n), spec.dt)

    factor = spec.alias_factor
    fs_int = spec.sample_rate_hz * factor
    design = bandlimit_filter(spec.bandwidth_hz, fs_int)
    n_int = n * factor
    rng = np.random.default_rng(spec.seed)
    white = _white(rng, spec, n_int + design.taps.size - 1)
    x = sps.oaconvolve(white, design.taps, mode="valid") / math.sqrt(design.power_gain)
    if spec.kind == "clipped_gaussian":
        m2, _ = clipped_normal_moments(spec.clip_level)
        x = np.clip(x, -spec.clip_level, spec.clip_level) / math.sqrt(m2)
    if factor > 1:
        x = x[::factor]
    return Signal(x * math.sqrt(target), spec.dt)


def derivative(s):
    """Central-difference time derivative; the two endpoint samples are dropped."""
    x = check_samples(s.samples, min_length=3, name="signal")
    return Signal((x[2:] - x[:-2]) / (2.0 * s.dt), s.dt)


def inject_parasitic(s, p, t0=0.0):
    """Add the DC offset and mains component of ``p`` to ``s``, sample-aligned."""
    return Signal(s.samples + p.waveform(s.n, s.dt, t0), s.dt)


def clip(s, level):
    """Hard saturation at +/- ``level`` times the RMS of ``s``."""
    level = check_positive("level", level)
    rms = s.rms
    if rms == 0.0:
        raise ValueError("cannot clip a zero-RMS signal relative to its RMS")
    bound = level * rms
    return Signal(np.clip(s.samples, -bound, bound), s.dt)


def alias_resample(s, factor, antialias=False):
    """Keep every ``factor``-th sample, optionally low-pass filtering first.

    The anti-aliasing filter is zero-phase with its stop band starting at the
    new Nyquist frequency and at least 60 dB of attenuation there.
    """
    if isinstance(factor, bool) or not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"factor must be an integer >= 1, got {factor!r}")
    factor = int(factor)
    if factor == 1:
        return Signal(s.samples.copy(), s.dt)
    x = s.samples
    if antialias:
        fs = 1.0 / s.dt
        new_nyq = fs / (2 * factor)
        taps = _lowpass_edges(0.8 * new_nyq, new_nyq, fs)
        x = np.convolve(x, taps, mode="same")
    return Signal(x[::factor], s.dt * factor)


class GaussianityResult(NamedTuple):
    skewness: float
    excess_kurtosis: float
    normality_statistic: float
    p_value: float
    n_eff_skew: float
    n_eff_kurtosis: float

    def passes(self, sigma=3.0):
        """True when the statistic is below the two-sided ``sigma`` level of chi2(2)."""
        level = special.erf(sigma / math.sqrt(2))
        return self.normality_statistic < stats.chi2.ppf(level, 2)


def _autocorrelation(z, max_lag):
    n = z.size
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(z, nfft)
    acov = np.fft.irfft(spec * np.conj(spec), nfft)[: max_lag + 1] / n
    return acov / acov[0]


def gaussianity(s, correct_autocorrelation=True, max_lag=None):
    """Standardized sample moments and a Jarque-Bera type normality statistic.

    Oversampled band-limited records are far from independent, so by default
    the statistic uses effective sample sizes ``n / sum(rho^3)`` (skewness)
    and ``n / sum(rho^4)`` (kurtosis), with ``rho`` the sample autocorrelation.
    """
    x = check_samples(s.samples, min_length=1000, name="signal")
    sd = x.std()
    if sd == 0.0:
        raise ValueError("gaussianity of a constant signal is undefined")
    z = (x - x.mean()) / sd
    skew = float(np.mean(z ** 3))
    kurt = float(np.mean(z ** 4) - 3.0)
    n = z.size
    n_s = n_k = float(n)
    if correct_autocorrelation:
        lag = max_lag if max_lag is not None else min(n // 4, 1000)
        rho = _autocorrelation(z, lag)
        f3 = max(1.0, 1.0 + 2.0 * float(np.sum(rho[1:] ** 3)))
        f4 = max(1.0, 1.0 + 2.0 * float(np.sum(rho[1:] ** 4)))
        n_s, n_k = n / f3, n / f4
    jb = n_s * skew ** 2 / 6.0 + n_k * kurt ** 2 / 24.0
    return GaussianityResult(skew, kurt, float(jb), float(stats.chi2.sf(jb, 2)), n_s, n_k)


# scikit-learn transformers over batches of equally sampled signals
# (rows are signals, columns are samples).

class Differentiator(TransformerMixin, BaseEstimator):
    """Central-difference derivative of every row."""

    def __init__(self, dt=1.0):
        self.dt = dt

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=3)
        check_positive("dt", self.dt)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, ensure_min_features=3)
        return (X[:, 2:] - X[:, :-2]) / (2.0 * self.dt)


class Clipper(TransformerMixin, BaseEstimator):
    """Row-wise saturation at ``level`` times the row RMS."""

    def __init__(self, level=1.0):
        self.level = level

    def fit(self, X, y=None):
        X = check_array(X)
        check_positive("level", self.level)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X)
        rms = np.sqrt(np.mean(X ** 2, axis=1, keepdims=True))
        if np.any(rms == 0):
            raise ValueError("cannot clip a zero-RMS row")
        bound = self.level * rms
        return np.clip(X, -bound, bound)


class AliasResampler(TransformerMixin, BaseEstimator):
    """Row-wise decimation, with or without the anti-aliasing filter."""

    def __init__(self, factor=2, antialias=False, dt=1.0):
        self.factor = factor
        self.antialias = antialias
        self.dt = dt

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X)
        rows = [alias_resample(Signal(row, self.dt), self.factor, self.antialias).samples
                for row in X]
        return np.vstack(rows)


class GaussianityFeatures(TransformerMixin, BaseEstimator):
    """Map each row to ``[skewness, excess_kurtosis, normality_statistic]``."""

    def __init__(self, correct_autocorrelation=True):
        self.correct_autocorrelation = correct_autocorrelation

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=1000)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, ensure_min_features=1000)
        out = np.empty((X.shape[0], 3))
        for i, row in enumerate(X):
            g = gaussianity(Signal(row, 1.0), self.correct_autocorrelation)
            out[i] = g.skewness, g.excess_kurtosis, g.normality_statistic
        return out

    def get_feature_names_out(self, input_features=None):
        return np.array(["skewness", "excess_kurtosis", "normality_statistic"], dtype=object)
