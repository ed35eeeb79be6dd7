"""Estimators, closed-form circuit oracles and security metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import signal as sps
from scipy import special

from ._validation import check_count, check_nonnegative, check_probability, check_samples
from .noise import Signal

#: two-sided 95% normal quantile
Z95 = 1.959963984540054


def binary_entropy(p):
    p = check_probability(p)
    if p in (0.0, 1.0):
        return 0.0
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


def info_leak(p):
    """Leaked information per bit for a binary guess with success rate ``p``: 1 - H2(p)."""
    return 1.0 - binary_entropy(p)


def wilson_interval(successes, trials, z=Z95):
    """Wilson score interval; ``successes`` may be fractional (half-credit abstentions)."""
    n = check_count("trials", trials)
    k = float(successes)
    if not 0.0 <= k <= n:
        raise ValueError(f"successes must lie in [0, {n}], got {k}")
    p = k / n
    z2 = z * z
    centre = (p + z2 / (2 * n)) / (1 + z2 / n)
    half = z / (1 + z2 / n) * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    lo, hi = centre - half, centre + half
    # exact endpoints at the boundary (the formula gives them up to round-off)
    if k == 0:
        lo = 0.0
    if k == n:
        hi = 1.0
    return max(0.0, min(lo, p)), min(1.0, max(hi, p))


@dataclass(frozen=True)
class AttackReport:
    """Monte-Carlo estimate of Eve's success probability.

    ``successes`` counts an abstention as half a success.
    """

    trials: int
    successes: float
    abstained: int
    p_hat: float
    ci_low: float
    ci_high: float
    leak: float

    @property
    def sigma(self):
        """Binomial standard error of ``p_hat``."""
        return math.sqrt(self.p_hat * (1 - self.p_hat) / self.trials)

    def to_dict(self):
        d = asdict(self)
        d["sigma"] = self.sigma
        return d


def score_verdict(verdict, truth):
    """1 for a correct guess, 0 for a wrong one, 0.5 for an abstention."""
    if verdict.guess is None:
        return 0.5
    return 1.0 if bool(verdict.guess) == bool(truth) else 0.0


def report_from_scores(scores):
    """Build an :class:`AttackReport` from per-trial scores in {0, 0.5, 1}."""
    scores = np.asarray(list(scores), dtype=float)
    if scores.size == 0:
        raise ValueError("at least one verdict is required")
    if not np.all(np.isin(scores, (0.0, 0.5, 1.0))):
        raise ValueError("scores must be 0, 0.5 or 1")
    # integer counts keep the reduction exact and order independent
    correct = int(np.count_nonzero(scores == 1.0))
    abstained = int(np.count_nonzero(scores == 0.5))
    n = scores.size
    successes = correct + 0.5 * abstained
    p_hat = successes / n
    lo, hi = wilson_interval(successes, n)
    return AttackReport(n, successes, abstained, p_hat, lo, hi, info_leak(p_hat))


def estimate_p(verdicts, truths):
    """Success probability of an attack from its verdicts and the true ``bob_is_high`` flags."""
    verdicts = list(verdicts)
    truths = list(truths)
    if len(verdicts) != len(truths):
        raise ValueError("verdicts and truths differ in length")
    return report_from_scores(score_verdict(v, t) for v, t in zip(verdicts, truths))


class EndMoments(NamedTuple):
    U1_sq: float
    U2_sq: float
    I_sq: float
    delta_rel: float


def _loop_coefficients(R_A, R_B, R_c):
    """Linear maps from (U_A, U_B) to U_1, U_2 and I for a resistive loop."""
    Rs = R_A + R_B + R_c
    u1 = np.array([R_B + R_c, R_A]) / Rs
    u2 = np.array([R_B, R_A + R_c]) / Rs
    i = np.array([1.0, -1.0]) / Rs
    return u1, u2, i


def analytic_end_moments(R_A, R_B, R_c, kappa, B):
    """Closed-form mean squares of the end voltages and loop current.

    Independent generators with ``S_X = kappa R_X B`` drive a resistive
    divider ``R_A + R_c + R_B``.  ``delta_rel`` is the relative mean-square
    end difference ``|<U_1^2> - <U_2^2>| / <U_1^2>``.
    """
    for name, v in (("R_A", R_A), ("R_B", R_B), ("R_c", R_c), ("kappa", kappa), ("B", B)):
        check_nonnegative(name, v)
    if R_A + R_B + R_c == 0:
        raise ValueError("all resistances are zero")
    S = np.array([kappa * R_A * B, kappa * R_B * B])
    u1, u2, i = _loop_coefficients(R_A, R_B, R_c)
    m1 = float(S @ u1 ** 2)
    m2 = float(S @ u2 ** 2)
    mi = float(S @ i ** 2)
    delta = abs(m1 - m2) / m1 if m1 > 0 else 0.0
    return EndMoments(m1, m2, mi, delta)


def imbalance_readings(R_A, R_B, R_c):
    """Three readings of the relative mean-square end imbalance.

    ``divider`` is the exact divider algebra (authoritative), ``symbolic``
    is the short form ``R_c^2 / (R_A R_B)`` and ``unsquared`` substitutes
    ``R_c`` without squaring, ``R_c / (R_A R_B)``.
    """
    exact = analytic_end_moments(R_A, R_B, R_c, 1.0, 1.0).delta_rel
    return {"divider": exact, "symbolic": R_c ** 2 / (R_A * R_B),
            "unsquared": R_c / (R_A * R_B)}


def mean_square_success_probability(R_A, R_B, R_c, n_oc):
    """Success rate of the mean-square comparison on an ideal band-limited loop.

    The window mean of ``U_1^2 - U_2^2 = X Y`` (``X = U_1 - U_2``,
    ``Y = U_1 + U_2``, jointly Gaussian) over ``n_oc`` correlation times of
    a rectangular spectrum has variance ``(<X^2><Y^2> + <XY>^2) / n_oc``.
    """
    n_oc = check_count("n_oc", n_oc)
    S = np.array([R_A, R_B], dtype=float)
    u1, u2, _ = _loop_coefficients(R_A, R_B, R_c)
    x, y = u1 - u2, u1 + u2
    xx, yy, xy = S @ (x * x), S @ (y * y), S @ (x * y)
    if xx == 0:
        return 0.5
    z = abs(xy) * math.sqrt(n_oc) / math.sqrt(xx * yy + xy * xy)
    return 0.5 * (1 + special.erf(z / math.sqrt(2)))


def mc_mean(values):
    """Sample mean and its standard error."""
    v = check_samples(values, min_length=2, name="values")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _as_array(x, name):
    return check_samples(x.samples if isinstance(x, Signal) else x, min_length=2, name=name)


def orthogonality_stat(U, I):
    """Sample Pearson correlation between tap voltage and loop current."""
    u = _as_array(U, "U")
    i = _as_array(I, "I")
    if u.size != i.size:
        raise ValueError("U and I differ in length")
    du, di = u - u.mean(), i - i.mean()
    su, si = math.sqrt(du @ du), math.sqrt(di @ di)
    if su == 0 or si == 0:
        raise ValueError("correlation of a constant signal is undefined")
    return float(du @ di / (su * si))


def pythagoras_gap(U, I, R, normalize="pythagoras"):
    """Relative gap ``|var(U + R I) - var(U - R I)|`` between the two separator signs.

    With ``normalize="pythagoras"`` the gap is divided by
    ``var(U) + R^2 var(I)``, the common value both variances take when U
    and I are orthogonal; ``normalize="tap"`` divides by ``var(U)``.
    """
    u = _as_array(U, "U")
    i = _as_array(I, "I")
    gap = abs(np.var(u + R * i) - np.var(u - R * i))
    if normalize == "pythagoras":
        den = np.var(u) + R * R * np.var(i)
    elif normalize == "tap":
        den = np.var(u)
    else:
        raise ValueError("normalize must be 'pythagoras' or 'tap'")
    if den == 0:
        raise ValueError("degenerate signals")
    return float(gap / den)


@dataclass(frozen=True)
class ScalingFit:
    """Least-squares fit of ``p - 0.5 = theta_prime * R_c^2`` through the origin."""

    points: tuple
    theta_prime: float
    r_squared: float

    def predict(self, R_c):
        return 0.5 + self.theta_prime * np.square(R_c)

    def extrapolate(self, R_c, R_A, R_B, R_A_fit, R_B_fit):
        """Predicted ``p - 0.5`` for another loop, using ``p - 0.5 ~ R_c^2 / (R_A R_B)``."""
        return self.theta_prime * R_c ** 2 * (R_A_fit * R_B_fit) / (R_A * R_B)

    def to_dict(self):
        return {"points": [list(p) for p in self.points], "theta_prime": self.theta_prime,
                "r_squared": self.r_squared}


def scaling_fit(points):
    """Fit ``(p - 0.5)`` against ``R_c^2`` with zero intercept.

    ``r_squared`` is the uncentered coefficient of determination appropriate
    for a fit through the origin, which lies in [0, 1].
    """
    pts = [(float(r), float(p)) for r, p in points]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    x = np.array([r for r, _ in pts]) ** 2
    y = np.array([p for _, p in pts]) - 0.5
    sxx = float(x @ x)
    if sxx == 0:
        raise ValueError("all R_c are zero; slope undefined")
    a = float(x @ y) / sxx
    syy = float(y @ y)
    resid = y - a * x
    r2 = 1.0 - float(resid @ resid) / syy if syy > 0 else 1.0
    return ScalingFit(tuple(pts), a, min(1.0, max(0.0, r2)))


class Spectrum(NamedTuple):
    freq: np.ndarray
    power: np.ndarray

    def total_power(self):
        return float(np.sum(self.power) * (self.freq[1] - self.freq[0]))


def spectrum(s, nperseg=None):
    """One-sided Welch power spectral density (Hann window, 50% overlap)."""
    x = check_samples(s.samples, min_length=1024, name="signal")
    nperseg = nperseg or min(x.size, 4096)
    f, p = sps.welch(x, fs=1.0 / s.dt, window="hann", nperseg=nperseg, detrend="constant",
                     scaling="density")
    return Spectrum(f, p)
