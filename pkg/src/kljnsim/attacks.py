"""Eve's passive strategies against a secure (mixed) KLJN bit.

Every attack returns a :class:`Verdict` whose ``statistic`` is positive when
the evidence favours "Bob holds R_H".  The scikit-learn wrappers take a list
of :class:`~kljnsim.channel.Trace` objects as ``X`` and use the labels
``1`` (Bob high), ``0`` (Bob low) and ``-1`` (abstain).

Separator sign convention: with the loop current positive from Alice to
Bob, Bob's generator is ``U_B = U_2 - R_B I`` and Alice's is
``U_A = U_1 + R_A I``.  The reconstructions below therefore use ``U - R I``
at Bob's end and ``U + R I`` at Alice's end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import stats as sst
from scipy.integrate import cumulative_trapezoid
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count, check_positive, check_traces, derive_seed
from .channel import Arrangement, phase_velocities, simulate_exchange
from .noise import Signal
from .stats import report_from_scores

ABSTAIN = -1


class Hypothesis(NamedTuple):
    """Eve's guess about a secure bit; Alice holds the other resistor."""

    bob_is_high: bool
    R_L: float
    R_H: float

    @property
    def R_A(self):
        return self.R_L if self.bob_is_high else self.R_H

    @property
    def R_B(self):
        return self.R_H if self.bob_is_high else self.R_L

    @property
    def name(self):
        return "bob_high" if self.bob_is_high else "bob_low"


def hypotheses(R_L, R_H):
    return Hypothesis(False, R_L, R_H), Hypothesis(True, R_L, R_H)


@dataclass(frozen=True)
class Verdict:
    """Outcome of one attack on one trace.

    ``guess`` is ``True`` for "Bob holds R_H", ``False`` for "Bob holds
    R_L" and ``None`` for an abstention.
    """

    guess: bool | None
    statistic: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def abstained(self):
        return self.guess is None

    @property
    def label(self):
        return ABSTAIN if self.guess is None else int(self.guess)

    def hypothesis(self, R_L, R_H):
        return None if self.guess is None else Hypothesis(self.guess, R_L, R_H)


def _decide(statistic, diagnostics=None):
    if not math.isfinite(statistic) or statistic == 0.0:
        return Verdict(None, 0.0 if not math.isfinite(statistic) else statistic,
                       diagnostics or {})
    return Verdict(statistic > 0, float(statistic), diagnostics or {})


def _abstain(reason, **diag):
    return Verdict(None, 0.0, {"reason": reason, **diag})


def _window_ok(t):
    return t.bandwidth_hz is None or t.n_eff() >= 1.0


# -- mean-square (wire resistance) attack ---------------------------------

def mean_square_attack(t, R_L, R_H):
    """Guess that the end with the larger mean-square voltage hosts R_H.

    The divider algebra gives ``<U_1^2> - <U_2^2>`` proportional to
    ``R_c^2 (R_A - R_B)``, so a larger mean square at Bob's end means Bob
    holds R_H.  The statistic is ``(<U_2^2> - <U_1^2>) / <U_1^2>``.
    """
    if not _window_ok(t):
        raise ValueError("mean-square attack needs at least one correlation time")
    ms1 = float(np.mean(t.U_1 ** 2))
    ms2 = float(np.mean(t.U_2 ** 2))
    diag = {"ms1": ms1, "ms2": ms2}
    if ms1 == 0.0 or ms2 == 0.0:
        return _abstain("zero mean square", **diag)
    return _decide((ms2 - ms1) / ms1, diag)


# -- separator reconstructions ---------------------------------------------

def separator_reconstruct(t, R_guess, end="bob"):
    """Ohm's-law separator ``2 U_x``: Eve's estimate of one generator voltage.

    ``U - R_guess I`` at Bob's end and ``U + R_guess I`` at Alice's end,
    with ``U`` the tap voltage.  With the true resistor this equals the
    generator voltage up to the cable drop.
    """
    R_guess = check_positive("R_guess", R_guess, strict=False)
    if end == "bob":
        return Signal(t.U - R_guess * t.I_bob, t.dt)
    if end == "alice":
        return Signal(t.U + R_guess * t.I, t.dt)
    raise ValueError(f"end must be 'alice' or 'bob', got {end!r}")


def lossy_integral_reconstruct(t, R_guess, L_c, end="bob"):
    """Separator for a lossy cable with the current replaced by ``(1/L_c) int U_12 dt``.

    The integral starts from zero at the first sample (cumulative
    trapezoidal rule).
    """
    R_guess = check_positive("R_guess", R_guess, strict=False)
    if not L_c or L_c <= 0:
        raise ValueError("L_c must be > 0; the integral form is undefined without inductance")
    integral = cumulative_trapezoid(t.U_12, dx=t.dt, initial=0.0) / L_c
    if end == "bob":
        return Signal(t.U - R_guess * integral, t.dt)
    if end == "alice":
        return Signal(t.U + R_guess * integral, t.dt)
    raise ValueError(f"end must be 'alice' or 'bob', got {end!r}")


# -- GAA derivative ("directional coupler") attack --------------------------

def _derivative_components(t, hyp, D, L_c, mode="eq5", velocity=None):
    """Forward (toward Bob) and backward (toward Alice) derivative reconstructions.

    ``dU/dx`` is approximated by ``-U_12 / D``.  The cable drop is averaged
    over neighbouring samples so it sits on the same stencil as the central
    difference ``dU/dt``.
    """
    U = t.U
    if U.size < 3:
        raise ValueError("trace too short for a derivative")
    dUdt = (U[2:] - U[:-2]) / (2.0 * t.dt)
    u12 = 0.5 * (t.U_12[1:-1] + t.U_12[2:])
    if mode == "eq5":
        v = phase_velocities(D, L_c, hyp.R_A, hyp.R_B)
        v_fwd, v_bwd = v.v_plus, v.v_minus
    elif mode == "fixed":
        if velocity is None:
            raise ValueError("fixed mode needs a velocity")
        v_fwd = v_bwd = check_positive("velocity", velocity)
    else:
        raise ValueError(f"mode must be 'eq5' or 'fixed', got {mode!r}")
    fwd = dUdt - v_fwd * u12 / D
    bwd = dUdt + v_bwd * u12 / D
    return fwd, bwd


@dataclass(frozen=True)
class GAAReference:
    """Per-hypothesis expectations Eve calibrated on her own simulations."""

    mean_square: dict  # hypothesis name -> (forward, backward)
    samples: dict      # hypothesis name -> (forward array, backward array)


def _ms(x):
    return float(np.mean(x * x))


def gaa_derivative_attack(t, R_L, R_H, D, L_c, reference, mode="eq5", velocity=None,
                          rule="variance"):
    """Compare the derivative reconstructions under each hypothesis with Eve's reference.

    For the ``variance`` rule the discrepancy of a hypothesis is
    ``sum log(ms_observed / ms_expected)^2`` over the two components; the
    ``ks`` rule sums two-sample Kolmogorov-Smirnov distances instead.  The
    statistic is ``d(bob_low) - d(bob_high)``.
    """
    if rule not in ("variance", "ks"):
        raise ValueError("rule must be 'variance' or 'ks'")
    if float(np.var(t.U)) == 0.0:
        return _abstain("zero-variance window")
    disc = {}
    for hyp in hypotheses(R_L, R_H):
        fwd, bwd = _derivative_components(t, hyp, D, L_c, mode, velocity)
        if rule == "variance":
            ef, eb = reference.mean_square[hyp.name]
            mf, mb = _ms(fwd), _ms(bwd)
            if mf == 0.0 or mb == 0.0:
                return _abstain("zero-variance reconstruction")
            disc[hyp.name] = math.log(mf / ef) ** 2 + math.log(mb / eb) ** 2
        else:
            rf, rb = reference.samples[hyp.name]
            disc[hyp.name] = (sst.ks_2samp(fwd, rf).statistic
                              + sst.ks_2samp(bwd, rb).statistic)
    return _decide(disc["bob_low"] - disc["bob_high"], {"discrepancy": disc})


def fit_gaa_reference(traces, labels, R_L, R_H, D, L_c, mode="eq5", velocity=None,
                      max_samples=20000):
    """Average the reconstructions of labelled reference traces per hypothesis."""
    traces = check_traces(traces)
    labels = np.asarray(labels).astype(int)
    if labels.shape != (len(traces),):
        raise ValueError("one label per reference trace is required")
    ms, samples = {}, {}
    for hyp in hypotheses(R_L, R_H):
        members = [t for t, y in zip(traces, labels) if y == int(hyp.bob_is_high)]
        if not members:
            raise ValueError(f"no reference traces for hypothesis {hyp.name}")
        comps = [_derivative_components(t, hyp, D, L_c, mode, velocity) for t in members]
        ms[hyp.name] = (float(np.mean([_ms(f) for f, _ in comps])),
                        float(np.mean([_ms(b) for _, b in comps])))
        fw = np.concatenate([f for f, _ in comps])[:max_samples]
        bw = np.concatenate([b for _, b in comps])[:max_samples]
        samples[hyp.name] = (fw, bw)
    return GAAReference(ms, samples)


def make_reference_traces(cfg, n_per_class, seed, R_L=None, R_H=None):
    """Eve's own labelled ensemble: ideal Gaussian generators, no parasitic.

    Returns ``(traces, labels)`` with label 1 when Bob holds R_H.
    """
    n_per_class = check_count("n_per_class", n_per_class)
    R_L = cfg.arrangement.R_L if R_L is None else R_L
    R_H = cfg.arrangement.R_H if R_H is None else R_H
    noise = replace(cfg.noise, kind="gaussian", clip_level=None, table=None, alias_factor=1)
    base = replace(cfg, noise=noise, parasitic=None)
    traces, labels = [], []
    for label in (0, 1):
        arr = Arrangement.secure_bit(bool(label), R_L, R_H)
        c = base.with_arrangement(arr)
        for i in range(n_per_class):
            traces.append(simulate_exchange(c, derive_seed(seed, label, i)))
            labels.append(label)
    return traces, np.array(labels)


# -- parasitic DC / mains attack --------------------------------------------

def _component_noise(x, t):
    """Standard error of a window mean of the noise part of ``x``."""
    sd = float(np.std(x))
    if t.bandwidth_hz is not None:
        return sd / math.sqrt(max(t.n_eff(), 1.0))
    batches = np.array_split(x, 10)
    means = np.array([b.mean() for b in batches])
    return float(means.std(ddof=1) / math.sqrt(len(batches)))


def _tone(x, dt, f):
    """Least-squares complex amplitude of the ``f`` Hz component (with a free offset)."""
    tt = np.arange(x.size) * dt
    A = np.column_stack([np.ones_like(tt), np.cos(2 * np.pi * f * tt), np.sin(2 * np.pi * f * tt)])
    coef, *_ = np.linalg.lstsq(A, x, rcond=None)
    resid = x - A @ coef
    return complex(coef[1], -coef[2]), resid


def dc_mains_attack(t, R_L, R_H, R_c, mode="dc", mains_hz=50.0, floor_sigma=3.0,
                    absolute=False, U_p=None):
    """Ratio of the parasitic component at the two ends.

    A parasitic source in Alice's branch appears at the ends in the ratio
    ``r = |c_2| / |c_1| = R_B / (R_B + R_c)``.  Eve guesses Bob high when
    ``log r`` is closer to the R_H value than to the R_L value.  Components
    below ``floor_sigma`` standard errors of the noise make the attack
    abstain.

    With ``absolute=True`` and a known parasitic amplitude ``U_p`` the
    attack instead compares ``|c_2|`` with ``U_p R_B / (R_A + R_B + R_c)``.
    """
    if mode == "dc":
        c1, c2 = float(np.mean(t.U_1)), float(np.mean(t.U_2))
        n1, n2 = _component_noise(t.U_1, t), _component_noise(t.U_2, t)
    elif mode == "mains":
        c1, r1 = _tone(t.U_1, t.dt, mains_hz)
        c2, r2 = _tone(t.U_2, t.dt, mains_hz)
        n1 = math.sqrt(2) * _component_noise(r1, t)
        n2 = math.sqrt(2) * _component_noise(r2, t)
    else:
        raise ValueError("mode must be 'dc' or 'mains'")
    a1, a2 = abs(c1), abs(c2)
    diag = {"c1": a1, "c2": a2, "floor1": n1, "floor2": n2}
    if a1 <= floor_sigma * n1 or a2 <= floor_sigma * n2:
        return _abstain("parasitic component below noise floor", **diag)

    if absolute:
        if U_p is None:
            raise ValueError("absolute mode needs the parasitic amplitude U_p")
        Rs = R_L + R_H + R_c
        lo, hi = abs(U_p) * R_L / Rs, abs(U_p) * R_H / Rs
        x = math.log(a2)
    else:
        lo, hi = R_L / (R_L + R_c), R_H / (R_H + R_c)
        x = math.log(a2 / a1)
        diag["ratio"] = a2 / a1
    stat = abs(x - math.log(lo)) - abs(x - math.log(hi))
    return _decide(stat, diag)


def expected_dc_levels(U_p, R_L, R_H, R_c, end="bob"):
    """DC level at one end for each hypothesis, parasitic at Alice's side.

    Returns ``(bob_low, bob_high)`` levels.
    """
    Rs = R_L + R_H + R_c
    if end == "bob":
        return U_p * R_L / Rs, U_p * R_H / Rs
    if end == "alice":
        return U_p * (R_H + R_c) / Rs, U_p * (R_L + R_c) / Rs
    raise ValueError("end must be 'alice' or 'bob'")


def single_time_compare(t, expected_levels, at, spread=None, smoothing=1):
    """Classify one (smoothed) sample of ``U_2`` by the nearest expected DC level.

    ``expected_levels`` is ``(bob_low, bob_high)``.  ``spread`` is the
    stochastic spread of the smoothed sample; by default the sample standard
    deviation of the smoothed record.  Levels closer than the spread make
    the comparison meaningless and the attack abstains.
    """
    lo, hi = (float(v) for v in expected_levels)
    smoothing = check_count("smoothing", smoothing)
    x = t.U_2
    if smoothing > 1:
        x = np.convolve(x, np.full(smoothing, 1.0 / smoothing), mode="same")
    if not -x.size <= at < x.size:
        raise IndexError(f"sample index {at} outside trace of {x.size} samples")
    if spread is None:
        spread = float(np.std(x))
    gap = abs(hi - lo)
    diag = {"gap": gap, "spread": spread}
    if gap == 0.0 or gap < spread:
        return _abstain("levels closer than the noise spread", **diag)
    v = float(x[at])
    return _decide(abs(v - lo) - abs(v - hi), diag)


# -- scikit-learn wrappers ---------------------------------------------------

class _TraceAttack(ClassifierMixin, BaseEstimator):
    """Common plumbing: X is a sequence of traces, labels 1/0 with -1 for abstain."""

    def fit(self, X=None, y=None):
        """Stateless attacks need no training data; ``X`` is only validated."""
        if X is not None:
            check_traces(X)
        self.classes_ = np.array([0, 1])
        return self

    def verdicts(self, X):
        check_is_fitted(self, "classes_")
        return [self._attack(t) for t in check_traces(X)]

    def decision_function(self, X):
        return np.array([v.statistic for v in self.verdicts(X)])

    def predict(self, X):
        return np.array([v.label for v in self.verdicts(X)], dtype=int)

    def score(self, X, y, sample_weight=None):
        """Success probability with abstentions scored as one half."""
        pred = self.predict(X)
        y = np.asarray(y).astype(int)
        scores = np.where(pred == ABSTAIN, 0.5, (pred == y).astype(float))
        return report_from_scores(scores).p_hat


class MeanSquareAttack(_TraceAttack):
    def __init__(self, R_L=2e3, R_H=9e3):
        self.R_L = R_L
        self.R_H = R_H

    def _attack(self, t):
        return mean_square_attack(t, self.R_L, self.R_H)


class GAADerivativeAttack(_TraceAttack):
    """Derivative attack whose per-hypothesis expectations are learned in ``fit``.

    Parameters
    ----------
    R_L, R_H : float
        The published resistor pair.
    D, L_c : float
        Cable length and inductance Eve believes in.
    mode : {'eq5', 'fixed'}
        Hypothesis-dependent phase velocities or a single fixed ``velocity``.
    rule : {'variance', 'ks'}
        Discrepancy measure.
    """

    def __init__(self, R_L=1e3, R_H=1e4, D=2.0, L_c=2e-6, mode="eq5", velocity=None,
                 rule="variance"):
        self.R_L = R_L
        self.R_H = R_H
        self.D = D
        self.L_c = L_c
        self.mode = mode
        self.velocity = velocity
        self.rule = rule

    def fit(self, X, y):
        traces = check_traces(X)
        self.reference_ = fit_gaa_reference(traces, y, self.R_L, self.R_H, self.D, self.L_c,
                                            self.mode, self.velocity)
        self.classes_ = np.array([0, 1])
        return self

    def _attack(self, t):
        return gaa_derivative_attack(t, self.R_L, self.R_H, self.D, self.L_c, self.reference_,
                                     self.mode, self.velocity, self.rule)


class DCMainsAttack(_TraceAttack):
    def __init__(self, R_L=1e3, R_H=1e4, R_c=200.0, mode="dc", mains_hz=50.0,
                 floor_sigma=3.0, absolute=False, U_p=None):
        self.R_L = R_L
        self.R_H = R_H
        self.R_c = R_c
        self.mode = mode
        self.mains_hz = mains_hz
        self.floor_sigma = floor_sigma
        self.absolute = absolute
        self.U_p = U_p

    def _attack(self, t):
        return dc_mains_attack(t, self.R_L, self.R_H, self.R_c, self.mode, self.mains_hz,
                               self.floor_sigma, self.absolute, self.U_p)


class SingleTimeAttack(_TraceAttack):
    def __init__(self, expected_levels=(0.0, 1.0), at=0, spread=None, smoothing=1):
        self.expected_levels = expected_levels
        self.at = at
        self.spread = spread
        self.smoothing = smoothing

    def _attack(self, t):
        return single_time_compare(t, self.expected_levels, self.at, self.spread,
                                   self.smoothing)
