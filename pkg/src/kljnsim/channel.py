"""The KLJN loop: Alice's and Bob's resistor/generator pairs joined by a cable.

Sign conventions: the loop current ``I`` is positive when it flows from
Alice (x = 0) toward Bob (x = D).  End voltages follow from the generator
branches, ``U_1 = U_A - I R_A`` and ``U_2 = U_B + I R_B``, so the cable drop
is ``U_12 = U_1 - U_2``.

Lumped cables are integrated exactly.  The series R-L loop is a scalar
linear ODE whose time constant (~1e-10 s) is far below the sample spacing;
it is stepped with the closed-form solution for a piecewise-linear
(first-order-hold) drive, which is unconditionally stable and keeps the
inductive drop ``L dI/dt`` at the sample instants.  The distributed ladder is
a linear state-space system discretized the same way through the matrix
exponential.
"""

from __future__ import annotations

import functools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy import signal as sps

from ._validation import (
    IntegrationError,
    InvalidSpecError,
    check_count,
    check_nonnegative,
    check_positive,
    derive_seed,
)
from .noise import NoiseSpec, ParasiticSpec, Signal, generate

VARIANTS = ("lossless", "series_rl", "resistive", "ladder")
TAPS = ("end1", "end2", "midpoint_average")
LEVELS = ("low", "high")

#: shunt admittance x loop resistance above which the lumped picture is questionable
QUASI_STATIC_LIMIT = 1e-2


class QuasiStaticWarning(UserWarning):
    """Cable capacitance is not negligible at the driving bandwidth."""


@dataclass(frozen=True)
class CableModel:
    """One of four circuit renditions of the wire.

    Use the constructors :meth:`lossless`, :meth:`series_rl`,
    :meth:`resistive` and :meth:`ladder` rather than filling fields directly.
    ``L_c`` and ``R_c`` are totals for the lumped variants; the ladder keeps
    per-segment values.
    """

    variant: str
    length_m: float = 2.0
    L_c: float = 0.0
    R_c: float = 0.0
    segments: int = 0
    L_seg: float = 0.0
    C_seg: float = 0.0
    R_seg: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidSpecError(f"unknown cable variant {self.variant!r}; expected {VARIANTS}")
        for name in ("length_m", "L_c", "R_c", "L_seg", "C_seg", "R_seg"):
            check_nonnegative(name, getattr(self, name))
        if self.variant == "lossless" and self.R_c != 0:
            raise InvalidSpecError("a lossless cable has R_c = 0; use series_rl")
        if self.variant == "resistive" and self.L_c != 0:
            raise InvalidSpecError("a resistive cable has L_c = 0; use series_rl")
        if self.variant == "ladder":
            check_count("segments", self.segments, minimum=2)

    @classmethod
    def lossless(cls, L_c, length_m=2.0):
        return cls("lossless", length_m, L_c=L_c)

    @classmethod
    def series_rl(cls, R_c, L_c, length_m=2.0):
        return cls("series_rl", length_m, L_c=L_c, R_c=R_c)

    @classmethod
    def resistive(cls, R_c, length_m=2.0):
        return cls("resistive", length_m, R_c=R_c)

    @classmethod
    def ladder(cls, segments, L_seg, C_seg, R_seg, length_m=2.0):
        return cls("ladder", length_m, segments=segments, L_seg=L_seg, C_seg=C_seg,
                   R_seg=R_seg)

    @classmethod
    def ladder_per_meter(cls, segments, length_m, L_per_m, C_per_m, R_per_m):
        """Ladder whose totals equal the per-meter values times ``length_m``."""
        check_count("segments", segments, minimum=2)
        k = length_m / segments
        return cls.ladder(segments, L_per_m * k, C_per_m * k, R_per_m * k, length_m)

    @property
    def total_resistance(self):
        return self.R_seg * self.segments if self.variant == "ladder" else self.R_c

    @property
    def total_inductance(self):
        return self.L_seg * self.segments if self.variant == "ladder" else self.L_c

    @property
    def total_capacitance(self):
        return self.C_seg * self.segments if self.variant == "ladder" else 0.0

    @property
    def is_zero_impedance(self):
        return self.total_resistance == 0 and self.total_inductance == 0

    def lumped(self):
        """The series R-L cable with the same totals (drops shunt capacitance)."""
        return CableModel.series_rl(self.total_resistance, self.total_inductance, self.length_m)

    def quasi_static_margin(self, bandwidth_hz, loop_resistance):
        """Total shunt admittance at the band edge times the loop resistance."""
        return 2 * math.pi * bandwidth_hz * self.total_capacitance * loop_resistance

    def check_quasi_static(self, bandwidth_hz, loop_resistance, limit=QUASI_STATIC_LIMIT):
        margin = self.quasi_static_margin(bandwidth_hz, loop_resistance)
        if margin > limit:
            warnings.warn(
                f"cable shunt admittance x loop resistance = {margin:.3g} at "
                f"{bandwidth_hz:g} Hz exceeds {limit:g}; outside the quasi-static limit, lumped "
                "models will deviate",
                QuasiStaticWarning, stacklevel=2)
        return margin


@dataclass(frozen=True)
class Arrangement:
    """Which resistor each party attached for one bit."""

    alice: str
    bob: str
    R_L: float
    R_H: float

    def __post_init__(self):
        for who in (self.alice, self.bob):
            if who not in LEVELS:
                raise InvalidSpecError(f"resistor choice must be 'low' or 'high', got {who!r}")
        check_positive("R_L", self.R_L)
        check_positive("R_H", self.R_H)
        if self.R_L == self.R_H:
            raise InvalidSpecError("R_L and R_H must differ")

    @classmethod
    def secure_bit(cls, bob_is_high, R_L, R_H):
        return cls("low" if bob_is_high else "high", "high" if bob_is_high else "low", R_L, R_H)

    @property
    def R_A(self):
        return self.R_H if self.alice == "high" else self.R_L

    @property
    def R_B(self):
        return self.R_H if self.bob == "high" else self.R_L

    def secure(self):
        return self.alice != self.bob

    @property
    def bob_is_high(self):
        return self.bob == "high"

    @property
    def label(self):
        return ("H" if self.alice == "high" else "L") + ("H" if self.bob == "high" else "L")


@dataclass(frozen=True)
class LoopConfig:
    """Everything needed to simulate one bit-exchange window."""

    arrangement: Arrangement
    cable: CableModel
    noise: NoiseSpec
    parasitic: ParasiticSpec | None = None
    n_oc: int = 50
    eve_tap: str = "end2"

    def __post_init__(self):
        check_count("n_oc", self.n_oc)
        if self.eve_tap not in TAPS:
            raise InvalidSpecError(f"eve_tap must be one of {TAPS}, got {self.eve_tap!r}")

    def window_samples(self):
        """n_oc correlation times expressed in samples."""
        return int(round(self.n_oc * self.noise.correlation_time * self.noise.sample_rate_hz))

    def with_arrangement(self, arrangement):
        return replace(self, arrangement=arrangement)


@dataclass(frozen=True, eq=False)
class Trace:
    """Synchronized records of one bit window.

    ``I`` is the current leaving Alice's branch.  For the distributed ladder
    the current entering Bob's branch differs by the capacitive currents and
    is kept in ``I_2``; for lumped cables ``I_2`` is ``None`` (same current).
    """

    dt: float
    U_A: np.ndarray
    U_B: np.ndarray
    U_1: np.ndarray
    U_2: np.ndarray
    I: np.ndarray
    R_A: float
    R_B: float
    tap: str = "end2"
    bandwidth_hz: float | None = None
    I_2: np.ndarray | None = None

    @property
    def n(self):
        return self.I.size

    @property
    def duration(self):
        return self.n * self.dt

    @property
    def U_12(self):
        return self.U_1 - self.U_2

    @property
    def U(self):
        """Voltage at Eve's tap."""
        if self.tap == "end1":
            return self.U_1
        if self.tap == "end2":
            return self.U_2
        return 0.5 * (self.U_1 + self.U_2)

    @property
    def I_bob(self):
        return self.I if self.I_2 is None else self.I_2

    def correlation_time(self):
        if self.bandwidth_hz is None:
            raise ValueError("trace carries no bandwidth; correlation time unknown")
        return 1.0 / (2.0 * self.bandwidth_hz)

    def n_eff(self):
        """Window length in correlation times."""
        return self.duration / self.correlation_time()

    def kvl_residual(self):
        return self.U_A - self.U_B - self.I * (self.R_A + self.R_B) - self.U_12

    def channels(self):
        chans = {"U_A": self.U_A, "U_B": self.U_B, "U_1": self.U_1, "U_2": self.U_2,
                 "I": self.I}
        if self.I_2 is not None:
            chans["I_2"] = self.I_2
        return chans

    def signal(self, name):
        return Signal(getattr(self, name), self.dt)


class PhaseVelocities(NamedTuple):
    v_plus: float
    v_minus: float


def phase_velocities(D, L_c, R_A, R_B):
    """Direction-dependent phase velocities ``v+ = D R_B / L_c``, ``v- = D R_A / L_c``."""
    for name, value in (("D", D), ("L_c", L_c), ("R_A", R_A), ("R_B", R_B)):
        check_positive(name, value)
    return PhaseVelocities(D * R_B / L_c, D * R_A / L_c)


def _rl_current(u, R, L, dt):
    """Exact current of ``L dI/dt = u(t) - R I`` for piecewise-linear ``u``."""
    if L == 0:
        return u / R
    n = u.size
    if n == 1:
        return u / R
    tc = L / R
    e = math.exp(-dt / tc)
    slope = np.diff(u) / dt
    g = ((u[1:] - e * u[:-1]) - (1.0 - e) * slope * tc) / R
    I0 = (u[0] - slope[0] * tc) / R
    rest, _ = sps.lfilter([1.0], [1.0, -e], g, zi=[e * I0])
    return np.concatenate(([I0], rest))


@functools.lru_cache(maxsize=32)
def _ladder_matrices(N, L_seg, C_seg, R_seg, R_A, R_B, dt):
    # state: node voltages V_0..V_N, then inductor currents I_1..I_N
    nv = N + 1
    nx = nv + N
    caps = np.full(nv, C_seg)
    caps[0] = caps[-1] = C_seg / 2.0
    A = np.zeros((nx, nx))
    Bm = np.zeros((nx, 2))
    A[0, 0] = -1.0 / R_A
    Bm[0, 0] = 1.0 / R_A
    A[N, N] = -1.0 / R_B
    Bm[N, 1] = 1.0 / R_B
    for k in range(1, N + 1):
        ik = nv + k - 1
        A[k - 1, ik] -= 1.0  # I_k leaves node k-1
        A[k, ik] += 1.0      # and enters node k
        A[ik, k - 1] = 1.0 / L_seg
        A[ik, k] = -1.0 / L_seg
        A[ik, ik] = -R_seg / L_seg
    A[:nv] /= caps[:, None]
    Bm[:nv] /= caps[:, None]
    # first-order-hold discretization through the augmented exponential
    m = 2
    M = np.zeros((nx + 2 * m, nx + 2 * m))
    M[:nx, :nx] = A * dt
    M[:nx, nx:nx + m] = Bm * dt
    M[nx:nx + m, nx + m:] = np.eye(m)
    E = linalg.expm(M)
    Phi = E[:nx, :nx]
    G1 = E[:nx, nx:nx + m]
    G2 = E[:nx, nx + m:]
    return A, Bm, Phi, G1 - G2, G2


def _ladder_states(cable, U_A, U_B, R_A, R_B, dt):
    N = cable.segments
    A, Bm, Phi, G0, G1 = _ladder_matrices(N, cable.L_seg, cable.C_seg, cable.R_seg,
                                          float(R_A), float(R_B), float(dt))
    u = np.column_stack([U_A, U_B])
    drive = u[:-1] @ G0.T + u[1:] @ G1.T
    x = np.linalg.solve(A, -Bm @ u[0])
    states = np.empty((u.shape[0], x.size))
    states[0] = x
    for k in range(drive.shape[0]):
        x = Phi @ x + drive[k]
        states[k + 1] = x
    return states[:, 0], states[:, N]


def solve_loop(U_A, U_B, R_A, R_B, cable, dt, tap="end2", bandwidth_hz=None):
    """Solve the loop for given generator voltages (parasitics already included)."""
    U_A = np.asarray(U_A, dtype=float)
    U_B = np.asarray(U_B, dtype=float)
    if U_A.shape != U_B.shape or U_A.ndim != 1:
        raise ValueError("U_A and U_B must be 1-D arrays of equal length")
    R_A = check_positive("R_A", R_A)
    R_B = check_positive("R_B", R_B)
    if tap not in TAPS:
        raise InvalidSpecError(f"tap must be one of {TAPS}")

    I_2 = None
    if cable.variant == "ladder" and cable.C_seg > 0:
        V0, VN = _ladder_states(cable, U_A, U_B, R_A, R_B, dt)
        I = (U_A - V0) / R_A
        I_2 = (VN - U_B) / R_B
        U_1, U_2 = V0, VN
    else:
        R_loop = R_A + R_B + cable.total_resistance
        I = _rl_current(U_A - U_B, R_loop, cable.total_inductance, dt)
        U_1 = U_A - I * R_A
        U_2 = U_1 if cable.is_zero_impedance else U_B + I * R_B

    if not (np.all(np.isfinite(I)) and np.all(np.isfinite(U_1)) and np.all(np.isfinite(U_2))):
        raise IntegrationError(f"non-finite loop state for {cable.variant} cable")
    return Trace(dt, U_A, U_B, U_1, U_2, I, R_A, R_B, tap, bandwidth_hz, I_2)


def simulate_exchange(cfg, seed):
    """Simulate one bit window; a pure function of ``(cfg, seed)``.

    The two generators are seeded from ``seed`` by counter (keys 0 and 1);
    ``cfg.noise.seed`` is not used.
    """
    n = cfg.window_samples()
    if n < 100:
        raise ValueError(f"bit window of {n} samples is too short; need >= 100 "
                         "(raise n_oc or the sample rate)")
    arr = cfg.arrangement
    spec_a = replace(cfg.noise, seed=derive_seed(seed, 0))
    spec_b = replace(cfg.noise, seed=derive_seed(seed, 1))
    U_A = generate(spec_a, n, arr.R_A).samples
    U_B = generate(spec_b, n, arr.R_B).samples
    if cfg.parasitic is not None:
        wave = cfg.parasitic.waveform(n, cfg.noise.dt)
        if cfg.parasitic.location == "alice_side":
            U_A = U_A + wave
        else:
            U_B = U_B + wave
    if cfg.cable.total_capacitance > 0:
        cfg.cable.check_quasi_static(cfg.noise.bandwidth_hz,
                                     arr.R_A + arr.R_B + cfg.cable.total_resistance)
    return solve_loop(U_A, U_B, arr.R_A, arr.R_B, cfg.cable, cfg.noise.dt, cfg.eve_tap,
                      cfg.noise.bandwidth_hz)


def draw_arrangement(master_seed, bit, R_L, R_H):
    """Alice's and Bob's independent uniform choices for bit number ``bit``."""
    rng = np.random.default_rng(derive_seed(master_seed, bit, 0))
    alice, bob = rng.integers(0, 2, size=2)
    return Arrangement(LEVELS[alice], LEVELS[bob], R_L, R_H)


def bit_seed(master_seed, bit):
    return derive_seed(master_seed, bit, 1)


class ProtocolBit(NamedTuple):
    index: int
    arrangement: Arrangement
    trace: Trace


def protocol_bits(template, indices, master_seed, R_L=None, R_H=None, threads=1):
    """Simulate the given bit indices of a session; results follow ``indices`` order."""
    R_L = template.arrangement.R_L if R_L is None else R_L
    R_H = template.arrangement.R_H if R_H is None else R_H

    def one(bit):
        arr = draw_arrangement(master_seed, bit, R_L, R_H)
        trace = simulate_exchange(template.with_arrangement(arr), bit_seed(master_seed, bit))
        return ProtocolBit(bit, arr, trace)

    indices = list(indices)
    if threads <= 1:
        return [one(b) for b in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, indices))


def secure_bit_indices(master_seed, count, R_L, R_H, start=0):
    """The first ``count`` bit indices (from ``start``) whose arrangement is mixed."""
    out = []
    bit = start
    while len(out) < count:
        if draw_arrangement(master_seed, bit, R_L, R_H).secure():
            out.append(bit)
        bit += 1
    return out


def run_protocol(template, n_bits, master_seed, R_L=None, R_H=None, threads=1):
    """Simulate ``n_bits`` consecutive bits and return ``(Arrangement, Trace)`` pairs.

    Per-bit seeds are derived from ``master_seed`` and the bit counter, so
    the session does not depend on ``threads`` or evaluation order.
    """
    n_bits = check_count("n_bits", n_bits)
    bits = protocol_bits(template, range(n_bits), master_seed, R_L, R_H, threads)
    return [(b.arrangement, b.trace) for b in bits]


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def cable_drop_ratio(t):
    """RMS(U_12) / RMS(U_1): how well ``U_1 ~ U_2 ~ U`` holds on this trace."""
    r1 = _rms(t.U_1)
    if r1 == 0.0:
        raise ValueError("degenerate trace: zero end voltage")
    return _rms(t.U_12) / r1


class LadderCheck(NamedTuple):
    dev_U1: float
    dev_U2: float
    dev_I: float
    dev_I2: float
    segments: int
    quasi_static_margin: float

    @property
    def max_deviation(self):
        return max(self.dev_U1, self.dev_U2, self.dev_I, self.dev_I2)


def ladder_vs_lumped_check(cable, noise, R_A, R_B, n_samples=20000, seed=0):
    """Drive a ladder and its series R-L equivalent with the same noise.

    Returns the relative RMS deviations of the ladder's ``U_1``, ``U_2``,
    Alice-end current and Bob-end current from the lumped solution.
    """
    if cable.variant != "ladder":
        raise ValueError("ladder_vs_lumped_check needs a ladder cable")
    if cable.segments < 32:
        raise ValueError(f"need at least 32 segments for a meaningful check, got {cable.segments}")
    U_A = generate(replace(noise, seed=derive_seed(seed, 0)), n_samples, R_A).samples
    U_B = generate(replace(noise, seed=derive_seed(seed, 1)), n_samples, R_B).samples
    ladder = solve_loop(U_A, U_B, R_A, R_B, cable, noise.dt)
    lumped = solve_loop(U_A, U_B, R_A, R_B, cable.lumped(), noise.dt)

    def dev(a, b):
        return _rms(a - b) / _rms(b)

    margin = cable.quasi_static_margin(noise.bandwidth_hz, R_A + R_B + cable.total_resistance)
    return LadderCheck(dev(ladder.U_1, lumped.U_1), dev(ladder.U_2, lumped.U_2),
                       dev(ladder.I, lumped.I), dev(ladder.I_bob, lumped.I),
                       cable.segments, margin)
