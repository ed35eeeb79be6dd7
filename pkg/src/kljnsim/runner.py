"""Scenario files, Monte-Carlo orchestration and report emission.

A scenario is a TOML file::

    name = "mingesz2008"
    trials = 10000            # secure bits to attack
    master_seed = 2008
    attacks = ["mean_square"]
    checks = ["oracle_moments"]

    [arrangement]  R_L, R_H
    [noise]        kind, bandwidth_hz, kappa, sample_rate_hz, clip_level, table, alias_factor
    [cable]        variant, length_m, L_c, R_c, segments, L_seg, C_seg, R_seg,
                   L_per_m, C_per_m, R_per_m
    [loop]         n_oc, eve_tap
    [parasitic]    dc_offset, mains_amplitude, mains_freq_hz, mains_phase, location
    [sweep]        parameter ("cable.R_c"), values, extrapolate_R_c, extrapolate_R_A,
                   extrapolate_R_B, expected_p_minus_half
    [attack_options]

Outputs in ``out_dir``: ``trials.csv``, ``summary.json``, ``summary.csv`` and
``plots/end_voltages.csv``; :func:`emit_plots` adds histogram and fit-line
CSVs plus a plotting script.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import sys
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import tomli_w

from ._validation import ConfigError, InvalidSpecError, derive_seed
from .attacks import (
    DCMainsAttack,
    GAADerivativeAttack,
    MeanSquareAttack,
    SingleTimeAttack,
    expected_dc_levels,
    make_reference_traces,
    separator_reconstruct,
)
from .channel import (
    Arrangement,
    CableModel,
    LoopConfig,
    QuasiStaticWarning,
    cable_drop_ratio,
    ladder_vs_lumped_check,
    protocol_bits,
    secure_bit_indices,
)
from .io import fmt
from .noise import (
    NoiseSpec,
    ParasiticSpec,
    clipped_derivative_excess_kurtosis,
    clipped_normal_excess_kurtosis,
    derivative,
    generate,
    gaussianity,
    johnson_variance,
)
from .stats import (
    analytic_end_moments,
    estimate_p,
    mc_mean,
    orthogonality_stat,
    pythagoras_gap,
    scaling_fit,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

ATTACKS = ("mean_square", "gaa_derivative", "dc_mains", "single_time")
CHECKS = ("oracle_moments", "orthogonality", "separator", "ladder", "gaussianity")
TRIAL_COLUMNS = ("scenario", "trial", "arrangement", "attack", "truth", "guess", "abstain",
                 "statistic", "correct")
END_VOLTAGE_COLUMNS = ("scenario", "trial", "arrangement", "truth", "U1_mean", "U2_mean",
                       "U1_ms", "U2_ms", "I_ms")
SUMMARY_COLUMNS = ("scenario", "attack", "trials", "successes", "abstained", "p_hat", "ci_low",
                   "ci_high", "leak")
CHUNK = 1000
# keys of the seed tree below the master seed
_REFERENCE_KEY = 1 << 40
_CHECK_KEY = (1 << 40) + 1

_F, _I, _S, _L, _B = "float", "int", "str", "list", "bool"
TOP_SCHEMA = {"name": (_S, True), "description": (_S, False), "trials": (_I, True),
              "master_seed": (_I, True), "attacks": (_L, True), "checks": (_L, False)}
SECTION_SCHEMA = {
    "arrangement": {"R_L": (_F, True), "R_H": (_F, True)},
    "noise": {"kind": (_S, False), "bandwidth_hz": (_F, True), "kappa": (_F, True),
              "sample_rate_hz": (_F, True), "clip_level": (_F, False), "table": (_L, False),
              "alias_factor": (_I, False)},
    "cable": {"variant": (_S, True), "length_m": (_F, False), "L_c": (_F, False),
              "R_c": (_F, False), "segments": (_I, False), "L_seg": (_F, False),
              "C_seg": (_F, False), "R_seg": (_F, False), "L_per_m": (_F, False),
              "C_per_m": (_F, False), "R_per_m": (_F, False)},
    "loop": {"n_oc": (_I, True), "eve_tap": (_S, False)},
    "parasitic": {"dc_offset": (_F, False), "mains_amplitude": (_F, False),
                  "mains_freq_hz": (_F, False), "mains_phase": (_F, False),
                  "location": (_S, False)},
    "sweep": {"parameter": (_S, True), "values": (_L, True), "extrapolate_R_c": (_F, False),
              "extrapolate_R_A": (_F, False), "extrapolate_R_B": (_F, False),
              "expected_p_minus_half": (_F, False)},
    "attack_options": {"reference_traces": (_I, False), "rule": (_S, False),
                       "mode": (_S, False), "velocity": (_F, False), "dc_mode": (_S, False),
                       "mains_hz": (_F, False), "floor_sigma": (_F, False),
                       "absolute": (_B, False), "smoothing": (_I, False),
                       "record_samples": (_I, False), "ladder_samples": (_I, False)},
}
REQUIRED_SECTIONS = ("arrangement", "noise", "cable", "loop")
OPTION_DEFAULTS = {"reference_traces": 200, "rule": "variance", "mode": "eq5", "velocity": None,
                   "dc_mode": "dc", "mains_hz": 50.0, "floor_sigma": 3.0, "absolute": False,
                   "smoothing": None, "record_samples": 1 << 20, "ladder_samples": 20000}


class RunError(RuntimeError):
    """A simulation failed; partial outputs were flagged in summary.json."""


# -- parsing and validation --------------------------------------------------

def _type_ok(kind, v):
    if kind == _F:
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if kind == _I:
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == _S:
        return isinstance(v, str)
    if kind == _L:
        return isinstance(v, list)
    return isinstance(v, bool)


def _check_table(table, schema, prefix, diags):
    for key in table:
        if key not in schema:
            diags.append((f"{prefix}{key}", "unknown key",
                          "allowed: " + ", ".join(sorted(schema))))
    for key, (kind, required) in schema.items():
        if key not in table:
            if required:
                diags.append((f"{prefix}{key}", "missing required key", f"add a {kind} value"))
            continue
        if not _type_ok(kind, table[key]):
            diags.append((f"{prefix}{key}", f"expected {kind}, got {type(table[key]).__name__}",
                          f"write it as a TOML {kind}"))


def _build_cable(c):
    variant = c["variant"]
    length = float(c.get("length_m", 2.0))
    if variant == "ladder" and "L_per_m" in c:
        return CableModel.ladder_per_meter(c.get("segments", 64), length, c["L_per_m"],
                                           c.get("C_per_m", 0.0), c.get("R_per_m", 0.0))
    if variant == "ladder":
        return CableModel.ladder(c.get("segments", 64), float(c.get("L_seg", 0.0)),
                                 float(c.get("C_seg", 0.0)), float(c.get("R_seg", 0.0)), length)
    if "L_per_m" in c or "R_per_m" in c:
        L = c.get("L_per_m", 0.0) * length
        R = c.get("R_per_m", 0.0) * length
    else:
        L = c.get("L_c", 0.0)
        R = c.get("R_c", 0.0)
    return CableModel(variant, length, L_c=float(L), R_c=float(R))


def _build_loop(cfg):
    a, n, c, lp = cfg["arrangement"], cfg["noise"], cfg["cable"], cfg["loop"]
    arr = Arrangement("low", "high", float(a["R_L"]), float(a["R_H"]))
    noise = NoiseSpec(n.get("kind", "gaussian"), float(n["bandwidth_hz"]), float(n["kappa"]),
                      float(n["sample_rate_hz"]), 0,
                      None if "clip_level" not in n else float(n["clip_level"]),
                      None if "table" not in n else tuple(n["table"]),
                      n.get("alias_factor", 1))
    par = None
    if "parasitic" in cfg:
        par = ParasiticSpec(**cfg["parasitic"])
    return LoopConfig(arr, _build_cable(c), noise, par, lp["n_oc"], lp.get("eve_tap", "end2"))


def _physical_diagnostics(cfg, diags):
    """Targeted checks that report precise key paths before objects are built."""
    a = cfg.get("arrangement", {})
    for k in ("R_L", "R_H"):
        if k in a and _type_ok(_F, a[k]) and a[k] <= 0:
            diags.append((f"arrangement.{k}", f"resistance must be > 0, got {a[k]}",
                          "use a positive value in ohms"))
    if a.get("R_L") is not None and a.get("R_L") == a.get("R_H"):
        diags.append(("arrangement.R_H", "R_L and R_H must differ", "pick two distinct resistors"))
    n = cfg.get("noise", {})
    if _type_ok(_F, n.get("bandwidth_hz")) and _type_ok(_F, n.get("sample_rate_hz")):
        if n["bandwidth_hz"] <= 0:
            diags.append(("noise.bandwidth_hz", "bandwidth must be > 0", "use a positive value"))
        elif n["sample_rate_hz"] < 10 * n["bandwidth_hz"]:
            diags.append(("noise.sample_rate_hz",
                          f"undersampled: sample_rate_hz={n['sample_rate_hz']:g} < 10 x "
                          f"bandwidth_hz={n['bandwidth_hz']:g}",
                          "quasi-static oversampling needs sample_rate_hz >= 10 x bandwidth_hz"))
    if _type_ok(_F, n.get("kappa")) and n["kappa"] < 0:
        diags.append(("noise.kappa", "kappa must be >= 0", "use a non-negative intensity"))
    c = cfg.get("cable", {})
    for k in ("length_m", "L_c", "R_c", "L_seg", "C_seg", "R_seg", "L_per_m", "C_per_m",
              "R_per_m"):
        if _type_ok(_F, c.get(k)) and c[k] < 0:
            diags.append((f"cable.{k}", f"component values must be >= 0, got {c[k]}",
                          "use a non-negative value"))
    lp = cfg.get("loop", {})
    if _type_ok(_I, lp.get("n_oc")) and lp["n_oc"] < 1:
        diags.append(("loop.n_oc", "n_oc must be >= 1", "observe at least one correlation time"))


def _set_path(cfg, path, value):
    section, key = path.split(".", 1)
    cfg.setdefault(section, {})[key] = value


def _get_path(cfg, path):
    section, key = path.split(".", 1)
    return cfg.get(section, {}).get(key)


@dataclass(frozen=True)
class Scenario:
    """A validated scenario: the loop template plus what to run on it."""

    name: str
    description: str
    trials: int
    master_seed: int
    attacks: tuple
    checks: tuple
    loop: LoopConfig
    sweep: tuple | None  # (parameter, values)
    options: dict
    config: dict
    warnings: tuple = ()

    def to_dict(self):
        return copy.deepcopy(self.config)

    def to_toml(self):
        return tomli_w.dumps(self.config)

    def with_overrides(self, trials=None, master_seed=None):
        cfg = self.to_dict()
        if trials is not None:
            cfg["trials"] = trials
        if master_seed is not None:
            cfg["master_seed"] = master_seed
        return parse_scenario(cfg)

    def points(self):
        """``(label, sweep_value, loop)`` for every point of the scenario."""
        if self.sweep is None:
            return [(self.name, None, self.loop)]
        param, values = self.sweep
        out = []
        for v in values:
            cfg = self.to_dict()
            _set_path(cfg, param, v)
            key = param.split(".", 1)[1]
            out.append((f"{self.name}[{key}={v:g}]", v, _build_loop(cfg)))
        return out


def parse_scenario(cfg, source="<scenario>"):
    """Validate a scenario dictionary; raise :class:`ConfigError` with every problem found."""
    diags = []
    if not isinstance(cfg, dict):
        raise ConfigError([(source, "top level must be a table", "")])
    sections = set(SECTION_SCHEMA)
    top = {k: v for k, v in cfg.items() if k not in sections}
    _check_table(top, TOP_SCHEMA, "", diags)
    for sec in REQUIRED_SECTIONS:
        if sec not in cfg:
            diags.append((sec, "missing required section", f"add a [{sec}] table"))
    for sec, schema in SECTION_SCHEMA.items():
        if sec in cfg:
            if not isinstance(cfg[sec], dict):
                diags.append((sec, "expected a table", f"write it as [{sec}]"))
                continue
            _check_table(cfg[sec], schema, f"{sec}.", diags)
    if _type_ok(_I, cfg.get("trials")) and cfg["trials"] < 1:
        diags.append(("trials", "trials must be >= 1", "attack at least one secure bit"))
    for i, a in enumerate(cfg.get("attacks", []) if isinstance(cfg.get("attacks"), list) else []):
        if a not in ATTACKS:
            diags.append((f"attacks[{i}]", f"unknown attack {a!r}", "known: " + ", ".join(ATTACKS)))
    for i, c in enumerate(cfg.get("checks", []) if isinstance(cfg.get("checks"), list) else []):
        if c not in CHECKS:
            diags.append((f"checks[{i}]", f"unknown check {c!r}", "known: " + ", ".join(CHECKS)))
    _physical_diagnostics(cfg, diags)
    sweep = None
    if isinstance(cfg.get("sweep"), dict) and "parameter" in cfg["sweep"]:
        param = cfg["sweep"]["parameter"]
        values = cfg["sweep"].get("values")
        if not isinstance(param, str) or "." not in param or \
                param.split(".", 1)[0] not in ("arrangement", "noise", "cable", "loop",
                                                "parasitic"):
            diags.append(("sweep.parameter", f"cannot sweep {param!r}",
                          "use section.key, e.g. cable.R_c"))
        elif not values:
            diags.append(("sweep.values", "sweep values must be nonempty", "list at least one value"))
        elif not all(_type_ok(_F, v) for v in values):
            diags.append(("sweep.values", "sweep values must be numbers", ""))
        else:
            sweep = (param, tuple(values))
    if diags:
        raise ConfigError(diags)

    captured = []
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", QuasiStaticWarning)
            loops = [_build_loop(cfg)]
            if sweep is not None:
                for v in sweep[1]:
                    c2 = copy.deepcopy(cfg)
                    _set_path(c2, sweep[0], v)
                    loops.append(_build_loop(c2))
            for lp in loops:
                if lp.cable.total_capacitance > 0:
                    a = lp.arrangement
                    lp.cable.check_quasi_static(lp.noise.bandwidth_hz,
                                                a.R_L + a.R_H + lp.cable.total_resistance)
            captured = [str(w.message) for w in caught]
    except (InvalidSpecError, TypeError) as exc:
        raise ConfigError([(_guess_path(str(exc)), str(exc), "fix the value named in the message")])
    loop = loops[0]
    for lp in loops:
        if lp.window_samples() < 100:
            diags.append(("loop.n_oc", f"bit window of {lp.window_samples()} samples is too short",
                          "need n_oc * sample_rate_hz / (2 bandwidth_hz) >= 100"))
            break
    if "gaa_derivative" in cfg["attacks"] and any(lp.cable.total_inductance <= 0 for lp in loops):
        diags.append(("cable.L_c", "gaa_derivative needs a cable inductance", "set L_c > 0"))
    if "single_time" in cfg["attacks"] and loop.parasitic is None:
        diags.append(("parasitic", "single_time needs a [parasitic] section", "add a DC offset"))
    opts = dict(OPTION_DEFAULTS)
    opts.update(cfg.get("attack_options", {}))
    if opts["rule"] not in ("variance", "ks"):
        diags.append(("attack_options.rule", f"unknown rule {opts['rule']!r}", "variance or ks"))
    if opts["mode"] not in ("eq5", "fixed"):
        diags.append(("attack_options.mode", f"unknown mode {opts['mode']!r}", "eq5 or fixed"))
    if opts["mode"] == "fixed" and opts["velocity"] is None:
        diags.append(("attack_options.velocity", "fixed mode needs a velocity", "set velocity"))
    if diags:
        raise ConfigError(diags)
    return Scenario(cfg["name"], cfg.get("description", ""), cfg["trials"], cfg["master_seed"],
                    tuple(cfg["attacks"]), tuple(cfg.get("checks", ())), loop, sweep, opts,
                    copy.deepcopy(cfg), tuple(captured))


def _guess_path(msg):
    for sec, schema in SECTION_SCHEMA.items():
        for key in schema:
            if msg.startswith(key) or f" {key} " in f" {msg} ":
                return f"{sec}.{key}"
    return "<scenario>"


def validate_config(path):
    """Parse and validate a scenario file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([(str(path), "file not found", "check the path")])
    try:
        cfg = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([(str(path), f"TOML syntax error: {exc}", "")]) from None
    return parse_scenario(cfg, str(path))


def list_presets():
    root = resources.files("kljnsim").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def preset_path(name):
    return resources.files("kljnsim").joinpath("presets", f"{name}.toml")


def load_scenario(name_or_path):
    """Load a preset by name or a scenario file by path."""
    p = Path(name_or_path)
    if p.suffix == ".toml" or p.is_file():
        return validate_config(p)
    if name_or_path in list_presets():
        with resources.as_file(preset_path(name_or_path)) as fp:
            return validate_config(fp)
    raise ConfigError([("scenario", f"unknown scenario {name_or_path!r}",
                        "available presets: " + ", ".join(list_presets()))])


# -- checks ------------------------------------------------------------------

class _Check:
    def observe(self, bit):
        pass

    def result(self):
        raise NotImplementedError


class OracleMomentsCheck(_Check):
    """Simulated mean squares against the divider closed form, per arrangement."""

    def __init__(self, loop):
        self.loop = loop
        self.values = {}

    def observe(self, bit):
        t = bit.trace
        v = self.values.setdefault(bit.arrangement.label, ([], [], [], bit.arrangement))
        v[0].append(float(np.mean(t.U_1 ** 2)))
        v[1].append(float(np.mean(t.U_2 ** 2)))
        v[2].append(float(np.mean(t.I ** 2)))

    def result(self):
        cable, noise = self.loop.cable, self.loop.noise
        if cable.variant != "resistive":
            return {"applicable": False, "passed": None}
        out, ok = {}, True
        for label in sorted(self.values):
            u1, u2, ii, arr = self.values[label]
            if len(u1) < 2:
                continue
            oracle = analytic_end_moments(arr.R_A, arr.R_B, cable.R_c, noise.kappa,
                                          noise.bandwidth_hz)
            row = {}
            for name, vals, ref in (("U1_sq", u1, oracle.U1_sq), ("U2_sq", u2, oracle.U2_sq),
                                    ("I_sq", ii, oracle.I_sq)):
                m, se = mc_mean(vals)
                z = (m - ref) / se
                ok &= abs(z) <= 3.0
                row[name] = {"simulated": m, "oracle": ref, "sem": se, "z": z}
            row["n"] = len(u1)
            out[label] = row
        return {"applicable": True, "passed": bool(ok), "arrangements": out}


class OrthogonalityCheck(_Check):
    """Tap voltage / current correlation and the separator sign-flip gap."""

    def __init__(self, loop):
        self.loop = loop
        self.rows = []

    def observe(self, bit):
        t = bit.trace
        n_eff = t.n_eff()
        a = bit.arrangement
        rho = orthogonality_stat(t.U, t.I)
        gaps = [pythagoras_gap(t.U, t.I, R) for R in (a.R_L, a.R_H)]
        tap_gaps = [pythagoras_gap(t.U, t.I, R, normalize="tap") for R in (a.R_L, a.R_H)]
        self.rows.append((rho, n_eff, gaps, tap_gaps))

    def result(self):
        if not self.rows:
            return {"passed": None}
        n = len(self.rows)
        rho_ok = sum(abs(r) < 3 / math.sqrt(ne) for r, ne, _, _ in self.rows)
        gap_ok = sum(all(g < 6 / math.sqrt(ne) for g in gs) for _, ne, gs, _ in self.rows)
        tap_ok = [sum(tg[i] < 6 / math.sqrt(ne) for _, ne, _, tg in self.rows) for i in (0, 1)]
        need = math.ceil(0.95 * n)
        return {"traces": n, "n_eff": self.rows[0][1], "rho_within_bound": rho_ok,
                "gap_within_bound": gap_ok, "tap_normalized_gap_within_bound_R_L": tap_ok[0],
                "tap_normalized_gap_within_bound_R_H": tap_ok[1],
                "max_abs_rho": max(abs(r) for r, *_ in self.rows),
                "passed": bool(rho_ok >= need and gap_ok >= need)}


class SeparatorCheck(_Check):
    """Correct-resistor fidelity and the wrong-resistor variance."""

    def __init__(self, loop):
        self.loop = loop
        self.corr, self.wrong, self.fidelity = [], [], []

    def observe(self, bit):
        t, a = bit.trace, bit.arrangement
        right = separator_reconstruct(t, a.R_B, "bob").samples
        self.corr.append(float(np.corrcoef(right, t.U_B)[0, 1]))
        err = np.sqrt(np.mean((right - t.U_B) ** 2)) / np.sqrt(np.mean(t.U_B ** 2))
        self.fidelity.append((float(err), cable_drop_ratio(t)))
        # generators are zero-mean, so the mean square is the unbiased variance
        wrong = separator_reconstruct(t, a.R_A, "bob").samples
        self.wrong.append(float(np.mean(wrong ** 2)) / johnson_variance(a.R_A, self.loop.noise))

    def result(self):
        if len(self.corr) < 2:
            return {"passed": None}
        m, se = mc_mean(self.wrong)
        ok = min(self.corr) > 0.999 and abs(m - 1.0) <= 3 * se
        return {"traces": len(self.corr), "min_correlation": min(self.corr),
                "wrong_variance_ratio_mean": m, "wrong_variance_ratio_sem": se,
                "max_reconstruction_error": max(e for e, _ in self.fidelity),
                "max_cable_drop_ratio": max(d for _, d in self.fidelity),
                "passed": bool(ok)}


class LadderCheckRunner(_Check):
    def __init__(self, loop, samples, seed):
        self.loop, self.samples, self.seed = loop, samples, seed

    def result(self):
        cable = self.loop.cable
        if cable.variant != "ladder":
            return {"applicable": False, "passed": None}
        a = self.loop.arrangement
        rows = []
        for factor in (1, 2):
            c = replace(cable, segments=cable.segments * factor, L_seg=cable.L_seg / factor,
                        C_seg=cable.C_seg / factor, R_seg=cable.R_seg / factor)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", QuasiStaticWarning)
                r = ladder_vs_lumped_check(c, self.loop.noise, a.R_L, a.R_H, self.samples,
                                           self.seed)
            rows.append({"segments": r.segments, "dev_U1": r.dev_U1, "dev_U2": r.dev_U2,
                         "dev_I": r.dev_I, "dev_I2": r.dev_I2,
                         "max_deviation": r.max_deviation,
                         "quasi_static_margin": r.quasi_static_margin})
        return {"applicable": True, "refinement": rows,
                "passed": bool(rows[0]["max_deviation"] < 1e-3)}


class GaussianityCheck(_Check):
    def __init__(self, loop, samples, seed):
        self.loop, self.samples, self.seed = loop, samples, seed

    def result(self):
        noise = replace(self.loop.noise, seed=self.seed)
        s = generate(noise, self.samples)
        g = gaussianity(s)
        gd = gaussianity(derivative(s))
        clipped = noise.kind == "clipped_gaussian"
        expected = clipped_normal_excess_kurtosis(noise.clip_level) if clipped else 0.0
        deriv_limit = clipped_derivative_excess_kurtosis(noise.clip_level) if clipped else 0.0
        tol = 3 * math.sqrt(24 / g.n_eff_kurtosis)
        signal_ok = abs(g.excess_kurtosis - expected) <= tol
        amplified = abs(gd.excess_kurtosis) > abs(g.excess_kurtosis)
        return {"samples": self.samples, "kind": noise.kind,
                "signal": g._asdict(), "derivative": gd._asdict(),
                "expected_excess_kurtosis": expected, "tolerance": tol,
                "derivative_excess_kurtosis_limit": deriv_limit,
                "signal_matches_expected": bool(signal_ok),
                "derivative_amplifies": bool(amplified),
                "passed": bool(signal_ok and amplified)}


def _make_checks(sc, loop, seed):
    out = {}
    for name in sc.checks:
        if name == "oracle_moments":
            out[name] = OracleMomentsCheck(loop)
        elif name == "orthogonality":
            out[name] = OrthogonalityCheck(loop)
        elif name == "separator":
            out[name] = SeparatorCheck(loop)
        elif name == "ladder":
            out[name] = LadderCheckRunner(loop, sc.options["ladder_samples"],
                                          derive_seed(seed, _CHECK_KEY, 0))
        elif name == "gaussianity":
            out[name] = GaussianityCheck(loop, sc.options["record_samples"],
                                         derive_seed(seed, _CHECK_KEY, 1))
    return out


def _make_attacks(sc, loop, seed):
    o = sc.options
    a = loop.arrangement
    R_L, R_H = a.R_L, a.R_H
    R_c = loop.cable.total_resistance
    out = {}
    for name in sc.attacks:
        if name == "mean_square":
            out[name] = MeanSquareAttack(R_L, R_H)
        elif name == "gaa_derivative":
            X, y = make_reference_traces(loop, o["reference_traces"],
                                         derive_seed(seed, _REFERENCE_KEY))
            out[name] = GAADerivativeAttack(R_L, R_H, loop.cable.length_m,
                                            loop.cable.total_inductance, o["mode"],
                                            o["velocity"], o["rule"]).fit(X, y)
        elif name == "dc_mains":
            p = loop.parasitic
            out[name] = DCMainsAttack(R_L, R_H, R_c, o["dc_mode"], o["mains_hz"],
                                      o["floor_sigma"], o["absolute"],
                                      None if p is None else p.dc_offset)
        elif name == "single_time":
            n = loop.window_samples()
            smoothing = o["smoothing"] or max(1, int(round(loop.noise.samples_per_correlation_time())))
            levels = expected_dc_levels(loop.parasitic.dc_offset, R_L, R_H, R_c)
            out[name] = SingleTimeAttack(levels, n // 2, None, smoothing)
        if not hasattr(out[name], "classes_"):
            out[name].fit()
    return out


# -- running -----------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _hyp(flag):
    if flag is None:
        return "abstain"
    return "bob_high" if flag else "bob_low"


def run_point(sc, label, loop, threads=1):
    """Simulate and attack one point of a scenario.

    Returns ``(trial_rows, end_voltage_rows, reports, checks)``.
    """
    seed = sc.master_seed
    a = loop.arrangement
    attacks = _make_attacks(sc, loop, seed)
    checks = _make_checks(sc, loop, seed)
    indices = secure_bit_indices(seed, sc.trials, a.R_L, a.R_H)
    trial_rows, volt_rows = [], []
    verdicts = {name: [] for name in attacks}
    truths = []
    for start in range(0, len(indices), CHUNK):
        bits = protocol_bits(loop, indices[start:start + CHUNK], seed, threads=threads)
        for bit in bits:
            t, arr = bit.trace, bit.arrangement
            truth = arr.bob_is_high
            truths.append(truth)
            volt_rows.append([label, bit.index, arr.label, _hyp(truth),
                              fmt(np.mean(t.U_1)), fmt(np.mean(t.U_2)),
                              fmt(np.mean(t.U_1 ** 2)), fmt(np.mean(t.U_2 ** 2)),
                              fmt(np.mean(t.I ** 2))])
            for name, est in attacks.items():
                v = est._attack(t)
                verdicts[name].append(v)
                correct = 0.5 if v.guess is None else float(v.guess == truth)
                trial_rows.append([label, bit.index, arr.label, name, _hyp(truth), _hyp(v.guess),
                                   int(v.guess is None), fmt(v.statistic), fmt(correct)])
            for chk in checks.values():
                chk.observe(bit)
    reports = {name: estimate_p(vs, truths) for name, vs in verdicts.items()}
    check_results = {name: chk.result() for name, chk in checks.items()}
    return trial_rows, volt_rows, reports, check_results


def run_scenario(sc, out_dir, threads=1):
    """Run every point of ``sc`` and write the report files into ``out_dir``.

    Returns the summary dictionary (also written to ``summary.json``).
    """
    out = Path(out_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    summary = {"scenario": sc.name, "description": sc.description, "trials": sc.trials,
               "master_seed": sc.master_seed, "attacks": list(sc.attacks),
               "checks": list(sc.checks), "warnings": list(sc.warnings), "points": []}
    all_trials, all_volts = [], []
    try:
        for label, value, loop in sc.points():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", QuasiStaticWarning)
                rows, volts, reports, checks = run_point(sc, label, loop, threads)
            all_trials += rows
            all_volts += volts
            summary["points"].append({
                "label": label, "sweep_value": value,
                "cable": {"variant": loop.cable.variant,
                          "R_c": loop.cable.total_resistance,
                          "L_c": loop.cable.total_inductance},
                "reports": {k: r.to_dict() for k, r in reports.items()},
                "checks": checks})
    except Exception as exc:
        summary.update(status="failed", partial=True, error=f"{type(exc).__name__}: {exc}")
        _write_csv(out / "trials.csv", TRIAL_COLUMNS, all_trials)
        _dump_json(out / "summary.json", summary)
        raise RunError(f"scenario {sc.name!r} failed: {exc}") from exc

    if sc.sweep is not None and sc.sweep[0] == "cable.R_c" and "mean_square" in sc.attacks:
        pts = [(p["sweep_value"], p["reports"]["mean_square"]["p_hat"]) for p in summary["points"]]
        fit = scaling_fit(pts)
        summary["scaling_fit"] = fit.to_dict()
        cfg = sc.config.get("sweep", {})
        if "extrapolate_R_c" in cfg:
            a = sc.loop.arrangement
            pred = fit.extrapolate(cfg["extrapolate_R_c"], cfg["extrapolate_R_A"],
                                   cfg["extrapolate_R_B"], a.R_L, a.R_H)
            ex = {"R_c": cfg["extrapolate_R_c"], "R_A": cfg["extrapolate_R_A"],
                  "R_B": cfg["extrapolate_R_B"], "p_minus_half": pred}
            if "expected_p_minus_half" in cfg:
                ref = cfg["expected_p_minus_half"]
                ex["expected_p_minus_half"] = ref
                ex["log10_ratio"] = math.log10(pred / ref) if pred > 0 else None
            summary["extrapolation"] = ex
    summary["status"] = "ok"
    summary["partial"] = False

    _write_csv(out / "trials.csv", TRIAL_COLUMNS, all_trials)
    _write_csv(out / "plots" / "end_voltages.csv", END_VOLTAGE_COLUMNS, all_volts)
    rows = []
    for p in summary["points"]:
        for name, r in sorted(p["reports"].items()):
            rows.append([p["label"], name, r["trials"], fmt(r["successes"]), r["abstained"],
                         fmt(r["p_hat"]), fmt(r["ci_low"]), fmt(r["ci_high"]), fmt(r["leak"])])
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    _dump_json(out / "summary.json", summary)
    return _jsonable(summary)


# -- plot data ---------------------------------------------------------------

_PLOT_SCRIPT = '''"""Render the CSV files in this directory (requires matplotlib)."""
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))


def read(name):
    path = os.path.join(here, name)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return list(csv.DictReader(fh))


hist = read("hist_end_voltages.csv")
if hist:
    for label in sorted({r["scenario"] for r in hist}):
        rows = [r for r in hist if r["scenario"] == label]
        x = [float(r["bin_center"]) for r in rows]
        w = float(rows[1]["bin_center"]) - float(rows[0]["bin_center"]) if len(rows) > 1 else 1.0
        plt.figure()
        plt.bar(x, [int(r["count_bob_low"]) for r in rows], width=w, alpha=0.5, label="Bob low")
        plt.bar(x, [int(r["count_bob_high"]) for r in rows], width=w, alpha=0.5, label="Bob high")
        plt.xlabel("window mean of U_2 [V]")
        plt.ylabel("bits")
        plt.legend()
        plt.title(label)
        plt.savefig(os.path.join(here, "hist_" + label.replace("/", "_") + ".png"), dpi=120)

pts = read("scaling_points.csv")
line = read("fit_line.csv")
if pts and line:
    plt.figure()
    plt.errorbar([float(r["R_c_sq"]) for r in pts], [float(r["p_hat"]) for r in pts],
                 yerr=[[float(r["p_hat"]) - float(r["ci_low"]) for r in pts],
                       [float(r["ci_high"]) - float(r["p_hat"]) for r in pts]], fmt="o")
    plt.plot([float(r["R_c_sq"]) for r in line], [float(r["p_fit"]) for r in line])
    plt.xlabel("R_c^2 [Ohm^2]")
    plt.ylabel("p")
    plt.savefig(os.path.join(here, "scaling.png"), dpi=120)

sys.exit(0)
'''


def emit_plots(out_dir, bins=40):
    """Write histogram / fit-line CSVs and a plotting script under ``out_dir/plots``."""
    out = Path(out_dir)
    summary_path = out / "summary.json"
    volts_path = out / "plots" / "end_voltages.csv"
    if not summary_path.is_file() or not volts_path.is_file():
        raise FileNotFoundError(f"no report files in {out} (run a scenario first)")
    summary = json.loads(summary_path.read_text())
    with open(volts_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{volts_path} holds no trials")
    written = []

    hist_rows = []
    for label in sorted({r["scenario"] for r in rows}):
        sel = [r for r in rows if r["scenario"] == label]
        vals = np.array([float(r["U2_mean"]) for r in sel])
        high = np.array([r["truth"] == "bob_high" for r in sel])
        lo, hi = float(vals.min()), float(vals.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
        c_low, _ = np.histogram(vals[~high], edges)
        c_high, _ = np.histogram(vals[high], edges)
        centers = 0.5 * (edges[1:] + edges[:-1])
        for c, nl, nh in zip(centers, c_low, c_high):
            hist_rows.append([label, fmt(c), int(nl), int(nh)])
    path = out / "plots" / "hist_end_voltages.csv"
    _write_csv(path, ("scenario", "bin_center", "count_bob_low", "count_bob_high"), hist_rows)
    written.append(path)

    if "scaling_fit" in summary:
        fit = summary["scaling_fit"]
        pts = []
        for p in summary["points"]:
            r = p["reports"]["mean_square"]
            pts.append([fmt(p["sweep_value"]), fmt(p["sweep_value"] ** 2), fmt(r["p_hat"]),
                        fmt(r["ci_low"]), fmt(r["ci_high"])])
        path = out / "plots" / "scaling_points.csv"
        _write_csv(path, ("R_c", "R_c_sq", "p_hat", "ci_low", "ci_high"), pts)
        written.append(path)
        r_max = max(p["sweep_value"] for p in summary["points"])
        grid = np.linspace(0.0, r_max, 51)
        line = [[fmt(r), fmt(r * r), fmt(0.5 + fit["theta_prime"] * r * r)] for r in grid]
        path = out / "plots" / "fit_line.csv"
        _write_csv(path, ("R_c", "R_c_sq", "p_fit"), line)
        written.append(path)

    path = out / "plots" / "plot_all.py"
    path.write_text(_PLOT_SCRIPT)
    written.append(path)
    return written


def write_scenario(path, sc):
    Path(path).write_text(sc.to_toml())
