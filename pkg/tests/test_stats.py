import math

import numpy as np
import pytest
from conftest import make_loop
from scipy import special
from scipy import stats as sst

from kljnsim.attacks import Verdict
from kljnsim.channel import CableModel, simulate_exchange
from kljnsim.noise import NoiseSpec, Signal, generate
from kljnsim.stats import (
    Z95,
    AttackReport,
    analytic_end_moments,
    binary_entropy,
    estimate_p,
    imbalance_readings,
    info_leak,
    mc_mean,
    mean_square_success_probability,
    orthogonality_stat,
    pythagoras_gap,
    report_from_scores,
    scaling_fit,
    spectrum,
    wilson_interval,
)


def verdicts(guesses):
    return [Verdict(g, 0.0) for g in guesses]


class TestWilson:
    def test_example(self):
        lo, hi = wilson_interval(525, 1000)
        assert lo == pytest.approx(0.494, abs=5e-4)
        assert hi == pytest.approx(0.556, abs=5e-4)

    def test_formula(self):
        # textbook form: (k + z^2/2 -+ z sqrt(k (n-k)/n + z^2/4)) / (n + z^2)
        k, n, z = 37, 80, Z95
        half = z * math.sqrt(k * (n - k) / n + z * z / 4)
        lo, hi = wilson_interval(k, n)
        assert lo == pytest.approx((k + z * z / 2 - half) / (n + z * z), rel=1e-12)
        assert hi == pytest.approx((k + z * z / 2 + half) / (n + z * z), rel=1e-12)

    def test_boundaries(self):
        assert wilson_interval(100, 100)[1] == 1.0
        assert wilson_interval(0, 100)[0] == 0.0

    def test_fractional(self):
        lo, hi = wilson_interval(50.5, 100)
        assert lo < 0.505 < hi

    @pytest.mark.parametrize("k,n", [(-1, 10), (11, 10), (1, 0)])
    def test_invalid(self, k, n):
        with pytest.raises(ValueError):
            wilson_interval(k, n)

    @pytest.mark.parametrize("p", [0.5, 0.525, 0.7])
    def test_coverage_meta(self, p):
        # synthetic binomial ensembles with known p
        rng = np.random.default_rng(int(p * 1000))
        n, reps = 1000, 4000
        ks = rng.binomial(n, p, size=reps)
        covered = np.mean([lo <= p <= hi for lo, hi in (wilson_interval(k, n) for k in ks)])
        assert covered >= 0.95 - 3 * math.sqrt(0.95 * 0.05 / reps)

    def test_exact_coverage_near_nominal(self):
        # the binomial lattice makes exact coverage oscillate around 95%
        n = 1000
        k = np.arange(n + 1)
        ivs = [wilson_interval(i, n) for i in k]
        covs = []
        for p in np.linspace(0.3, 0.7, 41):
            pmf = sst.binom.pmf(k, n, p)
            covs.append(sum(w for w, (lo, hi) in zip(pmf, ivs) if lo <= p <= hi))
        assert min(covs) > 0.94
        assert np.mean(covs) == pytest.approx(0.95, abs=0.003)


class TestEstimateP:
    def test_all_correct(self):
        rep = estimate_p(verdicts([True] * 100), [True] * 100)
        assert rep.p_hat == 1.0 and rep.ci_high == 1.0 and rep.leak == 1.0

    def test_abstain_half_credit(self):
        rep = estimate_p(verdicts([None, None, True, False]), [True, False, True, True])
        assert rep.successes == 2.0 and rep.abstained == 2 and rep.p_hat == 0.5

    def test_fair_coin(self):
        rng = np.random.default_rng(5)
        truths = rng.random(10_000) < 0.5
        guesses = rng.random(10_000) < 0.5
        rep = estimate_p(verdicts(guesses.tolist()), truths.tolist())
        assert abs(rep.p_hat - 0.5) < 0.015

    def test_example_counts(self):
        scores = [1.0] * 525 + [0.0] * 475
        rep = report_from_scores(scores)
        assert rep.p_hat == 0.525
        assert (rep.ci_low, rep.ci_high) == pytest.approx((0.494, 0.556), abs=5e-4)

    def test_invariants(self):
        rep = report_from_scores([1, 0, 0.5, 1, 1])
        assert 0 <= rep.ci_low <= rep.p_hat <= rep.ci_high <= 1
        assert rep.sigma == pytest.approx(math.sqrt(rep.p_hat * (1 - rep.p_hat) / 5))
        assert set(rep.to_dict()) >= {"trials", "p_hat", "ci_low", "ci_high", "leak", "sigma"}
        assert isinstance(rep, AttackReport)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        g = [None if r < 0.2 else bool(r > 0.6) for r in rng.random(500)]
        t = (rng.random(500) < 0.5).tolist()
        a = estimate_p(verdicts(g), t)
        idx = rng.permutation(500)
        b = estimate_p(verdicts([g[i] for i in idx]), [t[i] for i in idx])
        assert a == b

    def test_empty(self):
        with pytest.raises(ValueError):
            estimate_p([], [])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            estimate_p(verdicts([True]), [True, False])

    def test_bad_scores(self):
        with pytest.raises(ValueError):
            report_from_scores([0.3])


class TestInfoLeak:
    def test_examples(self):
        assert info_leak(0.5) == 0.0
        assert info_leak(1.0) == 1.0
        assert info_leak(0.525) == pytest.approx(0.0018, abs=5e-5)
        assert info_leak(0.5006) == pytest.approx(1.0e-6, rel=0.05)

    def test_small_deviation_oracle(self):
        # 1 - H2(1/2 + e) ~ 2 e^2 / ln 2
        e = 1e-3
        assert info_leak(0.5 + e) == pytest.approx(2 * e * e / math.log(2), rel=1e-5)

    def test_symmetric_and_convex(self):
        p = np.linspace(0.0, 1.0, 201)
        leak = np.array([info_leak(x) for x in p])
        np.testing.assert_allclose(leak, leak[::-1], atol=1e-12)
        assert np.all(np.diff(leak, 2) >= -1e-12)
        assert leak.argmin() == 100 and leak.min() == 0.0

    @pytest.mark.parametrize("p", [-0.1, 1.1, float("nan")])
    def test_out_of_range(self, p):
        with pytest.raises(ValueError):
            info_leak(p)

    def test_entropy(self):
        assert binary_entropy(0.5) == 1.0
        assert binary_entropy(0.0) == 0.0


def _node_solve(R_A, R_B, R_c, kappa, B):
    """Independent oracle: nodal analysis of the divider for unit sources, then power sums."""
    G = np.array([[1 / R_A + 1 / R_c, -1 / R_c], [-1 / R_c, 1 / R_c + 1 / R_B]])
    S = (kappa * R_A * B, kappa * R_B * B)
    out = np.zeros(3)
    for j, rhs in enumerate((np.array([1 / R_A, 0.0]), np.array([0.0, 1 / R_B]))):
        v1, v2 = np.linalg.solve(G, rhs)
        i = (v1 - v2) / R_c
        out += S[j] * np.array([v1 * v1, v2 * v2, i * i])
    return out


class TestEndMoments:
    @pytest.mark.parametrize("R", [(2e3, 9e3, 200.0), (1e3, 1e4, 0.07), (9e3, 2e3, 400.0),
                                   (5e3, 5e3, 50.0)])
    def test_against_nodal_analysis(self, R):
        m = analytic_end_moments(*R, 1e-7, 5e3)
        np.testing.assert_allclose((m.U1_sq, m.U2_sq, m.I_sq), _node_solve(*R, 1e-7, 5e3),
                                   rtol=1e-9)

    def test_zero_cable(self):
        m = analytic_end_moments(2e3, 9e3, 0.0, 1e-7, 5e3)
        assert m.U1_sq == m.U2_sq and m.delta_rel == 0.0

    def test_difference_structure(self):
        # <U_1^2> - <U_2^2> = kappa B R_c^2 (R_A - R_B) / R_sum^2
        R_A, R_B, R_c = 2e3, 9e3, 200.0
        m = analytic_end_moments(R_A, R_B, R_c, 1e-7, 5e3)
        assert m.U1_sq - m.U2_sq == pytest.approx(1e-7 * 5e3 * R_c ** 2 * (R_A - R_B)
                                                  / (R_A + R_B + R_c) ** 2, rel=1e-9)

    def test_zero_resistances(self):
        with pytest.raises(ValueError):
            analytic_end_moments(0, 0, 0, 1e-7, 5e3)

    def test_monte_carlo_mingesz(self):
        cfg = make_loop(CableModel.resistive(200.0), R_L=2e3, R_H=9e3, n_oc=200)
        t = [simulate_exchange(cfg, s) for s in range(200)]
        m = analytic_end_moments(2e3, 9e3, 200.0, 1e-7, 5e3)
        for key, attr in (("U1_sq", "U_1"), ("U2_sq", "U_2"), ("I_sq", "I")):
            mean, se = mc_mean([np.mean(getattr(x, attr) ** 2) for x in t])
            assert abs(mean - getattr(m, key)) < 3 * se

    def test_imbalance_readings(self):
        r = imbalance_readings(1e3, 1e4, 0.07)
        assert r["unsquared"] == pytest.approx(7e-9)
        assert r["symbolic"] == pytest.approx(4.9e-10)
        m = analytic_end_moments(1e3, 1e4, 0.07, 1.0, 1.0)
        exact = 0.07 ** 2 * 9e3 / (1e3 + 1e4 + 0.07) ** 2 / m.U1_sq
        assert r["divider"] == pytest.approx(exact, rel=1e-6)
        # the short symbolic form has the right order; the unsquared substitution does not
        assert 0.5 < r["divider"] / r["symbolic"] < 1.0


class TestMeanSquareClosedForm:
    def test_zero_cable(self):
        assert mean_square_success_probability(2e3, 9e3, 0.0, 50) == 0.5

    def test_monte_carlo_on_white_gaussians(self):
        # with independent samples, n_oc plays the role of the sample count
        R_A, R_B, R_c, n = 2e3, 9e3, 2e3, 50
        rng = np.random.default_rng(0)
        Rs = R_A + R_B + R_c
        M = 20000
        ua = rng.standard_normal((M, n)) * math.sqrt(R_A)
        ub = rng.standard_normal((M, n)) * math.sqrt(R_B)
        u1 = ((R_B + R_c) * ua + R_A * ub) / Rs
        u2 = (R_B * ua + (R_A + R_c) * ub) / Rs
        p_mc = np.mean(np.mean(u1 ** 2, 1) > np.mean(u2 ** 2, 1))  # R_A < R_B: U_1 smaller
        p_mc = 1 - p_mc
        p = mean_square_success_probability(R_A, R_B, R_c, n)
        assert abs(p_mc - p) < 4 * math.sqrt(p * (1 - p) / M) + 0.005

    def test_increasing(self):
        ps = [mean_square_success_probability(2e3, 9e3, r, 50) for r in (50, 100, 200, 400)]
        assert ps == sorted(ps)
        assert ps[0] > 0.5


class TestOrthogonality:
    def test_identity(self):
        s = generate(NoiseSpec(seed=1), 5000)
        assert orthogonality_stat(s, s) == pytest.approx(1.0)

    def test_independent(self):
        a = generate(NoiseSpec(seed=1), 50000)
        b = generate(NoiseSpec(seed=2), 50000)
        n_eff = a.duration * 2 * 5e3
        assert abs(orthogonality_stat(a, b)) < 3 / math.sqrt(n_eff)

    def test_secure_exchange(self):
        t = simulate_exchange(make_loop(CableModel.lossless(2e-6), n_oc=10000), 7)
        assert abs(orthogonality_stat(t.U, t.I)) < 0.03

    def test_degenerate(self):
        with pytest.raises(ValueError):
            orthogonality_stat(np.ones(10), np.arange(10.0))
        with pytest.raises(ValueError):
            orthogonality_stat(np.ones(10), np.ones(9))

    def test_pythagoras_gap(self):
        t = simulate_exchange(make_loop(CableModel.lossless(2e-6), n_oc=10000), 7)
        n = t.n_eff()
        for R in (1e3, 1e4):
            assert pythagoras_gap(t.U, t.I, R) < 6 / math.sqrt(n)
        # the Pythagorean normalization bounds the gap by twice the correlation
        rho = abs(orthogonality_stat(t.U, t.I))
        assert pythagoras_gap(t.U, t.I, 1e4) <= 2 * rho + 1e-12
        assert pythagoras_gap(t.U, t.I, 1e3, normalize="tap") >= pythagoras_gap(t.U, t.I, 1e3)
        with pytest.raises(ValueError):
            pythagoras_gap(t.U, t.I, 1e3, normalize="x")


class TestScalingFit:
    def test_exact(self):
        a = 3e-7
        fit = scaling_fit([(r, 0.5 + a * r * r) for r in (50, 100, 200, 400)])
        assert fit.theta_prime == pytest.approx(a)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.predict(300.0) == pytest.approx(0.5 + a * 9e4)

    def test_extrapolation_structure(self):
        fit = scaling_fit([(r, 0.5 + 1e-6 * r * r) for r in (1, 2, 3)])
        assert fit.extrapolate(2.0, 1.0, 1.0, 1.0, 1.0) == pytest.approx(4e-6)
        assert fit.extrapolate(2.0, 2.0, 5.0, 1.0, 1.0) == pytest.approx(4e-7)

    def test_bounds(self):
        fit = scaling_fit([(50, 0.4), (100, 0.6), (200, 0.45)])
        assert 0.0 <= fit.r_squared <= 1.0
        assert set(fit.to_dict()) == {"points", "theta_prime", "r_squared"}

    def test_errors(self):
        with pytest.raises(ValueError):
            scaling_fit([(1, 0.5), (2, 0.5)])
        with pytest.raises(ValueError):
            scaling_fit([(0, 0.5), (0, 0.5), (0, 0.6)])


class TestSpectrum:
    def test_white_is_flat(self):
        rng = np.random.default_rng(3)
        s = Signal(rng.standard_normal(2 ** 18), 1e-4)
        sp = spectrum(s, nperseg=1024)
        inner = sp.power[5:-5]
        # each Welch bin averages ~511 segments: relative spread ~ 1/sqrt(511)
        assert np.all(np.abs(inner / 2e-4 - 1) < 5 / math.sqrt(511))

    def test_tone(self):
        dt, f = 1e-4, 1234.0
        tt = np.arange(2 ** 15) * dt
        sp = spectrum(Signal(np.sin(2 * np.pi * f * tt), dt), nperseg=4096)
        assert abs(sp.freq[np.argmax(sp.power)] - f) <= sp.freq[1]

    def test_stopband(self):
        s = generate(NoiseSpec(seed=4), 2 ** 18)
        sp = spectrum(s, nperseg=4096)
        ref = np.median(sp.power[(sp.freq > 500) & (sp.freq < 4000)])
        stop = sp.power[sp.freq >= 5e3 * 1.125]
        assert 10 * np.log10(stop.max() / ref) < -60

    def test_parseval(self):
        s = generate(NoiseSpec(seed=5), 2 ** 17)
        assert spectrum(s).total_power() == pytest.approx(np.var(s.samples), rel=0.02)

    def test_too_short(self):
        with pytest.raises(ValueError):
            spectrum(Signal(np.zeros(1000), 1e-4))


def test_normal_quantile():
    assert Z95 == pytest.approx(math.sqrt(2) * special.erfinv(0.95), rel=1e-12)
