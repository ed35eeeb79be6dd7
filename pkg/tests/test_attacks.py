import math

import numpy as np
import pytest
from conftest import make_loop
from scipy import stats as sst
from sklearn.base import clone

from kljnsim._validation import derive_seed
from kljnsim.attacks import (
    ABSTAIN,
    DCMainsAttack,
    GAADerivativeAttack,
    Hypothesis,
    MeanSquareAttack,
    SingleTimeAttack,
    dc_mains_attack,
    expected_dc_levels,
    fit_gaa_reference,
    gaa_derivative_attack,
    hypotheses,
    lossy_integral_reconstruct,
    make_reference_traces,
    mean_square_attack,
    separator_reconstruct,
    single_time_compare,
)
from kljnsim.channel import Arrangement, CableModel, Trace, cable_drop_ratio, simulate_exchange, solve_loop
from kljnsim.noise import NoiseSpec, ParasiticSpec
from kljnsim.stats import analytic_end_moments, estimate_p

LOSSLESS = CableModel.lossless(2e-6)
LOSSY = CableModel.series_rl(200.0, 2e-6)


def ensemble(template, M, seed):
    """``M`` secure traces with alternating truth; returns (traces, truths)."""
    traces, truths = [], []
    for i in range(M):
        bob_high = bool(i % 2)
        cfg = template.with_arrangement(Arrangement.secure_bit(bob_high, template.arrangement.R_L,
                                                               template.arrangement.R_H))
        traces.append(simulate_exchange(cfg, derive_seed(seed, i)))
        truths.append(bob_high)
    return traces, truths


def within_half(p, M, k=3.0):
    return abs(p - 0.5) <= k * math.sqrt(0.25 / M)


def test_hypotheses():
    lo, hi = hypotheses(1e3, 1e4)
    assert (lo.R_A, lo.R_B, lo.name) == (1e4, 1e3, "bob_low")
    assert (hi.R_A, hi.R_B, hi.name) == (1e3, 1e4, "bob_high")
    assert Hypothesis(True, 1e3, 1e4) == hi


class TestMeanSquare:
    def test_zero_cable_is_uninformative(self):
        traces, truths = ensemble(make_loop(CableModel.resistive(0.0)), 200, 1)
        rep = estimate_p([mean_square_attack(t, 1e3, 1e4) for t in traces], truths)
        # U_1 == U_2 exactly: every verdict is an abstention
        assert rep.abstained == 200 and rep.p_hat == 0.5

    def test_lossless_is_chance(self):
        M = 2000
        traces, truths = ensemble(make_loop(LOSSLESS, R_L=2e3, R_H=9e3), M, 2)
        rep = estimate_p([mean_square_attack(t, 2e3, 9e3) for t in traces], truths)
        assert within_half(rep.p_hat, M)

    @pytest.mark.parametrize("bob_high", [False, True])
    def test_exaggerated_cable_matches_divider(self, bob_high):
        cfg = make_loop(CableModel.resistive(2e3), R_L=2e3, R_H=9e3, n_oc=20000, bob_high=bob_high)
        t = simulate_exchange(cfg, 5)
        v = mean_square_attack(t, 2e3, 9e3)
        m = analytic_end_moments(t.R_A, t.R_B, 2e3, 1e-7, 5e3)
        expected = (m.U2_sq - m.U1_sq) / m.U1_sq
        assert v.guess is bob_high
        assert v.statistic == pytest.approx(expected, rel=0.15)
        # noise floor: U_1^2 - U_2^2 = X Y with X = U_1 - U_2, Y = U_1 + U_2 Gaussian
        a = np.array([t.R_A, t.R_B])
        Rs = t.R_A + t.R_B + 2e3
        x = np.array([2e3, -2e3]) / Rs
        y = np.array([2 * t.R_B + 2e3, 2 * t.R_A + 2e3]) / Rs
        xx, yy, xy = a @ x ** 2, a @ y ** 2, a @ (x * y)
        floor = math.sqrt((xx * yy + xy ** 2) / t.n_eff()) / (a @ (np.array([t.R_B + 2e3, t.R_A]) / Rs) ** 2)
        assert abs(v.statistic) > 10 * floor

    def test_zero_noise_abstains(self):
        t = simulate_exchange(make_loop(LOSSY, noise=NoiseSpec(kappa=0.0)), 0)
        assert mean_square_attack(t, 1e3, 1e4).abstained

    def test_window_shorter_than_correlation_time(self):
        u = np.ones(4)
        t = solve_loop(u, -u, 1e3, 1e4, LOSSY, 2e-5, bandwidth_hz=5e3)
        assert t.n_eff() < 1
        with pytest.raises(ValueError, match="correlation time"):
            mean_square_attack(t, 1e3, 1e4)

    def test_monotone_in_cable_resistance(self):
        M = 2000
        ps = []
        for R_c in (0.0, 50.0, 100.0, 200.0, 400.0):
            traces, truths = ensemble(make_loop(CableModel.resistive(R_c), R_L=2e3, R_H=9e3), M, 9)
            ps.append(estimate_p([mean_square_attack(t, 2e3, 9e3) for t in traces], truths).p_hat)
        tol = 2 * math.sqrt(2 * 0.25 / M)
        assert all(b >= a - tol for a, b in zip(ps, ps[1:]))
        assert ps[-1] > ps[0]


class TestSeparator:
    def test_correct_resistor_recovers_generator(self):
        t = simulate_exchange(make_loop(LOSSLESS, n_oc=2000), 1)
        bob = separator_reconstruct(t, t.R_B, "bob").samples
        alice = separator_reconstruct(t, t.R_A, "alice").samples
        assert np.corrcoef(bob, t.U_B)[0, 1] > 0.999
        assert np.corrcoef(alice, t.U_A)[0, 1] > 0.999

    @pytest.mark.parametrize("bob_high", [False, True])
    @pytest.mark.parametrize("guess", [1e3, 1e4])
    def test_eve_gets_what_she_assumes(self, bob_high, guess):
        t = simulate_exchange(make_loop(LOSSLESS, n_oc=10000, bob_high=bob_high), 3)
        ratio = np.var(separator_reconstruct(t, guess).samples) / (1e-7 * guess * 5e3)
        assert abs(ratio - 1) < 4 * math.sqrt(2 / t.n_eff())

    def test_zero_guess_is_tap(self):
        t = simulate_exchange(make_loop(LOSSY), 1)
        np.testing.assert_array_equal(separator_reconstruct(t, 0.0).samples, t.U)
        np.testing.assert_array_equal(separator_reconstruct(t, 0.0, "alice").samples, t.U)

    def test_fidelity_bounded_by_cable_drop(self):
        t = simulate_exchange(make_loop(LOSSY, n_oc=2000), 4)
        err = separator_reconstruct(t, t.R_B).samples - t.U_B
        rel = np.sqrt(np.mean(err ** 2) / np.mean(t.U_B ** 2))
        assert rel <= 2 * cable_drop_ratio(t) + 3 / math.sqrt(t.n_eff())

    def test_bad_end(self):
        t = simulate_exchange(make_loop(LOSSY), 1)
        with pytest.raises(ValueError):
            separator_reconstruct(t, 1e3, "eve")


class TestLossyIntegral:
    def test_zero_guess_is_tap(self):
        t = simulate_exchange(make_loop(LOSSY), 1)
        np.testing.assert_array_equal(lossy_integral_reconstruct(t, 0.0, 2e-6).samples, t.U)

    def test_constant_drop_integrates_linearly(self):
        n, dt, c, R, L = 100, 1e-5, 0.3, 1e3, 2e-6
        z = np.zeros(n)
        t = Trace(dt, z, z, np.full(n, c), z, z, 1e3, 1e4, "end2")
        out = lossy_integral_reconstruct(t, R, L).samples
        np.testing.assert_allclose(np.diff(out), -R * c / L * dt, rtol=1e-12)
        assert out[0] == 0.0

    @pytest.mark.parametrize("L_c", [0.0, -1.0])
    def test_needs_inductance(self, L_c):
        t = simulate_exchange(make_loop(LOSSY), 1)
        with pytest.raises(ValueError):
            lossy_integral_reconstruct(t, 1e3, L_c)

    def test_integral_term_orthogonal_to_tap(self):
        t = simulate_exchange(make_loop(LOSSY, n_oc=10000), 6)
        term = t.U - lossy_integral_reconstruct(t, 1.0, 2e-6).samples
        assert abs(np.corrcoef(t.U, term)[0, 1]) < 3 / math.sqrt(t.n_eff())


@pytest.fixture(scope="module")
def reference():
    cfg = make_loop(LOSSLESS)
    traces, labels = make_reference_traces(cfg, 100, seed=99)
    return fit_gaa_reference(traces, labels, 1e3, 1e4, 2.0, 2e-6)


class TestGAA:
    def test_ideal_lossless_extracts_nothing(self, reference):
        M = 600
        traces, truths = ensemble(make_loop(LOSSLESS), M, 12)
        rep = estimate_p([gaa_derivative_attack(t, 1e3, 1e4, 2.0, 2e-6, reference)
                          for t in traces], truths)
        assert within_half(rep.p_hat, M)

    def test_zero_noise_abstains(self, reference):
        t = simulate_exchange(make_loop(LOSSLESS, noise=NoiseSpec(kappa=0.0)), 0)
        assert gaa_derivative_attack(t, 1e3, 1e4, 2.0, 2e-6, reference).abstained

    def test_reference_balanced(self, reference):
        assert set(reference.mean_square) == {"bob_low", "bob_high"}
        lo, hi = reference.mean_square["bob_low"], reference.mean_square["bob_high"]
        # forward and backward swap roles with the resistors, within calibration noise
        assert lo[0] == pytest.approx(hi[1], rel=0.1)

    def test_ks_rule_and_fixed_mode(self, reference):
        t = simulate_exchange(make_loop(LOSSLESS), 3)
        v = gaa_derivative_attack(t, 1e3, 1e4, 2.0, 2e-6, reference, rule="ks")
        assert set(v.diagnostics["discrepancy"]) == {"bob_low", "bob_high"}
        with pytest.raises(ValueError, match="velocity"):
            gaa_derivative_attack(t, 1e3, 1e4, 2.0, 2e-6, reference, mode="fixed")
        with pytest.raises(ValueError):
            gaa_derivative_attack(t, 1e3, 1e4, 2.0, 2e-6, reference, rule="median")

    def test_reference_needs_both_classes(self):
        cfg = make_loop(LOSSLESS)
        traces, labels = make_reference_traces(cfg, 2, seed=1)
        with pytest.raises(ValueError, match="no reference"):
            fit_gaa_reference(traces[:2], labels[:2], 1e3, 1e4, 2.0, 2e-6)

    def test_reference_ignores_parasitic(self):
        cfg = make_loop(LOSSY, parasitic=ParasiticSpec(dc_offset=5.0))
        traces, labels = make_reference_traces(cfg, 2, seed=1)
        assert all(abs(t.U_A.mean()) < 0.5 for t in traces)
        assert list(labels) == [0, 0, 1, 1]


class TestDCMains:
    def test_ratio_levels(self):
        # r = R_B / (R_B + R_c)
        assert 9e3 / 9.2e3 == pytest.approx(0.978, abs=1e-3)
        assert 2e3 / 2.2e3 == pytest.approx(0.909, abs=1e-3)
        cfg = make_loop(LOSSY, R_L=2e3, R_H=9e3, n_oc=2000, parasitic=ParasiticSpec(dc_offset=10.0))
        v = dc_mains_attack(simulate_exchange(cfg, 1), 2e3, 9e3, 200.0)
        assert v.diagnostics["ratio"] == pytest.approx(9e3 / 9.2e3, abs=0.005)
        assert v.guess is True

    def test_lossy_dc_parasitic_wins(self):
        M = 300
        template = make_loop(LOSSY, parasitic=ParasiticSpec(dc_offset=10.7))
        traces, truths = ensemble(template, M, 3)
        rep = estimate_p([dc_mains_attack(t, 1e3, 1e4, 200.0) for t in traces], truths)
        assert rep.p_hat > 0.99

    def test_lossless_gives_nothing(self):
        M = 200
        template = make_loop(LOSSLESS, parasitic=ParasiticSpec(dc_offset=10.7))
        traces, truths = ensemble(template, M, 4)
        verdicts = [dc_mains_attack(t, 1e3, 1e4, 0.0) for t in traces]
        rep = estimate_p(verdicts, truths)
        assert rep.abstained == M or within_half(rep.p_hat, M)

    def test_no_parasitic_abstains(self):
        t = simulate_exchange(make_loop(LOSSY), 1)
        assert dc_mains_attack(t, 1e3, 1e4, 200.0).abstained
        assert dc_mains_attack(t, 1e3, 1e4, 200.0, mode="mains").abstained

    @pytest.mark.parametrize("bob_high", [False, True])
    def test_mains_mode(self, bob_high):
        par = ParasiticSpec(mains_amplitude=10.0, mains_freq_hz=50.0)
        cfg = make_loop(LOSSY, n_oc=1000, bob_high=bob_high, parasitic=par)
        v = dc_mains_attack(simulate_exchange(cfg, 2), 1e3, 1e4, 200.0, mode="mains")
        assert v.guess is bob_high

    @pytest.mark.parametrize("bob_high", [False, True])
    def test_absolute_mode_on_lossless(self, bob_high):
        cfg = make_loop(LOSSLESS, bob_high=bob_high, parasitic=ParasiticSpec(dc_offset=10.7))
        t = simulate_exchange(cfg, 8)
        assert dc_mains_attack(t, 1e3, 1e4, 0.0, absolute=True, U_p=10.7).guess is bob_high
        with pytest.raises(ValueError, match="U_p"):
            dc_mains_attack(t, 1e3, 1e4, 0.0, absolute=True)

    def test_bad_mode(self):
        t = simulate_exchange(make_loop(LOSSY), 1)
        with pytest.raises(ValueError):
            dc_mains_attack(t, 1e3, 1e4, 200.0, mode="ac")


def _level_trace(level, spread, n, seed):
    x = level + spread * np.random.default_rng(seed).standard_normal(n)
    z = np.zeros(n)
    return Trace(1e-5, z, z, z, x, z, 1e3, 1e4, "end2")


class TestSingleTime:
    def test_expected_levels(self):
        lo, hi = expected_dc_levels(11.2, 1e3, 1e4, 200.0)
        assert (lo, hi) == pytest.approx((1.0, 10.0))
        a_lo, a_hi = expected_dc_levels(11.2, 1e3, 1e4, 200.0, end="alice")
        assert a_lo == pytest.approx(10.2) and a_hi == pytest.approx(1.2)

    def test_large_gap(self):
        t = _level_trace(1.0, 0.1, 5000, 1)
        hits = [single_time_compare(t, (0.0, 1.0), k, spread=0.1).guess for k in range(t.n)]
        assert np.mean(hits) > 0.99

    def test_zero_gap_abstains(self):
        t = _level_trace(1.0, 0.1, 10, 1)
        assert single_time_compare(t, (1.0, 1.0), 0).abstained

    def test_gap_below_spread_abstains(self):
        t = _level_trace(1.0, 1.0, 10, 1)
        assert single_time_compare(t, (0.0, 0.5), 0, spread=1.0).abstained

    def test_unit_gap_matches_overlap_integral(self):
        # midpoint rule errs when the noise pushes a sample past half the gap
        n = 40000
        t = _level_trace(1.0, 1.0, n, 2)
        acc = np.mean([single_time_compare(t, (0.0, 1.0), k, spread=1.0).guess is True
                       for k in range(n)])
        oracle = sst.norm.cdf(0.5)
        assert oracle == pytest.approx(0.6915, abs=1e-4)
        assert abs(acc - oracle) < 3 * math.sqrt(oracle * (1 - oracle) / n)

    def test_smoothing_and_index(self):
        t = _level_trace(1.0, 0.5, 1000, 3)
        v = single_time_compare(t, (0.0, 1.0), 500, spread=0.1, smoothing=25)
        assert v.guess is True
        with pytest.raises(IndexError):
            single_time_compare(t, (0.0, 1.0), 1000)


class TestEstimators:
    def test_mean_square_wrapper(self):
        traces, truths = ensemble(make_loop(CableModel.resistive(2e3), R_L=2e3, R_H=9e3, n_oc=5000),
                                  6, 1)
        est = MeanSquareAttack(2e3, 9e3).fit()
        pred = est.predict(traces)
        assert list(pred) == [int(b) for b in truths]
        assert est.score(traces, truths) == 1.0
        assert np.all(np.sign(est.decision_function(traces)) == np.where(truths, 1, -1))

    def test_abstain_label(self):
        t = simulate_exchange(make_loop(LOSSY), 1)
        est = DCMainsAttack().fit()
        assert est.predict([t])[0] == ABSTAIN
        assert est.score([t], [1]) == 0.5

    def test_gaa_fit_predict(self):
        cfg = make_loop(LOSSLESS)
        X, y = make_reference_traces(cfg, 20, seed=4)
        est = GAADerivativeAttack().fit(X, y)
        assert hasattr(est, "reference_")
        assert set(est.predict(X[:5])) <= {0, 1, -1}

    def test_clone_and_params(self):
        est = GAADerivativeAttack(rule="ks", mode="fixed", velocity=1e9)
        c = clone(est)
        assert c.get_params() == est.get_params()
        st = SingleTimeAttack(expected_levels=(0.0, 2.0), smoothing=5)
        assert clone(st).get_params()["smoothing"] == 5

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        t = simulate_exchange(make_loop(LOSSY), 1)
        with pytest.raises(NotFittedError):
            MeanSquareAttack().predict([t])

    def test_rejects_non_traces(self):
        with pytest.raises((TypeError, ValueError)):
            MeanSquareAttack().fit().predict([np.zeros(10)])
