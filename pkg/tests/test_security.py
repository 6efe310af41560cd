import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from polarlink.errors import ConvergenceError
from polarlink.protocol import Basis, Intensity, ObservedCounts, ProtocolParams
from polarlink.security import (
    Bound,
    SecurityParams,
    analyze_block,
    asymptotic_key_rate,
    binary_entropy,
    chernoff_interval,
    decoy_bounds,
    hoeffding_interval,
    key_length,
    skr_vs_loss_curve,
)

LAB = ProtocolParams(rep_rate_hz=1.5e9, mu=0.28, nu=0.1232, p_mu=0.5, p_z_tx=0.9)


class TestBinaryEntropy:
    def test_endpoints(self):
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0

    def test_maximum(self):
        assert binary_entropy(0.5) == pytest.approx(1.0, abs=1e-15)

    def test_frozen_value(self):
        # 40-digit evaluation of -x log2 x - (1-x) log2 (1-x) at x = 0.11
        assert binary_entropy(0.11) == pytest.approx(0.49991595816452800, abs=1e-12)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            binary_entropy(-0.01)
        with pytest.raises(ValueError):
            binary_entropy(1.01)

    def test_vectorized(self):
        out = binary_entropy(np.array([0.0, 0.5, 1.0]))
        assert np.allclose(out, [0.0, 1.0, 0.0])

    @given(st.floats(0.0, 1.0))
    def test_symmetry_and_range(self, x):
        h = binary_entropy(x)
        assert 0.0 <= h <= 1.0
        assert h == pytest.approx(binary_entropy(1.0 - x), abs=1e-12)


class TestHoeffdingInterval:
    def test_zero_count(self):
        assert hoeffding_interval(0, 0.5) == (0.0, 0.0)

    def test_frozen_example(self):
        lo, hi = hoeffding_interval(10**6, 1e-10)
        delta = (hi - lo) / 2
        assert delta == pytest.approx(3393.07021220756, abs=1e-6)
        assert lo == pytest.approx(10**6 - 3393, abs=1.0)
        assert hi == pytest.approx(10**6 + 3393, abs=1.0)

    def test_width_vanishes_as_eps_to_one(self):
        lo, hi = hoeffding_interval(1000, 1 - 1e-12)
        assert hi - lo < 0.01

    @given(st.integers(0, 10**9), st.floats(1e-12, 0.999))
    def test_contains_count_and_clamps(self, count, eps):
        lo, hi = hoeffding_interval(count, eps)
        assert 0 <= lo <= count <= hi


class TestChernoffInterval:
    def test_zero_count_lower_is_zero(self):
        lo, hi = chernoff_interval(0, 1e-6)
        assert lo == 0.0
        assert hi == pytest.approx(math.log(1e6), rel=1e-6)  # P[Pois(m)=0]=e^-m

    def test_poisson_inversion_matches_exact_tails(self):
        count, eps = 1000, 1e-4
        lo, hi = chernoff_interval(count, eps)
        assert stats.poisson.cdf(count, hi) == pytest.approx(eps, rel=1e-6)
        assert stats.poisson.sf(count - 1, lo) == pytest.approx(eps, rel=1e-6)

    def test_contains_count(self):
        for count in (0, 1, 7, 100, 10**6):
            lo, hi = chernoff_interval(count, 1e-10)
            assert lo <= count <= hi

    def test_binomial_inversion_matches_exact_tails(self):
        count, trials, eps = 300, 10**4, 1e-5
        lo, hi = chernoff_interval(count, eps, trials=trials)
        assert stats.binom.cdf(count, trials, hi / trials) == pytest.approx(eps, rel=1e-5)
        assert stats.binom.sf(count - 1, trials, lo / trials) == pytest.approx(eps, rel=1e-5)

    @pytest.mark.parametrize("count,trials", [(100, 250), (1000, 2000), (10**6, 2 * 10**6), (500, 10**5)])
    @pytest.mark.parametrize("eps", [1e-10, 1e-6, 1e-3])
    def test_conditioned_interval_beats_hoeffding_on_same_trials(self, count, trials, eps):
        # Exact binomial-tail inversion dominates the Hoeffding deviation
        # built from the same number of trials.
        lo, hi = chernoff_interval(count, eps, trials=trials)
        delta_h = math.sqrt(0.5 * trials * math.log(1.0 / eps))
        assert hi - lo < 2.0 * delta_h
        assert hi - count < delta_h
        assert count - lo < delta_h

    def test_count_above_trials_rejected(self):
        with pytest.raises(ValueError):
            chernoff_interval(10, 1e-3, trials=5)

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            chernoff_interval(10, 0.0)
        with pytest.raises(ValueError):
            chernoff_interval(10, 1.0)

    @pytest.mark.parametrize("eps", [1e-3, 1e-6])
    def test_coverage_against_brute_force_binomial_sampling(self, eps):
        # 1e5 binomial draws at p=0.01, n=1e5; the true mean must fall inside
        # the interval in at least a 1-2*eps fraction of trials.
        n_trials, n, p = 10**5, 10**5, 0.01
        rng = np.random.default_rng(2024)
        draws = rng.binomial(n, p, size=n_trials)
        true_mean = n * p
        values, counts = np.unique(draws, return_counts=True)
        misses_poisson = 0
        misses_binom = 0
        for v, c in zip(values, counts):
            lo, hi = chernoff_interval(int(v), eps)
            if not lo <= true_mean <= hi:
                misses_poisson += int(c)
            lo, hi = chernoff_interval(int(v), eps, trials=n)
            if not lo <= true_mean <= hi:
                misses_binom += int(c)
        assert misses_poisson / n_trials <= 2 * eps
        assert misses_binom / n_trials <= 2 * eps

    def test_hoeffding_coverage_from_trials(self):
        # Companion coverage check for the Hoeffding form, with the deviation
        # taken from the number of trials as in the underlying inequality.
        n_trials, n, p, eps = 10**5, 10**5, 0.01, 1e-3
        rng = np.random.default_rng(7)
        draws = rng.binomial(n, p, size=n_trials)
        delta = math.sqrt(0.5 * n * math.log(1 / eps))
        misses = np.sum(np.abs(draws - n * p) > delta)
        assert misses / n_trials <= 2 * eps


def _counts_from_yields(params, n_slots, eta, y0, e_mis, e_single=None, acq=1.0):
    """Exact WCP tallies from explicit per-photon-number yields.

    Independent enumeration oracle: detection and error probabilities are
    built by direct Poisson sums over photon number, not via the photonics
    module.
    """
    if e_single is None:
        e_single = e_mis
    counts = ObservedCounts.zero()
    counts.acquisition_time_s = acq
    n_max = 60
    for basis, p_basis in ((Basis.Y, params.p_z_tx), (Basis.X, 1 - params.p_z_tx)):
        for k in (Intensity.SIGNAL, Intensity.DECOY):
            mu_k = params.intensity_value(k)
            p_k = params.intensity_prob(k)
            slots = n_slots * p_basis * p_k * 0.5  # receiver basis split
            n_exp = 0.0
            m_exp = 0.0
            for n_ph in range(n_max):
                p_n = math.exp(-mu_k) * mu_k**n_ph / math.factorial(n_ph)
                y_n = 1.0 - (1.0 - y0) * (1.0 - eta) ** n_ph
                # errors: misalignment on detected photons + random dark clicks
                err_n = e_single * (1.0 - (1.0 - eta) ** n_ph) + 0.5 * y0 * (1.0 - eta) ** n_ph
                n_exp += p_n * y_n
                m_exp += p_n * min(err_n, y_n)
            counts.n[(basis, k)] = slots * n_exp
            counts.m[(basis, k)] = slots * m_exp
            counts.slots_sent[k] += n_slots * p_basis * p_k
    return counts


class TestDecoyBounds:
    SEC = SecurityParams(block_n_z=10**7, bound=Bound.CHERNOFF)

    def _true_event_numbers(self, params, n_slots, eta, y0, basis_prob):
        """Enumerated true vacuum/single-photon detection counts (key basis)."""
        s = {}
        for n_ph in (0, 1):
            tot = 0.0
            for k in (Intensity.SIGNAL, Intensity.DECOY):
                mu_k = params.intensity_value(k)
                p_n = math.exp(-mu_k) * mu_k**n_ph / math.factorial(n_ph)
                y_n = 1.0 - (1.0 - y0) * (1.0 - eta) ** n_ph
                tot += n_slots * basis_prob * params.intensity_prob(k) * 0.5 * p_n * y_n
            s[n_ph] = tot
        return s

    def test_bounds_are_valid_against_enumeration_oracle(self):
        # The fluctuation-free analysis must lower-bound the true vacuum and
        # single-photon event numbers computed by direct Poisson enumeration.
        eta, y0 = 0.05, 1e-6
        counts = _counts_from_yields(LAB, 4e12, eta, y0, 0.004)
        truth = self._true_event_numbers(LAB, 4e12, eta, y0, LAB.p_z_tx)
        rate = asymptotic_key_rate(counts, LAB)
        assert rate > 0
        # run the fluctuation path at huge scale: it approaches the asymptote
        bounds = decoy_bounds(counts, LAB, self.SEC)
        assert 0 <= bounds.s_z0_lower <= truth[0] * 1.001
        assert 0 <= bounds.s_z1_lower <= truth[1] * 1.001

    def test_finite_converges_to_asymptotic_from_below(self):
        eta, y0 = 0.05, 1e-6
        base = _counts_from_yields(LAB, 4e10, eta, y0, 0.004)
        scaled = base.scaled(1e6)
        b_small = decoy_bounds(base, LAB, self.SEC)
        b_large = decoy_bounds(scaled, LAB, self.SEC)
        frac_small = b_small.s_z1_lower / base.n_basis(Basis.Y)
        frac_large = b_large.s_z1_lower / scaled.n_basis(Basis.Y)
        # asymptote of the same analysis, via the zero-fluctuation strategy
        asym_fraction = None
        from polarlink.security import _basis_event_bounds, _exact_strategy

        s0, s1 = _basis_event_bounds(
            scaled, LAB, Basis.Y, 0.0, _exact_strategy,
            lambda m, n, eps: min(2 * m, n),
        )
        asym_fraction = s1 / scaled.n_basis(Basis.Y)
        assert frac_small < frac_large <= asym_fraction
        assert frac_large == pytest.approx(asym_fraction, rel=0.01)

    def test_zero_check_basis_errors_give_small_phase_error(self):
        counts = _counts_from_yields(LAB, 1e13, 0.05, 1e-7, 0.004)
        for k in (Intensity.SIGNAL, Intensity.DECOY):
            counts.m[(Basis.X, k)] = 0.0
        bounds = decoy_bounds(counts, LAB, self.SEC)
        assert bounds.phi_z_upper < 0.01

    def test_tiny_block_degenerates_to_zero_key(self):
        counts = ObservedCounts.zero()
        counts.acquisition_time_s = 1.0
        counts.n[(Basis.Y, Intensity.SIGNAL)] = 50
        counts.n[(Basis.Y, Intensity.DECOY)] = 20
        counts.n[(Basis.X, Intensity.SIGNAL)] = 6
        counts.n[(Basis.X, Intensity.DECOY)] = 2
        counts.m[(Basis.Y, Intensity.SIGNAL)] = 1
        counts.slots_sent[Intensity.SIGNAL] = 1e6
        counts.slots_sent[Intensity.DECOY] = 1e6
        bounds = decoy_bounds(counts, LAB, self.SEC)
        result = key_length(bounds, counts, self.SEC)
        assert bounds.degenerate
        assert result.key_length_bits == 0

    def test_missing_decoy_detections_rejected(self):
        counts = ObservedCounts.zero()
        counts.n[(Basis.Y, Intensity.SIGNAL)] = 100
        with pytest.raises(ValueError):
            decoy_bounds(counts, LAB, self.SEC)

    def test_chernoff_bounds_dominate_hoeffding(self):
        counts = _counts_from_yields(LAB, 4e12, 0.05, 1e-6, 0.004)
        b_h = decoy_bounds(counts, LAB, SecurityParams(bound=Bound.HOEFFDING))
        b_c = decoy_bounds(counts, LAB, SecurityParams(bound=Bound.CHERNOFF))
        assert b_c.s_z1_lower >= b_h.s_z1_lower
        assert b_c.s_z0_lower >= b_h.s_z0_lower
        assert b_c.phi_z_upper <= b_h.phi_z_upper


class TestKeyLength:
    def test_zero_bounds_give_zero_key(self):
        from polarlink.security import SecurityBounds

        counts = ObservedCounts.zero()
        counts.acquisition_time_s = 1.0
        counts.n[(Basis.Y, Intensity.SIGNAL)] = 100.0
        bounds = SecurityBounds(0.0, 0.0, 0.5, 0.0)
        res = key_length(bounds, counts, SecurityParams())
        assert res.key_length_bits == 0
        assert res.skr_bps == 0.0

    def test_requires_positive_acquisition_time(self):
        from polarlink.security import SecurityBounds

        with pytest.raises(ValueError):
            key_length(SecurityBounds(0, 0, 0.5, 0), ObservedCounts.zero(), SecurityParams())

    def test_monotone_in_qber(self):
        base = _counts_from_yields(LAB, 4e12, 0.05, 1e-6, 0.002)
        keys = []
        for e in (0.002, 0.01, 0.03):
            counts = _counts_from_yields(LAB, 4e12, 0.05, 1e-6, e)
            counts = counts.scaled(10**7 / counts.n_basis(Basis.Y))
            _, res = analyze_block(counts, LAB, SecurityParams(bound=Bound.CHERNOFF))
            keys.append(res.key_length_bits)
        assert keys[0] > keys[1] > keys[2]

    def test_monotone_in_block_length(self):
        base = _counts_from_yields(LAB, 4e12, 0.05, 1e-6, 0.004)
        per_z = base.scaled(1.0 / base.n_basis(Basis.Y))  # one key detection
        yields = []
        for n_z in (10**5, 10**7, 10**9):
            counts = per_z.scaled(n_z)
            sec = SecurityParams(block_n_z=n_z, bound=Bound.CHERNOFF)
            _, res = analyze_block(counts, LAB, sec)
            yields.append(res.key_length_bits / n_z)
        assert yields[0] < yields[1] < yields[2]

    def test_finite_key_approaches_asymptote_from_below(self):
        base = _counts_from_yields(LAB, 4e12, 0.05, 1e-6, 0.004)
        per_z = base.scaled(1.0 / base.n_basis(Basis.Y))
        asym = asymptotic_key_rate(per_z.scaled(10**7), LAB)
        prev = 0.0
        for n_z in (10**5, 10**7, 10**9):
            counts = per_z.scaled(n_z)
            sec = SecurityParams(block_n_z=n_z, bound=Bound.CHERNOFF)
            _, res = analyze_block(counts, LAB, sec)
            assert prev <= res.skr_bps <= asym
            prev = res.skr_bps


@pytest.fixture(scope="module")
def curve():
    import warnings

    from polarlink.errors import SaturationWarning
    from polarlink.photonics import DetectorModel, SourceModel

    src = SourceModel(params=LAB, misalignment_angle=math.asin(math.sqrt(0.0038)),
                      misalignment_angle_x=math.asin(math.sqrt(0.0027)))
    det = DetectorModel()
    sec = SecurityParams(block_n_z=10**7, bound=Bound.CHERNOFF)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        return skr_vs_loss_curve(LAB, src, det, sec, [0.0, 10.0, 20.0, 30.0, 40.0, 50.0])


class TestSkrVsLossCurve:

    def test_loss_grid_must_be_sorted(self):
        from polarlink.photonics import DetectorModel, SourceModel

        src = SourceModel(params=LAB)
        with pytest.raises(ValueError):
            skr_vs_loss_curve(LAB, src, DetectorModel(), SecurityParams(), [10.0, 5.0])

    def test_skr_non_increasing_in_loss(self, curve):
        for col in ("skr_asymptotic", "skr_hoeffding", "skr_chernoff"):
            vals = [row[col] for row in curve]
            assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_chernoff_at_least_hoeffding_pointwise(self, curve):
        for row in curve:
            assert row["skr_chernoff"] >= row["skr_hoeffding"]

    def test_finite_below_asymptote(self, curve):
        for row in curve:
            assert row["skr_chernoff"] <= row["skr_asymptotic"] * (1 + 1e-12)

    def test_zero_loss_is_the_maximum(self, curve):
        vals = [row["skr_chernoff"] for row in curve]
        assert vals[0] == max(vals)
