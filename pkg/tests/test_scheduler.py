import numpy as np
import pytest

from udpkit.scheduler import (
    DiffusionSchedule,
    TimestepDistribution,
    decay_coefficient,
    desk_schedule,
    eudp_distribution,
    make_linear_schedule,
    sample_timestep,
    step_noise_scale,
    uniform_distribution,
)

PAPER = (1e-4, 0.02, 1000)
TINY = (0.1, 0.2, 2)


def brute_force_alpha_bar(schedule: DiffusionSchedule) -> np.ndarray:
    """Plain Python loop product, independent of the cumprod in the module."""
    out = [1.0]
    prod = 1.0
    for t in range(1, schedule.T + 1):
        prod *= 1.0 - schedule.beta(t)
        out.append(prod)
    return np.array(out)


class TestLinearSchedule:
    def test_paper_endpoints(self):
        s = make_linear_schedule(*PAPER)
        assert s.beta(1) == 1e-4
        assert s.beta(1000) == 0.02

    def test_interior_interpolation(self):
        s = make_linear_schedule(*PAPER)
        expected = 1e-4 + (0.02 - 1e-4) * 499 / 999
        assert abs(s.beta(500) - expected) < 1e-15
        assert abs(s.beta(500) - 0.0100405) < 1e-6

    def test_tiny_alpha_bars(self):
        s = make_linear_schedule(*TINY)
        assert np.allclose(s.alpha_bars, [1.0, 0.9, 0.72], atol=1e-15)

    def test_T_equals_1(self):
        s = make_linear_schedule(0.05, 0.9, 1)
        assert s.betas.tolist() == [0.05]
        assert np.allclose(s.alpha_bars, [1.0, 0.95])

    @pytest.mark.parametrize(
        "args,msg",
        [
            ((0.0, 0.02, 10), "beta_start"),
            ((1e-4, 1.0, 10), "beta_end"),
            ((0.02, 0.01, 10), "exceeds"),
            ((1e-4, 0.02, 0), "T must be"),
        ],
    )
    def test_bad_parameters_rejected(self, args, msg):
        with pytest.raises(ValueError, match=msg):
            make_linear_schedule(*args)

    def test_alpha_bar_matches_product_oracle(self):
        for params in (PAPER, TINY, (0.001, 0.2, 100)):
            s = make_linear_schedule(*params)
            oracle = brute_force_alpha_bar(s)
            assert np.max(np.abs(s.alpha_bars - oracle)) <= 1e-12

    def test_alpha_bar_strictly_decreasing(self):
        s = make_linear_schedule(*PAPER)
        assert s.alpha_bars[0] == 1.0
        assert s.alpha_bars[-1] > 0.0
        assert np.all(np.diff(s.alpha_bars) < 0)

    def test_immutable(self):
        s = make_linear_schedule(*TINY)
        with pytest.raises(ValueError):
            s.betas[0] = 0.5

    def test_desk_schedule_oracle_gate(self):
        s = desk_schedule()
        assert s.alpha_bar(s.T) < 0.01


class TestDecayAndNoiseScale:
    def test_decay_at_zero_is_one(self):
        s = make_linear_schedule(*TINY)
        assert decay_coefficient(s, 0) == 1.0

    def test_decay_hand_value(self):
        s = make_linear_schedule(*TINY)
        assert abs(decay_coefficient(s, 1) - np.sqrt(0.9)) < 1e-15
        assert abs(decay_coefficient(s, 1) - 0.948683) < 1e-6

    def test_decay_strictly_decreasing(self):
        s = make_linear_schedule(*PAPER)
        vals = [decay_coefficient(s, t) for t in range(s.T + 1)]
        assert np.all(np.diff(vals) < 0)

    def test_decay_squared_recovers_alpha_bar(self):
        # sqrt then square agrees with alpha_bar up to one rounding (1 ulp)
        s = make_linear_schedule(*PAPER)
        for t in range(s.T + 1):
            d = decay_coefficient(s, t)
            ab = s.alpha_bar(t)
            assert abs(d * d - ab) <= 4.0 * np.finfo(float).eps * ab

    def test_decay_range_checked(self):
        s = make_linear_schedule(*TINY)
        with pytest.raises(ValueError, match="out of range"):
            decay_coefficient(s, 3)
        with pytest.raises(ValueError, match="out of range"):
            decay_coefficient(s, -1)

    def test_noise_scale_hand_values(self):
        s = make_linear_schedule(*TINY)
        assert abs(step_noise_scale(s, 1) - np.sqrt(0.1)) < 1e-15
        assert abs(step_noise_scale(s, 1) - 0.316228) < 1e-6
        assert abs(step_noise_scale(s, 2) - np.sqrt(0.18)) < 1e-15
        assert abs(step_noise_scale(s, 2) - 0.424264) < 1e-6

    def test_noise_scale_always_positive(self):
        s = make_linear_schedule(*PAPER)
        assert all(step_noise_scale(s, t) > 0 for t in range(1, s.T + 1))

    def test_noise_scale_range_checked(self):
        s = make_linear_schedule(*TINY)
        with pytest.raises(ValueError, match="out of range"):
            step_noise_scale(s, 0)


class TestEudpDistribution:
    def test_tiny_hand_weights(self):
        d = eudp_distribution(make_linear_schedule(*TINY))
        assert abs(d.weights[0] - 5 / 11) < 1e-12
        assert abs(d.weights[1] - 6 / 11) < 1e-12

    def test_sums_to_one(self):
        for params in (PAPER, TINY, (0.001, 0.2, 100)):
            d = eudp_distribution(make_linear_schedule(*params))
            assert abs(d.weights.sum() - 1.0) < 1e-9
            assert (d.weights >= 0).all()

    def test_pairwise_ratios_match_definition(self):
        s = make_linear_schedule(*PAPER)
        d = eudp_distribution(s)
        ab = s.alpha_bars
        u = np.sqrt(ab[1:] * (ab[:-1] - ab[1:]))
        rng = np.random.default_rng(3)
        for _ in range(200):
            i, j = rng.integers(0, s.T, size=2)
            assert abs(d.weights[i] / d.weights[j] - u[i] / u[j]) <= 1e-12 * abs(u[i] / u[j])

    def test_paper_argmax_strictly_interior(self):
        d = eudp_distribution(make_linear_schedule(*PAPER))
        tmax = int(np.argmax(d.weights)) + 1  # brute-force scan of all weights
        assert 1 < tmax < 1000

    def test_distribution_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            TimestepDistribution(np.array([0.5, 0.6]), "uniform")
        with pytest.raises(ValueError, match="nonnegative"):
            TimestepDistribution(np.array([-0.5, 1.5]), "uniform")
        with pytest.raises(ValueError, match="kind"):
            TimestepDistribution(np.array([1.0]), "cosine")


class TestSampling:
    def test_uniform_frequencies(self):
        dist = uniform_distribution(4)
        rng = np.random.default_rng(0)
        draws = np.array([sample_timestep(dist, rng) for _ in range(40000)])
        assert draws.min() >= 1 and draws.max() <= 4
        freqs = np.bincount(draws, minlength=5)[1:] / 40000
        assert np.all(np.abs(freqs - 0.25) <= 0.01)

    def test_point_mass(self):
        dist = TimestepDistribution(np.array([0.0, 0.0, 1.0, 0.0]), "uniform")
        rng = np.random.default_rng(7)
        assert all(sample_timestep(dist, rng) == 3 for _ in range(100))

    def test_eudp_frequencies(self):
        dist = eudp_distribution(make_linear_schedule(*TINY))
        rng = np.random.default_rng(0)
        draws = np.array([sample_timestep(dist, rng) for _ in range(110000)])
        freqs = np.bincount(draws, minlength=3)[1:] / 110000
        assert abs(freqs[0] - 5 / 11) <= 0.01
        assert abs(freqs[1] - 6 / 11) <= 0.01

    def test_single_step_support(self):
        s = make_linear_schedule(0.1, 0.1, 1)
        for dist in (uniform_distribution(1), eudp_distribution(s)):
            rng = np.random.default_rng(11)
            assert sample_timestep(dist, rng) == 1
