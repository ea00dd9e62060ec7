import numpy as np
import pytest

import channel
from channel import ChannelConfig


class TestConfig:

    def test_defaults(self):
        config = ChannelConfig()
        np.testing.assert_allclose(config.user_distances(4), [30, 32, 34, 36])
        assert config.deadlines(4) == [2.0, 2.25, 2.5, 2.75]

    def test_mean_gain_at_thirty_metres(self):
        expected = 10 ** 0.8 * 30.0 ** -4 / 10 ** -5
        gain = ChannelConfig().mean_gains(1)[0]
        assert gain == pytest.approx(expected)
        assert gain == pytest.approx(0.7787, abs=1e-3)

    def test_zero_spacing_gives_equal_deadlines(self):
        assert ChannelConfig(Delta=0.0).deadlines(3) == [2.0, 2.0, 2.0]

    def test_explicit_distances(self):
        config = ChannelConfig(distances=[10, 20, 40])
        np.testing.assert_allclose(config.user_distances(2), [10, 20])
        with pytest.raises(ValueError):
            config.user_distances(4)

    @pytest.mark.parametrize('kwargs', [
        dict(D1=0.0),
        dict(Delta=-0.1),
        dict(E_th=-1.0),
        dict(reference_distance=0.0),
        dict(distances=[0.5]),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ChannelConfig(**kwargs)

    def test_json_round_trip(self):
        config = ChannelConfig(distances=[30, 35], E_th=10.0, P_t_db=8.0, seed=11)
        assert ChannelConfig.from_json(config.to_json()) == config

    def test_unknown_fields(self):
        with pytest.raises(ValueError, match='gamma'):
            ChannelConfig.from_dict({'gamma': 3})

    def test_overrides(self):
        config = ChannelConfig().with_overrides(E_th=15.0, P_t_db=12.0)
        assert (config.E_th, config.P_t_db, config.D1) == (15.0, 12.0, 2.0)

    def test_db_conversion_is_a_power_ratio(self):
        assert channel.db_to_linear(10.0) == pytest.approx(10.0)
        assert channel.db_to_linear(-50.0) == pytest.approx(1e-5)


class TestSampling:

    def test_inverse_cdf(self):
        assert channel.exponential_from_uniform(0.0) == 0.0
        assert channel.exponential_from_uniform(1 - np.exp(-2.0)) == pytest.approx(2.0)

    def test_unit_mean(self):
        rng = np.random.Generator(np.random.PCG64(42))
        samples = channel.exponential_unit_mean(rng, size=10 ** 6)
        assert 0.99 <= samples.mean() <= 1.01
        assert np.all(samples >= 0)

    def test_scalar_draw(self):
        assert isinstance(channel.exponential_unit_mean(channel.trial_rng(0, 0)), float)

    def test_gain_mean_tracks_path_loss(self):
        config = ChannelConfig()
        rng = channel.trial_rng(5, 0)
        draws = np.array([channel.draw_scenario(config, 2, rng).gains for _ in range(10 ** 5)])
        np.testing.assert_allclose(draws.mean(axis=0), config.mean_gains(2), rtol=0.03)

    def test_trials_are_reproducible_and_distinct(self):
        config = ChannelConfig(seed=3)
        first = channel.draw_scenario(config, 4, channel.trial_rng(3, 1))
        again = channel.draw_scenario(config, 4, channel.trial_rng(3, 1))
        other = channel.draw_scenario(config, 4, channel.trial_rng(3, 2))
        assert first == again
        assert first.gains != other.gains

    def test_common_random_numbers_across_user_counts(self):
        config = ChannelConfig()
        small = channel.draw_scenario(config, 2, channel.trial_rng(9, 0))
        large = channel.draw_scenario(config, 4, channel.trial_rng(9, 0))
        np.testing.assert_allclose(large.gains[:2], small.gains)

    def test_scenario_budgets(self):
        scenario = channel.draw_scenario(ChannelConfig(E_th=7.0, P_t_db=10.0), 3)
        assert scenario.energy_budget == 7.0
        assert scenario.power_budget == pytest.approx(10.0)
        assert scenario.deadlines == (2.0, 2.25, 2.5)
        assert all(g >= 0 for g in scenario.gains)

    def test_needs_a_user(self):
        with pytest.raises(ValueError):
            channel.draw_scenario(ChannelConfig(), 0)

    def test_describe(self):
        assert '8.0 dB' in channel.describe(ChannelConfig())
