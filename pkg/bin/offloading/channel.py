import json
import math
import logging
from dataclasses import dataclass, asdict, replace

import numpy as np

from model import Scenario


logger = logging.getLogger(__name__)

RNG_NAME = 'PCG64'


def db_to_linear(value_db):
    return 10.0 ** (np.asarray(value_db, dtype=float) / 10.0)


@dataclass(frozen=True)
class ChannelConfig:
    reference_snr_db: float = 8.0
    reference_distance: float = 1.0
    pathloss_exponent: float = 4.0
    noise_power_db: float = -50.0
    distances: tuple = None
    D1: float = 2.0
    Delta: float = 0.25
    E_th: float = 5.0
    P_t_db: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.distances is not None:
            object.__setattr__(self, 'distances', tuple(float(d) for d in self.distances))
        if self.reference_distance <= 0:
            raise ValueError('reference_distance must be positive')
        if self.D1 <= 0:
            raise ValueError('D1 must be positive')
        if self.Delta < 0:
            raise ValueError('Delta must be nonnegative')
        if self.E_th < 0:
            raise ValueError('E_th must be nonnegative')
        if self.distances is not None and any(d < self.reference_distance for d in self.distances):
            raise ValueError('every distance must be at least the reference distance')

    def user_distances(self, user_count):
        """Distances of the first user_count users; default grid 30, 32, ..., 30 + 2(M - 1) m"""
        if self.distances is None:
            return np.array([30.0 + 2.0 * m for m in range(user_count)])
        if len(self.distances) < user_count:
            raise ValueError('config lists {} distances but {} users were requested'.format(
                len(self.distances), user_count))
        return np.array(self.distances[:user_count])

    def deadlines(self, user_count):
        return [self.D1 + self.Delta * m for m in range(user_count)]

    def mean_gains(self, user_count):
        """Average normalized gains, i.e. with |h|^2 replaced by its mean 1"""
        ratio = self.user_distances(user_count) / self.reference_distance
        return db_to_linear(self.reference_snr_db) * ratio ** (-self.pathloss_exponent) / db_to_linear(
            self.noise_power_db)

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)

    def to_dict(self):
        data = asdict(self)
        if data['distances'] is not None:
            data['distances'] = list(data['distances'])
        return data

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError('unknown channel field(s): {}'.format(', '.join(sorted(unknown))))
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def exponential_from_uniform(u):
    """Inverse CDF of the unit-mean exponential: -ln(1 - u)"""
    return -np.log1p(-np.asarray(u, dtype=float))


def exponential_unit_mean(rng, size=None):
    """
    Sample |h|^2 for h ~ CN(0, 1)
    :param rng: numpy Generator
    :param size: optional output shape
    :return: float or array
    """
    sample = exponential_from_uniform(rng.random(size))
    return float(sample) if size is None else sample


def trial_rng(seed, trial):
    """Independent stream for one Monte-Carlo trial, the trial-th child of the seed"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(trial,))))


def draw_scenario(config, user_count, rng=None):
    """
    Draw one channel realization
    :param config: ChannelConfig
    :param user_count: M >= 1
    :param rng: numpy Generator; defaults to a fresh stream seeded by config.seed
    :return: Scenario
    """
    if user_count < 1:
        raise ValueError('need at least one user')
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(config.seed))
    fading = exponential_unit_mean(rng, size=user_count)
    gains = config.mean_gains(user_count) * fading
    return Scenario(gains=tuple(gains),
                    deadlines=tuple(config.deadlines(user_count)),
                    energy_budget=config.E_th,
                    power_budget=float(db_to_linear(config.P_t_db)))


def describe(config):
    return 'Gamma={} dB, gamma={}, noise={} dB, D1={} s, Delta={} s, E_th={} J, P_t={} dB ({:.4g} W)'.format(
        config.reference_snr_db, config.pathloss_exponent, config.noise_power_db, config.D1, config.Delta,
        config.E_th, config.P_t_db, math.pow(10.0, config.P_t_db / 10.0))
