import math
import logging
from dataclasses import dataclass, field

import numpy as np


logger = logging.getLogger(__name__)

# Absolute slack tolerance for feasibility audits
DEFAULT_TOLERANCE = 1e-6


class OffloadingError(Exception):
    """Base class for errors raised by the offloading package"""


class ScenarioError(OffloadingError, ValueError):
    """Invalid problem instance or allocation"""


class DomainError(OffloadingError, ValueError):
    """A bound or rate was evaluated outside of its domain"""


def nats_to_bits(value):
    """
    Convert an amount of offloaded data from nats to bits
    :param value: float or array in nats
    :return: same shape in bits
    """
    bits = np.asarray(value, dtype=float) / math.log(2)
    return float(bits) if bits.ndim == 0 else bits


@dataclass(frozen=True)
class Scenario:
    """
    Problem instance. Gains are normalized by the receiver noise power so the
    noise variance is 1. Users are indexed 0..M-1 internally, ordered by deadline.
    """
    gains: tuple
    deadlines: tuple
    energy_budget: float
    power_budget: float

    def __post_init__(self):
        gains = tuple(float(g) for g in self.gains)
        deadlines = tuple(float(d) for d in self.deadlines)
        object.__setattr__(self, 'gains', gains)
        object.__setattr__(self, 'deadlines', deadlines)
        object.__setattr__(self, 'energy_budget', float(self.energy_budget))
        object.__setattr__(self, 'power_budget', float(self.power_budget))

        if len(gains) < 1:
            raise ScenarioError('scenario needs at least one user')
        if len(gains) != len(deadlines):
            raise ScenarioError('got {} gains but {} deadlines'.format(len(gains), len(deadlines)))
        if any(not math.isfinite(g) or g < 0 for g in gains):
            raise ScenarioError('channel gains must be finite and nonnegative: {}'.format(gains))
        if any(not math.isfinite(d) or d <= 0 for d in deadlines):
            raise ScenarioError('deadlines must be positive: {}'.format(deadlines))
        if any(later < earlier for earlier, later in zip(deadlines, deadlines[1:])):
            raise ScenarioError('deadlines must be nondecreasing: {}'.format(deadlines))
        if not math.isfinite(self.energy_budget) or self.energy_budget < 0:
            raise ScenarioError('energy budget must be nonnegative: {}'.format(self.energy_budget))
        if not math.isfinite(self.power_budget) or self.power_budget <= 0:
            raise ScenarioError('power budget must be positive: {}'.format(self.power_budget))

    @property
    def user_count(self):
        return len(self.gains)

    def to_dict(self):
        return {
            'gains': list(self.gains),
            'deadlines': list(self.deadlines),
            'energy_budget': self.energy_budget,
            'power_budget': self.power_budget,
        }

    @classmethod
    def from_dict(cls, data):
        """
        Build a scenario from its JSON document
        :param data: dict with gains, deadlines, energy_budget, power_budget
        :return: Scenario
        """
        missing = [k for k in ('gains', 'deadlines', 'energy_budget', 'power_budget') if k not in data]
        if missing:
            raise ScenarioError('scenario is missing field(s): {}'.format(', '.join(missing)))
        try:
            return cls(gains=data['gains'],
                       deadlines=data['deadlines'],
                       energy_budget=data['energy_budget'],
                       power_budget=data['power_budget'])
        except TypeError as e:
            raise ScenarioError('malformed scenario field: {}'.format(e))


def _check_nonnegative(name, values):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ScenarioError('{} must be finite and nonnegative'.format(name))


@dataclass(frozen=True)
class NomaAllocation:
    """
    Lower-triangular powers P[m, j] (user m during slot j, j <= m) and slot
    lengths D̄[j]. extensions[0] is the first deadline and is never optimized.
    """
    powers: np.ndarray
    extensions: np.ndarray

    def __post_init__(self):
        powers = np.array(self.powers, dtype=float)
        extensions = np.array(self.extensions, dtype=float).reshape(-1)
        count = extensions.size
        if powers.shape != (count, count):
            raise ScenarioError('powers must be {0}x{0}, got {1}'.format(count, powers.shape))
        if np.any(np.triu(powers, k=1) != 0):
            raise ScenarioError('powers above the diagonal must be zero')
        _check_nonnegative('powers', powers)
        _check_nonnegative('extensions', extensions)
        powers.setflags(write=False)
        extensions.setflags(write=False)
        object.__setattr__(self, 'powers', powers)
        object.__setattr__(self, 'extensions', extensions)

    @property
    def user_count(self):
        return self.extensions.size

    @classmethod
    def zeros(cls, scenario):
        extensions = np.zeros(scenario.user_count)
        extensions[0] = scenario.deadlines[0]
        return cls(np.zeros((scenario.user_count, scenario.user_count)), extensions)

    def validate_for(self, scenario):
        if self.user_count != scenario.user_count:
            raise ScenarioError('allocation has {} users, scenario has {}'.format(self.user_count,
                                                                                 scenario.user_count))
        if self.extensions[0] != scenario.deadlines[0]:
            raise ScenarioError('first slot must equal the first deadline {} (got {})'.format(
                scenario.deadlines[0], self.extensions[0]))


@dataclass(frozen=True)
class OmaAllocation:
    """Per-user power P̂[m] used during a dedicated slot of length D̂[m]"""
    powers: np.ndarray
    slots: np.ndarray

    def __post_init__(self):
        powers = np.array(self.powers, dtype=float).reshape(-1)
        slots = np.array(self.slots, dtype=float).reshape(-1)
        if powers.shape != slots.shape:
            raise ScenarioError('got {} powers but {} slots'.format(powers.size, slots.size))
        _check_nonnegative('powers', powers)
        _check_nonnegative('slots', slots)
        powers.setflags(write=False)
        slots.setflags(write=False)
        object.__setattr__(self, 'powers', powers)
        object.__setattr__(self, 'slots', slots)

    @property
    def user_count(self):
        return self.powers.size

    @classmethod
    def zeros(cls, scenario):
        return cls(np.zeros(scenario.user_count), np.zeros(scenario.user_count))

    def validate_for(self, scenario):
        if self.user_count != scenario.user_count:
            raise ScenarioError('allocation has {} users, scenario has {}'.format(self.user_count,
                                                                                 scenario.user_count))


@dataclass(frozen=True)
class FeasibilityReport:
    energy_slack: float
    deadline_slack: tuple
    power_slack: tuple
    tolerance: float
    feasible: bool = field(init=False)

    def __post_init__(self):
        slacks = [self.energy_slack] + list(self.deadline_slack) + list(self.power_slack)
        object.__setattr__(self, 'feasible', all(s >= -self.tolerance for s in slacks))

    @property
    def worst_slack(self):
        return min([self.energy_slack] + list(self.deadline_slack) + list(self.power_slack))


def _check_user(scenario, m):
    if not 0 <= m < scenario.user_count:
        raise IndexError('user index {} out of range for {} users'.format(m, scenario.user_count))


def interference(alloc, scenario, m, j):
    """
    Interference plus noise seen by user m during slot j (users j..m-1 are not yet cancelled)
    :return: 1 + sum_{i=j}^{m-1} g_i P_ij
    """
    _check_user(scenario, m)
    if not 0 <= j <= m:
        raise IndexError('slot index {} out of range for user {}'.format(j, m))
    gains = np.asarray(scenario.gains)
    return 1.0 + float(np.dot(gains[j:m], alloc.powers[j:m, j]))


def offloaded_nats(alloc, scenario, m):
    """
    Data offloaded by user m over the slots 0..m (unit bandwidth)
    :param alloc: NomaAllocation
    :param scenario: Scenario
    :param m: user index
    :return: nats
    """
    _check_user(scenario, m)
    g_m = scenario.gains[m]
    total = 0.0
    for j in range(m + 1):
        total += alloc.extensions[j] * math.log1p(g_m * alloc.powers[m, j] / interference(alloc, scenario, m, j))
    return total


def offloaded_nats_oma(alloc, scenario, m):
    """
    Data offloaded by user m in its dedicated slot
    :return: D̂_m ln(1 + g_m P̂_m)
    """
    _check_user(scenario, m)
    return float(alloc.slots[m] * math.log1p(scenario.gains[m] * alloc.powers[m]))


def noma_objective(alloc, scenario):
    """Exact max-min objective: the smallest per-user offload in nats"""
    return min(offloaded_nats(alloc, scenario, m) for m in range(scenario.user_count))


def oma_objective(alloc, scenario):
    return min(offloaded_nats_oma(alloc, scenario, m) for m in range(scenario.user_count))


def audit_noma(alloc, scenario, tolerance=DEFAULT_TOLERANCE):
    """
    Check the energy, deadline and transmit-power constraints of a NOMA schedule
    :param alloc: NomaAllocation
    :param scenario: Scenario
    :param tolerance: absolute tolerance on every slack
    :return: FeasibilityReport
    """
    alloc.validate_for(scenario)
    powers, extensions = alloc.powers, alloc.extensions

    # Row m holds P_mj for j <= m, so the energy is a weighted sum over columns
    energy_slack = scenario.energy_budget - float(np.sum(powers @ extensions))

    cumulative = np.cumsum(extensions)
    deadline_slack = [0.0] + [scenario.deadlines[m] - float(cumulative[m]) for m in range(1, scenario.user_count)]
    power_slack = [scenario.power_budget - float(np.sum(powers[j:, j])) for j in range(scenario.user_count)]

    return FeasibilityReport(energy_slack=energy_slack,
                             deadline_slack=tuple(deadline_slack),
                             power_slack=tuple(power_slack),
                             tolerance=tolerance)


def audit_oma(alloc, scenario, tolerance=DEFAULT_TOLERANCE):
    """
    Check the OMA constraints with the exact bilinear energy sum D̂_m P̂_m
    :return: FeasibilityReport (power_slack is per user)
    """
    alloc.validate_for(scenario)
    energy_slack = scenario.energy_budget - float(np.dot(alloc.slots, alloc.powers))
    cumulative = np.cumsum(alloc.slots)
    deadline_slack = [scenario.deadlines[m] - float(cumulative[m]) for m in range(scenario.user_count)]
    power_slack = [scenario.power_budget - float(p) for p in alloc.powers]

    return FeasibilityReport(energy_slack=energy_slack,
                             deadline_slack=tuple(deadline_slack),
                             power_slack=tuple(power_slack),
                             tolerance=tolerance)


@dataclass(frozen=True)
class Slot:
    index: int
    start: float
    end: float
    active_users: tuple


def slot_timeline(alloc):
    """
    Timing view of a NOMA schedule: slot j runs after slot j-1 and carries users j..M-1
    :param alloc: NomaAllocation
    :return: list of Slot
    """
    timeline = []
    start = 0.0
    for j, length in enumerate(alloc.extensions):
        timeline.append(Slot(index=j,
                             start=start,
                             end=start + float(length),
                             active_users=tuple(range(j, alloc.user_count))))
        start += float(length)
    return timeline


def oma_timeline(alloc):
    timeline = []
    start = 0.0
    for m, length in enumerate(alloc.slots):
        timeline.append(Slot(index=m, start=start, end=start + float(length), active_users=(m,)))
        start += float(length)
    return timeline


def allocation_to_dict(alloc, scenario):
    """
    JSON-ready view of an allocation with the per-user offloads in bits
    :param alloc: NomaAllocation or OmaAllocation
    :param scenario: Scenario
    :return: dict
    """
    if isinstance(alloc, NomaAllocation):
        offloads = [offloaded_nats(alloc, scenario, m) for m in range(scenario.user_count)]
        return {
            'scheme': 'noma',
            'powers': [[float(alloc.powers[m, j]) for j in range(m + 1)] for m in range(alloc.user_count)],
            'extensions': [float(d) for d in alloc.extensions],
            'offloaded_bits': [float(nats_to_bits(v)) for v in offloads],
        }
    offloads = [offloaded_nats_oma(alloc, scenario, m) for m in range(scenario.user_count)]
    return {
        'scheme': 'oma',
        'powers': [float(p) for p in alloc.powers],
        'slots': [float(d) for d in alloc.slots],
        'offloaded_bits': [float(nats_to_bits(v)) for v in offloads],
    }


def noma_from_lists(powers, extensions, user_count=None):
    """Build a NomaAllocation from ragged per-user power rows [P_m0, ..., P_mm]"""
    count = user_count or len(extensions)
    matrix = np.zeros((count, count))
    for m, row in enumerate(powers):
        matrix[m, :len(row)] = row
    return NomaAllocation(matrix, extensions)
