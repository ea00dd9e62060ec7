import math
import logging
from dataclasses import dataclass

import numpy as np

import model
from model import DomainError


logger = logging.getLogger(__name__)


def _require(condition, message):
    if not np.all(condition):
        raise DomainError(message)


def ln_ratio_lower_bound(u, v, u0, v0):
    """
    Concave lower bound of ln(1 + u / v), tight at (u0, v0)
    :return: 2 + ln(u0 + v0) - ln(v0) - (u0 + v0) / (u + v) - v / v0
    """
    u, v, u0, v0 = (np.asarray(a, dtype=float) for a in (u, v, u0, v0))
    _require(u >= 0, 'u must be nonnegative')
    _require(v > 0, 'v must be positive')
    _require(u0 >= 0, 'u0 must be nonnegative')
    _require(v0 > 0, 'v0 must be positive')
    s0 = u0 + v0
    return 2.0 + np.log(s0) - np.log(v0) - s0 / (u + v) - v / v0


def rate_lower_bound(x, u, v, x0, u0, v0):
    """
    Concave lower bound of x ln(1 + u / v) in (x, u, v), tight in value and
    gradient at (x0, u0, v0)
    :return: the bound, elementwise for array inputs
    """
    x, u, v, x0, u0, v0 = (np.asarray(a, dtype=float) for a in (x, u, v, x0, u0, v0))
    _require(x >= 0, 'x must be nonnegative')
    _require(x0 >= 0, 'x0 must be nonnegative')
    _require(u >= 0, 'u must be nonnegative')
    _require(u0 >= 0, 'u0 must be nonnegative')
    _require(v > 0, 'v must be positive')
    _require(v0 > 0, 'v0 must be positive')

    s0 = u0 + v0
    half_ratio = 0.5 * (x0 / v0 - 1.0)
    lin = (x0 - 1.0) ** 2 / (4.0 * s0)
    return ((1.0 - x0) / 2.0 - (x0 - v0) ** 2 / (4.0 * v0)
            + (2.0 + np.log1p(u0 / v0) + (x0 - 1.0) / 2.0 + half_ratio) * x
            - (lin + half_ratio) * v
            - lin * u
            - (x + v) ** 2 / (4.0 * v0)
            - s0 * (x + 1.0) ** 2 / (4.0 * (u + v)))


def q_majorant(P, D, P0, D0):
    """
    Convex upper bound of the energy product D * P, tight at (P0, D0)
    :return: 0.25 (D + P)^2 + 0.25 (D0 - P0)^2 - 0.5 (D0 - P0)(D - P)
    """
    P, D, P0, D0 = (np.asarray(a, dtype=float) for a in (P, D, P0, D0))
    gap0 = D0 - P0
    return 0.25 * (D + P) ** 2 + 0.25 * gap0 ** 2 - 0.5 * gap0 * (D - P)


def rate_term(g, P, I, D):
    """True rate term D ln(1 + g P / I)"""
    return np.asarray(D, dtype=float) * np.log1p(g * np.asarray(P, dtype=float) / np.asarray(I, dtype=float))


def rate_term_gradient(g, P, I, D):
    """
    Analytic gradient of D ln(1 + g P / I)
    :return: (d/dP, d/dI, d/dD)
    """
    total = I + g * P
    return D * g / total, D * (1.0 / total - 1.0 / I), math.log1p(g * P / I)


@dataclass(frozen=True)
class ExpansionPoint:
    """Previous NOMA iterate: lower-triangular powers P0[m, j] and slot lengths D̄0[j]"""
    powers: np.ndarray
    extensions: np.ndarray

    def __post_init__(self):
        powers = np.array(self.powers, dtype=float)
        extensions = np.array(self.extensions, dtype=float).reshape(-1)
        if powers.shape != (extensions.size, extensions.size):
            raise model.ScenarioError('expansion powers must be square with one row per slot')
        if np.any(powers < 0) or np.any(extensions < 0):
            raise DomainError('expansion point entries must be nonnegative')
        powers = np.tril(powers)
        powers.setflags(write=False)
        extensions.setflags(write=False)
        object.__setattr__(self, 'powers', powers)
        object.__setattr__(self, 'extensions', extensions)

    @classmethod
    def initial(cls, scenario):
        """Zero powers and zero extensions, except the fixed first slot which is D_1"""
        extensions = np.zeros(scenario.user_count)
        extensions[0] = scenario.deadlines[0]
        return cls(np.zeros((scenario.user_count, scenario.user_count)), extensions)

    @classmethod
    def from_allocation(cls, alloc):
        return cls(alloc.powers, alloc.extensions)

    def interference(self, scenario, m, j):
        gains = np.asarray(scenario.gains)
        return 1.0 + float(np.dot(gains[j:m], self.powers[j:m, j]))


@dataclass(frozen=True)
class SurrogateCoeffs:
    a: float
    b: float
    c: float
    d: float
    e: float


@dataclass(frozen=True)
class OmaSurrogateCoeffs:
    a: float
    b: float
    c: float
    d: float


def surrogate_coeffs(scenario, point, m, j):
    """
    Coefficients of the concave surrogate f_mj around the expansion point
    :param scenario: Scenario
    :param point: ExpansionPoint
    :param m: user index
    :param j: slot index, j <= m
    :return: SurrogateCoeffs
    """
    if not 0 <= j <= m < scenario.user_count:
        raise IndexError('need 0 <= j <= m < {}, got m={} j={}'.format(scenario.user_count, m, j))
    g_m = scenario.gains[m]
    P0 = point.powers[m, j]
    D0 = point.extensions[j]
    I0 = point.interference(scenario, m, j)
    total0 = g_m * P0 + I0

    half_ratio = 0.5 * (-1.0 + D0 / I0)
    return SurrogateCoeffs(
        a=0.5 * (1.0 - D0) - 0.25 * (D0 - I0) ** 2 / I0,
        b=2.0 + math.log1p(g_m * P0 / I0) + 0.5 * (D0 - 1.0) + half_ratio,
        c=0.25 * (D0 - 1.0) ** 2 / total0 + half_ratio,
        d=0.25 * (D0 - 1.0) ** 2 * g_m / total0,
        e=0.25 * total0,
    )


def f_surrogate(scenario, point, m, j, P_mj, I_mj, D_j):
    """
    Concave minorant of D̄_j ln(1 + g_m P_mj / I_mj) around the expansion point
    :param P_mj: own power, >= 0
    :param I_mj: interference plus noise, >= 1
    :param D_j: slot length, >= 0
    :return: nats
    """
    P_mj, I_mj, D_j = (np.asarray(a, dtype=float) for a in (P_mj, I_mj, D_j))
    _require(P_mj >= 0, 'P_mj must be nonnegative')
    _require(I_mj >= 1, 'I_mj must be at least 1')
    _require(D_j >= 0, 'D_j must be nonnegative')

    k = surrogate_coeffs(scenario, point, m, j)
    I0 = point.interference(scenario, m, j)
    g_m = scenario.gains[m]
    return (k.a + k.b * D_j - k.c * I_mj - k.d * P_mj
            - (D_j + I_mj) ** 2 / (4.0 * I0)
            - k.e * (D_j + 1.0) ** 2 / (g_m * P_mj + I_mj))


def first_slot_bound(scenario, point, m, P_m1, I_m1):
    """
    Minorant of D_1 ln(1 + g_m P_m1 / I_m1) for the fixed first slot: the
    log-ratio bound scaled by the constant D_1
    """
    g_m = scenario.gains[m]
    u0 = g_m * point.powers[m, 0]
    v0 = point.interference(scenario, m, 0)
    return scenario.deadlines[0] * ln_ratio_lower_bound(g_m * np.asarray(P_m1, dtype=float), I_m1, u0, v0)


def oma_surrogate_coeffs(scenario, P0, D0, m):
    """
    Coefficients of the OMA minorant f̂_m around (P̂0, D̂0)
    :return: OmaSurrogateCoeffs
    """
    if not 0 <= m < scenario.user_count:
        raise IndexError('user index {} out of range'.format(m))
    if P0 < 0 or D0 < 0:
        raise DomainError('OMA expansion point must be nonnegative')
    g_m = scenario.gains[m]
    snr0 = g_m * P0
    return OmaSurrogateCoeffs(
        a=0.25 * (1.0 - D0 ** 2 + (D0 - 1.0) ** 2 * snr0 / (1.0 + snr0)),
        b=1.0 + math.log1p(snr0) + 0.5 * (D0 - 1.0),
        c=0.25 * g_m * (D0 - 1.0) ** 2 / (1.0 + snr0),
        d=0.25 * (1.0 + snr0),
    )


def f_hat(scenario, P0, D0, m, P, D):
    """
    Concave minorant of D̂_m ln(1 + g_m P̂_m) around (P0, D0)
    :return: nats
    """
    P, D = np.asarray(P, dtype=float), np.asarray(D, dtype=float)
    _require(P >= 0, 'P must be nonnegative')
    _require(D >= 0, 'D must be nonnegative')
    k = oma_surrogate_coeffs(scenario, P0, D0, m)
    return k.a + k.b * D - k.c * P - k.d * (D + 1.0) ** 2 / (1.0 + scenario.gains[m] * P)


def noma_surrogate_values(scenario, point, alloc, compact_first_slot=True):
    """
    Per-user surrogate of the offloaded data at an allocation
    :param scenario: Scenario
    :param point: ExpansionPoint the surrogates are built around
    :param alloc: NomaAllocation to evaluate
    :param compact_first_slot: use the fixed-length bound for slot 0 instead of the full surrogate
    :return: numpy array, one value per user
    """
    values = np.zeros(scenario.user_count)
    for m in range(scenario.user_count):
        for j in range(m + 1):
            I_mj = model.interference(alloc, scenario, m, j)
            if j == 0 and compact_first_slot:
                values[m] += first_slot_bound(scenario, point, m, alloc.powers[m, 0], I_mj)
            else:
                values[m] += f_surrogate(scenario, point, m, j, alloc.powers[m, j], I_mj, alloc.extensions[j])
    return values


def oma_surrogate_values(scenario, point, alloc):
    """
    Per-user OMA surrogate at an allocation
    :param point: OmaAllocation the surrogates are built around
    :param alloc: OmaAllocation to evaluate
    :return: numpy array, one value per user
    """
    return np.array([f_hat(scenario, point.powers[m], point.slots[m], m, alloc.powers[m], alloc.slots[m])
                     for m in range(scenario.user_count)])
