import enum
import time
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

import conic
import model
from bounds import ExpansionPoint
from model import NomaAllocation, OmaAllocation


logger = logging.getLogger(__name__)

STARTS = ('interior', 'zero')


class Termination(str, enum.Enum):
    CONVERGED = 'converged'
    ITERATION_LIMIT = 'iteration_limit'
    SOLVER_FAILURE = 'solver_failure'


@dataclass(frozen=True)
class ScaSettings:
    max_iterations: int = 500
    rel_tolerance: float = 1e-5
    abs_tolerance: float = 1e-7
    proximal_weight: float = None
    compact_first_slot: bool = True
    start: str = 'interior'

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise ValueError('max_iterations must be at least 1')
        if self.start not in STARTS:
            raise ValueError('start must be one of {}, got {!r}'.format(', '.join(STARTS), self.start))
        if self.rel_tolerance <= 0 or self.abs_tolerance <= 0:
            raise ValueError('stopping tolerances must be positive')
        if self.proximal_weight is not None and self.proximal_weight < 0:
            raise ValueError('proximal_weight must be nonnegative')

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in (data or {}).items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        return asdict(self)

    def converged(self, previous, current):
        return abs(current - previous) <= self.abs_tolerance + self.rel_tolerance * abs(previous)


@dataclass
class SolveReport:
    """
    Outcome of one SCA run. objective_trajectory[0] is the level of the
    starting point; entry n is the subproblem optimum of iteration n.
    """
    scheme: str
    objective_trajectory: list
    exact_trajectory: list
    allocation: object
    history: list
    iterations: int
    termination: Termination
    iteration_times: list = field(default_factory=list)
    message: str = ''

    @property
    def level(self):
        return self.objective_trajectory[-1]

    @property
    def objective(self):
        """Exact max-min offload of the returned allocation, in nats"""
        return self.exact_trajectory[-1]

    @property
    def succeeded(self):
        return self.termination != Termination.SOLVER_FAILURE


def _run(scheme, scenario, settings, backend, allocation, objective, build):
    trajectory = [objective(allocation)]
    exact = [trajectory[0]]
    history = [allocation]
    times = []
    termination = Termination.ITERATION_LIMIT
    message = ''

    logger.info('Begin {} SCA for {} users'.format(scheme, scenario.user_count))

    # Zero energy admits only schedules that offload nothing
    if scenario.energy_budget == 0:
        logger.info('{} SCA: zero energy budget, returning the empty schedule'.format(scheme))
        return SolveReport(scheme, trajectory, exact, allocation, history, 0, Termination.CONVERGED,
                           times, 'zero energy budget')

    for n in range(int(settings.max_iterations)):
        start = time.perf_counter()
        problem, index = build(allocation)
        solution = backend.solve(problem)
        try:
            candidate, level = conic.extract(solution, index)
        except conic.SolverFailure as e:
            termination = Termination.SOLVER_FAILURE
            message = str(e)
            logger.warning('{} SCA iteration {}: {}; keeping the last feasible iterate'.format(scheme, n + 1, e))
            break
        times.append(time.perf_counter() - start)

        previous = trajectory[-1]
        trajectory.append(level)
        exact.append(objective(candidate))
        history.append(candidate)
        allocation = candidate
        logger.debug('{} SCA iteration {}: level {:.9f} exact {:.9f}'.format(scheme, n + 1, level, exact[-1]))

        if settings.converged(previous, level):
            termination = Termination.CONVERGED
            break

    iterations = len(trajectory) - 1
    logger.info('{} SCA finished: {} after {} iterations, objective {:.6f} nats'.format(
        scheme, termination.value, iterations, exact[-1]))
    return SolveReport(scheme, trajectory, exact, allocation, history, iterations, termination, times, message)


def interior_noma_start(scenario):
    """
    Strictly positive feasible NOMA schedule: every extension gets half of its
    deadline gap and every power the same value, using at most half of the
    energy budget and half of the per-slot power budget
    :param scenario: Scenario
    :return: NomaAllocation
    """
    M = scenario.user_count
    deadlines = np.asarray(scenario.deadlines)
    extensions = np.concatenate(([deadlines[0]], 0.5 * np.diff(deadlines)))
    # user m transmits in slots 0..m, so slot j carries M - j users
    weight = float(np.dot(M - np.arange(M), extensions))
    power = min(0.5 * scenario.power_budget / M, 0.5 * scenario.energy_budget / weight)
    return NomaAllocation(np.tril(np.full((M, M), power)), extensions)


def interior_oma_start(scenario):
    """
    Strictly positive feasible OMA schedule: M equal slots filling half of the
    first deadline, at a common power using at most half of the energy budget
    :return: OmaAllocation
    """
    M = scenario.user_count
    slot = 0.5 * scenario.deadlines[0] / M
    power = min(0.5 * scenario.power_budget, scenario.energy_budget / scenario.deadlines[0])
    return OmaAllocation(np.full(M, power), np.full(M, slot))


def _start(scenario, settings, interior, zeros):
    # The surrogates of a term D ln(1 + g P / I) built at D = P = 0 are nonpositive
    # everywhere, so the origin is a fixed point of the iteration for those terms
    if settings.start == 'zero' or scenario.energy_budget == 0:
        return zeros(scenario)
    return interior(scenario)


def solve_noma(scenario, settings=None, backend=None):
    """
    Run SCA for the NOMA schedule
    :param scenario: Scenario
    :param settings: ScaSettings; settings.start picks the interior or the all-zero starting point
    :param backend: conic.SolverBackend (Clarabel through cvxpy by default)
    :return: SolveReport
    """
    settings = settings or ScaSettings()
    backend = backend or conic.make_backend()

    def build(alloc):
        return conic.build_noma_subproblem(scenario, ExpansionPoint.from_allocation(alloc),
                                           proximal_weight=settings.proximal_weight,
                                           compact_first_slot=settings.compact_first_slot)

    start = _start(scenario, settings, interior_noma_start, NomaAllocation.zeros)
    return _run('noma', scenario, settings, backend, start,
                lambda alloc: model.noma_objective(alloc, scenario), build)


def solve_oma(scenario, settings=None, backend=None):
    """
    Run SCA for the OMA baseline
    :return: SolveReport
    """
    settings = settings or ScaSettings()
    backend = backend or conic.make_backend()

    def build(alloc):
        return conic.build_oma_subproblem(scenario, alloc.powers, alloc.slots,
                                          proximal_weight=settings.proximal_weight)

    start = _start(scenario, settings, interior_oma_start, OmaAllocation.zeros)
    return _run('oma', scenario, settings, backend, start,
                lambda alloc: model.oma_objective(alloc, scenario), build)


SOLVERS = {
    'noma': solve_noma,
    'oma': solve_oma,
}
