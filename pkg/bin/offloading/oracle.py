import logging
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from model import NomaAllocation, OmaAllocation, OffloadingError


logger = logging.getLogger(__name__)

# Grid points must clear every budget by this relative margin, so the
# incumbent passes an audit at zero tolerance despite summation round-off
_MARGIN = 1e-12


class DimensionError(OffloadingError, ValueError):
    """Instance too large for exhaustive search"""


@dataclass(frozen=True)
class GridSpec:
    power_step: float = 0.02
    time_step: float = 0.01
    refinement_rounds: int = 2
    refinement_points: int = 10
    max_points: int = 4_000_000
    chunk_size: int = 1 << 20
    jobs: int = 1

    def __post_init__(self):
        if self.power_step <= 0 or self.time_step <= 0:
            raise ValueError('grid steps must be positive')
        if self.refinement_rounds < 0 or self.refinement_points < 1:
            raise ValueError('refinement settings must be nonnegative')

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: v for k, v in (data or {}).items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class OracleResult:
    objective: float
    allocation: object
    grid_error: float
    evaluations: int


def _within(lhs, rhs):
    return (lhs == 0) | (lhs <= rhs * (1.0 - _MARGIN))


class _NomaLayout:
    """Column layout of a flattened NOMA decision vector: powers (m, j) then extensions 1..M-1"""

    def __init__(self, scenario):
        self.scenario = scenario
        M = scenario.user_count
        self.pairs = [(m, j) for m in range(M) for j in range(m + 1)]
        self.slot_columns = list(range(len(self.pairs), len(self.pairs) + M - 1))
        D = scenario.deadlines
        self.upper = [scenario.power_budget] * len(self.pairs) + [D[j] - D[0] for j in range(1, M)]
        self.is_power = [True] * len(self.pairs) + [False] * (M - 1)

    def unpack(self, X):
        M = self.scenario.user_count
        n = X.shape[0]
        P = np.zeros((n, M, M))
        for col, (m, j) in enumerate(self.pairs):
            P[:, m, j] = X[:, col]
        Dbar = np.empty((n, M))
        Dbar[:, 0] = self.scenario.deadlines[0]
        for j, col in enumerate(self.slot_columns, start=1):
            Dbar[:, j] = X[:, col]
        return P, Dbar

    def values(self, X):
        """Exact max-min objective per row of X, -inf where a constraint fails"""
        sc = self.scenario
        M = sc.user_count
        g = np.asarray(sc.gains)
        P, Dbar = self.unpack(X)

        offload = np.zeros((X.shape[0], M))
        for m in range(M):
            for j in range(m + 1):
                I = 1.0 + np.einsum('i,ni->n', g[j:m], P[:, j:m, j])
                offload[:, m] += Dbar[:, j] * np.log1p(g[m] * P[:, m, j] / I)
        objective = offload.min(axis=1)

        ok = _within(np.einsum('nmj,nj->n', P, Dbar), sc.energy_budget)
        cumulative = np.cumsum(Dbar, axis=1)
        for m in range(1, M):
            ok &= _within(cumulative[:, m] - Dbar[:, 0], sc.deadlines[m] - sc.deadlines[0])
        for j in range(M):
            ok &= _within(P[:, j:, j].sum(axis=1), sc.power_budget)
        return np.where(ok, objective, -np.inf)

    def allocation(self, x):
        P, Dbar = self.unpack(x[None, :])
        return NomaAllocation(P[0], Dbar[0])


class _OmaLayout:
    """Columns: powers 0..M-1 then slots 0..M-1"""

    def __init__(self, scenario):
        self.scenario = scenario
        M = scenario.user_count
        self.upper = [scenario.power_budget] * M + list(scenario.deadlines)
        self.is_power = [True] * M + [False] * M

    def values(self, X):
        sc = self.scenario
        M = sc.user_count
        g = np.asarray(sc.gains)
        P, D = X[:, :M], X[:, M:]
        objective = (D * np.log1p(g * P)).min(axis=1)

        ok = _within((D * P).sum(axis=1), sc.energy_budget)
        cumulative = np.cumsum(D, axis=1)
        for m in range(M):
            ok &= _within(cumulative[:, m], sc.deadlines[m])
            ok &= _within(P[:, m], sc.power_budget)
        return np.where(ok, objective, -np.inf)

    def allocation(self, x):
        M = self.scenario.user_count
        return OmaAllocation(x[:M], x[M:])


def _axis(upper, step):
    return step * np.arange(int(np.floor(upper / step + 1e-9)) + 1)


def _size(axes):
    return int(np.prod([len(a) for a in axes], dtype=float))


def _scan(layout, axes, grid, keep_values=False):
    """
    Evaluate the full tensor grid in chunks
    :return: (best value, best point, grid values or None)
    """
    shape = tuple(len(a) for a in axes)
    total = _size(axes)

    def evaluate(start):
        flat = np.arange(start, min(start + grid.chunk_size, total))
        coords = np.unravel_index(flat, shape)
        X = np.column_stack([axes[k][coords[k]] for k in range(len(axes))])
        values = layout.values(X)
        best = int(np.argmax(values))
        # copy, so the chunk's X can be freed
        return values if keep_values else None, float(values[best]), X[best].copy()

    starts = range(0, total, grid.chunk_size)
    best_value, best_point, kept = -np.inf, None, []

    def reduce(results):
        nonlocal best_value, best_point
        for values, value, point in results:
            if best_point is None or value > best_value:
                best_value, best_point = value, point
            if keep_values:
                kept.append(values)

    if grid.jobs > 1:
        with ThreadPoolExecutor(max_workers=grid.jobs) as executor:
            reduce(executor.map(evaluate, starts))
    else:
        reduce(evaluate(s) for s in starts)

    values = np.concatenate(kept).reshape(shape) if keep_values else None
    return best_value, best_point, values


def _grid_error(values, steps):
    """Sum over axes of the largest finite change between neighbouring grid values"""
    error = 0.0
    for k in range(len(steps)):
        if values.shape[k] < 2:
            continue
        diffs = np.diff(values, axis=k)
        finite = np.isfinite(diffs)
        if np.any(finite):
            error += float(np.max(np.abs(diffs[finite])))
    return error


def _coarse_steps(layout, steps, max_points):
    """
    Widen the requested steps by a common factor until the first pass fits in
    max_points. An axis never gets fewer than its two end points.
    """
    factor = 1.0
    while True:
        coarse = [min(s * factor, u) if u > 0 else s for s, u in zip(steps, layout.upper)]
        size = _size([_axis(u, s) for u, s in zip(layout.upper, coarse)])
        if size <= max_points:
            return coarse, size
        if all(c >= u for c, u in zip(coarse, layout.upper) if u > 0):
            return None, size
        factor *= 1.1


def _refine_axes(layout, centre, steps, half):
    offsets = np.arange(-half, half + 1)
    axes = []
    for c, step, upper in zip(centre, steps, layout.upper):
        axis = c + step * offsets
        axis[half] = c
        axes.append(axis[(axis >= 0) & (axis <= upper)])
    return axes


def _search(layout, grid, label):
    requested = [grid.power_step if p else grid.time_step for p in layout.is_power]
    coarse, size = _coarse_steps(layout, requested, grid.max_points)
    if coarse is None:
        raise DimensionError('{} oracle needs {} grid points even at its coarsest, above the limit of {}'.format(
            label, size, grid.max_points))

    # A refinement window spans up to one previous step on either side of the incumbent
    half = grid.refinement_points
    while (2 * half + 1) ** len(requested) > min(grid.max_points, 5_000_000) and half > 1:
        half -= 1
    shrink = float(max(half, 2))
    descent, steps = 0, coarse
    while any(s > r * (1 + 1e-9) for s, r in zip(steps, requested)):
        descent += 1
        steps = [max(r, s / shrink) for s, r in zip(steps, requested)]
    steps = coarse

    rounds = descent + grid.refinement_rounds
    axes = [_axis(u, s) for u, s in zip(layout.upper, steps)]
    logger.info('Begin {} oracle over {} grid points, then {} refinement rounds'.format(label, size, rounds))
    best_value, best_point, values = _scan(layout, axes, grid, keep_values=rounds == 0)
    evaluations = size

    for round_ in range(rounds):
        if round_ < descent:
            steps = [max(r, s / shrink) for s, r in zip(steps, requested)]
        else:
            steps = [s / shrink for s in steps]
        axes = _refine_axes(layout, best_point, steps, half)
        value, point, values = _scan(layout, axes, grid, keep_values=round_ == rounds - 1)
        evaluations += _size(axes)
        if value > best_value:
            best_value, best_point = value, point
        logger.debug('{} oracle refinement {}: {:.9f}'.format(label, round_ + 1, best_value))

    error = _grid_error(values, steps)
    logger.info('{} oracle finished: {:.6f} nats (grid error {:.3e})'.format(label, best_value, error))
    return OracleResult(objective=float(best_value), allocation=layout.allocation(best_point),
                        grid_error=error, evaluations=evaluations)


def brute_force_noma(scenario, grid=None):
    """
    Exhaustive search for the NOMA max-min schedule
    :param scenario: Scenario with at most 3 users
    :param grid: GridSpec
    :return: OracleResult
    """
    if scenario.user_count > 3:
        raise DimensionError('NOMA oracle supports at most 3 users, got {}'.format(scenario.user_count))
    return _search(_NomaLayout(scenario), grid or GridSpec(), 'NOMA')


def brute_force_oma(scenario, grid=None):
    """
    Exhaustive search for the OMA max-min schedule with the exact energy D̂ P̂
    :param scenario: Scenario with at most 4 users
    :return: OracleResult
    """
    if scenario.user_count > 4:
        raise DimensionError('OMA oracle supports at most 4 users, got {}'.format(scenario.user_count))
    return _search(_OmaLayout(scenario), grid or GridSpec(), 'OMA')
