import abc
import enum
import math
import time
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import cvxpy as cp

import bounds
from model import NomaAllocation, OmaAllocation, OffloadingError


# Ignore solver warnings
warnings.filterwarnings("ignore", module="cvxpy")

logger = logging.getLogger(__name__)

# Primal values in [-CLAMP_TOLERANCE, 0) are solver round-off and read as 0
CLAMP_TOLERANCE = 1e-9
DEFAULT_SOLVER_TOLERANCE = 1e-8


class SolveStatus(str, enum.Enum):
    OPTIMAL = 'optimal'
    INFEASIBLE = 'infeasible'
    NUMERICAL_FAILURE = 'numerical_failure'
    ITERATION_LIMIT = 'iteration_limit'


class SolverFailure(OffloadingError):
    """The backend did not return a usable optimal point"""

    def __init__(self, status, message):
        super().__init__(message)
        self.status = SolveStatus(status)


class Affine:
    """Sparse affine expression sum_k coef_k x_k + const over problem variables"""

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms or {})
        self.const = float(const)

    @classmethod
    def var(cls, index, coef=1.0):
        return cls({index: float(coef)})

    def _coerce(self, other):
        return other if isinstance(other, Affine) else Affine(const=other)

    def __add__(self, other):
        other = self._coerce(other)
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0.0) + v
        return Affine(terms, self.const + other.const)

    __radd__ = __add__

    def __mul__(self, scalar):
        return Affine({k: v * scalar for k, v in self.terms.items()}, self.const * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self


@dataclass
class ConicProblem:
    """
    Maximize objective.x subject to le_matrix x <= le_rhs, eq_matrix x == eq_rhs,
    x >= lower_bounds, ||x[k1:]|| <= x[k0] per cone and 2 x[k0] x[k1] >= ||x[k2:]||^2
    per rotated cone
    """
    variable_count: int
    objective: np.ndarray
    le_matrix: sp.csr_matrix
    le_rhs: np.ndarray
    eq_matrix: sp.csr_matrix
    eq_rhs: np.ndarray
    lower_bounds: np.ndarray
    cones: list
    rotated_cones: list
    names: list = field(default_factory=list)

    def validate(self):
        """
        Structural checks: cone indices in range and no auxiliary shared between cones
        :return: self
        """
        n = self.variable_count
        if self.objective.shape != (n,) or self.lower_bounds.shape != (n,):
            raise ValueError('objective and bounds must have one entry per variable')
        for matrix in (self.le_matrix, self.eq_matrix):
            if matrix.shape[1] != n:
                raise ValueError('constraint rows must span {} variables'.format(n))
        seen = set()
        for cone in self.cones + self.rotated_cones:
            for k in cone:
                if not 0 <= k < n:
                    raise ValueError('cone index {} out of range'.format(k))
                if k in seen:
                    raise ValueError('variable {} belongs to more than one cone'.format(k))
                seen.add(k)
        for cone in self.rotated_cones:
            if len(cone) < 3:
                raise ValueError('rotated cones need at least three entries')
        return self

    @property
    def cone_count(self):
        return len(self.cones) + len(self.rotated_cones)

    def primal_residual(self, x):
        """Largest violation of any row, bound or cone at x"""
        worst = [0.0]
        if self.le_matrix.shape[0]:
            worst.append(float(np.max(self.le_matrix @ x - self.le_rhs)))
        if self.eq_matrix.shape[0]:
            worst.append(float(np.max(np.abs(self.eq_matrix @ x - self.eq_rhs))))
        bounded = np.isfinite(self.lower_bounds)
        if np.any(bounded):
            worst.append(float(np.max(self.lower_bounds[bounded] - x[bounded])))
        for cone in self.cones:
            worst.append(float(np.linalg.norm(x[list(cone[1:])]) - x[cone[0]]))
        for cone in self.rotated_cones:
            head, other = x[cone[0]], x[cone[1]]
            tail = np.concatenate(([head - other], math.sqrt(2.0) * x[list(cone[2:])]))
            worst.append(float(np.linalg.norm(tail) - (head + other)))
        return max(worst)


class ConicBuilder:
    """Accumulates variables, rows and cones, then freezes them into a ConicProblem"""

    def __init__(self):
        self.names = []
        self.lower = []
        self.objective = {}
        self.le_rows = []
        self.eq_rows = []
        self.cones = []
        self.rotated_cones = []

    def variable(self, name, lower=None):
        self.names.append(name)
        self.lower.append(-np.inf if lower is None else float(lower))
        return len(self.names) - 1

    def maximize(self, expr):
        self.objective = dict(expr.terms)

    def less_equal(self, expr, rhs=0.0):
        """Add the row expr <= rhs"""
        self.le_rows.append((expr.terms, float(rhs) - expr.const))

    def equal(self, expr, rhs=0.0):
        self.eq_rows.append((expr.terms, float(rhs) - expr.const))

    def auxiliary(self, name, expr):
        """New free variable equal to an affine expression"""
        k = self.variable(name)
        self.equal(Affine.var(k) - expr)
        return k

    def soc(self, name, head, tail):
        """||tail|| <= head for affine head and tail entries"""
        entries = [head] + list(tail)
        self.cones.append(tuple(self.auxiliary('{}[{}]'.format(name, i), e) for i, e in enumerate(entries)))

    def rotated(self, name, first, second, tail):
        """2 first second >= ||tail||^2 with first, second >= 0"""
        entries = [first, second] + list(tail)
        self.rotated_cones.append(tuple(self.auxiliary('{}[{}]'.format(name, i), e)
                                        for i, e in enumerate(entries)))

    def _matrix(self, rows):
        n = len(self.names)
        data, indices, indptr, rhs = [], [], [0], []
        for terms, b in rows:
            for k, v in sorted(terms.items()):
                if v != 0.0:
                    indices.append(k)
                    data.append(v)
            indptr.append(len(indices))
            rhs.append(b)
        matrix = sp.csr_matrix((data, indices, indptr), shape=(len(rows), n))
        return matrix, np.array(rhs, dtype=float)

    def build(self):
        n = len(self.names)
        objective = np.zeros(n)
        for k, v in self.objective.items():
            objective[k] = v
        le_matrix, le_rhs = self._matrix(self.le_rows)
        eq_matrix, eq_rhs = self._matrix(self.eq_rows)
        return ConicProblem(variable_count=n,
                            objective=objective,
                            le_matrix=le_matrix,
                            le_rhs=le_rhs,
                            eq_matrix=eq_matrix,
                            eq_rhs=eq_rhs,
                            lower_bounds=np.array(self.lower, dtype=float),
                            cones=list(self.cones),
                            rotated_cones=list(self.rotated_cones),
                            names=list(self.names)).validate()


@dataclass(frozen=True)
class NomaIndex:
    """Where each decision variable of a NOMA subproblem lives in the primal vector"""
    user_count: int
    first_deadline: float
    powers: dict
    extensions: dict
    level: int

    @property
    def decision_count(self):
        return len(self.powers) + len(self.extensions) + 1


@dataclass(frozen=True)
class OmaIndex:
    user_count: int
    powers: tuple
    slots: tuple
    level: int

    @property
    def decision_count(self):
        return len(self.powers) + len(self.slots) + 1


def _add_proximal(builder, weight, decisions, anchor, level):
    """Objective level - weight * ||x - anchor||^2 through an epigraph variable"""
    spread = builder.variable('proximal', lower=0)
    tail = [2.0 * (Affine.var(k) - a) for k, a in zip(decisions, anchor)]
    builder.soc('proximal_cone', Affine.var(spread) + 1.0, tail + [Affine.var(spread) - 1.0])
    builder.maximize(Affine.var(level) - weight * Affine.var(spread))


def build_noma_subproblem(scenario, point, proximal_weight=None, compact_first_slot=True):
    """
    Convex subproblem of the NOMA max-min problem around an expansion point
    :param scenario: Scenario
    :param point: bounds.ExpansionPoint
    :param proximal_weight: optional weight of a quadratic proximal term
    :param compact_first_slot: bound the fixed-length first slot with the log-ratio bound
    :return: (ConicProblem, NomaIndex)
    """
    M = scenario.user_count
    g = scenario.gains
    D1 = scenario.deadlines[0]
    builder = ConicBuilder()

    powers = {}
    for m in range(M):
        for j in range(m + 1):
            powers[m, j] = builder.variable('P[{},{}]'.format(m, j), lower=0)
    extensions = {j: builder.variable('D[{}]'.format(j), lower=0) for j in range(1, M)}
    level = builder.variable('level')

    def slot_length(j):
        return Affine(const=D1) if j == 0 else Affine.var(extensions[j])

    def interference(m, j):
        expr = Affine(const=1.0)
        for i in range(j, m):
            expr = expr + Affine.var(powers[i, j], g[i])
        return expr

    # Rate rows: level - sum_j f_mj <= 0
    for m in range(M):
        row = Affine.var(level)
        for j in range(m + 1):
            P = Affine.var(powers[m, j])
            I = interference(m, j)
            received = g[m] * P + I
            I0 = point.interference(scenario, m, j)
            s = builder.variable('s[{},{}]'.format(m, j), lower=0)

            if j == 0 and compact_first_slot:
                total0 = g[m] * point.powers[m, 0] + I0
                const = D1 * (2.0 + math.log(total0) - math.log(I0))
                # s (g P + I) >= D1 (u0 + v0)
                builder.rotated('rate_cone[{},0]'.format(m), Affine.var(s), 0.5 * received,
                                [Affine(const=math.sqrt(D1 * total0))])
                row = row - (const - (D1 / I0) * I - Affine.var(s))
                continue

            k = bounds.surrogate_coeffs(scenario, point, m, j)
            D = slot_length(j)
            t = builder.variable('t[{},{}]'.format(m, j), lower=0)
            # t >= (D + I)^2 / (4 I0)
            builder.soc('square_cone[{},{}]'.format(m, j), Affine.var(t) + I0, [D + I, Affine.var(t) - I0])
            # s (g P + I) >= e (D + 1)^2
            builder.rotated('rate_cone[{},{}]'.format(m, j), Affine.var(s), 0.5 * received,
                            [math.sqrt(k.e) * (D + 1.0)])
            row = row - (k.a + k.b * D - k.c * I - k.d * P - Affine.var(t) - Affine.var(s))
        builder.less_equal(row)

    # Energy: the first slot has a fixed length, so its products are linear
    energy = Affine()
    for m in range(M):
        energy = energy + Affine.var(powers[m, 0], D1)
        for j in range(1, m + 1):
            P = Affine.var(powers[m, j])
            D = Affine.var(extensions[j])
            gap0 = point.extensions[j] - point.powers[m, j]
            r = builder.variable('r[{},{}]'.format(m, j), lower=0)
            # r >= (D + P)^2 / 4
            builder.soc('energy_cone[{},{}]'.format(m, j), Affine.var(r) + 1.0, [D + P, Affine.var(r) - 1.0])
            energy = energy + Affine.var(r) + 0.25 * gap0 ** 2 - 0.5 * gap0 * (D - P)
    builder.less_equal(energy, scenario.energy_budget)

    # Deadlines for users 2..M
    for m in range(1, M):
        builder.less_equal(sum((Affine.var(extensions[j]) for j in range(1, m + 1)), Affine()),
                           scenario.deadlines[m] - D1)

    # Total transmit power in every slot
    for j in range(M):
        builder.less_equal(sum((Affine.var(powers[m, j]) for m in range(j, M)), Affine()),
                           scenario.power_budget)

    if proximal_weight:
        decisions = [powers[m, j] for (m, j) in sorted(powers)] + [extensions[j] for j in sorted(extensions)]
        anchor = [point.powers[m, j] for (m, j) in sorted(powers)] + [point.extensions[j] for j in sorted(extensions)]
        _add_proximal(builder, proximal_weight, decisions, anchor, level)
    else:
        builder.maximize(Affine.var(level))

    index = NomaIndex(user_count=M, first_deadline=D1, powers=powers, extensions=extensions, level=level)
    return builder.build(), index


def build_oma_subproblem(scenario, powers0, slots0, proximal_weight=None):
    """
    Convex subproblem of the OMA max-min problem around (P̂0, D̂0)
    :param scenario: Scenario
    :param powers0: expansion powers, one per user
    :param slots0: expansion slot lengths, one per user
    :param proximal_weight: optional weight of a quadratic proximal term
    :return: (ConicProblem, OmaIndex)
    """
    M = scenario.user_count
    g = scenario.gains
    builder = ConicBuilder()

    powers = tuple(builder.variable('P[{}]'.format(m), lower=0) for m in range(M))
    slots = tuple(builder.variable('D[{}]'.format(m), lower=0) for m in range(M))
    level = builder.variable('level')

    energy = Affine()
    for m in range(M):
        k = bounds.oma_surrogate_coeffs(scenario, powers0[m], slots0[m], m)
        P, D = Affine.var(powers[m]), Affine.var(slots[m])

        # s (1 + g P) >= d (D + 1)^2
        s = builder.variable('s[{}]'.format(m), lower=0)
        builder.rotated('rate_cone[{}]'.format(m), Affine.var(s), 0.5 * (g[m] * P + 1.0),
                        [math.sqrt(k.d) * (D + 1.0)])
        builder.less_equal(Affine.var(level) - (k.a + k.b * D - k.c * P - Affine.var(s)))

        gap0 = slots0[m] - powers0[m]
        r = builder.variable('r[{}]'.format(m), lower=0)
        builder.soc('energy_cone[{}]'.format(m), Affine.var(r) + 1.0, [D + P, Affine.var(r) - 1.0])
        energy = energy + Affine.var(r) + 0.25 * gap0 ** 2 - 0.5 * gap0 * (D - P)

        builder.less_equal(sum((Affine.var(slots[i]) for i in range(m + 1)), Affine()), scenario.deadlines[m])
        builder.less_equal(P, scenario.power_budget)
    builder.less_equal(energy, scenario.energy_budget)

    if proximal_weight:
        _add_proximal(builder, proximal_weight, list(powers) + list(slots),
                      list(powers0) + list(slots0), level)
    else:
        builder.maximize(Affine.var(level))

    return builder.build(), OmaIndex(user_count=M, powers=powers, slots=slots, level=level)


@dataclass(frozen=True)
class ConicSolution:
    status: SolveStatus
    primal: np.ndarray = None
    objective: float = float('nan')
    primal_residual: float = float('nan')
    dual_residual: float = float('nan')
    solve_time: float = 0.0
    message: str = ''

    def __post_init__(self):
        if (self.primal is not None) != (self.status == SolveStatus.OPTIMAL):
            raise ValueError('primal values are present exactly when the status is optimal')


def _clamped(solution, indices):
    values = solution.primal[list(indices)]
    if np.any(values < -CLAMP_TOLERANCE):
        raise SolverFailure(SolveStatus.NUMERICAL_FAILURE,
                            'primal value {:.3e} is negative beyond round-off'.format(float(np.min(values))))
    return np.where(values < 0, 0.0, values)


def extract(solution, index):
    """
    Read the allocation and the level variable out of an optimal solution
    :param solution: ConicSolution
    :param index: NomaIndex or OmaIndex
    :return: (NomaAllocation or OmaAllocation, level)
    """
    if solution.status != SolveStatus.OPTIMAL:
        raise SolverFailure(solution.status, 'solver returned {}: {}'.format(solution.status.value,
                                                                            solution.message))
    level = float(solution.primal[index.level])

    if isinstance(index, NomaIndex):
        M = index.user_count
        keys = sorted(index.powers)
        values = _clamped(solution, [index.powers[key] for key in keys])
        powers = np.zeros((M, M))
        for (m, j), v in zip(keys, values):
            powers[m, j] = v
        extensions = np.zeros(M)
        extensions[0] = index.first_deadline
        if M > 1:
            extensions[1:] = _clamped(solution, [index.extensions[j] for j in range(1, M)])
        return NomaAllocation(powers, extensions), level

    powers = _clamped(solution, index.powers)
    slots = _clamped(solution, index.slots)
    return OmaAllocation(powers, slots), level


class SolverBackend(abc.ABC):
    """
    Contract: a feasible bounded ConicProblem comes back optimal with a primal
    residual within the configured tolerance. Instances are not shared across threads.
    """
    name = 'abstract'
    supports_rotated_cones = True

    def __init__(self, tolerance=DEFAULT_SOLVER_TOLERANCE, max_iterations=None):
        self.tolerance = tolerance
        self.max_iterations = max_iterations

    @abc.abstractmethod
    def solve(self, problem):
        """
        :param problem: ConicProblem
        :return: ConicSolution
        """


class CvxpyBackend(SolverBackend):
    """Hands the standard form to one of the conic solvers cvxpy interfaces"""

    _options = {
        'CLARABEL': lambda tol, it: dict(tol_feas=tol, tol_gap_abs=tol, tol_gap_rel=tol,
                                         **({'max_iter': it} if it else {})),
        'ECOS': lambda tol, it: dict(feastol=tol, abstol=tol, reltol=tol, **({'max_iters': it} if it else {})),
        'SCS': lambda tol, it: dict(eps_abs=tol, eps_rel=tol, **({'max_iters': it} if it else {})),
    }

    def __init__(self, solver='CLARABEL', tolerance=DEFAULT_SOLVER_TOLERANCE, max_iterations=None):
        super().__init__(tolerance, max_iterations)
        if solver not in self._options:
            raise ValueError('unsupported cvxpy solver: {}'.format(solver))
        self.solver = solver
        self.name = solver.lower()

    def _model(self, problem):
        x = cp.Variable(problem.variable_count)
        constraints = []
        if problem.le_matrix.shape[0]:
            constraints.append(problem.le_matrix @ x <= problem.le_rhs)
        if problem.eq_matrix.shape[0]:
            constraints.append(problem.eq_matrix @ x == problem.eq_rhs)
        bounded = np.flatnonzero(np.isfinite(problem.lower_bounds))
        if bounded.size:
            constraints.append(x[bounded] >= problem.lower_bounds[bounded])
        for cone in problem.cones:
            constraints.append(cp.SOC(x[cone[0]], x[list(cone[1:])]))

        # 2 a b >= ||z||^2  <=>  ||(a - b, sqrt(2) z)|| <= a + b
        n = problem.variable_count
        for cone in problem.rotated_cones:
            width = len(cone) - 1
            rows = [0, 0] + list(range(1, width))
            cols = [cone[0], cone[1]] + list(cone[2:])
            data = [1.0, -1.0] + [math.sqrt(2.0)] * (width - 1)
            tail = sp.csr_matrix((data, (rows, cols)), shape=(width, n))
            constraints.append(cp.SOC(x[cone[0]] + x[cone[1]], tail @ x))

        return x, cp.Problem(cp.Maximize(problem.objective @ x), constraints)

    def solve(self, problem):
        x, model = self._model(problem)
        options = self._options[self.solver](self.tolerance, self.max_iterations)
        start = time.perf_counter()
        try:
            model.solve(solver=self.solver, **options)
        except cp.error.SolverError as e:
            logger.warning('{} failed: {}'.format(self.solver, e))
            return ConicSolution(status=SolveStatus.NUMERICAL_FAILURE, message=str(e),
                                 solve_time=time.perf_counter() - start)
        elapsed = time.perf_counter() - start

        if model.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) and x.value is not None:
            if model.status == cp.OPTIMAL_INACCURATE:
                logger.warning('{} reported an inaccurate optimum'.format(self.solver))
            primal = np.asarray(x.value, dtype=float)
            stats = model.solver_stats.extra_stats if model.solver_stats else None
            return ConicSolution(status=SolveStatus.OPTIMAL,
                                 primal=primal,
                                 objective=float(problem.objective @ primal),
                                 primal_residual=problem.primal_residual(primal),
                                 dual_residual=float(getattr(stats, 'r_dual', float('nan'))),
                                 solve_time=elapsed)
        if model.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            status = SolveStatus.INFEASIBLE
        elif model.status == cp.USER_LIMIT:
            status = SolveStatus.ITERATION_LIMIT
        else:
            status = SolveStatus.NUMERICAL_FAILURE
        return ConicSolution(status=status, message=str(model.status), solve_time=elapsed)


BACKENDS = {
    'clarabel': 'CLARABEL',
    'ecos': 'ECOS',
    'scs': 'SCS',
}


def make_backend(name='clarabel', tolerance=DEFAULT_SOLVER_TOLERANCE, max_iterations=None):
    """
    Backend factory keyed by the names accepted on the command line
    :param name: one of BACKENDS
    :return: SolverBackend
    """
    key = name.lower()
    if key not in BACKENDS:
        raise ValueError('unknown backend {!r}; choose from {}'.format(name, ', '.join(sorted(BACKENDS))))
    return CvxpyBackend(BACKENDS[key], tolerance=tolerance, max_iterations=max_iterations)


def _format_terms(terms, names):
    parts = ['{:+.12g} {}'.format(v, names[k]) for k, v in terms]
    return ' '.join(parts) if parts else '0'


def format_problem(problem):
    """
    Plain-text listing of a ConicProblem for cross-checking against a modeling tool
    :return: str
    """
    names = problem.names or ['x{}'.format(k) for k in range(problem.variable_count)]
    lines = ['maximize',
             '  ' + _format_terms([(k, v) for k, v in enumerate(problem.objective) if v != 0.0], names),
             'subject to']
    for label, matrix, rhs, sense in (('le', problem.le_matrix, problem.le_rhs, '<='),
                                      ('eq', problem.eq_matrix, problem.eq_rhs, '=')):
        for r in range(matrix.shape[0]):
            row = matrix.getrow(r)
            terms = list(zip(row.indices, row.data))
            lines.append('  {}{}: {} {} {:.12g}'.format(label, r, _format_terms(terms, names), sense, rhs[r]))
    lines.append('bounds')
    for k, lb in enumerate(problem.lower_bounds):
        if np.isfinite(lb):
            lines.append('  {} >= {:.12g}'.format(names[k], lb))
    lines.append('cones')
    for cone in problem.cones:
        lines.append('  soc ({})'.format(', '.join(names[k] for k in cone)))
    for cone in problem.rotated_cones:
        lines.append('  rsoc ({})'.format(', '.join(names[k] for k in cone)))
    return '\n'.join(lines) + '\n'
