import numpy as np
import pytest

import conic
import model
import sca
from conftest import closed_form_single_user
from conic import ConicSolution, SolveStatus, SolverBackend
from model import Scenario
from sca import ScaSettings, Termination

TIGHT = ScaSettings(rel_tolerance=1e-7, abs_tolerance=1e-9)


class FailingBackend(SolverBackend):
    """Hands solves to a real backend, then fails from the given call on"""
    name = 'failing'

    def __init__(self, inner, fail_from):
        super().__init__()
        self.inner = inner
        self.fail_from = fail_from
        self.calls = 0

    def solve(self, problem):
        self.calls += 1
        if self.calls >= self.fail_from:
            return ConicSolution(status=SolveStatus.NUMERICAL_FAILURE, message='stalled')
        return self.inner.solve(problem)


class TestSettings:

    @pytest.mark.parametrize('kwargs', [
        dict(max_iterations=0),
        dict(rel_tolerance=0.0),
        dict(abs_tolerance=-1.0),
        dict(proximal_weight=-0.1),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ScaSettings(**kwargs)

    def test_from_dict_ignores_unknown_keys(self):
        settings = ScaSettings.from_dict({'max_iterations': 7, 'colour': 'blue'})
        assert settings.max_iterations == 7

    def test_stopping_rule(self):
        settings = ScaSettings(rel_tolerance=1e-3, abs_tolerance=1e-6)
        assert settings.converged(10.0, 10.009)
        assert not settings.converged(10.0, 10.02)


class TestSingleUser:

    def test_noma_closed_form(self, backend, single_user):
        report = sca.solve_noma(single_user, TIGHT, backend)
        assert report.termination == Termination.CONVERGED
        assert report.objective == pytest.approx(closed_form_single_user(single_user), abs=1e-3)
        assert report.objective == pytest.approx(2.1972, abs=1e-3)
        assert report.allocation.powers[0, 0] == pytest.approx(2.0, abs=1e-3)

    def test_oma_matches_noma(self, backend, single_user):
        noma = sca.solve_noma(single_user, TIGHT, backend)
        oma = sca.solve_oma(single_user, TIGHT, backend)
        assert oma.objective == pytest.approx(noma.objective, abs=1e-3)

    def test_power_limited(self, backend):
        scenario = Scenario(gains=(0.5,), deadlines=(2.0,), energy_budget=20.0, power_budget=3.0)
        report = sca.solve_noma(scenario, TIGHT, backend)
        assert report.objective == pytest.approx(closed_form_single_user(scenario), abs=1e-3)

    def test_full_first_slot_surrogate(self, backend, single_user):
        settings = ScaSettings(rel_tolerance=1e-7, abs_tolerance=1e-9, compact_first_slot=False)
        report = sca.solve_noma(single_user, settings, backend)
        assert report.objective == pytest.approx(closed_form_single_user(single_user), abs=1e-3)

    def test_proximal_option(self, backend, single_user):
        settings = ScaSettings(rel_tolerance=1e-7, abs_tolerance=1e-9, proximal_weight=0.05)
        report = sca.solve_noma(single_user, settings, backend)
        assert report.objective == pytest.approx(closed_form_single_user(single_user), abs=1e-2)
        assert all(b >= a - 1e-7 for a, b in zip(report.objective_trajectory, report.objective_trajectory[1:]))

    @pytest.mark.slow
    @pytest.mark.parametrize('seed', range(20))
    def test_random_parameterizations_match_the_closed_form(self, backend, seed):
        rng = np.random.default_rng(1000 + seed)
        scenario = Scenario(gains=(float(rng.uniform(0.2, 3.0)),), deadlines=(float(rng.uniform(0.5, 3.0)),),
                            energy_budget=float(rng.uniform(0.5, 10.0)), power_budget=float(rng.uniform(0.5, 5.0)))
        expected = closed_form_single_user(scenario)
        assert sca.solve_noma(scenario, TIGHT, backend).objective == pytest.approx(expected, abs=1e-3)
        assert sca.solve_oma(scenario, TIGHT, backend).objective == pytest.approx(expected, abs=1e-3)


class TestZeroEnergy:

    @pytest.mark.parametrize('solve', [sca.solve_noma, sca.solve_oma])
    def test_returns_the_empty_schedule(self, solve, two_users):
        scenario = Scenario(gains=two_users.gains, deadlines=two_users.deadlines,
                            energy_budget=0.0, power_budget=two_users.power_budget)
        report = solve(scenario)
        assert report.objective == 0.0
        assert report.iterations == 0
        assert report.termination == Termination.CONVERGED
        assert not report.allocation.powers.any()


def random_scenario(seed):
    """Seeded scenario with 2 to 4 users and random deadline gaps"""
    rng = np.random.default_rng(seed)
    M = int(rng.integers(2, 5))
    deadlines = np.cumsum(np.concatenate(([rng.uniform(0.5, 2.0)], rng.uniform(0.0, 0.75, M - 1))))
    return Scenario(gains=tuple(rng.uniform(0.2, 3.0, M)),
                    deadlines=tuple(deadlines),
                    energy_budget=float(rng.uniform(1.0, 6.0)),
                    power_budget=float(rng.uniform(1.0, 4.0)))


# Seeds past the first three are marked slow
SCENARIO_SEEDS = [pytest.param(s, marks=pytest.mark.slow) if s >= 3 else s for s in range(50)]


class TestInvariants:

    @pytest.mark.parametrize('seed', SCENARIO_SEEDS)
    def test_noma_trajectory_and_iterates(self, backend, seed):
        scenario = random_scenario(seed)
        report = sca.solve_noma(scenario, ScaSettings(max_iterations=60), backend)
        levels = report.objective_trajectory
        assert all(b >= a - 1e-7 for a, b in zip(levels, levels[1:]))
        for alloc in report.history:
            assert model.audit_noma(alloc, scenario, tolerance=1e-6).feasible
        assert report.objective >= report.level - 1e-5
        assert len(report.iteration_times) == report.iterations
        assert report.exact_trajectory[-1] == pytest.approx(model.noma_objective(report.allocation, scenario))

    @pytest.mark.parametrize('seed', SCENARIO_SEEDS)
    def test_oma_trajectory_and_iterates(self, backend, seed):
        scenario = random_scenario(seed)
        report = sca.solve_oma(scenario, ScaSettings(max_iterations=60), backend)
        levels = report.objective_trajectory
        assert all(b >= a - 1e-7 for a, b in zip(levels, levels[1:]))
        for alloc in report.history:
            assert model.audit_oma(alloc, scenario, tolerance=1e-6).feasible
        assert report.objective >= report.level - 1e-5


    def test_repeat_runs_agree(self, backend, two_users):
        first = sca.solve_noma(two_users, ScaSettings(max_iterations=30), backend)
        second = sca.solve_noma(two_users, ScaSettings(max_iterations=30), conic.make_backend('clarabel'))
        assert len(first.objective_trajectory) == len(second.objective_trajectory)
        np.testing.assert_allclose(first.objective_trajectory, second.objective_trajectory, atol=1e-6)

    def test_iteration_limit(self, backend, two_users):
        report = sca.solve_noma(two_users, ScaSettings(max_iterations=2, rel_tolerance=1e-12,
                                                       abs_tolerance=1e-12), backend)
        assert report.termination == Termination.ITERATION_LIMIT
        assert report.iterations == 2


class TestSolverFailure:

    def test_keeps_the_last_feasible_iterate(self, backend, two_users):
        failing = FailingBackend(backend, fail_from=3)
        report = sca.solve_noma(two_users, ScaSettings(rel_tolerance=1e-12, abs_tolerance=1e-12), failing)
        assert report.termination == Termination.SOLVER_FAILURE
        assert not report.succeeded
        assert report.iterations == 2
        assert 'stalled' in report.message
        assert report.allocation is report.history[-1]
        assert model.audit_noma(report.allocation, two_users).feasible


class TestStartingPoints:

    @pytest.mark.parametrize('deadlines', [(1.0, 2.0, 2.5), (2.0, 2.0, 2.0)])
    def test_interior_starts_are_feasible(self, deadlines):
        scenario = Scenario(gains=(1.0, 0.4, 2.0), deadlines=deadlines, energy_budget=3.0, power_budget=1.5)
        noma = sca.interior_noma_start(scenario)
        oma = sca.interior_oma_start(scenario)
        assert model.audit_noma(noma, scenario, tolerance=0.0).feasible
        assert model.audit_oma(oma, scenario, tolerance=0.0).feasible
        assert np.all(noma.powers[np.tril_indices(3)] > 0)
        assert np.all(oma.powers > 0) and np.all(oma.slots > 0)
        assert model.noma_objective(noma, scenario) > 0
        assert model.oma_objective(oma, scenario) > 0

    def test_first_level_is_at_least_the_start(self, backend, two_users):
        report = sca.solve_oma(two_users, ScaSettings(max_iterations=1), backend)
        start = model.oma_objective(sca.interior_oma_start(two_users), two_users)
        assert report.objective_trajectory[0] == pytest.approx(start)
        assert report.objective_trajectory[1] >= start - 1e-7

    def test_zero_start_is_selectable(self, backend, single_user):
        report = sca.solve_noma(single_user, ScaSettings(start='zero', max_iterations=1), backend)
        assert report.objective_trajectory[0] == 0.0

    def test_unknown_start(self):
        with pytest.raises(ValueError):
            ScaSettings(start='random')
