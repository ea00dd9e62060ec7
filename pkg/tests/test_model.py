import math

import numpy as np
import pytest

import model
from model import NomaAllocation, OmaAllocation, Scenario, ScenarioError


def noma(powers, extensions):
    return model.noma_from_lists(powers, extensions)


class TestScenario:

    def test_round_trip_through_dict(self, two_users):
        assert Scenario.from_dict(two_users.to_dict()) == two_users

    @pytest.mark.parametrize('kwargs', [
        dict(gains=(), deadlines=(), energy_budget=1.0, power_budget=1.0),
        dict(gains=(1.0,), deadlines=(1.0, 2.0), energy_budget=1.0, power_budget=1.0),
        dict(gains=(-1.0,), deadlines=(1.0,), energy_budget=1.0, power_budget=1.0),
        dict(gains=(1.0, 1.0), deadlines=(2.0, 1.0), energy_budget=1.0, power_budget=1.0),
        dict(gains=(1.0,), deadlines=(0.0,), energy_budget=1.0, power_budget=1.0),
        dict(gains=(1.0,), deadlines=(1.0,), energy_budget=-1.0, power_budget=1.0),
        dict(gains=(1.0,), deadlines=(1.0,), energy_budget=1.0, power_budget=0.0),
    ])
    def test_rejects_invalid_instances(self, kwargs):
        with pytest.raises(ScenarioError):
            Scenario(**kwargs)

    def test_accepts_zero_energy_and_equal_deadlines(self):
        scenario = Scenario(gains=(1.0, 2.0), deadlines=(1.0, 1.0), energy_budget=0.0, power_budget=1.0)
        assert scenario.user_count == 2

    def test_from_dict_reports_missing_fields(self):
        with pytest.raises(ScenarioError, match='power_budget'):
            Scenario.from_dict({'gains': [1], 'deadlines': [1], 'energy_budget': 1})


class TestAllocations:

    def test_noma_rejects_upper_triangle(self):
        with pytest.raises(ScenarioError):
            NomaAllocation([[1.0, 1.0], [0.0, 1.0]], [1.0, 1.0])

    def test_noma_rejects_negative_entries(self):
        with pytest.raises(ScenarioError):
            NomaAllocation([[1.0, 0.0], [-1.0, 1.0]], [1.0, 1.0])

    def test_noma_first_slot_must_match_first_deadline(self, two_users):
        alloc = noma([[0.0], [0.0, 0.0]], [0.5, 0.0])
        with pytest.raises(ScenarioError):
            alloc.validate_for(two_users)

    def test_allocations_are_read_only(self, two_users):
        alloc = NomaAllocation.zeros(two_users)
        with pytest.raises(ValueError):
            alloc.powers[0, 0] = 1.0

    def test_zeros_fix_the_first_slot(self, two_users):
        alloc = NomaAllocation.zeros(two_users)
        np.testing.assert_array_equal(alloc.extensions, [1.0, 0.0])
        assert not alloc.powers.any()

    def test_oma_rejects_length_mismatch(self):
        with pytest.raises(ScenarioError):
            OmaAllocation([1.0], [1.0, 2.0])


class TestInterference:

    def test_own_slot_is_noise_only(self, rng):
        scenario = Scenario(gains=(1.0, 0.5, 0.25), deadlines=(1.0, 2.0, 3.0), energy_budget=1, power_budget=1)
        alloc = NomaAllocation(np.tril(rng.uniform(0, 5, (3, 3))), [1.0, 0.5, 0.5])
        for m in range(3):
            assert model.interference(alloc, scenario, m, m) == 1.0

    def test_two_users(self, two_users):
        alloc = noma([[3.0], [0.0, 0.0]], [1.0, 0.0])
        assert model.interference(alloc, two_users, 1, 0) == pytest.approx(4.0)

    def test_three_users(self):
        scenario = Scenario(gains=(1.0, 0.5, 0.25), deadlines=(1.0, 2.0, 3.0), energy_budget=1, power_budget=1)
        alloc = noma([[2.0], [4.0, 0.0], [0.0, 0.0, 0.0]], [1.0, 0.0, 0.0])
        assert model.interference(alloc, scenario, 2, 0) == pytest.approx(5.0)

    def test_out_of_range(self, two_users):
        alloc = NomaAllocation.zeros(two_users)
        with pytest.raises(IndexError):
            model.interference(alloc, two_users, 0, 1)
        with pytest.raises(IndexError):
            model.interference(alloc, two_users, 2, 0)


class TestOffloaded:

    def test_zero_powers_offload_nothing(self, two_users):
        alloc = NomaAllocation.zeros(two_users)
        assert [model.offloaded_nats(alloc, two_users, m) for m in range(2)] == [0.0, 0.0]

    def test_single_log_term(self):
        scenario = Scenario(gains=(1.0,), deadlines=(2.0,), energy_budget=10, power_budget=10)
        alloc = noma([[math.e - 1.0]], [2.0])
        assert model.offloaded_nats(alloc, scenario, 0) == pytest.approx(2.0)

    def test_second_user_sees_first_user_in_shared_slot(self):
        scenario = Scenario(gains=(1.0, 0.5), deadlines=(1.0, 2.0), energy_budget=10, power_budget=10)
        alloc = noma([[1.0], [2.0, 2.0]], [1.0, 1.0])
        expected = math.log(1.5) + math.log(2.0)
        assert model.offloaded_nats(alloc, scenario, 1) == pytest.approx(expected)
        assert model.offloaded_nats(alloc, scenario, 1) == pytest.approx(1.0986, abs=1e-4)

    @pytest.mark.parametrize('g, power, slot, expected', [
        (1.0, 0.0, 3.0, 0.0),
        (1.0, math.e - 1.0, 3.0, 3.0),
        (2.0, 0.5, 2.0, 2.0 * math.log(2.0)),
    ])
    def test_oma(self, g, power, slot, expected):
        scenario = Scenario(gains=(g,), deadlines=(slot,), energy_budget=10, power_budget=10)
        alloc = OmaAllocation([power], [slot])
        assert model.offloaded_nats_oma(alloc, scenario, 0) == pytest.approx(expected)

    def test_monotone_in_own_power(self, rng):
        scenario = Scenario(gains=(1.0, 0.7, 0.3), deadlines=(1.0, 1.5, 2.0), energy_budget=1, power_budget=1)
        for _ in range(100):
            powers = np.tril(rng.uniform(0, 3, (3, 3)))
            extensions = [1.0, *rng.uniform(0, 1, 2)]
            m = int(rng.integers(3))
            j = int(rng.integers(m + 1))
            bumped = powers.copy()
            bumped[m, j] += rng.uniform(0, 1)
            before = model.offloaded_nats(NomaAllocation(powers, extensions), scenario, m)
            after = model.offloaded_nats(NomaAllocation(bumped, extensions), scenario, m)
            assert after >= before

    def test_scales_with_slot_lengths(self, rng):
        scenario = Scenario(gains=(1.0, 0.7), deadlines=(1.0, 1.5), energy_budget=1, power_budget=1)
        powers = np.tril(rng.uniform(0, 3, (2, 2)))
        base = NomaAllocation(powers, [1.0, 0.4])
        scaled = NomaAllocation(powers, [2.5, 1.0])
        for m in range(2):
            assert model.offloaded_nats(scaled, scenario, m) == pytest.approx(
                2.5 * model.offloaded_nats(base, scenario, m))

    def test_objective_is_the_smallest_user(self, two_users):
        alloc = noma([[1.0], [0.5, 1.0]], [1.0, 0.5])
        values = [model.offloaded_nats(alloc, two_users, m) for m in range(2)]
        assert model.noma_objective(alloc, two_users) == min(values)

    def test_bits(self):
        assert model.nats_to_bits(math.log(2.0)) == pytest.approx(1.0)
        np.testing.assert_allclose(model.nats_to_bits([0.0, 2 * math.log(2.0)]), [0.0, 2.0])


class TestAudit:

    def test_zero_allocation_is_feasible(self, two_users):
        report = model.audit_noma(NomaAllocation.zeros(two_users), two_users)
        assert report.feasible
        assert report.energy_slack == two_users.energy_budget
        assert report.power_slack == (2.0, 2.0)

    def test_deadline_violation(self):
        scenario = Scenario(gains=(1.0, 0.5), deadlines=(1.0, 2.0), energy_budget=10, power_budget=2)
        report = model.audit_noma(noma([[0.0], [0.0, 0.0]], [1.0, 1.5]), scenario)
        assert report.deadline_slack == (0.0, pytest.approx(-0.5))
        assert not report.feasible

    def test_power_caps_at_boundary(self, two_users):
        P_t = two_users.power_budget
        alloc = noma([[P_t / 2], [P_t / 2, P_t]], [1.0, 0.0])
        report = model.audit_noma(alloc, two_users, tolerance=0.0)
        assert report.power_slack == (0.0, 0.0)
        assert report.feasible

    def test_energy_uses_every_slot(self, two_users):
        alloc = noma([[1.0], [0.5, 2.0]], [1.0, 0.5])
        report = model.audit_noma(alloc, two_users)
        assert report.energy_slack == pytest.approx(4.0 - (1.0 + 0.5 + 0.5 * 2.0))

    def test_widening_tolerance_keeps_verdict(self, two_users):
        alloc = noma([[0.0], [0.0, 0.0]], [1.0, 1.0 + 1e-7])
        assert model.audit_noma(alloc, two_users, tolerance=1e-6).feasible
        assert model.audit_noma(alloc, two_users, tolerance=1e-3).feasible
        assert not model.audit_noma(alloc, two_users, tolerance=1e-9).feasible

    def test_oma_zero_allocation(self, two_users):
        assert model.audit_oma(OmaAllocation.zeros(two_users), two_users).feasible

    def test_oma_single_user_at_power_boundary(self):
        scenario = Scenario(gains=(1.0,), deadlines=(2.0,), energy_budget=4.0, power_budget=2.0)
        report = model.audit_oma(OmaAllocation([2.0], [2.0]), scenario, tolerance=0.0)
        assert report.feasible

    def test_oma_cumulative_deadlines(self, two_users):
        D = two_users.deadlines
        report = model.audit_oma(OmaAllocation([0.0, 0.0], [D[0], D[1] - D[0] + 0.1]), two_users)
        assert report.deadline_slack[1] == pytest.approx(-0.1)
        assert report.worst_slack == pytest.approx(-0.1)
        assert not report.feasible


class TestTimeline:

    def test_noma_slots_follow_each_other(self):
        alloc = noma([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]], [2.0, 0.25, 0.5])
        timeline = model.slot_timeline(alloc)
        assert [(s.start, s.end) for s in timeline] == [(0.0, 2.0), (2.0, 2.25), (2.25, 2.75)]
        assert [s.active_users for s in timeline] == [(0, 1, 2), (1, 2), (2,)]

    def test_oma_slots_are_dedicated(self):
        timeline = model.oma_timeline(OmaAllocation([1.0, 1.0], [0.5, 1.0]))
        assert [s.active_users for s in timeline] == [(0,), (1,)]
        assert timeline[1].end == pytest.approx(1.5)

    def test_allocation_to_dict(self, two_users):
        alloc = noma([[1.0], [0.5, 2.0]], [1.0, 0.5])
        data = model.allocation_to_dict(alloc, two_users)
        assert data['scheme'] == 'noma'
        assert data['powers'] == [[1.0], [0.5, 2.0]]
        assert data['offloaded_bits'][0] == pytest.approx(1.0)
