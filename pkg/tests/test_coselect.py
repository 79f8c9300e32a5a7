import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecoffload.coselect import (InfeasibleMatchingError, Matching,
                                 SelectionInstance, assignment_array,
                                 co_select, instance_from_estimates,
                                 matching_to_dict, server_selection_value,
                                 user_selection_value)


def make_instance(delay, energy=None, z_max=2, rho1=0.5, rho2=0.5):
    delay = np.asarray(delay, dtype=float)
    energy = np.zeros_like(delay) if energy is None else np.asarray(energy)
    return instance_from_estimates(delay, energy, z_max, rho1, rho2)


class TestSelectionValues:
    def test_user_value_is_weighted_sum(self):
        inst = make_instance([[1.7]], [[0.28]])
        assert user_selection_value(inst, 0, 0) == pytest.approx(0.99)

    def test_zero_estimates_give_zero(self):
        inst = make_instance([[0.0]], [[0.0]])
        assert user_selection_value(inst, 0, 0) == 0.0

    def test_user_value_monotone_in_each_estimate(self):
        base = user_selection_value(make_instance([[1.0]], [[1.0]]), 0, 0)
        assert user_selection_value(make_instance([[2.0]], [[1.0]]), 0, 0) > base
        assert user_selection_value(make_instance([[1.0]], [[2.0]]), 0, 0) > base

    def test_server_value_is_delay_estimate(self):
        inst = make_instance([[1.2, 0.9]], z_max=1)
        assert server_selection_value(inst, 0, 0) == 1.2
        assert server_selection_value(inst, 0, 1) == 0.9

    def test_server_ranking_follows_delay(self):
        inst = make_instance([[0.9], [1.3]])
        assert server_selection_value(inst, 0, 0) < server_selection_value(inst, 1, 0)


class TestCoSelect:
    def test_hand_traced_example(self):
        # user-side values: u0:(s0:1, s1:3), u1:(s0:2, s1:4), u2:(s0:5, s1:1)
        inst = make_instance([[1.0, 3.0], [2.0, 4.0], [5.0, 1.0]],
                             z_max=2, rho1=1.0, rho2=0.5)
        matching = co_select(inst, record_rounds=True)
        assert matching.assignment == {0: 0, 1: 0, 2: 1}
        assert matching.rosters == {0: [0, 1], 1: [2]}
        assert len(matching.rounds) == 1

    def test_single_server_takes_everyone_in_one_round(self):
        inst = make_instance([[1.0], [2.0], [0.5]], z_max=5)
        matching = co_select(inst, record_rounds=True)
        assert all(s == 0 for s in matching.assignment.values())
        assert len(matching.rounds) == 1

    def test_tie_break_is_id_ascending(self):
        # all estimates equal: server 0 preferred by every user, capacity 1
        inst = make_instance([[1.0, 1.0], [1.0, 1.0]], z_max=1)
        matching = co_select(inst)
        assert matching.assignment == {0: 0, 1: 1}

    def test_fallback_assigns_leftovers_locally(self):
        inst = make_instance([[1.0], [2.0], [3.0]], z_max=2)
        matching = co_select(inst)
        assert matching.assignment[0] == 0
        assert matching.assignment[1] == 0
        assert matching.assignment[2] is None

    def test_infeasible_without_fallback_raises(self):
        inst = make_instance([[1.0], [2.0], [3.0]], z_max=2)
        with pytest.raises(InfeasibleMatchingError):
            co_select(inst, allow_local_fallback=False)

    def test_assignment_array_marks_fallback(self):
        inst = make_instance([[1.0], [2.0], [3.0]], z_max=2)
        arr = assignment_array(co_select(inst), 3)
        assert list(arr) == [0, 0, -1]

    def test_matching_dict_roundtrip_fields(self):
        inst = make_instance([[1.0, 3.0], [2.0, 4.0]], z_max=1)
        doc = matching_to_dict(co_select(inst, record_rounds=True))
        assert set(doc) == {"assignment", "rosters", "rounds"}


def random_instance(rng, n, m, z_max):
    return instance_from_estimates(rng.uniform(0.1, 50.0, (n, m)),
                                   rng.uniform(0.0, 5.0, (n, m)), z_max, 0.5, 0.5)


class TestInvariants:
    def test_full_scale_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            inst = random_instance(rng, 48, 3, 16)
            matching = co_select(inst, record_rounds=True)
            assert len(matching.rounds) <= 48
            assigned = [u for u, s in matching.assignment.items() if s is not None]
            assert sorted(assigned) == list(range(48))
            for roster in matching.rosters.values():
                assert len(roster) <= 16

    @given(st.integers(2, 12), st.integers(1, 4), st.integers(1, 5),
           st.integers(0, 10_000))
    @settings(max_examples=120, deadline=None)
    def test_random_instances_satisfy_matching_invariants(self, n, m, z_max, seed):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng, n, m, z_max)
        matching = co_select(inst, record_rounds=True)

        # each user appears in at most one roster, and rosters mirror assignment
        seen = set()
        for server, roster in matching.rosters.items():
            assert len(roster) <= z_max
            for u in roster:
                assert u not in seen
                seen.add(u)
                assert matching.assignment[u] == server
        unassigned = {u for u, s in matching.assignment.items() if s is None}
        assert seen | unassigned == set(range(n))

        # application direction: each application goes to the user's best
        # (lowest user-side value) server among those open in that round
        for log in matching.rounds:
            for user, applied in log.applications.items():
                best = min(log.open_servers,
                           key=lambda s: (user_selection_value(inst, user, s), s))
                assert applied == best

        # acceptance order: a server never rejects someone it values strictly
        # less than an accepted applicant of the same round
        for log in matching.rounds:
            for user in log.rejected:
                server = log.applications[user]
                rejected_value = server_selection_value(inst, user, server)
                for other, accepted_server in log.accepted.items():
                    if accepted_server != server:
                        continue
                    accepted_value = server_selection_value(inst, other, server)
                    assert (accepted_value, other) < (rejected_value, user)

    def test_termination_bound_respected(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n, m = int(rng.integers(2, 30)), int(rng.integers(1, 4))
            z_max = int(rng.integers(1, 6))
            matching = co_select(random_instance(rng, n, m, z_max),
                                 record_rounds=True)
            assert len(matching.rounds) <= n * m

    def test_determinism(self):
        rng = np.random.default_rng(1)
        inst = random_instance(rng, 20, 3, 4)
        a = co_select(inst)
        b = co_select(inst)
        assert a.assignment == b.assignment
        assert a.rosters == b.rosters


class TestInstanceValidation:
    def test_negative_estimates_rejected(self):
        with pytest.raises(ValueError):
            make_instance([[-1.0]])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SelectionInstance(user_ids=(0, 1), server_ids=(0,),
                              delay_est=np.ones((1, 1)),
                              energy_est=np.ones((1, 1)),
                              z_max=1, rho1=0.5, rho2=0.5)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            SelectionInstance(user_ids=(0, 0), server_ids=(0,),
                              delay_est=np.ones((2, 1)),
                              energy_est=np.ones((2, 1)),
                              z_max=1, rho1=0.5, rho2=0.5)
