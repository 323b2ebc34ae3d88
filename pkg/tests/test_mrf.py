import math

import numpy as np
import pytest

from helpers import random_chain_instance, sight

from pathreid.data import PathCatalog
from pathreid.mrf import (
    ChainAssignment,
    PathProposal,
    ProposalEngine,
    TablePotentials,
    batch_propose,
    brute_force_oracle,
    empirical_average,
    max_sum,
    propose,
)


def _table(path, states_by_cam, values):
    return TablePotentials(states_by_cam, values)


class TestMaxSum:
    def test_adjacent_cameras_empty_dp(self):
        p, q = sight(0, 0, 1.0), sight(1, 1, 2.0)
        pots = _table((0, 1), {0: [p], 1: [q]}, {(0, 1): 0.6})
        result = max_sum((0, 1), p, q, pots)
        assert result.state_ids == (0, 1)
        assert result.edge_potentials == (0.6,)
        assert result.log_score == pytest.approx(math.log(0.6))

    def test_three_cameras_picks_stronger_product(self):
        # psi(p,s1)*psi(s1,q) = 0.72 beats psi(p,s2)*psi(s2,q) = 0.14
        p, q = sight(0, 0, 1.0), sight(3, 2, 10.0)
        s1, s2 = sight(1, 1, 5.0), sight(2, 1, 6.0)
        pots = _table(
            (0, 1, 2),
            {0: [p], 1: [s1, s2], 2: [q]},
            {(0, 1): 0.9, (1, 3): 0.8, (0, 2): 0.2, (2, 3): 0.7},
        )
        result = max_sum((0, 1, 2), p, q, pots)
        assert result.state_ids == (0, 1, 3)
        assert result.edge_potentials == (0.9, 0.8)

    def test_time_violation_is_infeasible(self):
        p, q = sight(0, 0, 1.0), sight(2, 2, 5.0)
        late = sight(1, 1, 9.0)  # after the end state
        pots = _table(
            (0, 1, 2), {0: [p], 1: [late], 2: [q]}, {(0, 1): 0.9, (1, 2): 0.9}
        )
        assert max_sum((0, 1, 2), p, q, pots) is None

    def test_endpoint_order_infeasible_adjacent(self):
        p, q = sight(0, 0, 5.0), sight(1, 1, 1.0)
        pots = _table((0, 1), {0: [p], 1: [q]}, {(0, 1): 0.9})
        assert max_sum((0, 1), p, q, pots) is None

    def test_wrong_endpoint_camera_rejected(self):
        p, q = sight(0, 0, 1.0), sight(1, 1, 2.0)
        pots = _table((0, 1), {0: [p], 1: [q]}, {(0, 1): 0.9})
        with pytest.raises(ValueError, match="path starts at"):
            max_sum((2, 1), p, q, pots)

    def test_empty_middle_camera_infeasible(self):
        p, q = sight(0, 0, 1.0), sight(1, 2, 9.0)
        pots = _table((0, 1, 2), {0: [p], 1: [], 2: [q]}, {})
        assert max_sum((0, 1, 2), p, q, pots) is None

    def test_feasibility_threads_through_intermediates(self):
        # s_early can only pair with p; s_late only reaches q. The best
        # "local" edges are time-inconsistent, so DP must settle for the
        # consistent weaker combination.
        p, q = sight(0, 0, 5.0), sight(4, 3, 10.0)
        a_early = sight(1, 1, 3.0)   # before p: infeasible as successor of p
        a_ok = sight(2, 1, 6.0)
        b_ok = sight(3, 2, 8.0)
        pots = _table(
            (0, 1, 2, 3),
            {0: [p], 1: [a_early, a_ok], 2: [b_ok], 3: [q]},
            {
                (0, 1): 0.99, (0, 2): 0.3,
                (1, 3): 0.99, (2, 3): 0.8,
                (3, 4): 0.9,
            },
        )
        result = max_sum((0, 1, 2, 3), p, q, pots)
        assert result.state_ids == (0, 2, 3, 4)


class TestBruteForceOracle:
    def test_unique_assignment_when_k1(self):
        p, q = sight(0, 0, 1.0), sight(2, 2, 9.0)
        mid = sight(1, 1, 4.0)
        pots = _table((0, 1, 2), {0: [p], 1: [mid], 2: [q]}, {(0, 1): 0.4, (1, 2): 0.5})
        result = brute_force_oracle((0, 1, 2), p, q, pots)
        assert result.state_ids == (0, 1, 2)

    def test_equal_potentials_tie_break_lexicographic(self):
        p, q = sight(0, 0, 1.0), sight(9, 2, 9.0)
        mids = [sight(7, 1, 5.0), sight(3, 1, 5.0), sight(5, 1, 5.0)]
        values = {}
        for m in mids:
            values[(0, m.state_id)] = 0.5
            values[(m.state_id, 9)] = 0.5
        pots = _table((0, 1, 2), {0: [p], 1: mids, 2: [q]}, values)
        oracle = brute_force_oracle((0, 1, 2), p, q, pots)
        dp = max_sum((0, 1, 2), p, q, pots)
        assert oracle.state_ids == (0, 3, 9)
        assert dp.state_ids == (0, 3, 9)

    def test_cap_enforced(self):
        p, q = sight(0, 0, 1.0), sight(100, 2, 9.0)
        mids = [sight(10 + i, 1, 5.0) for i in range(4)]
        values = {}
        for m in mids:
            values[(0, m.state_id)] = 0.5
            values[(m.state_id, 100)] = 0.5
        pots = _table((0, 1, 2), {0: [p], 1: mids, 2: [q]}, values)
        with pytest.raises(ValueError, match="cap exceeded"):
            brute_force_oracle((0, 1, 2), p, q, pots, cap=3)

    def test_dp_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(20)
        feasible_seen = infeasible_seen = 0
        for _ in range(250):
            path, p, q, pots, _ = random_chain_instance(rng)
            dp = max_sum(path, p, q, pots)
            oracle = brute_force_oracle(path, p, q, pots)
            if oracle is None:
                infeasible_seen += 1
                assert dp is None
            else:
                feasible_seen += 1
                assert dp is not None
                assert dp.state_ids == oracle.state_ids
                denom = max(1.0, abs(dp.log_score), abs(oracle.log_score))
                assert abs(dp.log_score - oracle.log_score) / denom < 1e-12
        assert feasible_seen > 50 and infeasible_seen > 20

    def test_monotone_in_optimal_edge(self):
        rng = np.random.default_rng(33)
        checked = 0
        while checked < 40:
            path, p, q, pots, values = random_chain_instance(rng)
            base = max_sum(path, p, q, pots)
            if base is None:
                continue
            edge_pick = int(rng.integers(0, len(base.edge_potentials)))
            key = (base.state_ids[edge_pick], base.state_ids[edge_pick + 1])
            old = values[key]
            if old > 0.9:
                continue
            bumped = dict(values)
            bumped[key] = old + (1.0 - old) * 0.5
            states_by_cam = {cam: list(pots.states(cam)) for cam in path}
            pots2 = TablePotentials(states_by_cam, bumped)
            again = max_sum(path, p, q, pots2)
            assert again.state_ids == base.state_ids
            checked += 1


class TestEmpiricalAverage:
    def test_mean(self):
        asg = ChainAssignment((0, 1, 2), (0, 1, 2), (0.9, 0.8), math.log(0.72))
        assert empirical_average(asg) == pytest.approx(0.85)

    def test_length_invariant_when_edges_equal(self):
        for n_edges in (1, 3, 7):
            asg = ChainAssignment(
                tuple(range(n_edges + 1)),
                tuple(range(n_edges + 1)),
                (0.37,) * n_edges,
                n_edges * math.log(0.37),
            )
            assert empirical_average(asg) == pytest.approx(0.37)

    def test_infeasible_rejected(self):
        with pytest.raises(ValueError):
            empirical_average(None)

    def test_longer_invalid_path_outscores_shorter_valid(self):
        # averaged potential 0.946 on the longer identity-inconsistent chain
        # beats 0.916 on the shorter consistent one
        long_edges = (0.95, 0.95, 0.938)
        short_edges = (0.92, 0.912)
        s_long = float(np.mean(long_edges))
        s_short = float(np.mean(short_edges))
        assert s_long == pytest.approx(0.946)
        assert s_short == pytest.approx(0.916)
        assert s_long > s_short


def _propose_world():
    """Cameras 0..3; pair (0, 2) has a short and a long candidate path."""
    p = sight(0, 0, 0.0)
    q = sight(9, 2, 30.0)
    mid_b = sight(1, 1, 10.0)
    mid_d = sight(2, 3, 8.0)
    mid_b2 = sight(3, 1, 20.0)
    states = {0: [p], 1: [mid_b, mid_b2], 2: [q], 3: [mid_d]}
    values = {
        (0, 1): 0.92,   # p -> mid_b   (short path first hop)
        (0, 3): 0.5,    # p -> mid_b2
        (1, 9): 0.912,  # mid_b -> q   (short path second hop)
        (3, 9): 0.938,  # mid_b2 -> q  (long path last hop)
        (0, 2): 0.95,   # p -> mid_d   (long path first hop)
        (2, 1): 0.2,    # mid_d -> mid_b
        (2, 3): 0.95,   # mid_d -> mid_b2 (long path middle hop)
    }
    catalog = PathCatalog({(0, 2): [(0, 1, 2), (0, 3, 1, 2)]})
    pots = TablePotentials(states, values)
    return p, q, catalog, pots


class TestPropose:
    def test_single_candidate(self):
        p = sight(0, 0, 0.0)
        q = sight(2, 1, 5.0)
        catalog = PathCatalog({(0, 1): [(0, 1)]})
        pots = TablePotentials({0: [p], 1: [q]}, {(0, 2): 0.7})
        prop = propose(p, q, catalog, pots)
        assert prop.feasible
        assert prop.cameras == (0, 1)
        assert prop.mean_potential == pytest.approx(0.7)

    def test_longer_path_with_higher_average_wins(self):
        p, q, catalog, pots = _propose_world()
        prop = propose(p, q, catalog, pots)
        assert prop.feasible
        assert prop.cameras == (0, 3, 1, 2)
        assert prop.mean_potential == pytest.approx((0.95 + 0.95 + 0.938) / 3)
        # the short path is feasible too, but averages lower
        short = max_sum((0, 1, 2), p, q, pots)
        assert empirical_average(short) < prop.mean_potential

    def test_all_candidates_infeasible(self):
        p = sight(0, 0, 9.0)
        q = sight(2, 2, 1.0)  # ends before it starts
        mid = sight(1, 1, 5.0)
        catalog = PathCatalog({(0, 2): [(0, 1, 2)]})
        pots = TablePotentials({0: [p], 1: [mid], 2: [q]}, {(0, 1): 0.9, (1, 2): 0.9})
        prop = propose(p, q, catalog, pots)
        assert not prop.feasible
        assert prop.cameras is None

    def test_no_catalog_entry(self):
        p, q = sight(0, 0, 0.0), sight(1, 5, 2.0)
        catalog = PathCatalog({})
        pots = TablePotentials({0: [p], 5: [q]}, {})
        prop = propose(p, q, catalog, pots)
        assert not prop.feasible

    def test_proposal_timestamps_non_decreasing(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            path, p, q, pots, _ = random_chain_instance(rng)
            catalog = PathCatalog({(path[0], path[-1]): [path]})
            prop = propose(p, q, catalog, pots)
            if prop.feasible:
                states = [
                    next(s for s in pots.states(cam) if s.state_id == sid)
                    for cam, sid in zip(prop.cameras, prop.state_ids)
                ]
                times = [s.timestamp_s for s in states]
                assert all(a <= b for a, b in zip(times, times[1:]))


def _batch_world(seed=0):
    """Multi-path world with enough states for batch tests."""
    rng = np.random.default_rng(seed)
    states_by_cam = {}
    sid = 0
    for cam in range(4):
        states_by_cam[cam] = [
            sight(sid + i, cam, float(rng.uniform(0, 100))) for i in range(5)
        ]
        sid += 5
    values = {}
    for cam_a in range(4):
        for cam_b in range(4):
            if cam_a == cam_b:
                continue
            for sa in states_by_cam[cam_a]:
                for sb in states_by_cam[cam_b]:
                    values[(sa.state_id, sb.state_id)] = float(rng.uniform(0.05, 0.95))
    catalog = PathCatalog(
        {
            (0, 3): [(0, 1, 3), (0, 2, 3), (0, 1, 2, 3)],
            (0, 2): [(0, 1, 2)],
            (1, 3): [(1, 2, 3)],
        }
    )
    return states_by_cam, values, catalog


class TestBatchPropose:
    def test_matches_per_pair_calls(self):
        states_by_cam, values, catalog = _batch_world()
        rng = np.random.default_rng(8)
        pairs = []
        for _ in range(200):
            start_cam, end_cam = [(0, 3), (0, 2), (1, 3)][int(rng.integers(0, 3))]
            p = states_by_cam[start_cam][int(rng.integers(0, 5))]
            q = states_by_cam[end_cam][int(rng.integers(0, 5))]
            pairs.append((p, q))
        shared = TablePotentials(states_by_cam, values)
        batch = batch_propose(pairs, catalog, shared)
        for (p, q), got in zip(pairs, batch):
            fresh = TablePotentials(states_by_cam, values)
            assert propose(p, q, catalog, fresh) == got

    def test_counter_independent_of_pair_count(self):
        states_by_cam, values, catalog = _batch_world()
        one = TablePotentials(states_by_cam, values)
        p = states_by_cam[0][0]
        q = states_by_cam[3][0]
        batch_propose([(p, q)], catalog, one)

        many = TablePotentials(states_by_cam, values)
        pairs = [(a, b) for a in states_by_cam[0] for b in states_by_cam[3]] * 4
        batch_propose(pairs, catalog, many)
        assert one.evaluations == many.evaluations

    def test_counter_bounded_by_edge_sum(self):
        states_by_cam, values, catalog = _batch_world()
        shared = TablePotentials(states_by_cam, values)
        pairs = [
            (a, b)
            for a in states_by_cam[0]
            for b in states_by_cam[3] + states_by_cam[2]
        ]
        batch_propose(pairs, catalog, shared)
        bound = sum(
            len(states_by_cam[a]) * len(states_by_cam[b]) for a, b in catalog.edges()
        )
        assert shared.evaluations <= bound

    def test_matrix_cache_hit_does_not_count(self):
        states_by_cam, values, _ = _batch_world()
        pots = TablePotentials(states_by_cam, values)
        pots.matrix(0, 1)
        before = pots.evaluations
        pots.matrix(0, 1)
        assert pots.evaluations == before
