"""Chain max-sum inference over camera trellises with time constraints.

Given a candidate camera sequence and two fixed endpoint sightings, the
engine assigns one sighting to every intermediate camera so the product of
edge potentials is maximal, subject to non-decreasing timestamps along the
chain. Accumulation happens in the log domain (potentials are clamped to
[1e-12, 1-1e-12] first) so long paths cannot underflow.

Tie-breaking is deterministic: among equal-value assignments the one with the
lowest state_id at the earliest camera where they differ wins. The brute-force
enumerator implements the identical contract independently and is the oracle
for the DP.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .data import PathCatalog, Sighting

LOG_CLAMP = 1e-12


class PotentialProvider(Protocol):
    """What the engine needs: per-camera states and per-edge potential tables."""

    def states(self, camera_id: int) -> Sequence[Sighting]: ...

    def matrix(self, cam_a: int, cam_b: int) -> np.ndarray: ...


@dataclass(frozen=True)
class ChainAssignment:
    """A feasible chain solution, endpoints included."""

    cameras: tuple[int, ...]
    state_ids: tuple[int, ...]
    edge_potentials: tuple[float, ...]
    log_score: float


@dataclass(frozen=True)
class PathProposal:
    """Outcome of proposing a path between two query sightings.

    When infeasible (no candidate path admits a time-monotone assignment, or
    the catalog has no entry for the camera pair) only the endpoint ids and
    the flag are populated.
    """

    start_id: int
    end_id: int
    feasible: bool
    cameras: tuple[int, ...] | None = None
    state_ids: tuple[int, ...] | None = None
    edge_potentials: tuple[float, ...] | None = None
    mean_potential: float | None = None


def _log_clamped(values: np.ndarray) -> np.ndarray:
    return np.log(np.clip(values, LOG_CLAMP, 1.0 - LOG_CLAMP))


def empirical_average(assignment: ChainAssignment | None) -> float:
    """Arithmetic mean of the edge potentials of a feasible assignment."""
    if assignment is None:
        raise ValueError("infeasible assignment has no empirical average")
    return float(np.mean(assignment.edge_potentials))


class TablePotentials:
    """Potential provider backed by explicit state lists and a value table.

    Used for hand-built instances and the randomized differential tests;
    mirrors the matrix/caching surface of the trained provider, including the
    per-entry evaluation counter.
    """

    def __init__(
        self,
        states_by_camera: dict[int, Sequence[Sighting]],
        values: dict[tuple[int, int], float],
    ) -> None:
        self._states = {
            cam: tuple(sorted(sts, key=lambda s: (s.timestamp_s, s.state_id)))
            for cam, sts in states_by_camera.items()
        }
        self._values = dict(values)
        self._matrices: dict[tuple[int, int], np.ndarray] = {}
        self.evaluations = 0

    def states(self, camera_id: int) -> tuple[Sighting, ...]:
        return self._states.get(camera_id, ())

    def matrix(self, cam_a: int, cam_b: int) -> np.ndarray:
        key = (cam_a, cam_b)
        cached = self._matrices.get(key)
        if cached is not None:
            return cached
        rows = self.states(cam_a)
        cols = self.states(cam_b)
        mat = np.zeros((len(rows), len(cols)))
        for i, sa in enumerate(rows):
            for j, sb in enumerate(cols):
                mat[i, j] = self._values[(sa.state_id, sb.state_id)]
        self._matrices[key] = mat
        self.evaluations += mat.size
        return mat


def _index_of(state: Sighting, camera_id: int, potentials: PotentialProvider) -> int:
    for i, s in enumerate(potentials.states(camera_id)):
        if s.state_id == state.state_id:
            return i
    raise ValueError(
        f"state {state.state_id} not present at camera {camera_id} in the provider split"
    )


def _check_endpoints(path: Sequence[int], p: Sighting, q: Sighting) -> tuple[int, ...]:
    path = tuple(path)
    if len(path) < 2:
        raise ValueError(f"path {path} has fewer than 2 cameras")
    if p.camera_id != path[0]:
        raise ValueError(f"start state {p.state_id} is at camera {p.camera_id}, path starts at {path[0]}")
    if q.camera_id != path[-1]:
        raise ValueError(f"end state {q.state_id} is at camera {q.camera_id}, path ends at {path[-1]}")
    return path


def _backward_messages(
    path: tuple[int, ...], q: Sighting, potentials: PotentialProvider
) -> list[np.ndarray]:
    """Best feasible suffix log-score per state at each intermediate camera.

    messages[i] aligns with potentials.states(path[i]) for i in 1..N-2 and
    already folds in the edge to the fixed end state q plus all timestamp
    constraints to the right. -inf marks states with no feasible suffix.
    """
    n = len(path)
    messages: list[np.ndarray] = [np.empty(0)] * n
    if n == 2:
        return messages
    q_idx = _index_of(q, path[-1], potentials)
    last = n - 2
    t_last = np.array([s.timestamp_s for s in potentials.states(path[last])])
    col = potentials.matrix(path[last], path[-1])[:, q_idx] if t_last.size else np.empty(0)
    messages[last] = np.where(
        t_last <= q.timestamp_s, _log_clamped(col) if col.size else col, -np.inf
    )
    for i in range(last - 1, 0, -1):
        t_here = np.array([s.timestamp_s for s in potentials.states(path[i])])
        t_next = np.array([s.timestamp_s for s in potentials.states(path[i + 1])])
        if t_here.size == 0 or t_next.size == 0:
            messages[i] = np.full(t_here.size, -np.inf)
            continue
        log_edge = _log_clamped(potentials.matrix(path[i], path[i + 1]))
        cand = np.where(
            t_here[:, None] <= t_next[None, :], log_edge + messages[i + 1][None, :], -np.inf
        )
        messages[i] = cand.max(axis=1)
    return messages


def _pick_min_id(states: Sequence[Sighting], cand: np.ndarray, best: float) -> int:
    """Index of the lowest-state_id entry achieving the best value."""
    winner = None
    for i in range(len(cand)):
        if cand[i] == best and (winner is None or states[i].state_id < states[winner].state_id):
            winner = i
    assert winner is not None
    return winner


def _select_forward(
    path: tuple[int, ...],
    p: Sighting,
    q: Sighting,
    potentials: PotentialProvider,
    messages: list[np.ndarray],
) -> ChainAssignment | None:
    n = len(path)
    p_idx = _index_of(p, path[0], potentials)
    q_idx = _index_of(q, path[-1], potentials)
    if n == 2:
        if p.timestamp_s > q.timestamp_s:
            return None
        value = float(potentials.matrix(path[0], path[1])[p_idx, q_idx])
        return ChainAssignment(
            cameras=path,
            state_ids=(p.state_id, q.state_id),
            edge_potentials=(value,),
            log_score=float(_log_clamped(np.array(value))),
        )

    chosen_idx: list[int] = []
    prev_state = p
    prev_idx = p_idx
    log_score = None
    for i in range(1, n - 1):
        states_i = potentials.states(path[i])
        if not states_i:
            return None
        t_i = np.array([s.timestamp_s for s in states_i])
        row = _log_clamped(potentials.matrix(path[i - 1], path[i])[prev_idx, :])
        cand = np.where(prev_state.timestamp_s <= t_i, row + messages[i], -np.inf)
        best = cand.max()
        if best == -np.inf:
            return None
        if log_score is None:
            log_score = float(best)
        idx = _pick_min_id(states_i, cand, best)
        chosen_idx.append(idx)
        prev_state = states_i[idx]
        prev_idx = idx

    state_ids = [p.state_id]
    edge_vals = []
    prev_idx = p_idx
    for i, idx in enumerate(chosen_idx, start=1):
        edge_vals.append(float(potentials.matrix(path[i - 1], path[i])[prev_idx, idx]))
        state_ids.append(potentials.states(path[i])[idx].state_id)
        prev_idx = idx
    edge_vals.append(float(potentials.matrix(path[-2], path[-1])[prev_idx, q_idx]))
    state_ids.append(q.state_id)
    return ChainAssignment(
        cameras=path,
        state_ids=tuple(state_ids),
        edge_potentials=tuple(edge_vals),
        log_score=float(log_score),
    )


def max_sum(
    path: Sequence[int], p: Sighting, q: Sighting, potentials: PotentialProvider
) -> ChainAssignment | None:
    """MAP assignment of intermediate states along one candidate path.

    Returns None when no timestamp-monotone assignment exists. The start
    state must sit on the first camera and the end state on the last one.
    """
    path = _check_endpoints(path, p, q)
    messages = _backward_messages(path, q, potentials)
    return _select_forward(path, p, q, potentials, messages)


def brute_force_oracle(
    path: Sequence[int],
    p: Sighting,
    q: Sighting,
    potentials: PotentialProvider,
    cap: int = 10**6,
) -> ChainAssignment | None:
    """Exhaustive enumeration with the same contract as max_sum.

    Independent of the DP: every combination of intermediate states is
    checked against the timestamp constraint and scored by summing clamped
    log potentials left to right.
    """
    path = _check_endpoints(path, p, q)
    inter = [potentials.states(c) for c in path[1:-1]]
    count = 1
    for states in inter:
        count *= len(states)
    if count > cap:
        raise ValueError(f"oracle cap exceeded: {count} > {cap} combinations")

    index_maps = []
    for cam in path:
        index_maps.append({s.state_id: i for i, s in enumerate(potentials.states(cam))})
    p_idx = _index_of(p, path[0], potentials)
    q_idx = _index_of(q, path[-1], potentials)

    best: tuple[float, tuple[int, ...], tuple[float, ...]] | None = None
    for combo in itertools.product(*inter):
        seq = (p, *combo, q)
        if any(a.timestamp_s > b.timestamp_s for a, b in zip(seq, seq[1:])):
            continue
        log_sum = 0.0
        edge_vals = []
        ok_idx = [p_idx] + [index_maps[i + 1][s.state_id] for i, s in enumerate(combo)] + [q_idx]
        for i in range(len(path) - 1):
            value = float(potentials.matrix(path[i], path[i + 1])[ok_idx[i], ok_idx[i + 1]])
            edge_vals.append(value)
            log_sum += float(_log_clamped(np.array(value)))
        ids = tuple(s.state_id for s in seq)
        if (
            best is None
            or log_sum > best[0]
            or (log_sum == best[0] and ids < best[1])
        ):
            best = (log_sum, ids, tuple(edge_vals))
    if best is None:
        return None
    return ChainAssignment(
        cameras=path, state_ids=best[1], edge_potentials=best[2], log_score=best[0]
    )


class ProposalEngine:
    """Proposal search over all candidate paths with cross-query reuse.

    Potential matrices are cached per edge by the provider; the backward DP
    message tables are cached here keyed by (path, end state), so queries
    sharing an end state and a candidate path pay for the DP once.
    """

    def __init__(self, catalog: PathCatalog, potentials: PotentialProvider) -> None:
        self.catalog = catalog
        self.potentials = potentials
        self._messages: dict[tuple[tuple[int, ...], int], list[np.ndarray]] = {}

    def _messages_for(self, path: tuple[int, ...], q: Sighting) -> list[np.ndarray]:
        key = (path, q.state_id)
        cached = self._messages.get(key)
        if cached is None:
            cached = _backward_messages(path, q, self.potentials)
            self._messages[key] = cached
        return cached

    def propose(self, p: Sighting, q: Sighting) -> PathProposal:
        """Best feasible proposal by empirical average across candidate paths.

        Ties break toward the shorter path, then the lexicographically
        smaller camera sequence.
        """
        best_key = None
        best: tuple[tuple[int, ...], ChainAssignment, float] | None = None
        for path in self.catalog.candidates(p.camera_id, q.camera_id):
            assignment = _select_forward(
                path, p, q, self.potentials, self._messages_for(path, q)
            )
            if assignment is None:
                continue
            s_value = empirical_average(assignment)
            key = (-s_value, len(path), path)
            if best_key is None or key < best_key:
                best_key = key
                best = (path, assignment, s_value)
        if best is None:
            return PathProposal(start_id=p.state_id, end_id=q.state_id, feasible=False)
        path, assignment, s_value = best
        return PathProposal(
            start_id=p.state_id,
            end_id=q.state_id,
            feasible=True,
            cameras=path,
            state_ids=assignment.state_ids,
            edge_potentials=assignment.edge_potentials,
            mean_potential=s_value,
        )

    def batch(self, pairs: Sequence[tuple[Sighting, Sighting]]) -> list[PathProposal]:
        return [self.propose(p, q) for p, q in pairs]


def propose(
    p: Sighting, q: Sighting, catalog: PathCatalog, potentials: PotentialProvider
) -> PathProposal:
    return ProposalEngine(catalog, potentials).propose(p, q)


def batch_propose(
    pairs: Sequence[tuple[Sighting, Sighting]],
    catalog: PathCatalog,
    potentials: PotentialProvider,
) -> list[PathProposal]:
    return ProposalEngine(catalog, potentials).batch(pairs)
