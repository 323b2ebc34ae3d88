"""Shared builders for chain-inference test instances."""

import numpy as np

from pathreid.data import Sighting
from pathreid.mrf import TablePotentials


def sight(sid, cam, t, vid=None, dim=1):
    return Sighting(
        state_id=sid, camera_id=cam, timestamp_s=float(t),
        feature=np.zeros(dim), vehicle_id=vid,
    )


def chain_instance(path, states_by_cam, values):
    """TablePotentials over explicit per-camera states and an edge-value map."""
    return TablePotentials(states_by_cam, values)


def random_chain_instance(rng):
    """Random path instance: N in 2..5 cameras, K in 1..4 states each.

    Timestamps are drawn independently, so instances are a mix of feasible
    and infeasible; endpoint times always satisfy t_p <= t_q. Potentials are
    i.i.d. uniform in (0, 1).
    """
    n = int(rng.integers(2, 6))
    path = tuple(range(n))
    t_p = float(rng.uniform(0.0, 50.0))
    t_q = t_p + float(rng.uniform(0.0, 50.0))

    states_by_cam = {}
    sid = 0
    p = sight(sid, 0, t_p)
    sid += 1
    start_extras = [
        sight(sid + i, 0, float(rng.uniform(0, 100))) for i in range(int(rng.integers(0, 3)))
    ]
    sid += len(start_extras)
    states_by_cam[0] = [p, *start_extras]
    for cam in range(1, n - 1):
        k = int(rng.integers(1, 5))
        states_by_cam[cam] = [
            sight(sid + i, cam, float(rng.uniform(0.0, 100.0))) for i in range(k)
        ]
        sid += k
    q = sight(sid, n - 1, t_q)
    sid += 1
    end_extras = [
        sight(sid + i, n - 1, float(rng.uniform(0, 100))) for i in range(int(rng.integers(0, 3)))
    ]
    states_by_cam[n - 1] = [q, *end_extras]

    values = {}
    for cam_a, cam_b in zip(path, path[1:]):
        for sa in states_by_cam[cam_a]:
            for sb in states_by_cam[cam_b]:
                values[(sa.state_id, sb.state_id)] = float(rng.uniform(1e-6, 1.0 - 1e-6))
    return path, p, q, TablePotentials(states_by_cam, values), values
