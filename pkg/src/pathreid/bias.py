"""Constructions demonstrating the length bias of the averaged edge potential.

Averaging edge potentials over a path dilutes a single weak edge on a long
chain, so an identity-inconsistent long path can out-score a fully consistent
short one. Each construction builds, on top of a trained world, a consistent
short chain (one vehicle, slightly noisy) and a longer chain that switches
identity once between two visually similar vehicles but keeps perfect travel
times. The trained path scorer should still prefer the consistent chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Camera, Dataset, PathCatalog, Sighting, camera_distance
from .errors import DataError
from .pathlstm import PathLstm
from .potential import PairPotentialNet


@dataclass(frozen=True)
class BiasCase:
    """One constructed comparison between a short and a long chain."""

    short_states: tuple[Sighting, ...]
    long_states: tuple[Sighting, ...]
    short_mean_potential: float
    long_mean_potential: float
    short_path_score: float
    long_path_score: float

    @property
    def bias_present(self) -> bool:
        return self.long_mean_potential > self.short_mean_potential

    @property
    def lstm_prefers_consistent(self) -> bool:
        return self.short_path_score > self.long_path_score


def _longest_catalog_path(catalog: PathCatalog, min_len: int) -> tuple[int, ...]:
    best: tuple[int, ...] | None = None
    for pair in catalog.pairs():
        for path in catalog.candidates(*pair):
            if best is None or len(path) > len(best):
                best = path
    if best is None or len(best) < min_len:
        raise DataError(f"catalog has no path with >= {min_len} cameras")
    return best


def _chain_sightings(
    cameras: dict[int, Camera],
    camera_path: tuple[int, ...],
    prototypes: list[np.ndarray],
    noise: float,
    speed: float,
    start_t: float,
    start_id: int,
    rng: np.random.Generator,
) -> list[Sighting]:
    """Sightings along a camera path; prototypes[i] supplies appearance i."""
    out = []
    t = start_t
    for i, cam in enumerate(camera_path):
        if i > 0:
            hop = camera_distance(cameras[camera_path[i - 1]], cameras[cam])
            t += hop / speed
        out.append(
            Sighting(
                state_id=start_id + i,
                camera_id=cam,
                timestamp_s=t,
                feature=prototypes[i] + rng.normal(0.0, noise, size=prototypes[i].shape),
                vehicle_id=None,
            )
        )
    return out


def _mean_edge_potential(
    net: PairPotentialNet, states: list[Sighting], cameras: dict[int, Camera]
) -> float:
    vals = [
        net.pair_potential(a, b, cameras) for a, b in zip(states, states[1:])
    ]
    return float(np.mean(vals))


def build_bias_case(
    dataset: Dataset,
    catalog: PathCatalog,
    net: PairPotentialNet,
    lstm: PathLstm,
    seed: int,
    speed: float = 12.0,
    switch_offset: float = 0.35,
    short_noise: float = 0.09,
    long_noise: float = 0.02,
) -> BiasCase:
    """Construct one short-consistent vs long-inconsistent comparison.

    The long chain reuses the longest mined camera path; its sightings follow
    one synthetic prototype up to the middle edge and a rotated twin after it
    (one identity switch), with exact mean travel times. The short chain is
    the long path's first three cameras with a single, noisier prototype.
    """
    feature_dim = dataset.feature_dim
    rng = np.random.default_rng(seed)
    long_path = _longest_catalog_path(catalog, min_len=4)
    short_path = long_path[:3]

    base = rng.normal(size=feature_dim)
    base /= np.linalg.norm(base)
    tangent = rng.normal(size=feature_dim)
    tangent -= tangent @ base * base
    tangent /= np.linalg.norm(tangent)
    twin = np.cos(switch_offset) * base + np.sin(switch_offset) * tangent

    switch_at = len(long_path) // 2
    long_protos = [base if i < switch_at else twin for i in range(len(long_path))]
    short_protos = [base] * len(short_path)

    next_id = max(dataset.states) + 1
    long_states = _chain_sightings(
        dataset.cameras, long_path, long_protos, long_noise, speed,
        start_t=0.0, start_id=next_id, rng=rng,
    )
    short_states = _chain_sightings(
        dataset.cameras, short_path, short_protos, short_noise, speed,
        start_t=0.0, start_id=next_id + len(long_states), rng=rng,
    )

    short_score, _ = lstm.forward_path(short_states, dataset.cameras)
    long_score, _ = lstm.forward_path(long_states, dataset.cameras)
    return BiasCase(
        short_states=tuple(short_states),
        long_states=tuple(long_states),
        short_mean_potential=_mean_edge_potential(net, short_states, dataset.cameras),
        long_mean_potential=_mean_edge_potential(net, long_states, dataset.cameras),
        short_path_score=float(short_score),
        long_path_score=float(long_score),
    )
