"""Deterministic synthetic camera network and vehicle trajectory generator.

Vehicles random-walk over a road graph whose nodes carry cameras; each hop
takes edge_length/speed seconds plus Gaussian dwell noise (clamped so
timestamps strictly increase). Appearance features are a per-vehicle unit
prototype plus Gaussian noise; "confuser" vehicles reuse another vehicle's
prototype rotated by a small fixed angle, emulating visually near-identical
cars. Everything is a pure function of the config, so a seed fixes the
dataset bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np

from .data import Camera, Dataset, Sighting
from .errors import ConfigError, DataError

MIN_TIME_STEP = 1e-3  # seconds; floor between consecutive sightings


@dataclass
class SynthConfig:
    seed: int = 7
    n_cameras: int = 12
    topology: str = "grid"  # "grid" or "random" (Delaunay over random points)
    edge_len_m: float = 300.0
    n_vehicles: int = 60
    feature_dim: int = 16
    appearance_noise: float = 0.05
    speed_mean: float = 12.0  # m/s
    speed_sigma: float = 2.0
    dwell_sigma: float = 4.0  # s
    confuser_fraction: float = 0.2
    confuser_offset: float = 0.12  # radians between paired prototypes
    sightings_per_vehicle: int = 8
    train_fraction: float = 0.7
    query_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.n_cameras < 2:
            raise ConfigError("n_cameras must be >= 2")
        if self.n_vehicles < 2:
            raise ConfigError("n_vehicles must be >= 2")
        if self.topology not in ("grid", "random"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        for name in ("appearance_noise", "speed_sigma", "dwell_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.confuser_fraction <= 1.0:
            raise ConfigError("confuser_fraction must be in [0, 1]")
        if self.sightings_per_vehicle < 2:
            raise ConfigError("sightings_per_vehicle must be >= 2")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must be in (0, 1]")
        if not 0.0 < self.query_fraction <= 1.0:
            raise ConfigError("query_fraction must be in (0, 1]")
        if self.speed_mean <= 0:
            raise ConfigError("speed_mean must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {unknown}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def gen_network(config: SynthConfig) -> tuple[list[Camera], list[tuple[int, int, float]]]:
    """Build a connected camera graph; returns (cameras, undirected edges).

    Edges are (camera_a, camera_b, length_m) with a < b.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_cameras
    if config.topology == "grid":
        cols = math.ceil(math.sqrt(n))
        positions = [
            (idx % cols * config.edge_len_m, idx // cols * config.edge_len_m)
            for idx in range(n)
        ]
        edges = []
        for idx in range(n):
            r, c = divmod(idx, cols)
            if c + 1 < cols and idx + 1 < n:
                edges.append((idx, idx + 1, config.edge_len_m))
            if idx + cols < n:
                edges.append((idx, idx + cols, config.edge_len_m))
    else:
        if n == 2:
            positions = [(0.0, 0.0), (config.edge_len_m, 0.0)]
            edges = [(0, 1, config.edge_len_m)]
        else:
            from scipy.spatial import Delaunay

            span = config.edge_len_m * math.sqrt(n)
            pts = rng.uniform(0.0, span, size=(n, 2))
            tri = Delaunay(pts)
            pair_set: set[tuple[int, int]] = set()
            for simplex in tri.simplices:
                for i in range(3):
                    a, b = int(simplex[i]), int(simplex[(i + 1) % 3])
                    pair_set.add((min(a, b), max(a, b)))
            positions = [(float(x), float(y)) for x, y in pts]
            edges = [
                (a, b, math.dist(positions[a], positions[b]))
                for a, b in sorted(pair_set)
            ]
    cameras = [Camera(camera_id=i, x_m=float(x), y_m=float(y)) for i, (x, y) in enumerate(positions)]
    return cameras, edges


def _prototypes(config: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[list[int]]]:
    """Unit-sphere prototypes plus prototype groups.

    round(fraction * n) vehicles (rounded down to even) form twin pairs: the
    second member's prototype is the first's rotated by confuser_offset
    radians. Returns (prototypes, groups) where each group is a twin pair or
    a singleton; groups drive the split so visually confusable vehicles stay
    in the same split.
    """
    n, d = config.n_vehicles, config.feature_dim
    n_conf = min(int(round(config.confuser_fraction * n)), n)
    n_conf -= n_conf % 2
    n_single = n - n_conf
    protos = np.zeros((n, d))
    for v in range(n_single):
        vec = rng.normal(size=d)
        protos[v] = vec / np.linalg.norm(vec)
    groups = [[v] for v in range(n_single)]
    for k in range(n_conf // 2):
        a = n_single + 2 * k
        b = a + 1
        base = rng.normal(size=d)
        base /= np.linalg.norm(base)
        tangent = rng.normal(size=d)
        tangent -= tangent @ base * base
        tangent /= np.linalg.norm(tangent)
        theta = config.confuser_offset
        protos[a] = base
        protos[b] = math.cos(theta) * base + math.sin(theta) * tangent
        groups.append([a, b])
    return protos, groups


def gen_trajectories(
    config: SynthConfig,
    cameras: list[Camera],
    edges: list[tuple[int, int, float]],
    return_groups: bool = False,
):
    """Random-walk trajectories over the road graph, one per vehicle.

    With return_groups=True also returns the prototype groups (twin pairs
    and singletons) used for the group-aware split.
    """
    rng = np.random.default_rng(config.seed + 1)
    neighbors: dict[int, list[tuple[int, float]]] = {c.camera_id: [] for c in cameras}
    for a, b, length in edges:
        neighbors[a].append((b, length))
        neighbors[b].append((a, length))
    for cam_id in neighbors:
        neighbors[cam_id].sort()
        if not neighbors[cam_id]:
            raise DataError(f"camera {cam_id} has no road edges")

    protos, groups = _prototypes(config, rng)
    sightings: list[Sighting] = []
    sid = 0
    for vid in range(config.n_vehicles):
        speed = max(0.5, float(rng.normal(config.speed_mean, config.speed_sigma)))
        cam = int(rng.integers(0, len(cameras)))
        t = float(rng.uniform(0.0, 300.0))
        for step in range(config.sightings_per_vehicle):
            noise = rng.normal(0.0, config.appearance_noise, size=config.feature_dim)
            sightings.append(
                Sighting(
                    state_id=sid,
                    camera_id=cam,
                    timestamp_s=t,
                    feature=protos[vid] + noise,
                    vehicle_id=vid,
                )
            )
            sid += 1
            if step == config.sightings_per_vehicle - 1:
                break
            options = neighbors[cam]
            nxt, length = options[int(rng.integers(0, len(options)))]
            dt = length / speed + float(rng.normal(0.0, config.dwell_sigma))
            t = max(t + MIN_TIME_STEP, t + dt)
            cam = nxt
    if return_groups:
        return sightings, groups
    return sightings


def split_dataset(
    sightings: list[Sighting],
    train_fraction: float,
    seed: int,
    query_fraction: float = 0.5,
    vehicle_groups: list[list[int]] | None = None,
) -> dict[str, list[int]]:
    """Partition vehicles (not states) into train/test and designate queries.

    vehicle_groups (e.g. twin pairs sharing a prototype) are kept within one
    split so visual confusers actually meet at evaluation time; the split is
    still identity-disjoint. Every query is a test state with at least one
    same-id state at a different camera in the test split.
    """
    rng = np.random.default_rng(seed)
    vehicle_ids = sorted({s.vehicle_id for s in sightings if s.vehicle_id is not None})
    if len(vehicle_ids) < 2:
        raise DataError("need at least 2 labeled vehicles to split")
    if vehicle_groups is None:
        groups = [[v] for v in vehicle_ids]
    else:
        groups = [sorted(g) for g in vehicle_groups]
        covered = sorted(v for g in groups for v in g)
        if covered != vehicle_ids:
            raise DataError("vehicle_groups must partition the vehicle ids")
    order = [groups[i] for i in rng.permutation(len(groups))]
    n_train = int(round(train_fraction * len(vehicle_ids)))
    n_train = max(1, n_train)
    if n_train >= len(vehicle_ids):
        raise DataError("train_fraction leaves an empty test split")
    train_vehicles: set[int] = set()
    for group in order:
        if len(train_vehicles) >= n_train:
            break
        train_vehicles.update(group)
    if len(train_vehicles) >= len(vehicle_ids):
        raise DataError("train_fraction leaves an empty test split")

    train_ids, test_ids = [], []
    for s in sorted(sightings, key=lambda s: s.state_id):
        (train_ids if s.vehicle_id in train_vehicles else test_ids).append(s.state_id)

    by_id = {s.state_id: s for s in sightings}
    test_set = set(test_ids)
    candidates = []
    for sid in test_ids:
        s = by_id[sid]
        has_gt = any(
            other.state_id != sid
            and other.state_id in test_set
            and other.vehicle_id == s.vehicle_id
            and other.camera_id != s.camera_id
            for other in sightings
        )
        if has_gt:
            candidates.append(sid)
    if not candidates:
        raise DataError("no test state has cross-camera ground truth; cannot pick queries")
    k = max(1, int(round(query_fraction * len(candidates))))
    chosen = rng.choice(np.array(candidates), size=min(k, len(candidates)), replace=False)
    return {"train": train_ids, "test": test_ids, "query": sorted(int(x) for x in chosen)}


def generate_dataset(config: SynthConfig) -> Dataset:
    """Full synthetic dataset: network + trajectories + splits, validated."""
    cameras, edges = gen_network(config)
    sightings, groups = gen_trajectories(config, cameras, edges, return_groups=True)
    splits = split_dataset(
        sightings,
        config.train_fraction,
        config.seed + 2,
        config.query_fraction,
        vehicle_groups=groups,
    )
    return Dataset(cameras, sightings, splits, config.feature_dim)


def load_synth_config(path: str | Path) -> SynthConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return SynthConfig.from_dict(raw)
