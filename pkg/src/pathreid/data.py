"""Cameras, sightings, dataset I/O, and the candidate-path catalog.

A dataset lives in a directory of three files (all UTF-8, one JSON object per
line for the .jsonl files):

  cameras.jsonl  {"id": int, "x_m": float, "y_m": float}
  states.jsonl   {"state_id": int, "camera_id": int, "timestamp_s": float,
                  "vehicle_id": int | null, "feature": [float, ...]}
  meta.json      {"feature_dim": int,
                  "splits": {"train": [ids], "test": [ids], "query": [ids]}}

Every state belongs to exactly one of train/test; query ids are a subset of
test. Validation failures raise DataError naming the file and line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

SPLITS = ("train", "test")


@dataclass(frozen=True)
class Camera:
    camera_id: int
    x_m: float
    y_m: float


def camera_distance(a: Camera, b: Camera) -> float:
    """Euclidean distance between two camera locations, in meters."""
    return math.hypot(a.x_m - b.x_m, a.y_m - b.y_m)


@dataclass(frozen=True, eq=False)
class Sighting:
    """One vehicle observation: camera, timestamp, appearance feature.

    vehicle_id is the identity label; present for train states, and kept on
    test states so evaluation can compute relevance and ground-truth paths.
    """

    state_id: int
    camera_id: int
    timestamp_s: float
    feature: np.ndarray
    vehicle_id: int | None = None


def _sighting_sort_key(s: Sighting) -> tuple[float, int]:
    return (s.timestamp_s, s.state_id)


class Dataset:
    """Immutable in-memory dataset with per-camera, per-split indexes."""

    def __init__(
        self,
        cameras: Sequence[Camera],
        states: Sequence[Sighting],
        splits: Mapping[str, Sequence[int]],
        feature_dim: int,
    ) -> None:
        self.feature_dim = int(feature_dim)
        self.cameras: dict[int, Camera] = {}
        for cam in cameras:
            if cam.camera_id in self.cameras:
                raise DataError(f"duplicate camera id {cam.camera_id}")
            if not (math.isfinite(cam.x_m) and math.isfinite(cam.y_m)):
                raise DataError(f"camera {cam.camera_id} has non-finite coordinates")
            self.cameras[cam.camera_id] = cam

        self.states: dict[int, Sighting] = {}
        for s in states:
            if s.state_id in self.states:
                raise DataError(f"duplicate state id {s.state_id}")
            if s.camera_id not in self.cameras:
                raise DataError(f"state {s.state_id} references unknown camera {s.camera_id}")
            if not math.isfinite(s.timestamp_s) or s.timestamp_s < 0:
                raise DataError(f"state {s.state_id} has invalid timestamp {s.timestamp_s}")
            if s.feature.shape != (self.feature_dim,):
                raise DataError(
                    f"state {s.state_id} has feature length {s.feature.shape[0] if s.feature.ndim == 1 else s.feature.shape},"
                    f" expected {self.feature_dim}"
                )
            if not np.all(np.isfinite(s.feature)):
                raise DataError(f"state {s.state_id} has non-finite feature values")
            self.states[s.state_id] = s

        self.split_of: dict[int, str] = {}
        self.splits: dict[str, tuple[int, ...]] = {}
        for split in SPLITS:
            ids = tuple(splits.get(split, ()))
            for sid in ids:
                if sid not in self.states:
                    raise DataError(f"split {split!r} references unknown state {sid}")
                if sid in self.split_of:
                    raise DataError(f"state {sid} assigned to more than one split")
                self.split_of[sid] = split
            self.splits[split] = ids
        unassigned = sorted(set(self.states) - set(self.split_of))
        if unassigned:
            raise DataError(f"states not assigned to any split: {unassigned[:5]}")

        query_ids = tuple(splits.get("query", ()))
        for sid in query_ids:
            if self.split_of.get(sid) != "test":
                raise DataError(f"query state {sid} is not in the test split")
        self.query_ids = query_ids

        self._by_camera: dict[tuple[int, str], tuple[Sighting, ...]] = {}
        for cam_id in self.cameras:
            for split in SPLITS:
                members = [
                    self.states[sid]
                    for sid in self.splits[split]
                    if self.states[sid].camera_id == cam_id
                ]
                members.sort(key=_sighting_sort_key)
                self._by_camera[(cam_id, split)] = tuple(members)

    def states_at(self, camera_id: int, split: str) -> tuple[Sighting, ...]:
        """States of a split at one camera, sorted by (timestamp, state_id)."""
        if camera_id not in self.cameras:
            raise DataError(f"unknown camera {camera_id}")
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return self._by_camera[(camera_id, split)]

    def split_states(self, split: str) -> list[Sighting]:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return [self.states[sid] for sid in self.splits[split]]

    def queries(self) -> list[Sighting]:
        return [self.states[sid] for sid in self.query_ids]

    def vehicle_states(self, vehicle_id: int, split: str | None = None) -> list[Sighting]:
        """All sightings of one vehicle, time-sorted; optionally one split."""
        out = [
            s
            for s in self.states.values()
            if s.vehicle_id == vehicle_id
            and (split is None or self.split_of[s.state_id] == split)
        ]
        out.sort(key=_sighting_sort_key)
        return out

    def vehicles_in_split(self, split: str) -> list[int]:
        seen = {
            s.vehicle_id for s in self.split_states(split) if s.vehicle_id is not None
        }
        return sorted(seen)

    def max_camera_distance(self) -> float:
        cams = list(self.cameras.values())
        best = 0.0
        for i, a in enumerate(cams):
            for b in cams[i + 1 :]:
                best = max(best, camera_distance(a, b))
        return best


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        yield lineno, obj


def _field(obj: dict, key: str, where: str):
    if key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    return obj[key]


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset directory."""
    root = Path(path)
    cameras = []
    for lineno, obj in _read_jsonl(root / "cameras.jsonl"):
        where = f"{root / 'cameras.jsonl'}:{lineno}"
        cameras.append(
            Camera(
                camera_id=int(_field(obj, "id", where)),
                x_m=float(_field(obj, "x_m", where)),
                y_m=float(_field(obj, "y_m", where)),
            )
        )

    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"{meta_path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid JSON: {exc.msg}") from exc
    feature_dim = int(_field(meta, "feature_dim", str(meta_path)))
    splits = _field(meta, "splits", str(meta_path))

    states = []
    for lineno, obj in _read_jsonl(root / "states.jsonl"):
        where = f"{root / 'states.jsonl'}:{lineno}"
        feature = np.asarray(_field(obj, "feature", where), dtype=np.float64)
        if feature.ndim != 1 or feature.shape[0] != feature_dim:
            raise DataError(
                f"{where}: feature has length {feature.size}, expected {feature_dim}"
            )
        vid = _field(obj, "vehicle_id", where)
        states.append(
            Sighting(
                state_id=int(_field(obj, "state_id", where)),
                camera_id=int(_field(obj, "camera_id", where)),
                timestamp_s=float(_field(obj, "timestamp_s", where)),
                feature=feature,
                vehicle_id=None if vid is None else int(vid),
            )
        )
    return Dataset(cameras, states, splits, feature_dim)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset directory in the format load_dataset reads.

    Serialization is deterministic: fixed key order, repr-based floats.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "cameras.jsonl", "w", encoding="utf-8") as fh:
        for cam_id in sorted(dataset.cameras):
            cam = dataset.cameras[cam_id]
            fh.write(
                json.dumps({"id": cam.camera_id, "x_m": cam.x_m, "y_m": cam.y_m}) + "\n"
            )
    with open(root / "states.jsonl", "w", encoding="utf-8") as fh:
        for sid in sorted(dataset.states):
            s = dataset.states[sid]
            fh.write(
                json.dumps(
                    {
                        "state_id": s.state_id,
                        "camera_id": s.camera_id,
                        "timestamp_s": s.timestamp_s,
                        "vehicle_id": s.vehicle_id,
                        "feature": [float(v) for v in s.feature],
                    }
                )
                + "\n"
            )
    meta = {
        "feature_dim": dataset.feature_dim,
        "splits": {
            "train": sorted(dataset.splits["train"]),
            "test": sorted(dataset.splits["test"]),
            "query": sorted(dataset.query_ids),
        },
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def collapse_consecutive(camera_ids: Sequence[int]) -> list[int]:
    """Drop consecutive duplicate cameras; non-consecutive revisits stay."""
    out: list[int] = []
    for cam in camera_ids:
        if not out or out[-1] != cam:
            out.append(cam)
    return out


class PathCatalog:
    """Candidate camera sequences between ordered camera pairs.

    Mined from training trajectories: every contiguous subsequence of every
    vehicle's collapsed camera sequence is a candidate path for its ordered
    endpoint pair. Entries are deduplicated and sorted (length, sequence) so
    lookup order is deterministic.
    """

    def __init__(self, paths: Mapping[tuple[int, int], Iterable[tuple[int, ...]]]):
        self._paths: dict[tuple[int, int], tuple[tuple[int, ...], ...]] = {}
        for pair, plist in paths.items():
            uniq = sorted(set(tuple(p) for p in plist), key=lambda p: (len(p), p))
            for p in uniq:
                if len(p) < 2:
                    raise DataError(f"catalog path {p} shorter than 2 cameras")
                if p[0] != pair[0] or p[-1] != pair[1]:
                    raise DataError(f"catalog path {p} does not match pair {pair}")
                if any(a == b for a, b in zip(p, p[1:])):
                    raise DataError(f"catalog path {p} repeats a camera consecutively")
            self._paths[pair] = tuple(uniq)

    def candidates(self, start_camera: int, end_camera: int) -> tuple[tuple[int, ...], ...]:
        return self._paths.get((start_camera, end_camera), ())

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self._paths)

    def edges(self) -> list[tuple[int, int]]:
        """All directed adjacent-camera pairs appearing on any candidate path."""
        seen: set[tuple[int, int]] = set()
        for plist in self._paths.values():
            for p in plist:
                seen.update(zip(p, p[1:]))
        return sorted(seen)

    def total_paths(self) -> int:
        return sum(len(v) for v in self._paths.values())


def build_catalog(dataset: Dataset, split: str = "train") -> PathCatalog:
    """Mine candidate spatial paths from the trajectories of one split."""
    vehicle_ids = dataset.vehicles_in_split(split)
    if not vehicle_ids:
        raise DataError(f"no labeled vehicles in split {split!r}; cannot build catalog")
    collected: dict[tuple[int, int], set[tuple[int, ...]]] = {}
    for vid in vehicle_ids:
        traj = dataset.vehicle_states(vid, split)
        cams = collapse_consecutive([s.camera_id for s in traj])
        n = len(cams)
        for i in range(n - 1):
            for j in range(i + 1, n):
                sub = tuple(cams[i : j + 1])
                collected.setdefault((sub[0], sub[-1]), set()).add(sub)
    return PathCatalog(collected)
