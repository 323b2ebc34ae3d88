import json

import numpy as np
import pytest

from pathreid.data import (
    Camera,
    Dataset,
    Sighting,
    build_catalog,
    camera_distance,
    collapse_consecutive,
    load_dataset,
    write_dataset,
)
from pathreid.errors import DataError


def _sight(sid, cam, t, vid=0, dim=2):
    return Sighting(
        state_id=sid, camera_id=cam, timestamp_s=t,
        feature=np.zeros(dim), vehicle_id=vid,
    )


def _world(states, n_cameras=4, dim=2, test_states=()):
    cameras = [Camera(i, float(100 * i), 0.0) for i in range(n_cameras)]
    test_ids = [s.state_id for s in states if s.state_id in test_states]
    train_ids = [s.state_id for s in states if s.state_id not in test_states]
    return Dataset(cameras, states, {"train": train_ids, "test": test_ids}, dim)


class TestDataset:
    def test_minimal_loads(self):
        ds = _world([_sight(0, 0, 1.0)], n_cameras=1)
        assert len(ds.states) == 1

    def test_unknown_camera_named(self):
        with pytest.raises(DataError, match="state 7 references unknown camera"):
            _world([_sight(7, 99, 1.0)])

    def test_inconsistent_feature_dim(self):
        bad = Sighting(1, 0, 0.0, np.zeros(3), 0)
        with pytest.raises(DataError, match="feature length"):
            _world([_sight(0, 0, 0.0), bad])

    def test_duplicate_state_id(self):
        with pytest.raises(DataError, match="duplicate state id"):
            _world([_sight(0, 0, 0.0), _sight(0, 1, 1.0)])

    def test_states_at_empty_camera(self):
        ds = _world([_sight(0, 0, 1.0)])
        assert ds.states_at(3, "train") == ()

    def test_states_at_sorts_by_time(self):
        ds = _world([_sight(0, 0, 5.0), _sight(1, 0, 1.0), _sight(2, 0, 3.0)])
        assert [s.state_id for s in ds.states_at(0, "train")] == [1, 2, 0]

    def test_states_at_ties_by_state_id(self):
        ds = _world([_sight(5, 0, 2.0), _sight(3, 0, 2.0), _sight(4, 0, 2.0)])
        assert [s.state_id for s in ds.states_at(0, "train")] == [3, 4, 5]

    def test_unknown_camera_query(self):
        ds = _world([_sight(0, 0, 1.0)])
        with pytest.raises(DataError):
            ds.states_at(42, "train")

    def test_query_must_be_test(self):
        cameras = [Camera(0, 0.0, 0.0)]
        states = [_sight(0, 0, 1.0)]
        with pytest.raises(DataError, match="not in the test split"):
            Dataset(cameras, states, {"train": [0], "test": [], "query": [0]}, 2)


class TestRoundTrip:
    def test_write_then_load(self, tmp_path):
        states = [
            _sight(0, 0, 1.0, vid=1),
            _sight(1, 1, 2.0, vid=1),
            _sight(2, 2, 3.0, vid=2),
        ]
        ds = _world(states, test_states={2})
        write_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert set(loaded.states) == {0, 1, 2}
        assert loaded.split_of[2] == "test"
        assert loaded.feature_dim == 2

    def test_load_reports_line_numbers(self, tmp_path):
        root = tmp_path / "d"
        ds = _world([_sight(0, 0, 1.0)])
        write_dataset(ds, root)
        states_file = root / "states.jsonl"
        lines = states_file.read_text().splitlines()
        lines.append(json.dumps({"state_id": 1, "camera_id": 0, "timestamp_s": 2.0,
                                 "vehicle_id": 0, "feature": [1.0, 2.0, 3.0]}))
        states_file.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="states.jsonl:2"):
            load_dataset(root)

    def test_load_rejects_bad_json(self, tmp_path):
        root = tmp_path / "d"
        write_dataset(_world([_sight(0, 0, 1.0)]), root)
        (root / "cameras.jsonl").write_text('{"id": 0, "x_m": }\n')
        with pytest.raises(DataError, match="cameras.jsonl:1"):
            load_dataset(root)


class TestCatalog:
    def test_single_vehicle_subsequences(self):
        # one vehicle visiting cameras 0,1,2 in order
        ds = _world([_sight(0, 0, 1.0), _sight(1, 1, 2.0), _sight(2, 2, 3.0)])
        catalog = build_catalog(ds)
        assert catalog.candidates(0, 2) == ((0, 1, 2),)
        assert catalog.candidates(0, 1) == ((0, 1),)
        assert catalog.candidates(1, 2) == ((1, 2),)

    def test_two_routes_between_same_pair(self):
        # two vehicles: 0-1-3 and 0-2-3 -> two candidate paths for (0, 3)
        states = [
            _sight(0, 0, 1.0, vid=1), _sight(1, 1, 2.0, vid=1), _sight(2, 3, 3.0, vid=1),
            _sight(3, 0, 1.0, vid=2), _sight(4, 2, 2.0, vid=2), _sight(5, 3, 3.0, vid=2),
        ]
        catalog = build_catalog(_world(states))
        assert catalog.candidates(0, 3) == ((0, 1, 3), (0, 2, 3))

    def test_consecutive_duplicates_collapse(self):
        states = [_sight(0, 0, 1.0), _sight(1, 0, 2.0), _sight(2, 1, 3.0)]
        catalog = build_catalog(_world(states))
        assert catalog.candidates(0, 1) == ((0, 1),)
        assert catalog.candidates(0, 0) == ()

    def test_cycles_are_kept(self):
        # revisit of camera 0 after leaving it stays on the path
        states = [_sight(0, 0, 1.0), _sight(1, 1, 2.0), _sight(2, 0, 3.0), _sight(3, 2, 4.0)]
        catalog = build_catalog(_world(states))
        assert (0, 1, 0, 2) in catalog.candidates(0, 2)

    def test_closure_under_contiguous_subpaths(self):
        rng = np.random.default_rng(4)
        states = []
        sid = 0
        for vid in range(6):
            t = 0.0
            cam = int(rng.integers(0, 4))
            for _ in range(7):
                states.append(_sight(sid, cam, t, vid=vid))
                sid += 1
                t += float(rng.uniform(1, 10))
                cam = int((cam + rng.integers(1, 4)) % 4)
        catalog = build_catalog(_world(states))
        for pair in catalog.pairs():
            for path in catalog.candidates(*pair):
                for i in range(len(path) - 1):
                    for j in range(i + 1, len(path)):
                        sub = path[i : j + 1]
                        assert sub in catalog.candidates(sub[0], sub[-1])

    def test_deterministic_and_idempotent(self):
        states = [_sight(0, 0, 1.0), _sight(1, 1, 2.0), _sight(2, 2, 3.0)]
        ds = _world(states)
        c1, c2 = build_catalog(ds), build_catalog(ds)
        assert c1.pairs() == c2.pairs()
        for pair in c1.pairs():
            assert c1.candidates(*pair) == c2.candidates(*pair)

    def test_empty_training_set_rejected(self):
        ds = _world([_sight(0, 0, 1.0)], test_states={0})
        with pytest.raises(DataError):
            build_catalog(ds)


def test_collapse_consecutive():
    assert collapse_consecutive([1, 1, 2, 2, 2, 1]) == [1, 2, 1]
    assert collapse_consecutive([]) == []


def test_camera_distance_345():
    assert camera_distance(Camera(0, 0.0, 0.0), Camera(1, 3.0, 4.0)) == 5.0
