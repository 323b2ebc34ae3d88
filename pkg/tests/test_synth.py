import numpy as np
import pytest

from pathreid.data import load_dataset, write_dataset
from pathreid.errors import ConfigError, DataError
from pathreid.synth import (
    SynthConfig,
    gen_network,
    gen_trajectories,
    generate_dataset,
    split_dataset,
)


def _cfg(**kw):
    base = dict(seed=3, n_cameras=9, n_vehicles=10, feature_dim=6,
                sightings_per_vehicle=5)
    base.update(kw)
    return SynthConfig(**base)


class TestNetwork:
    def test_two_cameras_single_edge(self):
        cameras, edges = gen_network(_cfg(n_cameras=2))
        assert len(cameras) == 2
        assert len(edges) == 1

    def test_grid_3x3(self):
        cameras, edges = gen_network(_cfg(n_cameras=9))
        assert len(cameras) == 9
        assert len(edges) == 12

    def test_same_seed_same_network(self):
        a = gen_network(_cfg(topology="random"))
        b = gen_network(_cfg(topology="random"))
        assert [(c.x_m, c.y_m) for c in a[0]] == [(c.x_m, c.y_m) for c in b[0]]
        assert a[1] == b[1]

    def test_random_topology_connected(self):
        cameras, edges = gen_network(_cfg(topology="random", n_cameras=15))
        adj = {c.camera_id: set() for c in cameras}
        for a, b, _ in edges:
            adj[a].add(b)
            adj[b].add(a)
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = frontier.pop()
            for m in adj[nxt]:
                if m not in seen:
                    seen.add(m)
                    frontier.append(m)
        assert seen == set(adj)


class TestTrajectories:
    def test_noiseless_limit(self):
        cfg = _cfg(appearance_noise=0.0, dwell_sigma=0.0, speed_sigma=0.0)
        cameras, edges = gen_network(cfg)
        states = gen_trajectories(cfg, cameras, edges)
        lengths = {(a, b): l for a, b, l in edges}
        lengths.update({(b, a): l for a, b, l in edges})
        by_vid = {}
        for s in states:
            by_vid.setdefault(s.vehicle_id, []).append(s)
        for veh in by_vid.values():
            feats = np.stack([s.feature for s in veh])
            assert np.allclose(feats, feats[0])
            for a, b in zip(veh, veh[1:]):
                hop = lengths[(a.camera_id, b.camera_id)]
                assert b.timestamp_s - a.timestamp_s == pytest.approx(
                    hop / cfg.speed_mean, rel=1e-12
                )

    def test_timestamps_strictly_increase(self):
        cfg = _cfg(dwell_sigma=50.0)  # big noise to stress the clamp
        cameras, edges = gen_network(cfg)
        states = gen_trajectories(cfg, cameras, edges)
        by_vid = {}
        for s in states:
            by_vid.setdefault(s.vehicle_id, []).append(s)
        for veh in by_vid.values():
            times = [s.timestamp_s for s in veh]
            assert all(t2 > t1 for t1, t2 in zip(times, times[1:]))

    def test_same_seed_identical_dataset_bytes(self, tmp_path):
        cfg = _cfg()
        write_dataset(generate_dataset(cfg), tmp_path / "a")
        write_dataset(generate_dataset(cfg), tmp_path / "b")
        for name in ("cameras.jsonl", "states.jsonl", "meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_confuser_twins_sit_at_fixed_angle(self):
        cfg = _cfg(confuser_fraction=0.4, appearance_noise=0.0, confuser_offset=0.1)
        cameras, edges = gen_network(cfg)
        states, groups = gen_trajectories(cfg, cameras, edges, return_groups=True)
        protos = {}
        for s in states:
            protos.setdefault(s.vehicle_id, s.feature)
        twin_pairs = [g for g in groups if len(g) == 2]
        assert len(twin_pairs) == round(0.4 * cfg.n_vehicles) // 2
        for a, b in twin_pairs:
            cos = float(
                protos[a] @ protos[b]
                / (np.linalg.norm(protos[a]) * np.linalg.norm(protos[b]))
            )
            assert cos == pytest.approx(np.cos(0.1), abs=1e-9)

    def test_twin_pairs_stay_in_one_split(self):
        ds = generate_dataset(_cfg(confuser_fraction=0.5, n_vehicles=12))
        cfg = _cfg(confuser_fraction=0.5, n_vehicles=12)
        cameras, edges = gen_network(cfg)
        _, groups = gen_trajectories(cfg, cameras, edges, return_groups=True)
        split_of_vehicle = {}
        for sid, split in ds.split_of.items():
            split_of_vehicle[ds.states[sid].vehicle_id] = split
        for g in groups:
            assert len({split_of_vehicle[v] for v in g}) == 1


class TestSplit:
    def test_identity_disjoint(self):
        ds = generate_dataset(_cfg())
        train_vids = {ds.states[sid].vehicle_id for sid in ds.splits["train"]}
        test_vids = {ds.states[sid].vehicle_id for sid in ds.splits["test"]}
        assert not train_vids & test_vids

    def test_full_train_fraction_rejected(self):
        cfg = _cfg()
        cameras, edges = gen_network(cfg)
        states = gen_trajectories(cfg, cameras, edges)
        with pytest.raises(DataError):
            split_dataset(states, train_fraction=1.0, seed=0)

    def test_every_query_has_cross_camera_truth(self):
        ds = generate_dataset(_cfg())
        test_ids = set(ds.splits["test"])
        for q in ds.queries():
            assert any(
                ds.states[sid].vehicle_id == q.vehicle_id
                and ds.states[sid].camera_id != q.camera_id
                and sid != q.state_id
                for sid in test_ids
            )

    def test_generated_dataset_passes_load_validation(self, tmp_path):
        write_dataset(generate_dataset(_cfg()), tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert len(loaded.queries()) >= 1


class TestConfig:
    def test_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            SynthConfig.from_dict({"seed": 1, "bogus": 2})

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            _cfg(n_vehicles=1)
        with pytest.raises(ConfigError):
            _cfg(confuser_fraction=1.5)
        with pytest.raises(ConfigError):
            _cfg(topology="hexagon")
