"""End-to-end experiment orchestration.

Wires the synthetic generator, the two potential networks, the proposal
engine, the path scorer, and the evaluation harness into one reproducible
pipeline. Every stage derives its RNG stream from the master seed with a
fixed offset, so a (config, seed) pair determines every artifact byte.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Camera, Dataset, PathCatalog, Sighting, build_catalog, camera_distance
from .errors import ConfigError
from .evaluation import EvalReport, rank_queries
from .mrf import PathProposal, ProposalEngine
from .nnops import ParamStore, bce_with_logits, grad_check, sigmoid
from .pathlstm import (
    PathLstm,
    ProposalSample,
    finetune_joint,
    ordered_by_time,
    sample_cross_camera_pairs,
    train_path_lstm,
)
from .potential import (
    MatrixPotentials,
    PairPotentialNet,
    PairSample,
    compute_normalizers,
    sample_training_pairs,
    st_features,
    train_potential,
)
from .synth import SynthConfig, generate_dataset

DEFAULT_CONFIG: dict = {
    "seed": 7,
    "synth": {
        "seed": None,  # falls back to the master seed
        "n_cameras": 12,
        "topology": "grid",
        "edge_len_m": 300.0,
        "n_vehicles": 60,
        "feature_dim": 16,
        "appearance_noise": 0.05,
        "speed_mean": 12.0,
        "speed_sigma": 2.0,
        "dwell_sigma": 4.0,
        "confuser_fraction": 0.2,
        "confuser_offset": 0.12,
        "sightings_per_vehicle": 8,
        "train_fraction": 0.7,
        "query_fraction": 0.5,
    },
    "potential": {
        "embed_dim": 32,
        "st_hidden": 16,
        "epochs": 30,
        "lr": 0.3,
        "batch": 64,
        "negatives_per_positive": 3,
    },
    "siamese": {
        "embed_dim": 32,
        "st_hidden": 16,
        "epochs": 30,
        "lr": 0.3,
        "batch": 64,
        "negatives_per_positive": 3,
    },
    "lstm": {
        "epochs": 15,
        "lr": 0.003,
        "batch": 32,
        "negatives_per_positive": 3,
    },
    "finetune": {
        "epochs": 5,
        "lr": 0.01,
        "batch": 32,
    },
    "eval": {
        "cmc_max_k": 20,
        "parallelism": 1,
    },
}

# fixed per-stage offsets from the master seed
_SEED_POTENTIAL = 101
_SEED_SIAMESE = 202
_SEED_LSTM = 303
_SEED_FINETUNE = 404
_SEED_BENCH = 505


def resolve_config(user: dict | None = None) -> dict:
    """Overlay a user config on the defaults; unknown keys are an error."""
    resolved = json.loads(json.dumps(DEFAULT_CONFIG))
    user = user or {}
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(user) - set(resolved))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key, value in user.items():
        if isinstance(resolved[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            bad = sorted(set(value) - set(resolved[key]))
            if bad:
                raise ConfigError(f"unknown keys in config section {key!r}: {bad}")
            resolved[key].update(value)
        else:
            resolved[key] = value
    if resolved["synth"]["seed"] is None:
        resolved["synth"]["seed"] = resolved["seed"]
    return resolved


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Scorers


class GroundTruthScorer:
    """Oracle scorer: 1 for same identity, 0 otherwise."""

    name = "oracle"

    def scores(self, query: Sighting, gallery: Sequence[Sighting]) -> np.ndarray:
        return np.array(
            [
                1.0 if query.vehicle_id is not None and g.vehicle_id == query.vehicle_id else 0.0
                for g in gallery
            ]
        )


class VisualScorer:
    """Visual branch only: sigmoid inner product of embedded features."""

    name = "visual"

    def __init__(self, net: PairPotentialNet, dataset: Dataset) -> None:
        self.net = net
        self.dataset = dataset

    def scores(self, query: Sighting, gallery: Sequence[Sighting]) -> np.ndarray:
        emb_q, _ = self.net.embed.forward(query.feature)
        embs_g, _ = self.net.embed.forward(np.stack([g.feature for g in gallery]))
        return sigmoid(embs_g @ emb_q)


class SiameseScorer:
    """Full pair potential applied directly to the query pair."""

    name = "siamese"

    def __init__(self, net: PairPotentialNet, dataset: Dataset) -> None:
        self.net = net
        self.dataset = dataset

    def scores(self, query: Sighting, gallery: Sequence[Sighting]) -> np.ndarray:
        feats_g = np.stack([g.feature for g in gallery])
        feats_q = np.tile(query.feature, (len(gallery), 1))
        dt = np.array([abs(g.timestamp_s - query.timestamp_s) for g in gallery])
        dd = np.array(
            [
                camera_distance(
                    self.dataset.cameras[query.camera_id], self.dataset.cameras[g.camera_id]
                )
                for g in gallery
            ]
        )
        logits, _ = self.net.forward_batch(feats_q, feats_g, dt, dd)
        return sigmoid(logits)


class FullScorer:
    """Siamese pair score plus the LSTM score of the proposed path."""

    name = "final"

    def __init__(
        self,
        siamese: PairPotentialNet,
        lstm: PathLstm,
        engine: ProposalEngine,
        dataset: Dataset,
    ) -> None:
        self.siamese = SiameseScorer(siamese, dataset)
        self.lstm = lstm
        self.engine = engine
        self.dataset = dataset
        self._proposals: dict[tuple[int, int], PathProposal] = {}

    def proposal_for(self, query: Sighting, g: Sighting) -> PathProposal:
        key = (query.state_id, g.state_id)
        prop = self._proposals.get(key)
        if prop is None:
            p, q = ordered_by_time(query, g)
            prop = self.engine.propose(p, q)
            self._proposals[key] = prop
        return prop

    def proposal_state_ids(self, query: Sighting, g: Sighting) -> frozenset[int]:
        prop = self.proposal_for(query, g)
        if prop.feasible:
            return frozenset(prop.state_ids)
        return frozenset((query.state_id, g.state_id))

    @property
    def proposals(self) -> list[PathProposal]:
        return list(self._proposals.values())

    def scores(self, query: Sighting, gallery: Sequence[Sighting]) -> np.ndarray:
        base = self.siamese.scores(query, gallery)
        extra = np.zeros(len(gallery))
        for i, g in enumerate(gallery):
            prop = self.proposal_for(query, g)
            if prop.feasible:
                chain = [self.dataset.states[sid] for sid in prop.state_ids]
                extra[i], _ = self.lstm.forward_path(chain, self.dataset.cameras)
        return base + extra


def _init_prior_bias(store: ParamStore, negatives_per_positive: int) -> None:
    """Start the fusion head at the class prior so imbalance does not steer
    the first fused gradients."""
    if negatives_per_positive > 0:
        store.param("psi.fuse.b")[...] = -np.log(float(negatives_per_positive))


# ---------------------------------------------------------------------------
# Training pipeline


@dataclass
class PipelineResult:
    config: dict
    config_hash: str
    dataset: Dataset
    catalog: PathCatalog
    mrf_net: PairPotentialNet
    siamese_net: PairPotentialNet
    siamese_ft: PairPotentialNet
    lstm: PathLstm
    lstm_ft: PathLstm
    logs: dict = field(default_factory=dict)
    reports: dict[str, EvalReport] = field(default_factory=dict)
    full_scorer: FullScorer | None = None
    elapsed_s: float = 0.0

    def report_json(self) -> dict:
        metrics = {
            name: report.metrics_dict() for name, report in sorted(self.reports.items())
        }
        return {
            "metrics": metrics,
            "run": {
                "config_hash": self.config_hash,
                "seed": self.config["seed"],
                "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            },
        }


def build_proposal_samples(
    dataset: Dataset,
    catalog: PathCatalog,
    mrf_net: PairPotentialNet,
    pairs: Sequence[PairSample],
    split: str = "train",
) -> list[ProposalSample]:
    """Freeze one proposal per labeled pair using the MRF potential."""
    provider = MatrixPotentials(mrf_net, dataset, split)
    engine = ProposalEngine(catalog, provider)
    out = []
    for pair in pairs:
        p = dataset.states[pair.state_a_id]
        q = dataset.states[pair.state_b_id]
        out.append(ProposalSample(pair, engine.propose(p, q)))
    return out


def train_models(dataset: Dataset, config: dict) -> PipelineResult:
    """Train MRF potential, Siamese, Path-LSTM; then finetune jointly."""
    catalog = build_catalog(dataset)
    dt_max, dd_max = compute_normalizers(dataset, catalog)
    seed = int(config["seed"])
    logs: dict = {}

    pcfg = config["potential"]
    mrf_store = ParamStore()
    mrf_net = PairPotentialNet(
        mrf_store,
        dataset.feature_dim,
        embed_dim=pcfg["embed_dim"],
        st_hidden=pcfg["st_hidden"],
        rng=np.random.default_rng(seed + _SEED_POTENTIAL),
    )
    mrf_net.set_normalizers(dt_max, dd_max)
    _init_prior_bias(mrf_store, pcfg["negatives_per_positive"])
    adj_pairs = sample_training_pairs(
        dataset, catalog, pcfg["negatives_per_positive"], seed + _SEED_POTENTIAL + 1
    )
    logs["potential"] = train_potential(
        mrf_net,
        dataset,
        adj_pairs,
        epochs=pcfg["epochs"],
        lr=pcfg["lr"],
        batch_size=pcfg["batch"],
        seed=seed + _SEED_POTENTIAL + 2,
    )

    scfg = config["siamese"]
    siamese_store = ParamStore()
    siamese_net = PairPotentialNet(
        siamese_store,
        dataset.feature_dim,
        embed_dim=scfg["embed_dim"],
        st_hidden=scfg["st_hidden"],
        rng=np.random.default_rng(seed + _SEED_SIAMESE),
    )
    siamese_net.set_normalizers(dt_max, dd_max)
    _init_prior_bias(siamese_store, scfg["negatives_per_positive"])
    any_pairs = sample_cross_camera_pairs(
        dataset, "train", scfg["negatives_per_positive"], seed + _SEED_SIAMESE + 1
    )
    logs["siamese"] = train_potential(
        siamese_net,
        dataset,
        any_pairs,
        epochs=scfg["epochs"],
        lr=scfg["lr"],
        batch_size=scfg["batch"],
        seed=seed + _SEED_SIAMESE + 2,
    )

    lcfg = config["lstm"]
    lstm_pairs = sample_cross_camera_pairs(
        dataset, "train", lcfg["negatives_per_positive"], seed + _SEED_LSTM + 1
    )
    proposal_samples = build_proposal_samples(dataset, catalog, mrf_net, lstm_pairs)
    lstm_store = ParamStore()
    lstm = PathLstm(
        lstm_store,
        dataset.feature_dim,
        rng=np.random.default_rng(seed + _SEED_LSTM),
        dt_norm=dt_max,
        dd_norm=dd_max,
    )
    logs["lstm"] = train_path_lstm(
        lstm,
        dataset,
        proposal_samples,
        epochs=lcfg["epochs"],
        lr=lcfg["lr"],
        batch_size=lcfg["batch"],
        seed=seed + _SEED_LSTM + 2,
    )

    fcfg = config["finetune"]
    siamese_ft = PairPotentialNet.from_store(siamese_store.clone())
    lstm_ft = PathLstm.from_store(lstm_store.clone())
    logs["finetune"] = finetune_joint(
        siamese_ft,
        lstm_ft,
        dataset,
        proposal_samples,
        epochs=fcfg["epochs"],
        lr=fcfg["lr"],
        batch_size=fcfg["batch"],
        seed=seed + _SEED_FINETUNE,
    )

    return PipelineResult(
        config=config,
        config_hash=config_hash(config),
        dataset=dataset,
        catalog=catalog,
        mrf_net=mrf_net,
        siamese_net=siamese_net,
        siamese_ft=siamese_ft,
        lstm=lstm,
        lstm_ft=lstm_ft,
        logs=logs,
    )


def evaluate_models(result: PipelineResult, include_pretrained_final: bool = True) -> None:
    """Populate result.reports for the visual / siamese / final scorers."""
    ecfg = result.config["eval"]
    dataset, catalog = result.dataset, result.catalog
    provider = MatrixPotentials(result.mrf_net, dataset, "test")
    engine = ProposalEngine(catalog, provider)
    scorers = [
        VisualScorer(result.siamese_net, dataset),
        SiameseScorer(result.siamese_net, dataset),
    ]
    final = FullScorer(result.siamese_ft, result.lstm_ft, engine, dataset)
    for scorer in scorers:
        result.reports[scorer.name] = rank_queries(
            scorer, dataset, cmc_max_k=ecfg["cmc_max_k"], parallelism=ecfg["parallelism"]
        )
    result.reports["final"] = rank_queries(
        final, dataset, cmc_max_k=ecfg["cmc_max_k"], parallelism=ecfg["parallelism"]
    )
    result.full_scorer = final
    if include_pretrained_final:
        final_pre = FullScorer(result.siamese_net, result.lstm, engine, dataset)
        report = rank_queries(
            final_pre, dataset, cmc_max_k=ecfg["cmc_max_k"], parallelism=ecfg["parallelism"]
        )
        report.scorer = "final_pretrained"
        result.reports["final_pretrained"] = report


def run_pipeline(
    config: dict | None = None,
    dataset: Dataset | None = None,
    include_pretrained_final: bool = True,
) -> PipelineResult:
    """synth -> train -> evaluate, all from one config."""
    started = time.perf_counter()
    cfg = resolve_config(config)
    if dataset is None:
        dataset = generate_dataset(SynthConfig.from_dict(cfg["synth"]))
    result = train_models(dataset, cfg)
    evaluate_models(result, include_pretrained_final=include_pretrained_final)
    result.elapsed_s = time.perf_counter() - started
    return result


# ---------------------------------------------------------------------------
# Benchmarks and gradient suites


def psi_evaluation_bound(dataset: Dataset, catalog: PathCatalog, split: str = "test") -> int:
    """Sum over catalog edges of K_i * K_j for the given split."""
    total = 0
    for cam_a, cam_b in catalog.edges():
        total += len(dataset.states_at(cam_a, split)) * len(dataset.states_at(cam_b, split))
    return total


def sample_benchmark_pairs(
    dataset: Dataset, catalog: PathCatalog, n_pairs: int, seed: int
) -> list[tuple[Sighting, Sighting]]:
    """Seeded cross-camera test pairs that have at least one candidate path."""
    rng = np.random.default_rng(seed)
    states = sorted(dataset.split_states("test"), key=lambda s: s.state_id)
    pairs: list[tuple[Sighting, Sighting]] = []
    attempts = 0
    while len(pairs) < n_pairs and attempts < 1000 * n_pairs:
        attempts += 1
        i, j = rng.integers(0, len(states), size=2)
        a, b = states[int(i)], states[int(j)]
        if a.state_id == b.state_id or a.camera_id == b.camera_id:
            continue
        p, q = ordered_by_time(a, b)
        if not catalog.candidates(p.camera_id, q.camera_id):
            continue
        pairs.append((p, q))
    if len(pairs) < n_pairs:
        raise ConfigError(f"could only sample {len(pairs)} of {n_pairs} benchmark pairs")
    return pairs


def bench_amortization(
    dataset: Dataset,
    catalog: PathCatalog,
    net: PairPotentialNet,
    n_pairs: int = 100,
    seed: int = _SEED_BENCH,
) -> dict:
    """Potential-evaluation counters for batch vs per-pair proposal runs."""
    pairs = sample_benchmark_pairs(dataset, catalog, n_pairs, seed)

    shared = MatrixPotentials(net, dataset, "test")
    engine = ProposalEngine(catalog, shared)
    t0 = time.perf_counter()
    batch_out = engine.batch(pairs)
    batch_seconds = time.perf_counter() - t0

    naive_evals = 0
    t0 = time.perf_counter()
    naive_out = []
    for p, q in pairs:
        fresh = MatrixPotentials(net, dataset, "test")
        naive_out.append(ProposalEngine(catalog, fresh).propose(p, q))
        naive_evals += fresh.evaluations
    naive_seconds = time.perf_counter() - t0

    if batch_out != naive_out:
        raise AssertionError("batch and per-pair proposals disagree")
    return {
        "n_pairs": n_pairs,
        "batch_evaluations": shared.evaluations,
        "naive_evaluations": naive_evals,
        "bound": psi_evaluation_bound(dataset, catalog, "test"),
        "ratio": naive_evals / max(shared.evaluations, 1),
        "batch_seconds": batch_seconds,
        "naive_seconds": naive_seconds,
    }


def _tiny_world(rng: np.random.Generator, feature_dim: int, n_cameras: int, n_states: int):
    """Small in-memory dataset for the gradient suites."""
    cameras = [
        Camera(camera_id=i, x_m=float(200.0 * i), y_m=float(50.0 * (i % 2)))
        for i in range(n_cameras)
    ]
    states = []
    t = 0.0
    for i in range(n_states):
        t += float(rng.uniform(5.0, 40.0))
        states.append(
            Sighting(
                state_id=i,
                camera_id=i % n_cameras,
                timestamp_s=t,
                feature=rng.uniform(-1.0, 1.0, size=feature_dim),
                vehicle_id=i % 2,
            )
        )
    splits = {"train": [s.state_id for s in states], "test": [], "query": []}
    return Dataset(cameras, states, splits, feature_dim)


def gradient_suites(seed: int = 0, feature_dim: int = 8) -> dict[str, float]:
    """Max relative finite-difference error of each hand-written backward pass.

    Covers the pair-potential loss, five chained LSTM steps, and the joint
    final-similarity loss over both parameter stores.
    """
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}

    # pair potential on a random minibatch
    store = ParamStore()
    net = PairPotentialNet(store, feature_dim, embed_dim=8, st_hidden=8, rng=rng)
    n = 6
    feats_a = rng.uniform(-1.0, 1.0, size=(n, feature_dim))
    feats_b = rng.uniform(-1.0, 1.0, size=(n, feature_dim))
    dt = rng.uniform(-1.0, 1.0, size=n)
    dd = rng.uniform(0.0, 1.0, size=n)
    labels = rng.integers(0, 2, size=n).astype(np.float64)

    def psi_loss() -> float:
        logits, cache = net.forward_batch(feats_a, feats_b, dt, dd)
        loss, dlogits = bce_with_logits(logits, labels)
        net.backward_batch(dlogits / n, cache)
        return float(np.mean(loss))

    errors["psi"] = grad_check(psi_loss, store)

    # five chained LSTM steps
    world = _tiny_world(rng, feature_dim, n_cameras=6, n_states=6)
    lstm_store = ParamStore()
    lstm = PathLstm(lstm_store, feature_dim, rng=rng, dt_norm=60.0, dd_norm=500.0)
    chain = [world.states[i] for i in range(6)]

    def lstm_loss() -> float:
        score, caches = lstm.forward_path(chain, world.cameras)
        loss, dscore = bce_with_logits(np.array([score]), np.array([1.0]))
        lstm.backward_path(float(dscore[0]), caches)
        return float(loss[0])

    errors["lstm5"] = grad_check(lstm_loss, lstm_store)

    # joint final-similarity loss over both stores
    joint_psi_store = ParamStore()
    joint_psi = PairPotentialNet(joint_psi_store, feature_dim, embed_dim=8, st_hidden=8, rng=rng)
    joint_psi.set_normalizers(60.0, 500.0)
    joint_lstm_store = ParamStore()
    joint_lstm = PathLstm(joint_lstm_store, feature_dim, rng=rng, dt_norm=60.0, dd_norm=500.0)
    pairs = [(world.states[0], world.states[3]), (world.states[1], world.states[4])]
    chains = [[world.states[0], world.states[2], world.states[3]],
              [world.states[1], world.states[4]]]
    joint_labels = np.array([1.0, 0.0])

    def joint_loss() -> float:
        finals = np.empty(len(pairs))
        caches = []
        for i, (a, b) in enumerate(pairs):
            dt_i, dd_i = st_features(a, b, world.cameras)
            logits, s_cache = joint_psi.forward_batch(
                a.feature[None, :], b.feature[None, :], [dt_i], [dd_i]
            )
            prob = sigmoid(float(logits[0]))
            score, l_cache = joint_lstm.forward_path(chains[i], world.cameras)
            finals[i] = prob + score
            caches.append((prob, s_cache, l_cache))
        loss, dfinals = bce_with_logits(finals, joint_labels)
        for i, (prob, s_cache, l_cache) in enumerate(caches):
            upstream = dfinals[i] / len(pairs)
            joint_psi.backward_batch(np.array([upstream * prob * (1.0 - prob)]), s_cache)
            joint_lstm.backward_path(upstream, l_cache)
        return float(np.mean(loss))

    errors["joint_psi"] = grad_check(joint_loss, joint_psi_store)
    errors["joint_lstm"] = grad_check(joint_loss, joint_lstm_store)
    return errors
