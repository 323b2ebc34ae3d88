"""Learned pairwise compatibility between two sightings.

Two branches: visual similarity = sigmoid of the inner product of a shared
affine embedding of the appearance features; spatio-temporal compatibility =
a 2-unit MLP (ReLU then sigmoid) over normalized (time difference, camera
distance). The branch outputs are fused by a 2->1 affine layer plus sigmoid,
so the potential is always in (0, 1).

Raw seconds/meters ill-condition a 2-input MLP, so time differences are
divided by the max |dt| over positive training pairs and distances by the max
pairwise camera distance; both constants are stored as non-trainable buffers
and travel with the checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Camera, Dataset, PathCatalog, Sighting, camera_distance
from .errors import DataError, DivergenceError
from .nnops import Affine, ParamStore, bce_with_logits, relu, sgd_step, sigmoid

DEFAULT_EMBED_DIM = 32
DEFAULT_ST_HIDDEN = 16


def st_features(
    state_a: Sighting, state_b: Sighting, cameras: Mapping[int, Camera]
) -> tuple[float, float]:
    """(signed time difference t_b - t_a, Euclidean camera distance)."""
    dt = state_b.timestamp_s - state_a.timestamp_s
    dd = camera_distance(cameras[state_a.camera_id], cameras[state_b.camera_id])
    return float(dt), float(dd)


@dataclass(frozen=True)
class PairSample:
    state_a_id: int
    state_b_id: int
    label: int  # 1 iff same vehicle


class PairPotentialNet:
    """Two-branch pair potential over a ParamStore (parameter prefix `psi.`)."""

    def __init__(
        self,
        store: ParamStore,
        feature_dim: int,
        embed_dim: int = DEFAULT_EMBED_DIM,
        st_hidden: int = DEFAULT_ST_HIDDEN,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.store = store
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.st_hidden = st_hidden
        self.embed = Affine(store, "psi.embed", feature_dim, embed_dim, rng)
        self.st_h = Affine(store, "psi.st.h", 2, st_hidden, rng, w_scale=1.0)
        self.st_out = Affine(store, "psi.st.out", st_hidden, 1, rng, w_scale=1.0)
        # zero-init: the fused sign is then set by the first gradients rather
        # than by the luck of a 2-weight draw
        self.fuse = Affine(store, "psi.fuse", 2, 1, rng, w_scale=0.0)
        if "psi.norm.dt" not in store:
            store.add("psi.norm.dt", 1.0, trainable=False)
            store.add("psi.norm.dd", 1.0, trainable=False)

    @classmethod
    def from_store(cls, store: ParamStore) -> "PairPotentialNet":
        embed_w = store.param("psi.embed.W")
        st_w = store.param("psi.st.h.W")
        return cls(
            store,
            feature_dim=embed_w.shape[1],
            embed_dim=embed_w.shape[0],
            st_hidden=st_w.shape[0],
        )

    @property
    def dt_norm(self) -> float:
        return float(self.store.param("psi.norm.dt"))

    @property
    def dd_norm(self) -> float:
        return float(self.store.param("psi.norm.dd"))

    def set_normalizers(self, dt_max: float, dd_max: float) -> None:
        if not (dt_max > 0 and dd_max > 0):
            raise DataError("normalizers must be positive")
        self.store.param("psi.norm.dt")[...] = dt_max
        self.store.param("psi.norm.dd")[...] = dd_max

    # -- forward/backward ---------------------------------------------------

    def forward_batch(self, feats_a, feats_b, dt, dd):
        """Fusion logits for a batch of pairs; returns (logits, cache)."""
        feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
        feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
        dt = np.atleast_1d(np.asarray(dt, dtype=np.float64))
        dd = np.atleast_1d(np.asarray(dd, dtype=np.float64))
        if not (np.all(np.isfinite(dt)) and np.all(np.isfinite(dd))):
            raise DivergenceError("non-finite spatio-temporal inputs")
        ea, ea_cache = self.embed.forward(feats_a)
        eb, eb_cache = self.embed.forward(feats_b)
        vis_z = np.sum(ea * eb, axis=1)
        vis = sigmoid(vis_z)
        x_st = np.stack([dt / self.dt_norm, dd / self.dd_norm], axis=1)
        h_pre, h_cache = self.st_h.forward(x_st)
        h = relu(h_pre)
        st_z, out_cache = self.st_out.forward(h)
        st = sigmoid(st_z[:, 0])
        fuse_in = np.stack([vis, st], axis=1)
        z, fuse_cache = self.fuse.forward(fuse_in)
        cache = (ea, eb, ea_cache, eb_cache, vis, st, h_pre, h_cache, out_cache, fuse_cache)
        return z[:, 0], cache

    def backward_batch(self, dlogits, cache) -> None:
        ea, eb, ea_cache, eb_cache, vis, st, h_pre, h_cache, out_cache, fuse_cache = cache
        dz = np.asarray(dlogits, dtype=np.float64)[:, None]
        dfuse_in = self.fuse.backward(dz, fuse_cache)
        dvis, dst = dfuse_in[:, 0], dfuse_in[:, 1]
        dst_z = dst * st * (1.0 - st)
        dh = self.st_out.backward(dst_z[:, None], out_cache)
        dh_pre = dh * (h_pre > 0)
        self.st_h.backward(dh_pre, h_cache)  # dx over data inputs is discarded
        dvis_z = dvis * vis * (1.0 - vis)
        self.embed.backward(dvis_z[:, None] * eb, ea_cache)
        self.embed.backward(dvis_z[:, None] * ea, eb_cache)

    # -- scalar surfaces ----------------------------------------------------

    def visual_similarity(self, feat_a, feat_b) -> float:
        """sigmoid(<embed(a), embed(b)>); symmetric in its arguments."""
        feat_a = np.asarray(feat_a, dtype=np.float64)
        feat_b = np.asarray(feat_b, dtype=np.float64)
        if feat_a.shape != (self.feature_dim,) or feat_b.shape != (self.feature_dim,):
            raise ValueError(
                f"expected feature vectors of length {self.feature_dim}, "
                f"got {feat_a.shape} and {feat_b.shape}"
            )
        ea, _ = self.embed.forward(feat_a)
        eb, _ = self.embed.forward(feat_b)
        return sigmoid(float(ea @ eb))

    def st_compatibility(self, dt: float, dd: float) -> float:
        """MLP output in (0,1) for a raw (seconds, meters) difference pair."""
        if not (np.isfinite(dt) and np.isfinite(dd)):
            raise DivergenceError("non-finite spatio-temporal inputs")
        x = np.array([dt / self.dt_norm, dd / self.dd_norm])
        h_pre, _ = self.st_h.forward(x)
        st_z, _ = self.st_out.forward(relu(h_pre))
        return sigmoid(float(st_z[0]))

    def pair_potential(
        self, state_a: Sighting, state_b: Sighting, cameras: Mapping[int, Camera]
    ) -> float:
        """The potential value for one ordered pair of sightings."""
        dt, dd = st_features(state_a, state_b, cameras)
        logits, _ = self.forward_batch(
            state_a.feature[None, :], state_b.feature[None, :], [dt], [dd]
        )
        return sigmoid(float(logits[0]))

    def potential_matrix(self, feats_a, times_a, feats_b, times_b, dd: float) -> np.ndarray:
        """All-pairs potentials between two camera state sets, vectorized.

        Entry (k, m) equals pair_potential(state k, state m) for states at the
        first and second camera respectively; dd is their camera distance.
        """
        ka, kb = len(times_a), len(times_b)
        if ka == 0 or kb == 0:
            return np.zeros((ka, kb))
        ea, _ = self.embed.forward(np.asarray(feats_a, dtype=np.float64))
        eb, _ = self.embed.forward(np.asarray(feats_b, dtype=np.float64))
        vis = sigmoid(ea @ eb.T)
        dt = np.asarray(times_b)[None, :] - np.asarray(times_a)[:, None]
        x_st = np.stack(
            [dt.ravel() / self.dt_norm, np.full(ka * kb, dd / self.dd_norm)], axis=1
        )
        h_pre, _ = self.st_h.forward(x_st)
        st_z, _ = self.st_out.forward(relu(h_pre))
        st = sigmoid(st_z[:, 0]).reshape(ka, kb)
        w, b = self.fuse.W, self.fuse.b
        return sigmoid(w[0, 0] * vis + w[0, 1] * st + b[0])


def compute_normalizers(dataset: Dataset, catalog: PathCatalog) -> tuple[float, float]:
    """(max |dt| over adjacent-camera positive train pairs, max camera distance)."""
    dt_max = 0.0
    for cam_a, cam_b in catalog.edges():
        for sa in dataset.states_at(cam_a, "train"):
            if sa.vehicle_id is None:
                continue
            for sb in dataset.states_at(cam_b, "train"):
                if sb.vehicle_id == sa.vehicle_id and sb.state_id != sa.state_id:
                    dt_max = max(dt_max, abs(sb.timestamp_s - sa.timestamp_s))
    dd_max = dataset.max_camera_distance()
    if dt_max <= 0 or dd_max <= 0:
        raise DataError("degenerate dataset: cannot derive positive normalizers")
    return dt_max, dd_max


def sample_training_pairs(
    dataset: Dataset,
    catalog: PathCatalog,
    negatives_per_positive: int = 3,
    seed: int = 0,
) -> list[PairSample]:
    """Adjacent-camera pair samples for potential training.

    All same-identity pairs across every directed catalog edge are positives;
    negatives are drawn uniformly (seeded) from the different-identity pairs
    on the same edges, negatives_per_positive per positive.
    """
    positives: list[PairSample] = []
    negative_pool: list[tuple[int, int]] = []
    for cam_a, cam_b in catalog.edges():
        for sa in dataset.states_at(cam_a, "train"):
            for sb in dataset.states_at(cam_b, "train"):
                if sa.state_id == sb.state_id:
                    continue
                if sa.vehicle_id is None or sb.vehicle_id is None:
                    continue
                if sa.vehicle_id == sb.vehicle_id:
                    positives.append(PairSample(sa.state_id, sb.state_id, 1))
                else:
                    negative_pool.append((sa.state_id, sb.state_id))
    if not positives:
        raise DataError("no positive adjacent-camera pairs in the training split")
    rng = np.random.default_rng(seed)
    n_neg = negatives_per_positive * len(positives)
    if negative_pool and n_neg > 0:
        replace = n_neg > len(negative_pool)
        idx = rng.choice(len(negative_pool), size=n_neg, replace=replace)
        negatives = [PairSample(*negative_pool[i], 0) for i in idx]
    else:
        negatives = []
    return positives + negatives


def _pair_arrays(dataset: Dataset, samples: Sequence[PairSample]):
    feats_a = np.stack([dataset.states[s.state_a_id].feature for s in samples])
    feats_b = np.stack([dataset.states[s.state_b_id].feature for s in samples])
    dt = np.empty(len(samples))
    dd = np.empty(len(samples))
    for i, s in enumerate(samples):
        dt[i], dd[i] = st_features(
            dataset.states[s.state_a_id], dataset.states[s.state_b_id], dataset.cameras
        )
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return feats_a, feats_b, dt, dd, labels


def dataset_loss(net: PairPotentialNet, dataset: Dataset, samples) -> float:
    feats_a, feats_b, dt, dd, labels = _pair_arrays(dataset, samples)
    logits, _ = net.forward_batch(feats_a, feats_b, dt, dd)
    loss, _ = bce_with_logits(logits, labels)
    return float(np.mean(loss))


def train_potential(
    net: PairPotentialNet,
    dataset: Dataset,
    samples: Sequence[PairSample],
    epochs: int = 30,
    lr: float = 0.01,
    batch_size: int = 64,
    seed: int = 0,
) -> list[dict]:
    """Minibatch SGD on binary cross-entropy of the fused potential.

    Returns a log of {"epoch", "loss"} where loss is the full-sample loss
    after that many epochs (epoch 0 is the initial loss). Divergence (NaN
    loss) aborts with a parameter-norm state dump.
    """
    if not samples:
        raise DataError("no training samples")
    feats_a, feats_b, dt, dd, labels = _pair_arrays(dataset, samples)
    n = len(samples)
    rng = np.random.default_rng(seed)

    def full_loss() -> float:
        logits, _ = net.forward_batch(feats_a, feats_b, dt, dd)
        loss, _ = bce_with_logits(logits, labels)
        return float(np.mean(loss))

    log = [{"epoch": 0, "loss": full_loss()}]
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            logits, cache = net.forward_batch(feats_a[idx], feats_b[idx], dt[idx], dd[idx])
            loss_vec, dlogits = bce_with_logits(logits, labels[idx])
            batch_loss = float(np.mean(loss_vec))
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"potential training diverged at epoch {epoch}",
                    state=net.store.norm_summary(),
                )
            net.backward_batch(dlogits / len(idx), cache)
            sgd_step(net.store, lr)
        log.append({"epoch": epoch, "loss": full_loss()})
    return log


class MatrixPotentials:
    """Potential provider over one split, backed by cached per-edge matrices.

    matrix(a, b) computes the full K_a x K_b table on first request and serves
    it from cache afterwards; the evaluation counter increments once per entry
    ever computed, so it exposes exactly the amortization the proposal engine
    claims.
    """

    def __init__(self, net: PairPotentialNet, dataset: Dataset, split: str) -> None:
        self.net = net
        self.dataset = dataset
        self.split = split
        self._matrices: dict[tuple[int, int], np.ndarray] = {}
        self.evaluations = 0

    def states(self, camera_id: int) -> tuple[Sighting, ...]:
        return self.dataset.states_at(camera_id, self.split)

    def matrix(self, cam_a: int, cam_b: int) -> np.ndarray:
        key = (cam_a, cam_b)
        cached = self._matrices.get(key)
        if cached is not None:
            return cached
        states_a = self.states(cam_a)
        states_b = self.states(cam_b)
        dd = camera_distance(self.dataset.cameras[cam_a], self.dataset.cameras[cam_b])
        if states_a and states_b:
            feats_a = np.stack([s.feature for s in states_a])
            feats_b = np.stack([s.feature for s in states_b])
            mat = self.net.potential_matrix(
                feats_a,
                [s.timestamp_s for s in states_a],
                feats_b,
                [s.timestamp_s for s in states_b],
                dd,
            )
        else:
            mat = np.zeros((len(states_a), len(states_b)))
        self._matrices[key] = mat
        self.evaluations += mat.size
        return mat
