"""LSTM scorer over step-difference features of a path proposal.

Each step between consecutive chosen sightings contributes the absolute
difference of their ReLU'd 32-d visual transforms concatenated with the
normalized camera distance and time gap, mapped through a 32-unit input
transform. The standard-gated LSTM (hidden size 32) consumes the sequence
and a linear head on the last hidden state yields the path-validness score.
The final pair similarity adds this score to the Siamese pair potential; when
no feasible proposal exists the Siamese score stands alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Camera, Dataset, Sighting
from .errors import DataError, DivergenceError
from .mrf import PathProposal
from .nnops import (
    Affine,
    ParamStore,
    adam_step,
    bce_with_logits,
    relu,
    sgd_step,
    sigmoid,
)
from .potential import PairPotentialNet, PairSample, st_features

HIDDEN = 32  # fixed hidden width of the path scorer


class PathLstm:
    """Gated recurrent path scorer over a ParamStore (prefix `lstm.`)."""

    def __init__(
        self,
        store: ParamStore,
        feature_dim: int,
        rng: np.random.Generator | None = None,
        dt_norm: float = 1.0,
        dd_norm: float = 1.0,
    ) -> None:
        self.store = store
        self.feature_dim = feature_dim
        self.visual = Affine(store, "lstm.R", feature_dim, HIDDEN, rng)
        self.input_tf = Affine(store, "lstm.f", HIDDEN + 2, HIDDEN, rng)
        self.gate_f = Affine(store, "lstm.gates.f", 2 * HIDDEN, HIDDEN, rng)
        self.gate_i = Affine(store, "lstm.gates.i", 2 * HIDDEN, HIDDEN, rng)
        self.gate_o = Affine(store, "lstm.gates.o", 2 * HIDDEN, HIDDEN, rng)
        self.gate_c = Affine(store, "lstm.gates.c", 2 * HIDDEN, HIDDEN, rng)
        self.head = Affine(store, "lstm.head", HIDDEN, 1, rng)
        if "lstm.norm.dt" not in store:
            store.add("lstm.norm.dt", dt_norm, trainable=False)
            store.add("lstm.norm.dd", dd_norm, trainable=False)

    @classmethod
    def from_store(cls, store: ParamStore) -> "PathLstm":
        return cls(store, feature_dim=store.param("lstm.R.W").shape[1])

    @property
    def dt_norm(self) -> float:
        return float(self.store.param("lstm.norm.dt"))

    @property
    def dd_norm(self) -> float:
        return float(self.store.param("lstm.norm.dd"))

    def set_normalizers(self, dt_max: float, dd_max: float) -> None:
        if not (dt_max > 0 and dd_max > 0):
            raise DataError("normalizers must be positive")
        self.store.param("lstm.norm.dt")[...] = dt_max
        self.store.param("lstm.norm.dd")[...] = dd_max

    # -- one recurrence step ------------------------------------------------

    def step(self, h, c, y):
        """One gated update; returns (h', c', cache) for the backward pass."""
        hy = np.concatenate([h, y])
        zf, f_cache = self.gate_f.forward(hy)
        zi, i_cache = self.gate_i.forward(hy)
        zo, o_cache = self.gate_o.forward(hy)
        zc, c_cache = self.gate_c.forward(hy)
        fg, ig, og = sigmoid(zf), sigmoid(zi), sigmoid(zo)
        ct = np.tanh(zc)
        c2 = fg * c + ig * ct
        th = np.tanh(c2)
        h2 = og * th
        if not np.all(np.isfinite(h2)):
            raise DivergenceError("non-finite hidden state")
        cache = (f_cache, i_cache, o_cache, c_cache, fg, ig, og, ct, c, th)
        return h2, c2, cache

    def step_backward(self, dh2, dc2_in, cache):
        f_cache, i_cache, o_cache, c_cache, fg, ig, og, ct, c_prev, th = cache
        dog = dh2 * th
        dc2 = dc2_in + dh2 * og * (1.0 - th * th)
        dfg = dc2 * c_prev
        dc_prev = dc2 * fg
        dig = dc2 * ct
        dct = dc2 * ig
        dhy = self.gate_f.backward(dfg * fg * (1.0 - fg), f_cache)
        dhy = dhy + self.gate_i.backward(dig * ig * (1.0 - ig), i_cache)
        dhy = dhy + self.gate_o.backward(dog * og * (1.0 - og), o_cache)
        dhy = dhy + self.gate_c.backward(dct * (1.0 - ct * ct), c_cache)
        return dhy[:HIDDEN], dc_prev, dhy[HIDDEN:]

    # -- step features ------------------------------------------------------

    def step_features(self, state_a: Sighting, state_b: Sighting, cameras: Mapping[int, Camera]):
        """Input vector for one path step; returns (y, cache)."""
        ra_pre, ra_cache = self.visual.forward(state_a.feature)
        rb_pre, rb_cache = self.visual.forward(state_b.feature)
        ra, rb = relu(ra_pre), relu(rb_pre)
        diff = ra - rb
        vis = np.abs(diff)
        dt, dd = st_features(state_a, state_b, cameras)
        x = np.concatenate([vis, [dd / self.dd_norm, dt / self.dt_norm]])
        y_pre, f_cache = self.input_tf.forward(x)
        y = relu(y_pre)
        cache = (ra_pre, rb_pre, ra_cache, rb_cache, np.sign(diff), y_pre, f_cache)
        return y, cache

    def step_features_backward(self, dy, cache):
        ra_pre, rb_pre, ra_cache, rb_cache, sign, y_pre, f_cache = cache
        dx = self.input_tf.backward(dy * (y_pre > 0), f_cache)
        dvis = dx[:HIDDEN]
        dra = dvis * sign * (ra_pre > 0)
        drb = -dvis * sign * (rb_pre > 0)
        self.visual.backward(dra, ra_cache)
        self.visual.backward(drb, rb_cache)

    # -- whole-path scoring -------------------------------------------------

    def forward_path(self, states: Sequence[Sighting], cameras: Mapping[int, Camera]):
        """Score a chain of N >= 2 sightings; returns (score, caches)."""
        if len(states) < 2:
            raise ValueError("a path needs at least two sightings")
        h = np.zeros(HIDDEN)
        c = np.zeros(HIDDEN)
        step_caches = []
        for a, b in zip(states, states[1:]):
            y, y_cache = self.step_features(a, b, cameras)
            h, c, s_cache = self.step(h, c, y)
            step_caches.append((y_cache, s_cache))
        score_vec, head_cache = self.head.forward(h)
        return float(score_vec[0]), (step_caches, head_cache)

    def backward_path(self, dscore: float, caches) -> None:
        step_caches, head_cache = caches
        dh = self.head.backward(np.array([dscore]), head_cache)
        dc = np.zeros(HIDDEN)
        for y_cache, s_cache in reversed(step_caches):
            dh, dc, dy = self.step_backward(dh, dc, s_cache)
            self.step_features_backward(dy, y_cache)


def ordered_by_time(a: Sighting, b: Sighting) -> tuple[Sighting, Sighting]:
    if (a.timestamp_s, a.state_id) <= (b.timestamp_s, b.state_id):
        return a, b
    return b, a


def path_score(lstm: PathLstm, proposal: PathProposal, dataset: Dataset) -> float:
    """LSTM score of a feasible proposal's chosen state chain."""
    if not proposal.feasible:
        raise ValueError("cannot score an infeasible proposal")
    states = [dataset.states[sid] for sid in proposal.state_ids]
    score, _ = lstm.forward_path(states, dataset.cameras)
    return score


def siamese_pair_score(
    siamese: PairPotentialNet, a: Sighting, b: Sighting, cameras: Mapping[int, Camera]
) -> float:
    """Pair potential of the query pair itself, ordered by timestamp."""
    p, q = ordered_by_time(a, b)
    return siamese.pair_potential(p, q, cameras)


def final_similarity(
    siamese_score: float, proposal: PathProposal, lstm: PathLstm, dataset: Dataset
) -> float:
    """siamese + path score when the proposal is feasible, else siamese alone."""
    if not np.isfinite(siamese_score):
        raise DivergenceError("non-finite siamese score")
    if not proposal.feasible:
        return float(siamese_score)
    return float(siamese_score + path_score(lstm, proposal, dataset))


def sample_cross_camera_pairs(
    dataset: Dataset,
    split: str = "train",
    negatives_per_positive: int = 3,
    seed: int = 0,
) -> list[PairSample]:
    """Same/different-identity pairs from any two distinct cameras.

    All cross-camera positive pairs of the split are included (ordered by
    time); negatives are uniform seeded draws from the cross-camera
    different-identity pairs.
    """
    states = sorted(dataset.split_states(split), key=lambda s: s.state_id)
    positives = []
    for vid in dataset.vehicles_in_split(split):
        veh = dataset.vehicle_states(vid, split)
        for i, a in enumerate(veh):
            for b in veh[i + 1 :]:
                if a.camera_id != b.camera_id:
                    first, second = ordered_by_time(a, b)
                    positives.append(PairSample(first.state_id, second.state_id, 1))
    if not positives:
        raise DataError(f"no cross-camera positive pairs in split {split!r}")
    rng = np.random.default_rng(seed)
    negatives: list[PairSample] = []
    n_states = len(states)
    target = negatives_per_positive * len(positives)
    attempts = 0
    while len(negatives) < target and attempts < 100 * target:
        attempts += 1
        i, j = rng.integers(0, n_states, size=2)
        a, b = states[int(i)], states[int(j)]
        if a.camera_id == b.camera_id or a.vehicle_id == b.vehicle_id:
            continue
        first, second = ordered_by_time(a, b)
        negatives.append(PairSample(first.state_id, second.state_id, 0))
    return positives + negatives


@dataclass(frozen=True)
class ProposalSample:
    """A labeled query pair with its frozen path proposal."""

    pair: PairSample
    proposal: PathProposal


def _lstm_dataset_loss(lstm, dataset, feasible: Sequence[ProposalSample]) -> float:
    scores = np.array(
        [
            lstm.forward_path(
                [dataset.states[sid] for sid in s.proposal.state_ids], dataset.cameras
            )[0]
            for s in feasible
        ]
    )
    labels = np.array([s.pair.label for s in feasible], dtype=np.float64)
    loss, _ = bce_with_logits(scores, labels)
    return float(np.mean(loss))


def train_path_lstm(
    lstm: PathLstm,
    dataset: Dataset,
    samples: Sequence[ProposalSample],
    epochs: int = 15,
    lr: float = 0.003,
    batch_size: int = 32,
    seed: int = 0,
) -> list[dict]:
    """Adam on binary cross-entropy of sigmoid(path score); proposals frozen.

    Only feasible proposals train the scorer (an infeasible pair has no path
    to score). Returns per-epoch full-sample losses, epoch 0 = initial.
    """
    feasible = [s for s in samples if s.proposal.feasible]
    if not feasible:
        raise DataError("no feasible proposals to train on")
    labels = np.array([s.pair.label for s in feasible], dtype=np.float64)
    chains = [
        [dataset.states[sid] for sid in s.proposal.state_ids] for s in feasible
    ]
    rng = np.random.default_rng(seed)
    log = [{"epoch": 0, "loss": _lstm_dataset_loss(lstm, dataset, feasible)}]
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(feasible))
        for start in range(0, len(feasible), batch_size):
            idx = perm[start : start + batch_size]
            scores = np.empty(len(idx))
            caches = []
            for k, sample_idx in enumerate(idx):
                scores[k], cache = lstm.forward_path(chains[sample_idx], dataset.cameras)
                caches.append(cache)
            loss_vec, dscores = bce_with_logits(scores, labels[idx])
            if not np.all(np.isfinite(loss_vec)):
                raise DivergenceError(
                    f"path-lstm training diverged at epoch {epoch}",
                    state=lstm.store.norm_summary(),
                )
            for k in range(len(idx)):
                lstm.backward_path(dscores[k] / len(idx), caches[k])
            adam_step(lstm.store, lr)
        log.append({"epoch": epoch, "loss": _lstm_dataset_loss(lstm, dataset, feasible)})
    return log


def _joint_loss(siamese, lstm, dataset, samples: Sequence[ProposalSample]) -> float:
    finals = np.array(
        [_joint_forward(siamese, lstm, dataset, s)[0] for s in samples]
    )
    labels = np.array([s.pair.label for s in samples], dtype=np.float64)
    loss, _ = bce_with_logits(finals, labels)
    return float(np.mean(loss))


def _joint_forward(siamese, lstm, dataset, sample: ProposalSample):
    a = dataset.states[sample.pair.state_a_id]
    b = dataset.states[sample.pair.state_b_id]
    p, q = ordered_by_time(a, b)
    dt, dd = st_features(p, q, dataset.cameras)
    logits, s_cache = siamese.forward_batch(
        p.feature[None, :], q.feature[None, :], [dt], [dd]
    )
    prob = sigmoid(float(logits[0]))
    if sample.proposal.feasible:
        chain = [dataset.states[sid] for sid in sample.proposal.state_ids]
        score, l_cache = lstm.forward_path(chain, dataset.cameras)
    else:
        score, l_cache = 0.0, None
    return prob + score, (prob, s_cache, l_cache)


def finetune_joint(
    siamese: PairPotentialNet,
    lstm: PathLstm,
    dataset: Dataset,
    samples: Sequence[ProposalSample],
    epochs: int = 5,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
) -> list[dict]:
    """Joint SGD on binary cross-entropy of sigmoid(final similarity).

    Proposals stay fixed; pairs without a feasible proposal still train the
    Siamese branch through the fallback score. lr == 0 is allowed and leaves
    every parameter untouched (losses are still logged).
    """
    if not samples:
        raise DataError("no samples to finetune on")
    labels = np.array([s.pair.label for s in samples], dtype=np.float64)
    rng = np.random.default_rng(seed)
    log = [{"epoch": 0, "loss": _joint_loss(siamese, lstm, dataset, samples)}]
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            idx = perm[start : start + batch_size]
            batch_caches = []
            finals = np.empty(len(idx))
            for k, sample_idx in enumerate(idx):
                finals[k], cache = _joint_forward(
                    siamese, lstm, dataset, samples[sample_idx]
                )
                batch_caches.append(cache)
            loss_vec, dfinals = bce_with_logits(finals, labels[idx])
            if not np.all(np.isfinite(loss_vec)):
                raise DivergenceError(
                    f"joint finetuning diverged at epoch {epoch}",
                    state=siamese.store.norm_summary(),
                )
            for k in range(len(idx)):
                prob, s_cache, l_cache = batch_caches[k]
                upstream = dfinals[k] / len(idx)
                siamese.backward_batch(
                    np.array([upstream * prob * (1.0 - prob)]), s_cache
                )
                if l_cache is not None:
                    lstm.backward_path(upstream, l_cache)
            if lr > 0:
                sgd_step(siamese.store, lr)
                sgd_step(lstm.store, lr)
            else:
                siamese.store.zero_grads()
                lstm.store.zero_grads()
        log.append({"epoch": epoch, "loss": _joint_loss(siamese, lstm, dataset, samples)})
    return log
