"""Minimal dense float64 network kernel.

Parameter store with per-parameter gradient buffers, affine layers with
hand-written backward passes, stable activations, SGD/Adam steps, a
central-difference gradient checker, and a binary checkpoint format.

There is no autodiff tape: every network in this package has a small, fixed
topology, so each forward pass returns an explicit cache that its backward
pass consumes. All arrays are float64; any NaN/Inf surfacing in parameters
or gradients is an error, never silently propagated.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import DataError, DivergenceError

Array = np.ndarray

CHECKPOINT_MAGIC = b"PRIDCK01"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    """Stable logistic function. Scalars in -> float out; arrays elementwise."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def sigmoid_grad(s):
    """Derivative of the logistic function given its output s."""
    return s * (1.0 - s)


def relu(x):
    return np.maximum(x, 0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def bce_with_logits(logits: Array, labels: Array) -> tuple[Array, Array]:
    """Per-sample binary cross-entropy of sigmoid(logits) against 0/1 labels.

    Returns (loss, dloss/dlogits). Computed in the logit domain so the loss
    stays finite for saturated predictions.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    loss = softplus(-logits) + (1.0 - labels) * logits
    dlogits = sigmoid(logits) - labels
    return loss, dlogits


def _require_finite(arr: Array, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {what}")


class ParamStore:
    """Named map of float64 tensors with matching gradient buffers.

    Non-trainable entries ("buffers", e.g. normalization constants) are
    carried through checkpoints but skipped by optimizers and the gradient
    checker. Adam moment estimates and the shared step counter live here so
    a store is the single unit of training state.
    """

    def __init__(self) -> None:
        self._params: dict[str, Array] = {}
        self._grads: dict[str, Array] = {}
        self._trainable: dict[str, bool] = {}
        self._adam_m: dict[str, Array] = {}
        self._adam_v: dict[str, Array] = {}
        self.adam_step_count = 0

    def add(self, name: str, value, trainable: bool = True) -> Array:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        _require_finite(arr, f"parameter {name!r}")
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._trainable[name] = trainable
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def param(self, name: str) -> Array:
        return self._params[name]

    def grad(self, name: str) -> Array:
        return self._grads[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def names(self, trainable_only: bool = False) -> list[str]:
        if trainable_only:
            return [n for n in self._params if self._trainable[n]]
        return list(self._params)

    def add_grad(self, name: str, delta: Array) -> None:
        g = self._grads[name]
        if np.shape(delta) != g.shape:
            raise ValueError(
                f"gradient shape {np.shape(delta)} != parameter shape {g.shape} for {name!r}"
            )
        g += delta

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def grad_snapshot(self) -> dict[str, Array]:
        return {n: self._grads[n].copy() for n in self.names(trainable_only=True)}

    def _check_grads_finite(self) -> None:
        for name in self.names(trainable_only=True):
            if not np.all(np.isfinite(self._grads[name])):
                raise DivergenceError(
                    f"non-finite gradient for {name!r}", state=self.norm_summary()
                )

    def norm_summary(self) -> dict[str, float]:
        """Max-abs per parameter; attached to divergence errors as a state dump."""
        return {n: float(np.max(np.abs(p))) if p.size else 0.0 for n, p in self._params.items()}

    def clone(self) -> "ParamStore":
        """Deep copy of parameters and trainability; optimizer state resets."""
        other = ParamStore()
        for name, arr in self._params.items():
            other.add(name, arr.copy(), trainable=self._trainable[name])
        return other

    def iter_items(self) -> Iterator[tuple[str, Array]]:
        return iter(self._params.items())


def sgd_step(store: ParamStore, lr: float) -> None:
    """theta <- theta - lr * grad for every trainable parameter, then zero grads."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    store._check_grads_finite()
    for name in store.names(trainable_only=True):
        store.param(name)[...] -= lr * store.grad(name)
    store.zero_grads()


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update over all trainable parameters; zeroes grads."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    store._check_grads_finite()
    store.adam_step_count += 1
    t = store.adam_step_count
    for name in store.names(trainable_only=True):
        g = store.grad(name)
        m = store._adam_m.setdefault(name, np.zeros_like(g))
        v = store._adam_v.setdefault(name, np.zeros_like(g))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        store.param(name)[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grads()


class Affine:
    """Fully-connected layer y = W x + b over a ParamStore.

    forward() accepts a vector (in_dim,) or a batch (n, in_dim) and returns
    (y, cache); backward() consumes the cache, accumulates dW/db into the
    store, and returns dx with the input's shape. A layer may be applied
    several times per pass (shared weights): each application carries its
    own cache.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator | None = None,
        w_scale: float | None = None,
    ) -> None:
        self.store = store
        self.w_name = f"{name}.W"
        self.b_name = f"{name}.b"
        self.in_dim = in_dim
        self.out_dim = out_dim
        if f"{name}.W" in store:
            w = store.param(self.w_name)
            if w.shape != (out_dim, in_dim):
                raise ValueError(f"existing {self.w_name} has shape {w.shape}")
        else:
            if rng is None:
                w = np.zeros((out_dim, in_dim))
            else:
                scale = w_scale if w_scale is not None else 1.0 / np.sqrt(in_dim)
                w = rng.normal(0.0, scale, size=(out_dim, in_dim))
            store.add(self.w_name, w)
            store.add(self.b_name, np.zeros(out_dim))

    @property
    def W(self) -> Array:
        return self.store.param(self.w_name)

    @property
    def b(self) -> Array:
        return self.store.param(self.b_name)

    def forward(self, x: Array) -> tuple[Array, Array]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(
                f"input of length {x.shape[-1]} to affine expecting {self.in_dim}"
            )
        y = x @ self.W.T + self.b
        return y, x

    def backward(self, dy: Array, cache: Array) -> Array:
        x = cache
        if x.ndim == 1:
            self.store.add_grad(self.w_name, np.outer(dy, x))
            self.store.add_grad(self.b_name, dy)
        else:
            self.store.add_grad(self.w_name, dy.T @ x)
            self.store.add_grad(self.b_name, dy.sum(axis=0))
        return dy @ self.W


def grad_check(
    loss_fn: Callable[[], float],
    store: ParamStore,
    eps: float = 1e-5,
) -> float:
    """Compare hand-written gradients against central finite differences.

    loss_fn must run a full forward+backward over the store's current
    parameters, accumulate gradients, and return the scalar loss. Returns
    the max over all trainable elements of |a - n| / max(|a|, |n|, 1e-8).
    """
    store.zero_grads()
    base = float(loss_fn())
    if not np.isfinite(base):
        raise DivergenceError("loss is non-finite at the expansion point")
    analytic = store.grad_snapshot()

    max_err = 0.0
    for name in store.names(trainable_only=True):
        p = store.param(name)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            store.zero_grads()
            f_plus = float(loss_fn())
            p[idx] = orig - eps
            store.zero_grads()
            f_minus = float(loss_fn())
            p[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DivergenceError(f"loss non-finite while perturbing {name!r}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    store.zero_grads()
    return max_err


def save_checkpoint(
    store: ParamStore,
    path: str | Path,
    seed: int | None = None,
    config_hash: str | None = None,
) -> None:
    """Write the store to a single binary file; see README for the layout.

    Round-trips are bit-exact: arrays are dumped as little-endian float64 in
    header order, and the JSON header is serialized with sorted keys.
    """
    entries = []
    for name, arr in store.iter_items():
        entries.append(
            {"name": name, "shape": list(arr.shape), "trainable": store.is_trainable(name)}
        )
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "config_hash": config_hash,
        "params": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name, arr in store.iter_items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Read a checkpoint written by save_checkpoint; returns (store, header)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    hlen = int.from_bytes(raw[8:16], "little")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {header.get('format_version')!r}"
        )
    store = ParamStore()
    offset = 16 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint at {entry['name']!r}")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        store.add(entry["name"], arr, trainable=entry["trainable"])
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return store, header
