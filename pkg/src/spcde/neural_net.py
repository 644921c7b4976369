"""Feed-forward ReLU network with softmax output, trained by Adam on the
negative log-likelihood of an M-spline mixture.

Everything is plain numpy so each (month, location, variable) model can be
trained in its own process without shared state.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .spline_basis import SplineBasis

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-10


@dataclass
class MlpParams:
    """Layer weights ``W[h]`` (``n_h x n_{h-1}``) and biases ``b[h]`` (``n_h``)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be nonempty and of equal length")
        for h, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {h + 1}: inconsistent shapes {W.shape} / {b.shape}")
            if h and W.shape[1] != self.weights[h - 1].shape[0]:
                raise ValueError(f"layer {h + 1}: expects {W.shape[1]} inputs, previous layer has "
                                 f"{self.weights[h - 1].shape[0]}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays, info=None) -> "MlpParams":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2], dict(info or {}))

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()], self.info)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        sizes = d["layer_sizes"]
        weights = [np.asarray(w, dtype=float).reshape(sizes[h + 1], sizes[h])
                   for h, w in enumerate(d["weights"])]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return cls(weights, biases, dict(d.get("info", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 0.001
    max_epochs: int = 300
    validation_fraction: float = 0.2
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def init_params(layer_sizes, seed: int) -> MlpParams:
    """He-normal hidden layers, Glorot-normal softmax layer, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    n_layers = len(sizes) - 1
    for h in range(n_layers):
        fan_in, fan_out = sizes[h], sizes[h + 1]
        if h < n_layers - 1:
            sd = np.sqrt(2.0 / fan_in)
        else:
            sd = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, sd, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(params: MlpParams, X: np.ndarray):
    acts = [X]
    a = X
    last = len(params.weights) - 1
    for h, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        a = np.maximum(z, 0.0) if h < last else _softmax(z)
        acts.append(a)
    return acts


def forward(params: MlpParams, x) -> np.ndarray:
    """Mixture weights for a feature vector (or a row-stacked batch)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"expected {params.layer_sizes[0]} features, got {X.shape[1]}")
    pi = _forward_cache(params, X)[-1]
    if not np.all(np.isfinite(pi)):
        raise FloatingPointError("non-finite network output")
    return pi[0] if single else pi


def _basis_values(batch, basis: SplineBasis):
    X, y = batch
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0 or X.shape[0] != len(y):
        raise ValueError("batch must be nonempty with matching features and responses")
    return X, basis.mspline_matrix(y)


def _nll_from_basis(params: MlpParams, X: np.ndarray, B: np.ndarray) -> float:
    pi = _forward_cache(params, X)[-1]
    dens = np.einsum("ik,ik->i", pi, B)
    return float(-np.mean(np.log(np.maximum(dens, DENSITY_FLOOR))))


def _grad_from_basis(params: MlpParams, X: np.ndarray, B: np.ndarray):
    acts = _forward_cache(params, X)
    pi = acts[-1]
    dens = np.einsum("ik,ik->i", pi, B)
    n = X.shape[0]
    live = dens > DENSITY_FLOOR
    # d(-log f)/dz_j = pi_j - pi_j B_j / f ; zero where the floor is active
    delta = np.zeros_like(pi)
    delta[live] = (pi[live] - pi[live] * B[live] / dens[live, None]) / n
    loss = float(-np.mean(np.log(np.maximum(dens, DENSITY_FLOOR))))
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for h in range(len(params.weights) - 1, -1, -1):
        gW[h] = delta.T @ acts[h]
        gb[h] = delta.sum(axis=0)
        if h:
            delta = (delta @ params.weights[h]) * (acts[h] > 0)
    return loss, MlpParams(gW, gb)


def nll_loss(params: MlpParams, batch, basis: SplineBasis) -> float:
    """Mean negative log mixture density; ``batch`` is ``(features, responses)``."""
    X, B = _basis_values(batch, basis)
    return _nll_from_basis(params, X, B)


def grad(params: MlpParams, batch, basis: SplineBasis) -> MlpParams:
    """Backpropagated gradient of :func:`nll_loss`, shaped like ``params``."""
    X, B = _basis_values(batch, basis)
    return _grad_from_basis(params, X, B)[1]


def adam_step(state: AdamState, params: MlpParams, g: MlpParams, lr: float):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    p_arr, g_arr = params.arrays(), g.arrays()
    if len(p_arr) != len(state.m) or any(a.shape != b.shape for a, b in zip(p_arr, g_arr)) \
            or any(a.shape != m.shape for a, m in zip(p_arr, state.m)):
        raise ValueError("parameter, gradient and optimizer shapes do not match")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, gr, m, v in zip(p_arr, g_arr, state.m, state.v):
        m = b1 * m + (1.0 - b1) * gr
        v = b2 * v + (1.0 - b2) * gr * gr
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (MlpParams.from_arrays(new_p, params.info),
            AdamState(new_m, new_v, t, b1, b2, state.eps))


def _adam_inplace(state: AdamState, p_arr, g_arr, lr):
    # same update as adam_step without reallocating; used in the training loop
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    a = lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    eps_hat = state.eps * np.sqrt(1.0 - b2 ** t)
    for p, gr, m, v in zip(p_arr, g_arr, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * gr
        v *= b2
        v += (1.0 - b2) * gr * gr
        p -= a * m / (np.sqrt(v) + eps_hat)


def train(features, responses, basis: SplineBasis, config: TrainConfig | None = None,
          hidden_sizes=(30, 20), input_init_scale=None, groups=None) -> MlpParams:
    """Fit mixture weights by mini-batch Adam with early stopping.

    Rows are shuffled once by ``config.seed`` into training and validation
    parts.  The returned parameters are those with the lowest validation
    loss; ``info`` records ``best_epoch``, ``stopped_epoch`` and the loss
    history.  With ``groups``, whole groups (one label per row) are shuffled
    instead of rows, so rows sharing a label land on the same side.
    ``input_init_scale`` (one factor per input column) multiplies the
    initial first-layer weights, e.g. to start with a weak dependence on
    some inputs.
    """
    config = config or TrainConfig()
    X = np.asarray(features, dtype=float)
    y = np.asarray(responses, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValueError("features must be a matrix with one row per response")
    if len(y) < 10:
        raise ValueError(f"need at least 10 samples to train, got {len(y)}")
    B_all = basis.mspline_matrix(y)

    ss = np.random.SeedSequence(config.seed)
    init_seed, split_seed, batch_seed = ss.spawn(3)
    rng_split = np.random.default_rng(split_seed)
    rng_batch = np.random.default_rng(batch_seed)

    if groups is None:
        perm = rng_split.permutation(len(y))
        n_val = max(1, int(round(config.validation_fraction * len(y))))
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
    else:
        labels, inverse = np.unique(np.asarray(groups), return_inverse=True)
        if len(inverse) != len(y):
            raise ValueError("groups must have one label per row")
        if len(labels) < 2:
            raise ValueError("need at least two groups for a validation split")
        gperm = rng_split.permutation(len(labels))
        n_gval = min(len(labels) - 1, max(1, int(round(config.validation_fraction * len(labels)))))
        in_val = np.isin(inverse, gperm[:n_gval])
        val_idx, tr_idx = np.nonzero(in_val)[0], np.nonzero(~in_val)[0]
        n_val = len(val_idx)
    Xv, Bv = X[val_idx], B_all[val_idx]
    Xt, Bt = X[tr_idx], B_all[tr_idx]

    params = init_params([X.shape[1], *hidden_sizes, basis.K],
                         int(init_seed.generate_state(1)[0]))
    if input_init_scale is not None:
        params.weights[0] *= np.asarray(input_init_scale, dtype=float)[None, :]
    state = AdamState.zeros_like(params)
    p_arr = params.arrays()

    best_loss = _nll_from_basis(params, Xv, Bv)
    init_loss = best_loss
    best = [a.copy() for a in p_arr]
    best_epoch = 0
    since_best = 0
    history = []
    epoch = 0
    n_tr = len(tr_idx)
    for epoch in range(1, config.max_epochs + 1):
        order = rng_batch.permutation(n_tr)
        for start in range(0, n_tr, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, g = _grad_from_basis(params, Xt[idx], Bt[idx])
            _adam_inplace(state, p_arr, g.arrays(), config.learning_rate)
        val_loss = _nll_from_basis(params, Xv, Bv)
        history.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best = [a.copy() for a in p_arr]
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    info = {
        "best_epoch": best_epoch,
        "stopped_epoch": epoch,
        "initial_val_loss": init_loss,
        "best_val_loss": best_loss,
        "val_history": history,
        "n_train": int(n_tr),
        "n_val": int(n_val),
    }
    log.debug("trained %s: best epoch %d of %d, val loss %.4f",
              [X.shape[1], *hidden_sizes, basis.K], best_epoch, epoch, best_loss)
    return MlpParams.from_arrays(best, info)
