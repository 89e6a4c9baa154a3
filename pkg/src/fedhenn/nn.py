"""Dense feed-forward networks in plain numpy.

A network is split into a representation part (every layer but the last,
each followed by the activation) and a linear prediction head. Gradients
are computed analytically; there is no autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedhenn import cka

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    # derivative of the activation, given pre-activation z and output h
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


@dataclass(frozen=True)
class Architecture:
    """Layer widths ``[d_in, h_1, ..., h_{m-1}, n_classes]`` plus activation."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError(f"architecture needs at least 2 layer dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def rep_dim(self) -> int:
        return self.layer_dims[-2]

    @property
    def has_hidden(self) -> bool:
        return self.n_layers >= 2


@dataclass
class ModelParams:
    """Per-layer ``(weight, bias)`` pairs; ``weight`` is ``d_{l-1} x d_l``, ``bias`` is ``1 x d_l``."""

    arch: Architecture
    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        dims = self.arch.layer_dims
        if len(self.layers) != self.arch.n_layers:
            raise ShapeError(f"expected {self.arch.n_layers} layers, got {len(self.layers)}")
        for l, (w, b) in enumerate(self.layers):
            if w.shape != (dims[l], dims[l + 1]) or b.shape != (1, dims[l + 1]):
                raise ShapeError(
                    f"layer {l}: expected weight {(dims[l], dims[l + 1])} and bias {(1, dims[l + 1])}, "
                    f"got {w.shape} and {b.shape}"
                )

    def copy(self) -> ModelParams:
        return ModelParams(self.arch, [(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> ModelParams:
        return ModelParams(self.arch, [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in self.layers for a in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def same_shape(self, other: ModelParams) -> bool:
        return self.arch.layer_dims == other.arch.layer_dims

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class ForwardResult:
    representation: np.ndarray
    logits: np.ndarray
    # inputs[l] feeds layer l; preacts[l] is layer l's pre-activation (hidden layers only)
    inputs: list[np.ndarray] = field(repr=False)
    preacts: list[np.ndarray] = field(repr=False)


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``(arch, seed)``."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(arch.layer_dims[:-1], arch.layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros((1, fan_out))))
    return ModelParams(arch, layers)


def forward(params: ModelParams, X: np.ndarray) -> ForwardResult:
    X = np.asarray(X, dtype=np.float64)
    d_in = params.arch.layer_dims[0]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] != d_in:
        raise ShapeError(f"input must be B x {d_in} with B >= 1, got shape {X.shape}")
    act = params.arch.activation
    inputs, preacts = [X], []
    h = X
    for w, b in params.layers[:-1]:
        z = h @ w + b
        h = _act(act, z)
        preacts.append(z)
        inputs.append(h)
    w, b = params.layers[-1]
    return ForwardResult(representation=h, logits=h @ w + b, inputs=inputs, preacts=preacts)


def represent(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return forward(params, X).representation


def backward(
    params: ModelParams,
    fr: ForwardResult,
    d_rep: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
) -> ModelParams:
    """Backpropagate upstream gradients on the representation and/or logits."""
    act = params.arch.activation
    grads = params.zeros_like().layers
    rep = fr.inputs[-1]
    d_h = np.zeros_like(rep) if d_rep is None else np.array(d_rep, dtype=np.float64)
    if d_logits is not None:
        w_last = params.layers[-1][0]
        grads[-1] = (rep.T @ d_logits, d_logits.sum(axis=0, keepdims=True))
        d_h = d_h + d_logits @ w_last.T
    for l in range(params.arch.n_layers - 2, -1, -1):
        d_z = d_h * _act_grad(act, fr.preacts[l], fr.inputs[l + 1])
        grads[l] = (fr.inputs[l].T @ d_z, d_z.sum(axis=0, keepdims=True))
        d_h = d_z @ params.layers[l][0].T
    return ModelParams(params.arch, grads)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n_rows:
        raise ShapeError(f"got {y.shape[0]} labels for {n_rows} rows")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y


def task_loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    return float(-_log_softmax(logits)[np.arange(y.size), y].mean())


def _task_loss_and_grad(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    logp = _log_softmax(logits)
    rows = np.arange(y.size)
    loss = float(-logp[rows, y].mean())
    d_logits = np.exp(logp)
    d_logits[rows, y] -= 1.0
    return loss, d_logits / y.size


def loss_and_grad(
    params: ModelParams,
    batch_X: np.ndarray,
    batch_y,
    rad_X: np.ndarray | None = None,
    K_target: np.ndarray | None = None,
    eta: float = 0.0,
    kernel: cka.KernelSpec = cka.LINEAR,
) -> tuple[float, ModelParams]:
    """Composite local objective ``CE + eta * (1 - CKA(K_i, K_target))`` and its gradient.

    ``K_i`` is the kernel of the (column-centred) representation of ``rad_X``
    under the current parameters. With ``eta == 0`` the alignment term is not
    evaluated at all.
    """
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    fr = forward(params, batch_X)
    y = _check_labels(batch_y, fr.logits.shape[0], fr.logits.shape[1])
    loss, d_logits = _task_loss_and_grad(fr.logits, y)
    grads = backward(params, fr, d_logits=d_logits)
    if eta > 0:
        if rad_X is None or K_target is None:
            raise ValueError("eta > 0 requires rad_X and K_target")
        K_target = np.asarray(K_target, dtype=np.float64)
        rad_X = np.asarray(rad_X, dtype=np.float64)
        if K_target.shape != (rad_X.shape[0], rad_X.shape[0]):
            raise ShapeError(f"K_target is {K_target.shape} but rad_X has {rad_X.shape[0]} rows")
        rf = forward(params, rad_X)
        sim, d_sim = cka.alignment_and_grad(rf.representation, K_target, kernel)
        loss += eta * (1.0 - sim)
        align = backward(params, rf, d_rep=-eta * d_sim)
        grads = add(grads, align)
    return loss, grads


def add(a: ModelParams, b: ModelParams, scale: float = 1.0) -> ModelParams:
    """``a + scale * b`` layer by layer."""
    if not a.same_shape(b):
        raise ShapeError(f"shape mismatch: {a.arch.layer_dims} vs {b.arch.layer_dims}")
    return ModelParams(
        a.arch, [(wa + scale * wb, ba + scale * bb) for (wa, ba), (wb, bb) in zip(a.layers, b.layers)]
    )


def sgd_momentum_step(
    params: ModelParams,
    grads: ModelParams,
    velocity: ModelParams,
    lr: float,
    momentum: float,
) -> tuple[ModelParams, ModelParams]:
    """Heavy-ball update: ``v <- momentum * v + g``; ``w <- w - lr * v``."""
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if not (params.same_shape(grads) and params.same_shape(velocity)):
        raise ShapeError("params, grads and velocity must share one architecture")
    new_v, new_p = [], []
    for (w, b), (gw, gb), (vw, vb) in zip(params.layers, grads.layers, velocity.layers):
        vw2 = momentum * vw + gw
        vb2 = momentum * vb + gb
        new_v.append((vw2, vb2))
        new_p.append((w - lr * vw2, b - lr * vb2))
    return ModelParams(params.arch, new_p), ModelParams(params.arch, new_v)


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index on ties
    return np.argmax(forward(params, X).logits, axis=1)
