"""Bias-free dense ReLU networks with masks, manual backprop and rewind.

Weight matrix ``W_j`` has shape ``(n_{j-1}, n_j)`` and the layer computes
``W_j^T a`` (row-vector form ``a @ W_j``).  The last matrix holds the class
columns ``w_k``.  Hidden unit outputs are multiplied by per-unit scaling
factors ``gamma`` (all ones unless network slimming trains them).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


def _f64(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Network:
    weights: tuple
    scaling: tuple = None

    def __post_init__(self):
        ws = tuple(_f64(w) for w in self.weights)
        if not ws:
            raise ShapeError("network needs at least one weight matrix")
        for j, w in enumerate(ws):
            if w.ndim != 2 or min(w.shape) < 1:
                raise ShapeError(f"layer {j + 1}: weight must be a non-empty 2-D matrix, got shape {w.shape}")
            if j and ws[j - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {j + 1}: expects {w.shape[0]} inputs but layer {j} has {ws[j - 1].shape[1]} units"
                )
        if ws[-1].shape[1] < 2:
            raise ShapeError("final layer must have at least 2 classes")
        if self.scaling is None:
            gs = tuple(_f64(np.ones(w.shape[1])) for w in ws[:-1])
        else:
            gs = tuple(_f64(g) for g in self.scaling)
            if len(gs) != len(ws) - 1:
                raise ShapeError(f"expected {len(ws) - 1} scaling vectors, got {len(gs)}")
            for j, (g, w) in enumerate(zip(gs, ws)):
                if g.shape != (w.shape[1],):
                    raise ShapeError(f"layer {j + 1}: scaling shape {g.shape} != ({w.shape[1]},)")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "scaling", gs)

    @property
    def dims(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def replace(self, weights=None, scaling=None) -> "Network":
        return Network(self.weights if weights is None else weights,
                       self.scaling if scaling is None else scaling)

    def n_weights(self) -> int:
        return sum(w.size for w in self.weights)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary keep-pattern (True = weight survives) over every weight matrix."""

    keep: tuple

    def __post_init__(self):
        ks = []
        for j, k in enumerate(self.keep):
            a = np.asarray(k)
            if a.dtype != bool:
                if not np.all((a == 0) | (a == 1)):
                    raise ValueError(f"layer {j + 1}: mask entries must be 0 or 1")
                a = a.astype(bool)
            a = a.copy()
            a.setflags(write=False)
            ks.append(a)
        object.__setattr__(self, "keep", tuple(ks))

    @classmethod
    def ones(cls, net: Network) -> "Mask":
        return cls(tuple(np.ones(w.shape, dtype=bool) for w in net.weights))

    @property
    def total(self) -> int:
        return int(sum(k.size for k in self.keep))

    @property
    def zeros(self) -> int:
        return int(sum(k.size - np.count_nonzero(k) for k in self.keep))

    @property
    def ratio(self) -> float:
        return self.zeros / self.total

    def __and__(self, other: "Mask") -> "Mask":
        return Mask(tuple(a & b for a, b in zip(self.keep, other.keep)))

    def __eq__(self, other):
        return isinstance(other, Mask) and len(self.keep) == len(other.keep) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.keep, other.keep))

    def __le__(self, other: "Mask") -> bool:
        return all(np.all(~a | b) for a, b in zip(self.keep, other.keep))


def check_mask(net: Network, mask: Mask | None) -> None:
    if mask is None:
        return
    if len(mask.keep) != net.depth:
        raise ShapeError(f"mask has {len(mask.keep)} layers, network has {net.depth}")
    for j, (k, w) in enumerate(zip(mask.keep, net.weights)):
        if k.shape != w.shape:
            raise ShapeError(f"layer {j + 1}: mask shape {k.shape} != weight shape {w.shape}")


def effective_weights(net: Network, mask: Mask | None) -> list:
    check_mask(net, mask)
    if mask is None:
        return list(net.weights)
    return [np.where(k, w, 0.0) for w, k in zip(net.weights, mask.keep)]


def init_network(dims, rng, scale_init=1.0) -> Network:
    """He-style uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    dims = list(dims)
    if len(dims) < 2 or min(dims) < 1 or dims[-1] < 2:
        raise ShapeError(f"invalid dims {dims}")
    rng = np.random.default_rng(rng)
    ws = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / n_in)
        ws.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
    gs = [np.full(n, float(scale_init)) for n in dims[1:-1]]
    return Network(tuple(ws), tuple(gs))


def _as_batch(net: Network, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.dims[0]:
        raise ShapeError(f"layer 1: input has shape {x.shape}, expected length {net.dims[0]}")
    return X, single


def _forward_cache(net, mask, X):
    ws = effective_weights(net, mask)
    acts, pre, relu = [X], [], []
    a = X
    for w, g in zip(ws[:-1], net.scaling):
        z = a @ w
        h = np.maximum(z, 0.0)
        a = h * g
        pre.append(z)
        relu.append(h)
        acts.append(a)
    logits = a @ ws[-1]
    return ws, acts, pre, relu, logits


def forward(net: Network, mask: Mask | None, x) -> np.ndarray:
    """Logits for one input vector or a batch of row vectors."""
    X, single = _as_batch(net, x)
    logits = _forward_cache(net, mask, X)[-1]
    return logits[0] if single else logits


def forward_with_pattern(net: Network, mask: Mask | None, x):
    """Logits plus the activation pattern ``D_j`` (pre-activation strictly > 0)."""
    X, single = _as_batch(net, x)
    _, _, pre, _, logits = _forward_cache(net, mask, X)
    pattern = [z > 0 for z in pre]
    if single:
        return logits[0], [d[0] for d in pattern]
    return logits, pattern


def predict(net: Network, mask: Mask | None, X) -> np.ndarray:
    return np.argmax(forward(net, mask, np.atleast_2d(X)), axis=1)


def correct(logits: np.ndarray, labels) -> np.ndarray:
    """Strict correctness: the label logit beats every other logit (ties are wrong)."""
    labels = np.asarray(labels)
    rows = np.arange(len(labels))
    true = logits[rows, labels]
    others = logits.copy()
    others[rows, labels] = -np.inf
    return true > others.max(axis=1)


@dataclass
class Grads:
    weights: list
    scaling: list = field(default_factory=list)


def _softmax(logits):
    s = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits):
    s = logits - logits.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _check_labels(net, X, y):
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("empty batch")
    if y.shape != (len(X),):
        raise ShapeError(f"labels shape {y.shape} does not match batch of {len(X)}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0 or y.max() >= net.n_classes:
        raise ValueError(f"label out of range [0, {net.n_classes})")
    return y


def cross_entropy(logits, y) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    return -_log_softmax(logits)[np.arange(len(y)), y]


def _backward(net, ws, acts, pre, relu, dlogits):
    gw = [None] * len(ws)
    gs = [None] * len(net.scaling)
    gw[-1] = acts[-1].T @ dlogits
    da = dlogits @ ws[-1].T
    for j in range(len(ws) - 2, -1, -1):
        gs[j] = np.einsum("bi,bi->i", da, relu[j])
        dz = da * net.scaling[j] * (pre[j] > 0)
        gw[j] = acts[j].T @ dz
        da = dz @ ws[j].T
    return gw, gs, da


def loss_and_grads(net: Network, mask: Mask | None, X, y):
    """Mean cross-entropy over the batch and its exact gradients.

    Gradients at masked positions are exactly zero.
    """
    X, _ = _as_batch(net, X)
    y = _check_labels(net, X, y)
    ws, acts, pre, relu, logits = _forward_cache(net, mask, X)
    n = len(y)
    loss = float(cross_entropy(logits, y).mean())
    dlogits = _softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    gw, gs, _ = _backward(net, ws, acts, pre, relu, dlogits)
    if mask is not None:
        gw = [np.where(k, g, 0.0) for g, k in zip(gw, mask.keep)]
    return loss, Grads(gw, gs)


def loss_input_grad(net: Network, mask: Mask | None, X, y):
    """Per-sample cross-entropy and its gradient w.r.t. each input row."""
    X, _ = _as_batch(net, X)
    y = _check_labels(net, X, y)
    ws, acts, pre, relu, logits = _forward_cache(net, mask, X)
    dlogits = _softmax(logits)
    dlogits[np.arange(len(y)), y] -= 1.0
    _, _, dx = _backward(net, ws, acts, pre, relu, dlogits)
    return cross_entropy(logits, y), dx


def grad_input(net: Network, mask: Mask | None, x, k: int, yhat: int) -> np.ndarray:
    """Gradient of ``g_yhat - g_k`` w.r.t. the input (batch or single vector).

    ReLU kinks use the strict-positivity subgradient.
    """
    c = net.n_classes
    if not (0 <= k < c and 0 <= yhat < c):
        raise ValueError(f"class indices ({yhat}, {k}) out of range [0, {c})")
    if k == yhat:
        raise ValueError("k must differ from yhat")
    X, single = _as_batch(net, x)
    ws, acts, pre, relu, _ = _forward_cache(net, mask, X)
    dlogits = np.zeros((len(X), c))
    dlogits[:, yhat] = 1.0
    dlogits[:, k] = -1.0
    dx = _backward(net, ws, acts, pre, relu, dlogits)[2]
    return dx[0] if single else dx


def apply_mask(net: Network, mask: Mask) -> Network:
    return net.replace(weights=effective_weights(net, mask))


def rewind(current: Network, initial: Network, mask: Mask) -> Network:
    """Reset to ``initial ⊙ mask``; ``current`` only supplies the expected layout."""
    if current.dims != initial.dims:
        raise ShapeError(f"dims differ: {current.dims} vs {initial.dims}")
    return apply_mask(initial, mask)
