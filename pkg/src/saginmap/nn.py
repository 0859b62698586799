"""Small feed-forward networks with hand-derived reverse-mode gradients.

No autograd anywhere: the backward passes are written out explicitly so they
can be verified against central finite differences. The same machinery backs
the diffusion denoiser, the neural classification baseline, and the PPO
actor-critic. Everything is float64 numpy and deterministic given the rng.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericFault


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(z):
    return z * sigmoid(z)


def _silu_grad(z):
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


_ACT = {
    "silu": (silu, _silu_grad),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


@dataclass
class Mlp:
    """Fully-connected net: affine layers with `activation` on hidden layers
    and a linear output layer."""

    sizes: tuple
    activation: str
    weights: list  # weights[i]: (sizes[i], sizes[i+1])
    biases: list   # biases[i]: (sizes[i+1],)

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self) -> list:
        """Flat list of parameter arrays, weights then biases per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.activation,
                   [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(sizes, activation: str, rng: np.random.Generator, out_scale: float = 1.0) -> Mlp:
    """He-style initialization; the output layer scale is multiplied by
    `out_scale` (0 gives the exact zero map on the output)."""
    if activation not in _ACT:
        raise ConfigError(f"unknown activation {activation!r}; choose from {sorted(_ACT)}")
    if len(sizes) < 2:
        raise ConfigError(f"need at least input and output sizes, got {sizes}")
    weights, biases = [], []
    last = len(sizes) - 2
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        std = np.sqrt(2.0 / fan_in)
        if i == last:
            std *= out_scale
        weights.append(rng.normal(0.0, std, size=(sizes[i], sizes[i + 1])))
        biases.append(np.zeros(sizes[i + 1]))
    return Mlp(tuple(int(s) for s in sizes), activation, weights, biases)


def mlp_forward(mlp: Mlp, x: np.ndarray):
    """Forward pass. Returns (output, cache) where cache feeds mlp_backward."""
    act, _ = _ACT[mlp.activation]
    h = np.asarray(x, dtype=float)
    pre_acts, hiddens = [], [h]
    n_layers = len(mlp.weights)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w + b
        if i < n_layers - 1:
            pre_acts.append(z)
            h = act(z)
            hiddens.append(h)
        else:
            h = z
    return h, (pre_acts, hiddens)


def mlp_backward(mlp: Mlp, cache, dy: np.ndarray):
    """Backward pass for mlp_forward's cache.

    Returns (grads, dx): grads matches mlp.params() order, dx is the
    gradient with respect to the input batch.
    """
    _, dact = _ACT[mlp.activation]
    pre_acts, hiddens = cache
    d_weights = [None] * len(mlp.weights)
    d_biases = [None] * len(mlp.biases)
    g = np.asarray(dy, dtype=float)
    for i in range(len(mlp.weights) - 1, -1, -1):
        h_in = hiddens[i]
        d_weights[i] = h_in.T @ g
        d_biases[i] = g.sum(axis=0)
        g = g @ mlp.weights[i].T
        if i > 0:
            g = g * dact(pre_acts[i - 1])
    grads = []
    for dw, db in zip(d_weights, d_biases):
        grads.append(dw)
        grads.append(db)
    return grads, g


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in {name}")
    return arr


class Adam:
    """Adaptive moment estimation over a list of parameter arrays.

    Updates are applied in place, in list order, so training is
    bit-deterministic for a fixed draw sequence.
    """

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not (lr > 0 and 0 < beta1 < 1 and 0 < beta2 < 1 and eps > 0):
            raise ConfigError(f"bad Adam hyper-parameters lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list, grads: list) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
