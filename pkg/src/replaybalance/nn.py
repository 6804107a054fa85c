"""Small feed-forward model with hand-written backprop, heads, and Adam.

All parameters live in one flat vector so the optimizer touches a single
array per step; the per-layer weights are views into it.
"""

from __future__ import annotations

import enum
import json
import math
from typing import Sequence

import numpy as np

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Head(str, enum.Enum):
    GAUSSIAN = "gaussian"        # z = (mean, log std)
    CATEGORICAL = "categorical"  # z = logits


class Mlp:
    """tanh hidden layers, identity output."""

    def __init__(self, sizes: Sequence[int], head: Head, seed: int = 0):
        self.sizes = [int(s) for s in sizes]
        self.head = Head(head)
        if self.head is Head.GAUSSIAN and self.sizes[-1] != 2:
            raise ValueError("gaussian head needs output_dim == 2")
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        self._shapes = shapes
        self.params = np.zeros(sum(int(np.prod(s)) for s in shapes))
        self._grad = np.empty_like(self.params)
        self._bind()
        rng = np.random.default_rng(seed)
        for W in self.weights:
            limit = math.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-limit, limit, size=W.shape)

    def _bind(self):
        self.weights, self.biases = [], []
        self._grad_views = []
        off = 0
        for i, shape in enumerate(self._shapes):
            size = int(np.prod(shape))
            v = self.params[off:off + size].reshape(shape)
            (self.weights if i % 2 == 0 else self.biases).append(v)
            self._grad_views.append(self._grad[off:off + size].reshape(shape))
            off += size

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.isfinite(x).all():
            raise ValueError("non-finite model input")
        single = x.ndim == 1
        z, _ = self.forward_cached(x[None] if single else x)
        return z[0] if single else z

    def forward_cached(self, x: np.ndarray):
        """Batch forward keeping activations for ``backward``; no input checks."""
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        acts = [x]
        a = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W + b
            if i < last:
                a = np.tanh(a)
            acts.append(a)
        return a, acts

    def backward(self, acts: list, dz: np.ndarray) -> np.ndarray:
        """Flat gradient of sum(dz * z) w.r.t. params.

        The returned array is reused by the next call; copy it to keep it.
        """
        delta = dz
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = acts[i]
            np.matmul(a_in.T, delta, out=self._grad_views[2 * i])
            np.sum(delta, axis=0, out=self._grad_views[2 * i + 1])
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - a_in * a_in)
        return self._grad

    def get_flat(self) -> np.ndarray:
        return self.params.copy()

    def set_flat(self, flat: np.ndarray):
        self.params[...] = flat

    def to_json(self) -> str:
        return json.dumps({"sizes": self.sizes, "head": self.head.value,
                           "params": self.params.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Mlp":
        d = json.loads(text)
        m = cls(d["sizes"], Head(d["head"]))
        m.set_flat(np.asarray(d["params"], dtype=np.float64))
        return m


def nll(head: Head, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row negative log-likelihood; z is (m, out), y is (m, 1)."""
    z = np.atleast_2d(z)
    y = np.asarray(y, dtype=np.float64).reshape(z.shape[0], -1)
    if Head(head) is Head.GAUSSIAN:
        mu, log_sd = z[:, 0], z[:, 1]
        r = (y[:, 0] - mu) * np.exp(-log_sd)
        return 0.5 * r * r + log_sd + HALF_LOG_2PI
    labels = _labels(z, y)
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), labels]


def nll_with_grad(head: Head, z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row NLL and its gradient w.r.t. z."""
    y = np.asarray(y, dtype=np.float64).reshape(z.shape[0], -1)
    if Head(head) is Head.GAUSSIAN:
        mu, log_sd = z[:, 0], z[:, 1]
        inv_sd = np.exp(-log_sd)
        r = (y[:, 0] - mu) * inv_sd
        g = np.empty_like(z)
        g[:, 0] = -r * inv_sd
        g[:, 1] = 1.0 - r * r
        return 0.5 * r * r + log_sd + HALF_LOG_2PI, g
    labels = _labels(z, y)
    rows = np.arange(z.shape[0])
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    loss = -np.log(p[rows, labels])
    p[rows, labels] -= 1.0
    return loss, p


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _labels(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    labels = y[:, 0].astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"class index out of range for {z.shape[1]} classes")
    return labels


def kld_gaussian(mu_p, sigma_p, mu_q, sigma_q):
    """KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2)); elementwise."""
    mu_p, sigma_p, mu_q, sigma_q = map(np.asarray, (mu_p, sigma_p, mu_q, sigma_q))
    if (sigma_p <= 0).any() or (sigma_q <= 0).any():
        raise ValueError("standard deviations must be positive")
    ratio = sigma_p / sigma_q
    out = -np.log(ratio) + 0.5 * (ratio ** 2 + ((mu_p - mu_q) / sigma_q) ** 2) - 0.5
    return out if out.ndim else float(out)


class Adam:
    """Bias-corrected adaptive-moment optimizer over a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        if params.shape != self.m.shape or grad.shape != self.m.shape:
            raise ValueError("parameter/gradient shape mismatch with optimizer state")
        if not np.isfinite(grad).all():
            raise FloatingPointError("non-finite gradient")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        step = self.lr * math.sqrt(1.0 - self.beta2 ** self.t) / (1.0 - self.beta1 ** self.t)
        params -= step * self.m / (np.sqrt(self.v) + self.eps)
