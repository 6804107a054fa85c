"""Nonstationary toy streams with ground-truth oracles.

Regression: a sum of sines swept left to right over [-2.5, 2.5], with noisy
targets.  Classification: a raster scan over a grid on [-1, 1]^2 labelled by
the nearest Gaussian centre, or an outlier class when every centre is far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Mlp, kld_gaussian


@dataclass(frozen=True)
class StreamSchedule:
    cycles: int
    train_every: int
    updates_per_session: int = 16

    def __post_init__(self):
        for name in ("cycles", "train_every", "updates_per_session"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")


REGRESSION_SCHEDULE = StreamSchedule(cycles=5, train_every=16)
CLASSIFICATION_SCHEDULE = StreamSchedule(cycles=5, train_every=32)


@dataclass
class SineMixtureTask:
    components: list  # (amplitude, frequency, phase) triples
    noise_sd: float = 0.1
    x_min: float = -2.5
    x_max: float = 2.5
    step: float = 0.001

    def __post_init__(self):
        self.components = [tuple(map(float, c)) for c in self.components]
        if not 1 <= len(self.components) <= 7:
            raise ValueError("sine mixture needs 1..7 components")

    @classmethod
    def random(cls, seed: int, n_components: int | None = None) -> "SineMixtureTask":
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 8)) if n_components is None else n_components
        comps = [(rng.uniform(0.2, 1.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, 2 * math.pi))
                 for _ in range(k)]
        return cls(comps)

    @property
    def grid(self) -> np.ndarray:
        n = int(round((self.x_max - self.x_min) / self.step))
        return self.x_min + self.step * np.arange(n)

    def mean(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return sum(a * np.sin(f * x + p) for a, f, p in self.components)

    def to_dict(self) -> dict:
        return {"kind": "regression", "components": [list(c) for c in self.components],
                "noise_sd": self.noise_sd}

    @classmethod
    def from_dict(cls, d: dict) -> "SineMixtureTask":
        return cls(d["components"], d.get("noise_sd", 0.1))


@dataclass
class GaussianGridTask:
    means: np.ndarray  # (K, 2)
    threshold: float = 0.3 ** 2
    grid_step: float = 0.02
    input_noise_sd: float = 0.01

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        if not 1 <= len(self.means) <= 16:
            raise ValueError("gaussian grid needs 1..16 components")

    @classmethod
    def random(cls, seed: int, n_components: int | None = None,
               min_separation: float = 0.25) -> "GaussianGridTask":
        rng = np.random.default_rng(seed)
        k = int(rng.integers(8, 17)) if n_components is None else n_components
        means = []
        while len(means) < k:
            p = rng.uniform(-0.8, 0.8, size=2)
            if all(np.hypot(*(p - m)) >= min_separation for m in means):
                means.append(p)
        return cls(np.array(means))

    @property
    def n_components(self) -> int:
        return len(self.means)

    @property
    def n_classes(self) -> int:
        return self.n_components + 1

    @property
    def outlier(self) -> int:
        return self.n_components

    @property
    def grid(self) -> np.ndarray:
        """Cell centres in raster order (second coordinate outer)."""
        n = int(round(2.0 / self.grid_step))
        c = -1.0 + self.grid_step * (np.arange(n) + 0.5)
        gy, gx = np.meshgrid(c, c, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def true_label(self, x) -> np.ndarray | int:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = x.reshape(-1, 2)
        d2 = ((pts[:, None, :] - self.means[None]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)  # first index wins ties
        lab = np.where(d2[np.arange(len(pts)), nearest] <= self.threshold, nearest, self.outlier)
        return int(lab[0]) if single else lab

    def to_dict(self) -> dict:
        return {"kind": "classification", "means": self.means.tolist(),
                "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianGridTask":
        return cls(np.asarray(d["means"]), d.get("threshold", 0.09))


def gen_regression_stream(task: SineMixtureTask, seed: int, cycles: int = 5):
    """(x, y) arrays of shape (cycles * 5000, 1)."""
    rng = np.random.default_rng(seed)
    g = task.grid
    mu = task.mean(g)
    xs = np.tile(g, cycles)
    ys = np.tile(mu, cycles) + task.noise_sd * rng.standard_normal(xs.size)
    return xs[:, None], ys[:, None]


def gen_classification_stream(task: GaussianGridTask, seed: int, cycles: int = 5):
    """(x, label) arrays: raster scans with jittered inputs, clean labels."""
    rng = np.random.default_rng(seed)
    g = task.grid
    labels = task.true_label(g)
    xs = np.tile(g, (cycles, 1))
    xs = xs + task.input_noise_sd * rng.standard_normal(xs.shape)
    return xs, np.tile(labels, cycles).astype(np.float64)[:, None]


def gen_switched_stream(task_a: GaussianGridTask, task_b: GaussianGridTask, seed: int,
                        cycles_each: int = 5):
    if task_a.n_classes != task_b.n_classes or task_a.grid_step != task_b.grid_step:
        raise ValueError("switched tasks must share class count and grid geometry")
    ss = np.random.SeedSequence(seed).spawn(2)
    xa, ya = gen_classification_stream(task_a, ss[0], cycles_each)
    xb, yb = gen_classification_stream(task_b, ss[1], cycles_each)
    return np.concatenate([xa, xb]), np.concatenate([ya, yb])


def eval_kld(model: Mlp, task: SineMixtureTask) -> float:
    """Summed KL(true || predicted) over the noiseless sweep grid."""
    g = task.grid
    z = model.forward(g[:, None])
    return float(np.sum(kld_gaussian(task.mean(g), task.noise_sd, z[:, 0], np.exp(z[:, 1]))))


def eval_acc(model: Mlp, task: GaussianGridTask) -> float:
    g = task.grid
    pred = model.forward(g).argmax(axis=1)
    return float(100.0 * np.mean(pred == task.true_label(g)))


def task_from_dict(d: dict):
    return SineMixtureTask.from_dict(d) if d["kind"] == "regression" else GaussianGridTask.from_dict(d)
