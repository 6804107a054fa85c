"""Monte Carlo and closed-form checks of reservoir acceptance and retention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .buffers import CounterDesign, counter_value


@dataclass(frozen=True)
class ProbeResult:
    empirical: float
    analytic: float
    trials: int
    z_score: float


def _z(empirical: float, analytic: float, trials: int) -> float:
    var = analytic * (1.0 - analytic) / trials
    if var == 0.0:
        return 0.0 if empirical == analytic else math.copysign(math.inf, empirical - analytic)
    return (empirical - analytic) / math.sqrt(var)


def analytic_retention(design: CounterDesign, capacity: int, n: int, n_prime: int) -> float:
    """P(the n-th offer is resident after n_prime further offers).

    Product form N/f(n+n') * prod_{m=1..n'} (f(n+m) - 1) / f(n+m-1).  Offers
    that land while the buffer is still filling are always kept, so the
    product starts at the first offer past capacity.
    """
    if n < 1 or n_prime < 0:
        raise ValueError("need n >= 1 and n_prime >= 0")
    end = n + n_prime
    if end <= capacity:
        return 1.0
    start = max(n, capacity)
    f = counter_value(design, np.arange(start, end + 1), capacity).astype(np.float64)
    return float(capacity / f[-1] * np.prod((f[1:] - 1.0) / f[:-1]))


def simulate_membership(design: CounterDesign, capacity: int, offers: int, trials: int,
                        seed) -> np.ndarray:
    """Fraction of trials in which each token 1..offers ends up resident.

    Runs ``trials`` buffers in lockstep: each offer past capacity draws a
    slot k uniformly from 1..f(n) and replaces slot k when k <= capacity.
    Entry 0 of the result is unused.
    """
    rng = np.random.default_rng(seed)
    held = np.zeros((trials, capacity), dtype=np.int64)
    fill = min(offers, capacity)
    held[:, :fill] = np.arange(1, fill + 1)
    f = counter_value(design, np.arange(offers + 1), capacity)
    rows = np.arange(trials)
    for t in range(capacity + 1, offers + 1):
        k = rng.integers(1, f[t] + 1, size=trials)
        hit = k <= capacity
        held[rows[hit], k[hit] - 1] = t
    if offers < capacity:
        held = held[:, :fill]
    return np.bincount(held.ravel(), minlength=offers + 1) / trials


def empirical_membership(design: CounterDesign, capacity: int, offers: int, mark: int,
                         trials: int, seed) -> ProbeResult:
    if not 1 <= mark <= offers:
        raise ValueError("need 1 <= mark <= offers")
    emp = float(simulate_membership(design, capacity, offers, trials, seed)[mark])
    ana = analytic_retention(design, capacity, mark, offers - mark)
    return ProbeResult(emp, ana, trials, _z(emp, ana, trials))


def membership_table(design: CounterDesign, capacity: int, offers: int, trials: int,
                     seed) -> list[ProbeResult]:
    """One result per token, oldest first."""
    emp = simulate_membership(design, capacity, offers, trials, seed)
    out = []
    for mark in range(1, offers + 1):
        ana = analytic_retention(design, capacity, mark, offers - mark)
        out.append(ProbeResult(float(emp[mark]), ana, trials, _z(float(emp[mark]), ana, trials)))
    return out


def acceptance_curve(design: CounterDesign, capacity: int, max_offers: int,
                     stride: int = 1) -> np.ndarray:
    """Rows of (n, N / f(n)) for n = 1, 1 + stride, ... <= max_offers."""
    if stride < 1:
        raise ValueError("stride must be positive")
    n = np.arange(1, max_offers + 1, stride)
    p = np.minimum(1.0, capacity / counter_value(design, n, capacity))
    return np.column_stack([n.astype(np.float64), p])
