"""Replay buffers: FIFO, generalized reservoir, and a plural reservoir stack.

A reservoir buffer accepts its n-th offer with probability N / f(n), where
f is a generalized counter.  With the identity counter this is classic
reservoir sampling; slower-growing counters keep the buffer plastic.

Records evicted from the FIFO flow into layer 1 of the stack; records
displaced from layer l flow into layer l + 1.  Low-priority candidates can
be omitted between layers without advancing the target layer's counter.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# stats below this spread give zero rejection probability
OMISSION_EPS = 1e-5
# guards floor() against round-off just below an integer
_FLOOR_SLACK = 1e-7
# exp counter falls back to the identity for q below this
_EXP_Q_ZERO = 1e-12


class ConfigError(ValueError):
    """Invalid buffer or counter configuration."""


class CounterKind(str, enum.Enum):
    QLOG = "qlog"
    LINEAR = "lin"
    EXP = "exp"


@dataclass(frozen=True)
class CounterDesign:
    """Generalized reservoir counter: a kind plus its balance parameter q.

    qlog: q in [0, 2], q = 0 is the classic counter f(n) = n.
    lin:  q in [0, 1), slope 1 - q past capacity.
    exp:  q in (0, 1], saturating exponential growth.
    """

    kind: CounterKind = CounterKind.QLOG
    q: float = 0.0

    def __post_init__(self):
        kind = CounterKind(self.kind)
        object.__setattr__(self, "kind", kind)
        q = float(self.q)
        object.__setattr__(self, "q", q)
        if not math.isfinite(q):
            raise ConfigError(f"q must be finite, got {q}")
        if kind is CounterKind.QLOG and not 0.0 <= q <= 2.0:
            raise ConfigError(f"qlog counter needs q in [0, 2], got {q}")
        if kind is CounterKind.LINEAR and not 0.0 <= q < 1.0:
            raise ConfigError(f"lin counter needs q in [0, 1), got {q}")
        if kind is CounterKind.EXP and not 0.0 < q <= 1.0:
            raise ConfigError(f"exp counter needs q in (0, 1], got {q}")

    @property
    def is_identity(self) -> bool:
        if self.kind is CounterKind.EXP:
            return self.q < _EXP_Q_ZERO
        return self.q == 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "q": self.q}

    @classmethod
    def from_dict(cls, d: dict) -> "CounterDesign":
        return cls(CounterKind(d["kind"]), float(d["q"]))


def _growth_scalar(design: CounterDesign, m: float, capacity: int) -> float:
    u = m / capacity
    q = design.q
    if design.kind is CounterKind.QLOG:
        if q == 1.0:
            return capacity * math.log1p(u)
        return capacity * math.expm1((1.0 - q) * math.log1p(u)) / (1.0 - q)
    if design.kind is CounterKind.LINEAR:
        return (1.0 - q) * m
    return -capacity / q * math.expm1(-q * u)


def _growth_array(design: CounterDesign, m: np.ndarray, capacity: int) -> np.ndarray:
    u = m / capacity
    q = design.q
    if design.kind is CounterKind.QLOG:
        if q == 1.0:
            return capacity * np.log1p(u)
        return capacity * np.expm1((1.0 - q) * np.log1p(u)) / (1.0 - q)
    if design.kind is CounterKind.LINEAR:
        return (1.0 - q) * m
    return -capacity / q * np.expm1(-q * u)


def counter_value(design: CounterDesign, n, capacity: int):
    """Generalized counter f(n); accepts an int or an integer array."""
    if capacity < 1:
        raise ConfigError(f"capacity must be >= 1, got {capacity}")
    if isinstance(n, (int, np.integer)):
        n = int(n)
        if n <= capacity or design.is_identity:
            return n
        extra = math.floor(_growth_scalar(design, n - capacity, capacity) + _FLOOR_SLACK)
        return capacity + extra
    n = np.asarray(n, dtype=np.int64)
    base = np.minimum(n, capacity)
    m = np.maximum(n - capacity, 0)
    if design.is_identity:
        return base + m
    extra = np.floor(_growth_array(design, m.astype(np.float64), capacity) + _FLOOR_SLACK)
    return base + extra.astype(np.int64)


def counter_limit(design: CounterDesign, capacity: int) -> float:
    """lim f(n) as n -> infinity (inf for non-saturating designs)."""
    if design.kind is CounterKind.QLOG and design.q > 1.0:
        return capacity + capacity / (design.q - 1.0)
    if design.kind is CounterKind.EXP and not design.is_identity:
        return capacity + capacity / design.q
    return math.inf


@dataclass
class Record:
    id: int
    x: np.ndarray
    y: np.ndarray
    z: Optional[np.ndarray] = None
    gamma_bar: float = 1.0


class Offer(enum.Enum):
    ACCEPTED_FREE = "accepted_free"
    ACCEPTED_REPLACING = "accepted_replacing"
    REJECTED = "rejected"
    OMITTED = "omitted"


@dataclass
class OfferResult:
    kind: Offer
    # evicted record for ACCEPTED_REPLACING, the offered one for REJECTED/OMITTED
    record: Optional[Record] = None

    @property
    def accepted(self) -> bool:
        return self.kind in (Offer.ACCEPTED_FREE, Offer.ACCEPTED_REPLACING)


class _SlotArrays:
    """Contiguous per-slot storage shared by the FIFO and reservoir buffers."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.ids = np.full(self.capacity, -1, dtype=np.int64)
        self.gamma_bar = np.ones(self.capacity)
        self.x: Optional[np.ndarray] = None
        self.y: Optional[np.ndarray] = None
        self.z: Optional[np.ndarray] = None

    def _alloc(self, rec: Record, with_z: bool):
        x = np.asarray(rec.x, dtype=np.float64).ravel()
        y = np.asarray(rec.y, dtype=np.float64).ravel()
        self.x = np.zeros((self.capacity, x.size))
        self.y = np.zeros((self.capacity, y.size))
        if with_z:
            self.z = np.zeros((self.capacity, np.asarray(rec.z).size))

    def write(self, slot: int, rec: Record, with_z: bool):
        if self.x is None:
            self._alloc(rec, with_z)
        self.ids[slot] = rec.id
        self.x[slot] = np.ravel(rec.x)
        self.y[slot] = np.ravel(rec.y)
        self.gamma_bar[slot] = rec.gamma_bar
        if with_z:
            self.z[slot] = np.ravel(rec.z)

    def read(self, slot: int) -> Record:
        z = None if self.z is None else self.z[slot].copy()
        return Record(int(self.ids[slot]), self.x[slot].copy(), self.y[slot].copy(),
                      z, float(self.gamma_bar[slot]))


class FifoBuffer:
    """Bounded first-in-first-out buffer over a ring of slots."""

    def __init__(self, capacity: int):
        self._s = _SlotArrays(capacity)
        self.capacity = self._s.capacity
        self._head = 0  # slot of the oldest record
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, rec: Record) -> Optional[Record]:
        evicted = None
        if self._size == self.capacity:
            evicted = self._s.read(self._head)
            self._s.write(self._head, rec, with_z=False)
            self._head = (self._head + 1) % self.capacity
        else:
            self._s.write((self._head + self._size) % self.capacity, rec, with_z=False)
            self._size += 1
        return evicted

    def _order(self) -> np.ndarray:
        return (self._head + np.arange(self._size)) % self.capacity

    def records(self) -> list[Record]:
        return [self._s.read(int(i)) for i in self._order()]

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform batch without replacement; returns copies of (x, y)."""
        count = min(count, self._size)
        idx = rng.permutation(self._size)[:count]
        slots = (self._head + idx) % self.capacity
        return self._s.x[slots], self._s.y[slots]

    def to_dict(self) -> dict:
        return {"capacity": self.capacity,
                "records": [_record_to_dict(r) for r in self.records()]}

    @classmethod
    def from_dict(cls, d: dict) -> "FifoBuffer":
        buf = cls(d["capacity"])
        for r in d["records"]:
            buf.push(_record_from_dict(r))
        return buf


class ReservoirBuffer:
    """Fixed-capacity reservoir with a pluggable generalized counter."""

    def __init__(self, capacity: int, design: CounterDesign = CounterDesign()):
        self._s = _SlotArrays(capacity)
        self.capacity = self._s.capacity
        self.design = design
        self.n = 0
        self._size = 0
        self._slot_of: dict[int, int] = {}
        self.misses = 0

    def __len__(self) -> int:
        return self._size

    @property
    def f(self) -> int:
        return counter_value(self.design, self.n, self.capacity)

    def acceptance_probability(self, n: Optional[int] = None) -> float:
        """N / f(n) for the given (default: next) offer index."""
        n = self.n + 1 if n is None else n
        return min(1.0, self.capacity / counter_value(self.design, n, self.capacity))

    def draw_slot(self, rng: np.random.Generator) -> Optional[int]:
        """Advance the counter and pick a zero-based slot, or None on rejection."""
        self.n += 1
        if self.n <= self.capacity and self._size < self.capacity:
            return self._size
        k = int(rng.integers(1, counter_value(self.design, self.n, self.capacity) + 1))
        return k - 1 if k <= self.capacity else None

    def place(self, slot: int, rec: Record) -> OfferResult:
        if rec.z is None:
            raise ValueError(f"record {rec.id} has no stored feature")
        if slot >= self._size:
            self._s.write(slot, rec, with_z=True)
            self._size += 1
            self._slot_of[rec.id] = slot
            return OfferResult(Offer.ACCEPTED_FREE)
        old = self._s.read(slot)
        del self._slot_of[old.id]
        self._s.write(slot, rec, with_z=True)
        self._slot_of[rec.id] = slot
        return OfferResult(Offer.ACCEPTED_REPLACING, old)

    def offer(self, rec: Record, rng: np.random.Generator) -> OfferResult:
        slot = self.draw_slot(rng)
        if slot is None:
            return OfferResult(Offer.REJECTED, rec)
        return self.place(slot, rec)

    def records(self) -> list[Record]:
        return [self._s.read(i) for i in range(self._size)]

    def get(self, rec_id: int) -> Optional[Record]:
        slot = self._slot_of.get(rec_id)
        return None if slot is None else self._s.read(slot)

    def __contains__(self, rec_id: int) -> bool:
        return rec_id in self._slot_of

    @property
    def gamma_bars(self) -> np.ndarray:
        return self._s.gamma_bar[:self._size]

    def update_feature(self, rec_id: int, z_new, gamma_bar_new: float) -> bool:
        slot = self._slot_of.get(rec_id)
        if slot is None:
            self.misses += 1
            return False
        self._s.z[slot] = np.ravel(z_new)
        self._s.gamma_bar[slot] = gamma_bar_new
        return True

    def update_features(self, slots: np.ndarray, ids: np.ndarray,
                        z_new: Optional[np.ndarray], gamma_bar_new: Optional[np.ndarray]) -> int:
        """Vectorized write-back; slots whose id changed count as misses."""
        slots = np.asarray(slots, dtype=np.int64)
        ok = self._s.ids[slots] == ids
        missed = int(ok.size - ok.sum())
        self.misses += missed
        if missed:
            slots = slots[ok]
            z_new = None if z_new is None else z_new[ok]
            gamma_bar_new = None if gamma_bar_new is None else gamma_bar_new[ok]
        if z_new is not None:
            self._s.z[slots] = z_new
        if gamma_bar_new is not None:
            self._s.gamma_bar[slots] = gamma_bar_new
        return missed

    def gather(self, slots: np.ndarray) -> dict[str, np.ndarray]:
        s = self._s
        return {"ids": s.ids[slots], "x": s.x[slots], "y": s.y[slots],
                "z": s.z[slots], "gamma_bar": s.gamma_bar[slots]}

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "design": self.design.to_dict(), "n": self.n,
                "misses": self.misses,
                "records": [_record_to_dict(r) for r in self.records()]}

    @classmethod
    def from_dict(cls, d: dict) -> "ReservoirBuffer":
        buf = cls(d["capacity"], CounterDesign.from_dict(d["design"]))
        for i, r in enumerate(d["records"]):
            buf.place(i, _record_from_dict(r))
        buf.n = int(d["n"])
        buf.misses = int(d.get("misses", 0))
        return buf


def nu_from_zeta(zeta: float) -> Optional[float]:
    """Rejection exponent giving probability zeta at intermediate priority.

    Returns None for zeta == 0, meaning omission is disabled.
    """
    if not 0.0 <= zeta <= 1.0:
        raise ConfigError(f"zeta must be in [0, 1], got {zeta}")
    if zeta == 0.0:
        return None
    if zeta == 1.0:
        return 0.0
    # 1 - sqrt(1 - zeta) written to stay accurate for tiny zeta
    return -math.log(zeta / (1.0 + math.sqrt(1.0 - zeta))) / math.log(2.0)


def rejection_probability(gamma_bar: float, gmax: float, gmin: float,
                          nu: Optional[float]) -> float:
    if nu is None or gmax - gmin < OMISSION_EPS:
        return 0.0
    g = min(max(gamma_bar, gmin), gmax)
    return ((gmax - g) / (gmax - gmin)) ** nu


def _stats_with(buf: ReservoirBuffer, gamma_bar: float) -> tuple[float, float]:
    g = buf.gamma_bars
    if g.size == 0:
        return gamma_bar, gamma_bar
    return max(float(g.max()), gamma_bar), min(float(g.min()), gamma_bar)


@dataclass
class StackStats:
    offers: list[int]
    omitted: list[int]
    rejected: list[int]


class PluralStack:
    """Serial chain of reservoir buffers fed by FIFO evictions."""

    def __init__(self, capacities: Sequence[int], designs: Sequence[CounterDesign],
                 zeta: float = 0.0):
        if len(capacities) != len(designs) or not capacities:
            raise ConfigError("need one counter design per layer and at least one layer")
        qs = [d.q for d in designs]
        if any(a < b for a, b in zip(qs, qs[1:])):
            raise ConfigError(f"layer balances must be non-increasing with depth, got {qs}")
        self.layers = [ReservoirBuffer(c, d) for c, d in zip(capacities, designs)]
        self.zeta = float(zeta)
        self.nu = nu_from_zeta(self.zeta)
        L = len(self.layers)
        self.stats = StackStats([0] * L, [0] * L, [0] * L)

    @classmethod
    def single(cls, capacity: int, design: CounterDesign = CounterDesign()) -> "PluralStack":
        return cls([capacity], [design], 0.0)

    @property
    def total_capacity(self) -> int:
        return sum(b.capacity for b in self.layers)

    def __len__(self) -> int:
        return sum(len(b) for b in self.layers)

    @property
    def misses(self) -> int:
        return sum(b.misses for b in self.layers)

    def passing_rejection(self, layer: int, gamma_bar: float) -> float:
        """Omission probability for a candidate entering ``layer`` (0-based)."""
        if self.nu is None:
            return 0.0
        p_prev = 0.0
        if layer > 0:
            p_prev = rejection_probability(gamma_bar, *_stats_with(self.layers[layer - 1], gamma_bar), self.nu)
        p_this = rejection_probability(gamma_bar, *_stats_with(self.layers[layer], gamma_bar), self.nu)
        return 1.0 - (1.0 - p_prev) * (1.0 - p_this)

    def offer(self, rec: Record, rng: np.random.Generator,
              featurize: Optional[Callable[[np.ndarray], np.ndarray]] = None
              ) -> list[tuple[int, OfferResult]]:
        """Push a FIFO eviction through the layers.

        ``featurize`` computes the stored feature when a record without one is
        first accepted.
        """
        trail = []
        cand = rec
        for l, buf in enumerate(self.layers):
            p = self.passing_rejection(l, cand.gamma_bar)
            if p > 0.0 and rng.random() < p:
                self.stats.omitted[l] += 1
                trail.append((l, OfferResult(Offer.OMITTED, cand)))
                break
            self.stats.offers[l] += 1
            slot = buf.draw_slot(rng)
            if slot is None:
                self.stats.rejected[l] += 1
                trail.append((l, OfferResult(Offer.REJECTED, cand)))
                break
            if cand.z is None:
                if featurize is None:
                    raise ValueError(f"record {cand.id} needs a feature but no featurizer was given")
                cand.z = np.asarray(featurize(cand.x), dtype=np.float64).ravel()
            res = buf.place(slot, cand)
            trail.append((l, res))
            if res.kind is not Offer.ACCEPTED_REPLACING:
                break
            cand = res.record
        return trail

    def update_feature(self, rec_id: int, z_new, gamma_bar_new: float) -> bool:
        for buf in self.layers:
            if rec_id in buf:
                return buf.update_feature(rec_id, z_new, gamma_bar_new)
        self.layers[0].misses += 1
        return False

    def to_dict(self) -> dict:
        return {"zeta": self.zeta, "layers": [b.to_dict() for b in self.layers],
                "stats": {"offers": self.stats.offers, "omitted": self.stats.omitted,
                          "rejected": self.stats.rejected}}

    @classmethod
    def from_dict(cls, d: dict) -> "PluralStack":
        layers = [ReservoirBuffer.from_dict(b) for b in d["layers"]]
        stack = cls([b.capacity for b in layers], [b.design for b in layers], d["zeta"])
        stack.layers = layers
        s = d.get("stats")
        if s:
            stack.stats = StackStats(list(s["offers"]), list(s["omitted"]), list(s["rejected"]))
        return stack


def weighted_sample_without_replacement(weights: np.ndarray, count: int,
                                        rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Draw indices with probability proportional to weight, no repeats.

    Keeps the largest keys w / E with E ~ Exp(1), which has the same law as
    sequential draws with renormalization.  Zero-weight items are never drawn;
    if every weight is zero the draw is uniform.  Returns (indices in draw
    order, fell_back_to_uniform).
    """
    w = np.asarray(weights, dtype=np.float64)
    e = rng.standard_exponential(w.size)
    positive = int(np.count_nonzero(w > 0.0))
    fallback = positive == 0
    if fallback:
        w, positive = np.ones_like(w), w.size
    count = min(count, positive)
    if count == 0:
        return np.empty(0, dtype=np.int64), fallback
    keys = w / e
    if count < w.size:
        top = np.argpartition(-keys, count - 1)[:count]
    else:
        top = np.arange(w.size)
    return top[np.argsort(-keys[top])], fallback


@dataclass
class ReplayHalf:
    layer: np.ndarray
    slot: np.ndarray
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    gamma_bar: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass
class ReplaySample:
    rehearsal: ReplayHalf
    regularization: ReplayHalf
    uniform_fallback_layers: list[int] = field(default_factory=list)


def _empty_half(stack: PluralStack) -> ReplayHalf:
    e = np.empty(0, dtype=np.int64)
    return ReplayHalf(e, e, e, np.empty((0, 0)), np.empty((0, 0)), np.empty((0, 0)), np.empty(0))


def sample_replay(stack: PluralStack, count: int, rng: np.random.Generator) -> ReplaySample:
    """Priority-weighted draw of two disjoint replay halves of ``count`` each.

    Every layer contributes up to 2 * count / L records; shortfalls are not
    redistributed.  Arrays in the result are copies.
    """
    quota = (2 * count) // len(stack.layers)
    parts, fallbacks = [], []
    for l, buf in enumerate(stack.layers):
        if len(buf) == 0:
            continue
        idx, fell_back = weighted_sample_without_replacement(buf.gamma_bars, quota, rng)
        if fell_back:
            fallbacks.append(l)
        if idx.size:
            parts.append((l, idx))
    total = sum(idx.size for _, idx in parts)
    half = total // 2
    if half == 0:
        return ReplaySample(_empty_half(stack), _empty_half(stack), fallbacks)
    if len(stack.layers) == 1:
        # draw order is already random: split it directly
        slot = parts[0][1][:2 * half]
        layer = np.zeros(slot.size, dtype=np.int64)
        g = stack.layers[0].gather(slot)
        ids, x, y, z, gb = g["ids"], g["x"], g["y"], g["z"], g["gamma_bar"]
        return ReplaySample(
            ReplayHalf(layer[:half], slot[:half], ids[:half], x[:half], y[:half], z[:half], gb[:half]),
            ReplayHalf(layer[half:], slot[half:], ids[half:], x[half:], y[half:], z[half:], gb[half:]),
            fallbacks)
    layer = np.concatenate([np.full(idx.size, l, dtype=np.int64) for l, idx in parts])
    slot = np.concatenate([idx for _, idx in parts])
    perm = rng.permutation(total)[:2 * half]
    layer, slot = layer[perm], slot[perm]
    ref = stack.layers[int(layer[0])]._s
    ids = np.empty(2 * half, dtype=np.int64)
    x = np.empty((2 * half, ref.x.shape[1]))
    y = np.empty((2 * half, ref.y.shape[1]))
    z = np.empty((2 * half, ref.z.shape[1]))
    gb = np.empty(2 * half)
    for l in np.unique(layer):
        mask = layer == l
        g = stack.layers[int(l)].gather(slot[mask])
        ids[mask], x[mask], y[mask], z[mask], gb[mask] = g["ids"], g["x"], g["y"], g["z"], g["gamma_bar"]

    def cut(a, b):
        return ReplayHalf(layer[a:b], slot[a:b], ids[a:b], x[a:b], y[a:b], z[a:b], gb[a:b])

    return ReplaySample(cut(0, half), cut(half, 2 * half), fallbacks)


def write_back(stack: PluralStack, half: ReplayHalf, z_new: Optional[np.ndarray],
               gamma_bar_new: Optional[np.ndarray]) -> int:
    """Store corrected features / priorities for a sampled half; returns misses."""
    if len(stack.layers) == 1:
        return stack.layers[0].update_features(half.slot, half.ids, z_new, gamma_bar_new)
    missed = 0
    for l in np.unique(half.layer):
        mask = half.layer == l
        missed += stack.layers[int(l)].update_features(
            half.slot[mask], half.ids[mask],
            None if z_new is None else z_new[mask],
            None if gamma_bar_new is None else gamma_bar_new[mask])
    return missed


def _record_to_dict(r: Record) -> dict:
    return {"id": int(r.id), "x": np.asarray(r.x).tolist(), "y": np.asarray(r.y).tolist(),
            "z": None if r.z is None else np.asarray(r.z).tolist(),
            "gamma_bar": float(r.gamma_bar)}


def _record_from_dict(d: dict) -> Record:
    z = d.get("z")
    return Record(int(d["id"]), np.asarray(d["x"], dtype=np.float64),
                  np.asarray(d["y"], dtype=np.float64),
                  None if z is None else np.asarray(z, dtype=np.float64),
                  float(d["gamma_bar"]))
