"""Adaptive dark experience replay training step.

The loss mixes FIFO likelihood, rehearsal likelihood on replayed records, and
a feature-distillation term toward stored features.  Its two weights are
Lagrange multipliers kept in range by sigmoid/softplus maps and tuned so that
replay loss tracks FIFO loss and the mean distillation error tracks a running
quantile threshold.  Stored features that disagree strongly with the model are
partly corrected toward the current output, and their replay priority decays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .buffers import FifoBuffer, PluralStack, sample_replay, write_back
from .nn import Adam, Mlp, nll_with_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mechanisms:
    adapt_alpha: bool = True
    adapt_beta: bool = True
    block: bool = True
    correct: bool = True


METHODS = {
    "A2ER": Mechanisms(),
    "DER": Mechanisms(False, False, False, False),
    "-Aa": Mechanisms(adapt_alpha=False),
    "-Ab": Mechanisms(adapt_beta=False),
    "-B": Mechanisms(block=False),
    "-C": Mechanisms(correct=False),
}


def _softplus(a: float) -> float:
    return max(a, 0.0) + math.log1p(math.exp(-abs(a)))


def _softplus_inv(v: float) -> float:
    if v <= 0:
        raise ValueError(f"softplus pre-image needs a positive value, got {v}")
    return v + math.log(-math.expm1(-v))


def _sigmoid(a: float) -> float:
    if a >= 0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


def _logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit needs p in (0, 1), got {p}")
    return math.log(p) - math.log1p(-p)


@dataclass
class AdaptiveWeights:
    """Multipliers (stored as unconstrained pre-images) and the threshold."""

    alpha_pre: float
    beta_pre: float
    delta_q: Optional[float] = None  # set from the first regularization batch
    rho: float = 0.5
    lam: float = 0.5
    lr_mult: float = 1e-2

    @classmethod
    def initial(cls, alpha: float = 1.0, beta: float = 0.5, **kw) -> "AdaptiveWeights":
        return cls(_softplus_inv(alpha), _logit(beta), **kw)

    @property
    def alpha(self) -> float:
        return _softplus(self.alpha_pre)

    @property
    def beta(self) -> float:
        return _sigmoid(self.beta_pre)


@dataclass
class StepReport:
    loss_fifo: float
    loss_rs: float
    reg_mean: float
    total: float
    alpha: float
    beta: float
    delta_q: float
    n_corrected: int
    blocked_mass: float  # 1 - mean replay priority over the stack
    misses: int = 0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> dict:
        return asdict(self)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, report: StepReport):
        super().__init__(f"non-finite loss, step aborted: {report}")
        self.report = report


def compute_eta(delta_tau, delta_q: float, rho: float):
    """1 inside the threshold, falling linearly to 0 at the estimated maximum."""
    span = delta_q * (1.0 - rho) / rho
    d = np.asarray(delta_tau, dtype=np.float64)
    if span <= 0.0:
        eta = np.ones_like(d)
    else:
        eta = 1.0 - np.minimum(np.maximum(d - delta_q, 0.0), span) / span
    return eta if eta.ndim else float(eta)


def _kept_sq(d: np.ndarray, eta: np.ndarray, delta_q: float) -> np.ndarray:
    """(1 - gamma)^2: target error over current error, 1 where the error is zero."""
    target = d - (1.0 - eta) * (d - delta_q)
    ratio = np.ones_like(d)
    np.divide(target, d, out=ratio, where=d > 0.0)
    return np.minimum(np.maximum(ratio, 0.0, out=ratio), 1.0, out=ratio)


def compute_gamma(delta_tau, eta, delta_q: float):
    """Correction rate that brings the feature error to eta*D + (1-eta)*D_Q."""
    d = np.atleast_1d(np.asarray(delta_tau, dtype=np.float64))
    e = np.broadcast_to(np.asarray(eta, dtype=np.float64), d.shape)
    g = 1.0 - np.sqrt(_kept_sq(d, e, delta_q))
    return g if np.ndim(delta_tau) else float(g[0])


def quantile(values: np.ndarray, rho: float) -> float:
    """Linear interpolation between order statistics."""
    s = np.sort(values)
    pos = rho * (s.size - 1)
    lo = int(pos)
    if lo + 1 >= s.size:
        return float(s[-1])
    return float(s[lo] + (pos - lo) * (s[lo + 1] - s[lo]))


def update_delta_q(weights: AdaptiveWeights, reg_batch_deltas, batch_size: int,
                   reservoir_total_capacity: int) -> None:
    d = np.asarray(reg_batch_deltas, dtype=np.float64)
    if d.size == 0:
        return
    q = quantile(d, weights.rho)
    if weights.delta_q is None:
        weights.delta_q = q
        return
    mix = batch_size / reservoir_total_capacity
    weights.delta_q = (1.0 - mix) * weights.delta_q + mix * q


def update_priority(gamma_bar, gamma, lam: float):
    return (1.0 - lam) * gamma_bar + lam * (1.0 - gamma)


def correct_feature(z, h, gamma):
    z = np.asarray(z, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if z.shape != h.shape:
        raise ValueError(f"feature shape mismatch: {z.shape} vs {h.shape}")
    g = np.asarray(gamma, dtype=np.float64)
    if g.ndim and z.ndim == 2:
        g = g[:, None]
    return (1.0 - g) * z + g * h


def multiplier_gradients(loss_fifo: float, loss_rs: float, compensated_reg_mean: float,
                         delta_q: float) -> tuple[float, float]:
    """(d/dbeta, d/dalpha) of the multiplier objectives.

    ``compensated_reg_mean`` is already the mean of eta*(D - D_Q), so
    ``delta_q`` only enters through it; it is kept for signature clarity.
    """
    return -(loss_rs - loss_fifo), -compensated_reg_mean


def apply_multiplier_step(weights: AdaptiveWeights, g_beta: float, g_alpha: float,
                          mech: Mechanisms) -> None:
    """One descent step on the pre-images through the constraint maps."""
    if mech.adapt_beta:
        b = weights.beta
        weights.beta_pre -= weights.lr_mult * g_beta * b * (1.0 - b)
    if mech.adapt_alpha:
        weights.alpha_pre -= weights.lr_mult * g_alpha * _sigmoid(weights.alpha_pre)


@dataclass
class Objective:
    """Loss terms of one batch plus the per-record quantities the step reuses."""

    loss_fifo: float
    loss_rs: float
    reg_mean: float
    total: float
    grad: np.ndarray  # flat parameter gradient; reused by the model's next backward
    delta_q: Optional[float] = None
    diff: Optional[np.ndarray] = None  # h - z on the regularization half
    delta: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None


def objective(model: Mlp, xf: np.ndarray, yf: np.ndarray, reh, reg, alpha: float, beta: float,
              delta_q: Optional[float], rho: float, correct: bool = True,
              fifo_only: bool = False) -> Objective:
    """Total loss and its parameter gradient.

    ``reh``/``reg`` are replay halves (or None).  The correction factors are
    computed from the current model and held constant for the gradient.  A
    missing ``delta_q`` is taken from this batch's quantile.
    """
    mf = xf.shape[0]
    mr = len(reh) if reh is not None else 0
    mg = len(reg) if reg is not None and mr else 0
    x_all = np.concatenate([xf, reh.x, reg.x]) if mr else xf
    z_all, acts = model.forward_cached(x_all)
    m_lik = mf + mr

    # FIFO and rehearsal rows share one likelihood evaluation
    y_lik = np.concatenate([yf, reh.y]) if mr else yf
    lik, dlik = nll_with_grad(model.head, z_all[:m_lik], y_lik)
    out = Objective(float(lik[:mf].sum()) / mf, 0.0, 0.0, 0.0, None, delta_q)
    dz = np.empty_like(z_all)
    if mr:
        out.loss_rs = float(lik[mf:].sum()) / mr
        dz[mf:m_lik] = (beta / mr) * dlik[mf:]
    if mg:
        diff = z_all[m_lik:] - reg.z
        delta = 0.5 * (diff * diff).sum(axis=1)
        if delta_q is None:
            delta_q = quantile(delta, rho)
        eta = compute_eta(delta, delta_q, rho)
        kept_sq = _kept_sq(delta, eta, delta_q)
        if correct:
            out.reg_mean = float(kept_sq @ delta) / mg
            np.multiply((alpha / mg) * kept_sq[:, None], diff, out=dz[m_lik:])
        else:
            out.reg_mean = float(delta.sum()) / mg
            np.multiply(alpha / mg, diff, out=dz[m_lik:])
        out.delta_q, out.diff, out.delta, out.eta = delta_q, diff, delta, eta
        out.gamma = 1.0 - np.sqrt(kept_sq)
    w_fifo = 1.0 if fifo_only else 1.0 - beta
    dz[:mf] = (w_fifo / mf) * dlik[:mf]
    out.total = w_fifo * out.loss_fifo + beta * out.loss_rs + alpha * out.reg_mean
    out.grad = model.backward(acts, dz)
    return out


def training_step(model: Mlp, optimizer: Adam, fifo: FifoBuffer, stack: Optional[PluralStack],
                  weights: AdaptiveWeights, batch_size: int, rng: np.random.Generator,
                  mech: Mechanisms = Mechanisms()) -> StepReport:
    """One joint update of the model, the replay buffers, and the multipliers.

    With ``stack=None`` only the FIFO term is trained.
    """
    xf, yf = fifo.sample(batch_size, rng)
    reh = reg = None
    if stack is not None and len(stack) >= 2:
        sample = sample_replay(stack, batch_size, rng)
        reh, reg = sample.rehearsal, sample.regularization
    obj = objective(model, xf, yf, reh, reg, weights.alpha, weights.beta, weights.delta_q,
                    weights.rho, mech.correct, fifo_only=stack is None)
    n_corrected = 0

    def report(misses=0):
        stored = len(stack) if stack is not None else 0
        mass = sum(float(b.gamma_bars.sum()) for b in stack.layers) if stored else 0.0
        return StepReport(obj.loss_fifo, obj.loss_rs, obj.reg_mean, obj.total,
                          weights.alpha, weights.beta,
                          float("nan") if weights.delta_q is None else weights.delta_q,
                          n_corrected, 1.0 - mass / stored if stored else 0.0, misses)

    if not math.isfinite(obj.total):
        raise NonFiniteLoss(report())

    optimizer.step(model.params, obj.grad)

    misses = 0
    if obj.delta is not None:
        gamma = obj.gamma
        z_new = reg.z + gamma[:, None] * obj.diff if mech.correct else None
        gb_new = update_priority(reg.gamma_bar, gamma, weights.lam) if mech.block else None
        if mech.correct:
            n_corrected = int((gamma > 0.0).sum())
        if z_new is not None or gb_new is not None:
            misses = write_back(stack, reg, z_new, gb_new)
        update_delta_q(weights, obj.delta, batch_size, stack.total_capacity)
        excess = obj.delta - obj.delta_q
        comp_reg = float(obj.eta @ excess if mech.correct else excess.sum()) / len(reg)
        g_beta, g_alpha = multiplier_gradients(obj.loss_fifo, obj.loss_rs, comp_reg, obj.delta_q)
        apply_multiplier_step(weights, g_beta, g_alpha, mech)
    if misses:
        logger.warning("%d feature write-backs missed", misses)
    return report(misses)
