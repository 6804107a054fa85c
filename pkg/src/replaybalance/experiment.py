"""Experiment runner: condition matrices, seeds, metrics files."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .buffers import ConfigError, CounterDesign, CounterKind, FifoBuffer, PluralStack, Record
from .nn import Adam, Head, Mlp
from .tasks import (CLASSIFICATION_SCHEDULE, REGRESSION_SCHEDULE, GaussianGridTask,
                    SineMixtureTask, eval_acc, eval_kld, gen_classification_stream,
                    gen_regression_stream, gen_switched_stream)
from .trainer import METHODS, AdaptiveWeights, StepReport, training_step

logger = logging.getLogger(__name__)

BUFFERS = ("RS", "Q2S", "P2S", "O2S")
WEIGHTING = "rank-weighted mean: w = S - rank + 1, rank 1 = worst seed"


def task_seed(index: int) -> int:
    return 1000 + index


@dataclass
class ExperimentConfig:
    method: str = "A2ER"
    buffer: str = "RS"
    task: str = "c1"  # r<i> regression, c<i> classification, s<i> switched pair
    seeds: int = 20
    root_seed: int = 0
    cycles: Optional[int] = None  # per task (per half for switched); None -> 5
    n_fifo: int = 512
    n_rs: int = 512
    batch_size: int = 32
    alpha_init: float = 1.0
    beta_init: float = 0.5
    rho: float = 0.5
    lam: float = 0.5
    q: tuple = (1.5, 1.0)
    zeta: float = 0.2
    counter: str = "qlog"
    lr: float = 1e-3
    lr_mult: float = 1e-2
    hidden: int = 32
    train_every: Optional[int] = None
    updates_per_session: int = 16
    log_every: int = 16

    def __post_init__(self):
        self.q = tuple(float(v) for v in (self.q if isinstance(self.q, (tuple, list)) else [self.q]))
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if self.buffer not in BUFFERS:
            raise ConfigError(f"unknown buffer {self.buffer!r}; choose from {BUFFERS}")
        kind, idx = self.task[:1].lower(), self.task[1:]
        if kind not in "rcs" or not idx.isdigit() or int(idx) < 1:
            raise ConfigError(f"task must look like r1, c2 or s1, got {self.task!r}")
        if self.seeds < 1 or self.batch_size < 1 or self.n_fifo < self.batch_size:
            raise ConfigError("need seeds >= 1 and n_fifo >= batch_size >= 1")
        if not 0.0 < self.rho < 1.0 or not 0.0 < self.lam < 1.0:
            raise ConfigError("rho and lam must lie in (0, 1)")
        if self.alpha_init <= 0 or not 0 < self.beta_init < 1:
            raise ConfigError("alpha_init must be > 0 and beta_init in (0, 1)")
        if self.buffer in ("P2S", "O2S") and len(self.q) < 2:
            raise ConfigError("plural buffers need one q per layer (at least two)")
        self.designs()  # domain checks
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError("zeta must lie in [0, 1]")

    @property
    def task_kind(self) -> str:
        return {"r": "regression", "c": "classification", "s": "switched"}[self.task[0].lower()]

    @property
    def task_index(self) -> int:
        return int(self.task[1:])

    def designs(self) -> list[CounterDesign]:
        kind = CounterKind(self.counter)
        if self.buffer == "RS":
            return [CounterDesign(CounterKind.QLOG, 0.0)]
        if self.buffer == "Q2S":
            return [CounterDesign(kind, self.q[-1])]
        return [CounterDesign(kind, v) for v in self.q]

    def build_stack(self) -> PluralStack:
        designs = self.designs()
        L = len(designs)
        caps = [self.n_rs // L + (1 if i < self.n_rs % L else 0) for i in range(L)]
        zeta = self.zeta if self.buffer == "O2S" else 0.0
        return PluralStack(caps, designs, zeta)

    def schedule(self):
        base = REGRESSION_SCHEDULE if self.task_kind == "regression" else CLASSIFICATION_SCHEDULE
        return replace(base, cycles=self.cycles or base.cycles,
                       train_every=self.train_every or base.train_every,
                       updates_per_session=self.updates_per_session)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q"] = list(self.q)
        return d

    @classmethod
    def from_mapping(cls, m: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in m.items():
            k = k.replace("-", "_")
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(k, v)
        return cls(**kw)


_INT_KEYS = {"seeds", "root_seed", "cycles", "n_fifo", "n_rs", "batch_size", "hidden",
             "train_every", "updates_per_session", "log_every"}
_FLOAT_KEYS = {"alpha_init", "beta_init", "rho", "lam", "zeta", "lr", "lr_mult"}


def _coerce(key: str, v):
    if not isinstance(v, str):
        return v
    v = v.strip()
    if key in _INT_KEYS:
        return None if v.lower() in ("", "none") else int(v)
    if key in _FLOAT_KEYS:
        return float(v)
    if key == "q":
        return tuple(float(p) for p in v.replace(",", " ").split())
    return v


def load_config(path: str | os.PathLike, **overrides) -> ExperimentConfig:
    """Flat ``key = value`` file; ``#`` comments; overrides win."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string("[config]\n" + Path(path).read_text())
    m = dict(parser["config"])
    m.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_mapping(m)


def make_tasks(cfg: ExperimentConfig):
    seed = task_seed(cfg.task_index)
    if cfg.task_kind == "regression":
        return [SineMixtureTask.random(seed)]
    if cfg.task_kind == "classification":
        return [GaussianGridTask.random(seed)]
    a = GaussianGridTask.random(seed)
    b = GaussianGridTask.random(seed + 500, n_components=a.n_components)
    return [a, b]


@dataclass
class RunResult:
    seed: int
    metrics: dict
    rows: list = field(default_factory=list)


def run_single(cfg: ExperimentConfig, seed: int) -> RunResult:
    """Train one seed through its stream and evaluate."""
    ss = np.random.SeedSequence([cfg.root_seed, seed])
    stream_ss, model_ss, train_ss = ss.spawn(3)
    tasks = make_tasks(cfg)
    sched = cfg.schedule()
    stream_seed = int(stream_ss.generate_state(1)[0])
    if cfg.task_kind == "regression":
        xs, ys = gen_regression_stream(tasks[0], stream_seed, sched.cycles)
        model = Mlp([1, cfg.hidden, cfg.hidden, 2], Head.GAUSSIAN, int(model_ss.generate_state(1)[0]))
    else:
        if cfg.task_kind == "classification":
            xs, ys = gen_classification_stream(tasks[0], stream_seed, sched.cycles)
        else:
            xs, ys = gen_switched_stream(tasks[0], tasks[1], stream_seed, sched.cycles)
        model = Mlp([2, cfg.hidden, cfg.hidden, tasks[0].n_classes], Head.CATEGORICAL,
                    int(model_ss.generate_state(1)[0]))

    rng = np.random.default_rng(train_ss)
    opt = Adam(model.params.size, lr=cfg.lr)
    fifo = FifoBuffer(cfg.n_fifo)
    stack = cfg.build_stack()
    weights = AdaptiveWeights.initial(cfg.alpha_init, cfg.beta_init, rho=cfg.rho,
                                      lam=cfg.lam, lr_mult=cfg.lr_mult)
    mech = METHODS[cfg.method]
    featurize = model.forward
    metrics = {}
    rows = []
    step = 0
    midpoint = len(xs) // 2 if cfg.task_kind == "switched" else None
    for i in range(len(xs)):
        if i == midpoint:
            metrics["acc_first"] = eval_acc(model, tasks[0])
        evicted = fifo.push(Record(i, xs[i], ys[i]))
        if evicted is not None:
            stack.offer(evicted, rng, featurize)
        if (i + 1) % sched.train_every:
            continue
        for _ in range(min(sched.updates_per_session, len(fifo) // cfg.batch_size)):
            rep = training_step(model, opt, fifo, stack, weights, cfg.batch_size, rng, mech)
            step += 1
            if step % cfg.log_every == 0:
                rows.append({"step": step, "datum": i + 1, **rep.row()})

    if cfg.task_kind == "regression":
        metrics["kld"] = eval_kld(model, tasks[0])
    elif cfg.task_kind == "classification":
        metrics["acc"] = eval_acc(model, tasks[0])
    else:
        metrics["acc_second"] = eval_acc(model, tasks[1])
        metrics["acc_first_final"] = eval_acc(model, tasks[0])
    metrics.update(alpha=weights.alpha, beta=weights.beta,
                   delta_q=weights.delta_q if weights.delta_q is not None else float("nan"),
                   steps=step, misses=stack.misses,
                   final_acceptance=stack.layers[-1].acceptance_probability(),
                   omitted=sum(stack.stats.omitted))
    return RunResult(seed, metrics, rows)


def rank_weighted_mean(values: Sequence[float], larger_is_better: bool) -> float:
    """Worst seed gets weight S, best gets 1."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if not larger_is_better:
        v = v[::-1]
    w = np.arange(v.size, 0, -1, dtype=np.float64)
    return float((w * v).sum() / w.sum())


def primary_metric(cfg: ExperimentConfig) -> tuple[str, bool]:
    return {"regression": ("kld", False), "classification": ("acc", True),
            "switched": ("acc_second", True)}[cfg.task_kind]


def _run_seed(args):
    cfg, seed = args
    return run_single(cfg, seed)


def run_seeds(cfg: ExperimentConfig, workers: int = 1) -> list[RunResult]:
    jobs = [(cfg, s) for s in range(cfg.seeds)]
    if workers <= 1:
        return [_run_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_seed, jobs))


def summarize(cfg: ExperimentConfig, results: list[RunResult]) -> dict:
    name, larger = primary_metric(cfg)
    vals = [r.metrics[name] for r in results]
    out = {"method": cfg.method, "buffer": cfg.buffer, "task": cfg.task, "metric": name,
           "n_seeds": len(vals), "mean": float(np.mean(vals)),
           "rank_weighted_mean": rank_weighted_mean(vals, larger),
           "worst": float(min(vals) if larger else max(vals)),
           "best": float(max(vals) if larger else min(vals)), "weighting": WEIGHTING}
    if cfg.task_kind == "switched":
        first = [r.metrics["acc_first"] for r in results]
        out["mean_acc_first"] = float(np.mean(first))
        out["mean_acc_second"] = out["mean"]
    return out


def write_csv(path: Path, rows: list[dict], columns: Optional[list[str]] = None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                   workers: int = 1) -> tuple[dict, list[RunResult]]:
    results = run_seeds(cfg, workers)
    summary = summarize(cfg, results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        tasks = make_tasks(cfg)
        (out / "tasks.json").write_text(json.dumps([t.to_dict() for t in tasks], indent=2))
        for r in results:
            write_csv(out / f"seed_{r.seed:03d}.csv", r.rows,
                      ["step", "datum"] + StepReport.columns())
        metric_cols = list(results[0].metrics)
        write_csv(out / "per_seed.csv", [{"seed": r.seed, **r.metrics} for r in results],
                  ["seed"] + metric_cols)
        write_csv(out / "summary.csv", [summary])
    return summary, results


SWEEP_AXES = ("rho", "q", "design")


def default_q_grid(kind: CounterKind, points: int = 21) -> list[float]:
    if kind is CounterKind.QLOG:
        return [round(v, 10) for v in np.linspace(0.0, 2.0, points)]
    if kind is CounterKind.LINEAR:
        return [round(v, 10) for v in np.linspace(0.0, 1.0, points + 1)[:-1]]
    return [round(v, 10) for v in np.linspace(0.0, 1.0, points + 1)[1:]]


def run_sweep(base: ExperimentConfig, axis: str, values: Optional[Sequence] = None,
              designs: Optional[Sequence[str]] = None, out_dir: str | os.PathLike | None = None,
              workers: int = 1, balance_threshold: float = 90.0) -> list[dict]:
    """One summary row per sweep value (per design and q for the design axis)."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if axis == "rho":
        grid = [("rho", float(v), replace(base, rho=float(v))) for v in (values or (0.25, 0.5, 0.75))]
    elif axis == "q":
        kind = CounterKind(base.counter)
        qs = values or default_q_grid(kind)
        grid = [("q", float(v), replace(base, q=(float(v),), buffer="Q2S")) for v in qs]
    else:
        grid = []
        for d in designs or ("lin", "exp", "qlog"):
            kind = CounterKind(d)
            for v in values or default_q_grid(kind):
                grid.append((d, float(v), replace(base, counter=d, q=(float(v),), buffer="Q2S")))
    rows = []
    for label, value, cfg in grid:
        sub = None if out_dir is None else Path(out_dir) / f"{label}_{value:g}"
        summary, results = run_experiment(cfg, sub, workers)
        row = {"axis": axis, "label": label, "value": value, **summary}
        if cfg.task_kind == "switched":
            row["balanced_seeds"] = sum(
                r.metrics["acc_first"] >= balance_threshold and r.metrics["acc_second"] >= balance_threshold
                for r in results)
            row["balance_threshold"] = balance_threshold
        rows.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / "sweep.csv", rows, list(dict.fromkeys(k for r in rows for k in r)))
    return rows
