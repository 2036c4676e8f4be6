"""Training loop: next-token loss, AdamW with per-group multipliers, schedules, skip guard, logs, checkpoints."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from .blocks import HybridConfig, init_model, model_forward, param_group, param_hypers
from .checkpoint import load_arrays, save_arrays
from .data import (DataSourceCursor, MixtureSpec, PackedBatch, initial_cursors, load_corpus, next_batch)
from .dynamics import OptimizerState, ScheduleSpec, adamw_step, schedule_at
from .mup import MuPMultiplierSet
from .ssm import DtPolicy


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: HybridConfig = field(default_factory=HybridConfig)
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec(eta0=2e-3, lam0=0.1, warmup_tokens=10_000, batch=8))
    corpus_dir: str | None = None
    mixture: MixtureSpec | None = None       # default: uniform over the corpus sources
    mults: MuPMultiplierSet | None = None    # tuned reference set; default is the built-in table
    seq_len: int = 64
    steps: int = 100
    log_every: int = 10
    ckpt_every: int = 0
    out_dir: str | None = None
    dt_policy: DtPolicy = field(default_factory=DtPolicy)
    skip_multiple: float = 5.0
    skip_window: int = 64
    skip_min_history: int = 8
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "schedule": self.schedule.to_dict(), "corpus_dir": self.corpus_dir,
                "mixture": None if self.mixture is None else [list(w) for w in self.mixture.weights],
                "mults": None if self.mults is None else self.mults.to_dict(),
                "seq_len": self.seq_len, "steps": self.steps, "log_every": self.log_every,
                "ckpt_every": self.ckpt_every, "out_dir": self.out_dir, "dt_policy": self.dt_policy.to_dict(),
                "skip_multiple": self.skip_multiple, "skip_window": self.skip_window,
                "skip_min_history": self.skip_min_history, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = HybridConfig.from_dict(d["model"])
        if "schedule" in d:
            d["schedule"] = ScheduleSpec.from_dict(d["schedule"])
        if d.get("mixture") is not None:
            d["mixture"] = MixtureSpec(tuple((str(n), float(w)) for n, w in d["mixture"]))
        if d.get("mults") is not None:
            d["mults"] = MuPMultiplierSet.from_dict(d["mults"])
        if d.get("dt_policy") is not None:
            d["dt_policy"] = DtPolicy(**d["dt_policy"])
        return cls(**d)


def loss_and_grads(model, mults: Mapping[str, float], batch: PackedBatch, policy: DtPolicy = DtPolicy(),
                   step: int = 0, with_grads: bool = True):
    inputs = batch.tokens[:, :-1]
    logits = model_forward(model, inputs, mults, resets=batch.resets[:, :-1], doc_ids=batch.doc_ids[:, :-1],
                           positions=batch.positions[:, :-1], policy=policy, step=step)
    loss = nx.cross_entropy(logits, batch.tokens[:, 1:], batch.target_weights())
    if not with_grads:
        return float(loss.data), None
    g = nx.backward(loss)
    grads = {name: g.get(t, np.zeros_like(t.data)) for name, t in model.params.items()}
    return float(loss.data), grads


def group_rms(params: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Per optimizer group sqrt(sum W^2 / count), the mean-normalised parameter norm."""
    sq, cnt = {}, {}
    for name, a in params.items():
        g = param_group(name)[1]
        sq[g] = sq.get(g, 0.0) + float(np.sum(np.square(a, dtype=np.float64)))
        cnt[g] = cnt.get(g, 0) + a.size
    return {g: math.sqrt(sq[g] / cnt[g]) for g in sorted(sq)}


class Trainer:
    def __init__(self, cfg: TrainConfig, sources=None):
        self.cfg = cfg
        self.sources = sources if sources is not None else load_corpus(cfg.corpus_dir)
        self.mixture = cfg.mixture or MixtureSpec.uniform(sorted(self.sources))
        with nx.precision(cfg.model.precision):
            self.model, self.mults = init_model(cfg.model, cfg.mults)
        self.forward_mults = self.mults.forward
        self.hypers = param_hypers(self.model.names(), self.mults)
        self.opt = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        self.cursors: dict[str, DataSourceCursor] = initial_cursors(self.mixture)
        self.rng = np.random.default_rng(cfg.model.seed)
        self.step = 0
        self.tokens_seen = 0.0
        self.loss_window: deque[float] = deque(maxlen=cfg.skip_window)
        self.history: list[dict] = []

    # -- one step --------------------------------------------------------------------------
    def rows_at(self, tokens_seen: float) -> tuple[float, float, int]:
        eta, lam, b = schedule_at(tokens_seen, self.cfg.schedule)
        return eta, lam, max(1, int(round(b)))

    def should_skip(self, loss: float) -> bool:
        if len(self.loss_window) < self.cfg.skip_min_history:
            return False
        return loss > self.cfg.skip_multiple * float(np.median(self.loss_window))

    def train_step(self, batch: PackedBatch | None = None) -> dict:
        cfg = self.cfg
        eta, lam, rows = self.rows_at(self.tokens_seen)
        if batch is None:
            batch, self.cursors = next_batch(self.sources, self.cursors, self.mixture, rows, cfg.seq_len)
        with nx.precision(cfg.model.precision):
            loss, grads = loss_and_grads(self.model, self.forward_mults, batch, cfg.dt_policy, self.step)
        if not math.isfinite(loss):
            if cfg.out_dir:
                self.save(Path(cfg.out_dir) / "aborted")
            raise TrainingAborted(f"non-finite loss at step {self.step}")
        skipped = self.should_skip(loss)
        gnorm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if not skipped:
            arrays = self.model.arrays()
            new = adamw_step(arrays, grads, self.hypers, eta, lam, self.opt)
            for name, t in self.model.params.items():
                t.data = new[name].astype(t.dtype, copy=False)
            self.loss_window.append(loss)
        self.tokens_seen += batch.tokens.size
        self.step += 1
        rec = {"step": self.step, "tokens": self.tokens_seen, "loss": loss, "eta": eta, "lambda": lam,
               "batch": int(batch.tokens.shape[0]), "grad_norm": gnorm, "skipped": skipped}
        self.history.append(rec)
        return rec

    def run(self, steps: int | None = None, log: Callable[[dict], None] | None = None) -> list[dict]:
        cfg = self.cfg
        steps = cfg.steps if steps is None else steps
        metrics_file = None
        if cfg.out_dir:
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            metrics_file = open(Path(cfg.out_dir) / "metrics.jsonl", "a")
        try:
            for _ in range(steps):
                rec = self.train_step()
                if cfg.log_every and self.step % cfg.log_every == 0:
                    rec = dict(rec, param_rms=group_rms(self.model.arrays()))
                    if metrics_file:
                        metrics_file.write(json.dumps(rec, sort_keys=True) + "\n")
                        metrics_file.flush()
                    if log:
                        log(rec)
                if cfg.out_dir and cfg.ckpt_every and self.step % cfg.ckpt_every == 0:
                    self.save(Path(cfg.out_dir) / f"ckpt_{self.step:07d}")
        finally:
            if metrics_file:
                metrics_file.close()
        return self.history

    # -- checkpoints ------------------------------------------------------------------------
    def save(self, prefix: str | Path) -> dict:
        arrays = {f"param.{k}": v for k, v in self.model.arrays().items()}
        arrays.update({f"opt.m.{k}": v for k, v in self.opt.m.items()})
        arrays.update({f"opt.v.{k}": v for k, v in self.opt.v.items()})
        meta = {"kind": "train", "train_config": self.cfg.to_dict(), "config": self.cfg.model.to_dict(),
                "precision": self.cfg.model.precision, "seed": self.cfg.model.seed,
                "step": self.step, "tokens_seen": self.tokens_seen,
                "optimizer": {"step": self.opt.step, "beta1": self.opt.beta1, "beta2": self.opt.beta2, "eps": self.opt.eps},
                "cursors": {k: c.to_dict() for k, c in self.cursors.items()},
                "loss_window": list(self.loss_window), "rng": self.rng.bit_generator.state}
        return save_arrays(prefix, arrays, meta)

    @classmethod
    def resume(cls, prefix: str | Path, sources=None, cfg: TrainConfig | None = None) -> "Trainer":
        arrays, man = load_arrays(prefix)
        cfg = cfg or TrainConfig.from_dict(man["train_config"])
        tr = cls(cfg, sources)
        tr.model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
        o = man["optimizer"]
        tr.opt = OptimizerState({k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt.m.")},
                                {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt.v.")},
                                o["step"], o["beta1"], o["beta2"], o["eps"])
        tr.step = man["step"]
        tr.tokens_seen = man["tokens_seen"]
        tr.cursors = {k: DataSourceCursor.from_dict(c) for k, c in man["cursors"].items()}
        tr.loss_window = deque(man["loss_window"], maxlen=cfg.skip_window)
        tr.rng.bit_generator.state = man["rng"]
        return tr


def load_train_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
