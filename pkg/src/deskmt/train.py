"""SGD and Adam training with halve-and-restart annealing.

A run trains at a fixed rate until dev perplexity stops improving for
`patience` evaluations, then the controller halves the rate and restarts
from the best checkpoint; restarting Adam zeroes its moment estimates so the
per-parameter step sizes are re-learned. The controller is a pure state
machine over perplexity values, so scripted traces exercise it without any
training.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .corpus import make_batches, target_words
from .model import ModelConfig, ModelParams, batch_loss, batch_nll, init_params

logger = logging.getLogger(__name__)

SGD_DEFAULT_RATE = 0.5
ADAM_DEFAULT_RATE = 0.0002
CLIP_NORM = 5.0


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, kind: str, rate: float | None = None) -> "OptimizerState":
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if rate is None:
            rate = SGD_DEFAULT_RATE if kind == "sgd" else ADAM_DEFAULT_RATE
        return cls(kind=kind, rate=rate)

    def reset_adaptation(self) -> None:
        """Drop the per-parameter moment estimates and step counter."""
        self.t = 0
        self.m.clear()
        self.v.clear()


def sgd_step(params: ModelParams, grads: dict, rate: float) -> None:
    """p <- p - rate * g, in place."""
    for name, g in grads.items():
        params.arrays[name] -= rate * g


def adam_step(params: ModelParams, grads: dict, state: OptimizerState) -> None:
    """Bias-corrected Adam update, in place on params and state."""
    if state.kind != "adam":
        raise ValueError("adam_step needs an adam OptimizerState")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        params.arrays[name] -= state.rate * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict, max_norm: float = CLIP_NORM) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Action(Enum):
    CONTINUE = "continue"
    END_RUN = "end_run"
    STOP = "stop"


@dataclass
class AnnealState:
    max_runs: int
    patience: int
    rate: float
    run_index: int = 0
    best_dev_ppl: float = math.inf
    best_checkpoint: object = None
    evals_since_improvement: int = 0


@dataclass
class TrainLogEntry:
    sentences: int
    run_index: int
    rate: float
    dev_ppl: float
    seconds: float


@dataclass
class TrainLog:
    entries: list[TrainLogEntry] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("sentences\trun\trate\tdev_ppl\tseconds\n")
            for e in self.entries:
                fh.write(f"{e.sentences}\t{e.run_index}\t{e.rate!r}\t{e.dev_ppl!r}\t{e.seconds:.3f}\n")


def controller_observe(anneal: AnnealState, dev_ppl: float) -> Action:
    """Advance the annealing state machine by one dev evaluation.

    Strict improvement resets the patience counter (the caller records the
    checkpoint); exhausting patience ends the run, and ending the final run
    stops training.
    """
    if dev_ppl < anneal.best_dev_ppl:
        anneal.best_dev_ppl = dev_ppl
        anneal.evals_since_improvement = 0
        return Action.CONTINUE
    anneal.evals_since_improvement += 1
    if anneal.evals_since_improvement < anneal.patience:
        return Action.CONTINUE
    if anneal.run_index + 1 >= anneal.max_runs:
        return Action.STOP
    return Action.END_RUN


def controller_restart(anneal: AnnealState, optimizer: OptimizerState):
    """Halve the rate, reload the best checkpoint, reset Adam's adaptation.

    Returns (anneal, optimizer, params); params is a fresh copy of the best
    checkpoint so continued training cannot corrupt it.
    """
    anneal.run_index += 1
    anneal.rate = anneal.rate / 2.0
    anneal.evals_since_improvement = 0
    optimizer.rate = anneal.rate
    if optimizer.kind == "adam":
        optimizer.reset_adaptation()
    params = anneal.best_checkpoint.copy()
    return anneal, optimizer, params


def dev_perplexity(params: ModelParams, dev_pairs, batch_budget: int = 512) -> float:
    """exp(total NLL / total target tokens incl. sentence-end), dropout off."""
    total_nll, total_tokens = 0.0, 0
    for batch in make_batches(list(dev_pairs), batch_budget):
        nll, tokens = batch_nll(params, batch.pairs)
        total_nll += nll
        total_tokens += tokens
    if total_tokens == 0:
        return math.inf
    return math.exp(total_nll / total_tokens)


@dataclass
class AnnealConfig:
    max_runs: int = 1
    patience: int = 20
    eval_intervals: tuple[int, ...] = (2000,)

    def interval(self, run_index: int) -> int:
        if run_index < len(self.eval_intervals):
            return self.eval_intervals[run_index]
        return self.eval_intervals[-1]

    @classmethod
    def paper_schedule(cls, max_runs: int, patience: int, first_interval: int) -> "AnnealConfig":
        """First run evaluates every `first_interval` sentences, later runs half that."""
        return cls(max_runs, patience, (first_interval, max(1, first_interval // 2)))


def train_run(
    train_pairs,
    dev_pairs,
    model_config: ModelConfig,
    optimizer_kind: str,
    anneal_config: AnnealConfig,
    seed: int,
    rate: float | None = None,
    batch_budget: int = 512,
    clip_norm: float = CLIP_NORM,
    log_path=None,
) -> tuple[ModelParams, TrainLog]:
    """Full annealed training loop; returns the globally best checkpoint.

    Deterministic for a fixed seed: batch order, dropout masks and parameter
    initialization all derive from it.
    """
    config = ModelConfig(**{**model_config.__dict__, "seed": seed})
    params = init_params(config)
    optimizer = OptimizerState.fresh(optimizer_kind, rate)
    anneal = AnnealState(
        max_runs=anneal_config.max_runs,
        patience=anneal_config.patience,
        rate=optimizer.rate,
        best_checkpoint=params.copy(),
    )
    log = TrainLog()
    dropout_rng = np.random.default_rng([seed, 7])
    sentences_seen = 0
    next_eval = anneal_config.interval(0)
    start = time.perf_counter()
    epoch = 0
    stopping = False

    while not stopping:
        batches = make_batches(list(train_pairs), batch_budget, shuffle_seed=seed * 100003 + epoch)
        epoch += 1
        for batch in batches:
            try:
                loss, grads = batch_loss(params, batch.pairs, train=True, rng=dropout_rng)
            except FloatingPointError:
                log.events.append(f"abort: non-finite loss at {sentences_seen} sentences")
                logger.error("non-finite loss at %d sentences, aborting run", sentences_seen)
                raise
            if any(not np.all(np.isfinite(g)) for g in grads.values()):
                log.events.append(f"skip: non-finite gradient at {sentences_seen} sentences")
                logger.warning("non-finite gradient, skipping batch")
                sentences_seen += len(batch)
                continue
            norm = clip_gradients(grads, clip_norm)
            if norm > clip_norm:
                log.events.append(f"clip: gradient norm {norm:.3f} at {sentences_seen} sentences")
            if optimizer.kind == "sgd":
                sgd_step(params, grads, optimizer.rate)
            else:
                adam_step(params, grads, optimizer)
            sentences_seen += len(batch)

            if sentences_seen >= next_eval:
                ppl = dev_perplexity(params, dev_pairs, batch_budget)
                log.entries.append(
                    TrainLogEntry(
                        sentences_seen,
                        anneal.run_index,
                        anneal.rate,
                        ppl,
                        time.perf_counter() - start,
                    )
                )
                action = controller_observe(anneal, ppl)
                if anneal.evals_since_improvement == 0:
                    anneal.best_checkpoint = params.copy()
                if action is Action.STOP:
                    stopping = True
                    break
                if action is Action.END_RUN:
                    anneal, optimizer, params = controller_restart(anneal, optimizer)
                    log.events.append(
                        f"restart: run {anneal.run_index} at rate {anneal.rate!r}"
                    )
                next_eval = sentences_seen + anneal_config.interval(anneal.run_index)

    if log_path is not None:
        log.save(log_path)
    return anneal.best_checkpoint, log
