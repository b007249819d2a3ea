"""Adam, early stopping, and best-of-N restart selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors.

    Moment buffers are created lazily and keyed by position in ``params``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            names = [self.params[i].name or f"#{i}" for i in missing]
            raise ValueError(f"no gradient for parameter(s) {', '.join(names)}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


def adam_step(params: Sequence[Tensor], state: Adam) -> None:
    """Apply one Adam update to ``params`` using their populated ``.grad``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("parameters do not match the optimizer state")
    state.step()


class EarlyStopping:
    """Patience-based stopping with a snapshot of the best model.

    Improvement is strict in the monitor's direction: a score equal to the
    best so far counts as a non-improving epoch.
    """

    def __init__(self, patience: int = 20, direction: str = "maximize"):
        if direction not in ("maximize", "minimize"):
            raise ValueError(f"direction must be 'maximize' or 'minimize', got {direction!r}")
        self.patience = patience
        self.direction = direction
        self.best_score: Optional[float] = None
        self.best_checkpoint: Any = None
        self.best_epoch: Optional[int] = None
        self.epochs_since_improvement = 0
        self.epoch = 0

    def _improves(self, score: float) -> bool:
        if self.best_score is None:
            return True
        if self.direction == "maximize":
            return score > self.best_score
        return score < self.best_score

    def update(self, score: float, snapshot: Callable[[], Any] = lambda: None) -> bool:
        """Record one epoch's score; return True when training should stop."""
        self.epoch += 1
        if self._improves(score):
            self.best_score = score
            self.best_checkpoint = snapshot()
            self.best_epoch = self.epoch
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


def early_stop_update(monitor: EarlyStopping, epoch_score: float, snapshot=lambda: None) -> str:
    return "stop" if monitor.update(epoch_score, snapshot) else "continue"


@dataclass
class RestartResult:
    model: Any
    score: float
    seed: int
    index: int
    scores: list = field(default_factory=list)
    failures: list = field(default_factory=list)


class AllRestartsFailed(RuntimeError):
    pass


def multi_restart_train(train_fn: Callable[[int], tuple], n_restarts: int = 10,
                        seeds: Optional[Sequence[int]] = None) -> RestartResult:
    """Run ``train_fn(seed) -> (model, validation_score)`` once per seed, keep the best.

    Ties go to the earliest restart. A restart that raises is logged and
    skipped; if every restart fails, :class:`AllRestartsFailed` is raised.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be at least 1")
    seeds = list(range(n_restarts)) if seeds is None else list(seeds)
    if len(seeds) != n_restarts:
        raise ValueError(f"got {len(seeds)} seeds for {n_restarts} restarts")
    best = None
    scores, failures = [], []
    for index, seed in enumerate(seeds):
        try:
            model, score = train_fn(seed)
        except Exception as exc:  # noqa: BLE001 - a failed restart is reported, not fatal
            log.warning("restart %d (seed %d) failed: %s", index, seed, exc)
            failures.append((index, seed, repr(exc)))
            scores.append(None)
            continue
        scores.append(float(score))
        if best is None or score > best.score:
            best = RestartResult(model, float(score), seed, index)
    if best is None:
        raise AllRestartsFailed(f"all {n_restarts} restarts failed: {failures}")
    best.scores = scores
    best.failures = failures
    return best
