"""Deterministic training-run control plane, testable without a model.

Pieces: the warmup/decay learning-rate schedule, a causal cross-entropy
evaluator over a pluggable next-token probability oracle, a checkpoint
registry, and a loss-spike state machine that rolls back to an older
checkpoint at 0.7x the scheduled learning rate until training restabilizes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

NORMAL = "normal"
RECOVERING = "recovering"

RECOVERY_LR_MULTIPLIER = 0.7  # "reduce the learning rate by 30%"


class OutOfRange(ValueError):
    """Step outside [0, total_steps]."""


class InvalidDistribution(ValueError):
    """Oracle returned a non-positive probability."""


class NonMonotonicStep(ValueError):
    """Checkpoint step not greater than the last recorded one."""


class NoCheckpointAvailable(RuntimeError):
    """Spike occurred with no checkpoint strictly before the current step."""


@dataclass
class LrSchedule:
    """Linear warmup to peak, then linear decay to zero at total_steps."""

    total_steps: int
    peak: float = 1e-4
    warmup_steps: int = 2000

    def __post_init__(self):
        if self.peak <= 0:
            raise ValueError(f"peak must be positive, got {self.peak}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}"
            )


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Learning rate at a step; both branches give peak at the warmup boundary."""
    if not 0 <= step <= schedule.total_steps:
        raise OutOfRange(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        return schedule.peak * (step / schedule.warmup_steps)
    return schedule.peak * (
        (schedule.total_steps - step) / (schedule.total_steps - schedule.warmup_steps)
    )


class CrossEntropyResult(NamedTuple):
    nats: float
    perplexity: float


Oracle = Callable[[tuple[int, ...]], Sequence[float]]


def cross_entropy(oracle: Oracle, ids: Sequence[int]) -> CrossEntropyResult:
    """Average negative log-likelihood per token under the causal factorization.

    The oracle maps a prefix tuple to the next-token distribution over the
    vocabulary. Returns nats per token and its exponential (perplexity).
    """
    if not ids:
        raise ValueError("sequence must contain at least one token")
    total = 0.0
    for t, token in enumerate(ids):
        probs = np.asarray(oracle(tuple(ids[:t])), dtype=np.float64)
        if not 0 <= token < probs.size:
            raise ValueError(f"token {token} outside vocabulary of {probs.size}")
        p = float(probs[token])
        if p <= 0.0:
            raise InvalidDistribution(f"probability {p} <= 0 at position {t}")
        total -= math.log(p)
    nats = total / len(ids)
    return CrossEntropyResult(nats=nats, perplexity=math.exp(nats))


@dataclass(frozen=True)
class Action:
    """What the controller asked for at one step."""

    kind: str  # "none" | "rollback" | "restore_lr"
    rollback_to: int | None = None
    lr_multiplier: float = 1.0


@dataclass
class ControllerConfig:
    window: int = 50  # losses kept for the spike threshold
    k: float = 4.0  # spike when loss > mean + k * std (window full)
    stable_steps: int = 200  # consecutive calm steps before restoring LR


@dataclass
class LossSpikeController:
    """Loss-spike state machine: rollback on spike, restore once stable.

    A spike is a non-finite loss, or (with a full window) a loss above
    mean + k*std of the window. On spike: roll back to the latest checkpoint
    strictly before the current step, scale LR by 0.7, clear the window, and
    enter recovery. After stable_steps consecutive calm steps the multiplier
    returns to 1.0. The effective LR is always lr_at(current_step) times the
    multiplier.
    """

    config: ControllerConfig = field(default_factory=ControllerConfig)
    phase: str = NORMAL
    lr_multiplier: float = 1.0
    current_step: int = 0
    stable_count: int = 0
    checkpoints: list[tuple[int, str]] = field(default_factory=list)
    loss_window: deque = field(default_factory=deque)

    def __post_init__(self):
        self.loss_window = deque(self.loss_window, maxlen=self.config.window)

    def record_checkpoint(self, step: int, tag: str) -> None:
        if self.checkpoints and step <= self.checkpoints[-1][0]:
            raise NonMonotonicStep(
                f"step {step} <= last recorded {self.checkpoints[-1][0]}"
            )
        self.checkpoints.append((step, tag))

    def latest_before(self, step: int) -> tuple[int, str] | None:
        best = None
        for ckpt_step, tag in self.checkpoints:
            if ckpt_step < step:
                best = (ckpt_step, tag)
        return best

    def _is_spike(self, loss: float) -> bool:
        if not math.isfinite(loss):
            return True
        if len(self.loss_window) < self.config.window:
            return False
        window = np.asarray(self.loss_window, dtype=np.float64)
        return loss > float(window.mean()) + self.config.k * float(window.std())

    def step(self, loss: float) -> Action:
        """Advance one step, consume its loss, and return the action taken."""
        self.current_step += 1
        if self._is_spike(loss):
            target = self.latest_before(self.current_step)
            if target is None:
                raise NoCheckpointAvailable(
                    f"spike at step {self.current_step} with no earlier checkpoint"
                )
            self.current_step = target[0]
            self.phase = RECOVERING
            self.lr_multiplier = RECOVERY_LR_MULTIPLIER
            self.loss_window.clear()
            self.stable_count = 0
            return Action(
                kind="rollback",
                rollback_to=target[0],
                lr_multiplier=RECOVERY_LR_MULTIPLIER,
            )
        self.stable_count += 1
        if self.phase == RECOVERING and self.stable_count >= self.config.stable_steps:
            self.phase = NORMAL
            self.lr_multiplier = 1.0
            return Action(kind="restore_lr", lr_multiplier=1.0)
        self.loss_window.append(loss)
        return Action(kind="none", lr_multiplier=self.lr_multiplier)


class TraceRow(NamedTuple):
    step: int
    lr: float
    action: Action


def simulate_run(
    schedule: LrSchedule,
    losses: Sequence[float],
    checkpoint_interval: int,
    config: ControllerConfig | None = None,
) -> list[TraceRow]:
    """Replay a loss stream through the controller and record the full trace.

    A checkpoint is recorded whenever the step counter reaches a fresh
    multiple of checkpoint_interval (steps revisited after a rollback are
    not re-recorded). Each trace row holds the post-action step counter, the
    effective learning rate there, and the action.
    """
    if not losses:
        raise ValueError("losses must be non-empty")
    if checkpoint_interval < 1:
        raise ValueError("checkpoint_interval must be >= 1")
    controller = LossSpikeController(config=config or ControllerConfig())
    trace: list[TraceRow] = []
    for loss in losses:
        action = controller.step(loss)
        step = controller.current_step
        trace.append(
            TraceRow(
                step=step,
                lr=lr_at(step, schedule) * controller.lr_multiplier,
                action=action,
            )
        )
        last = controller.checkpoints[-1][0] if controller.checkpoints else -1
        if action.kind != "rollback" and step % checkpoint_interval == 0 and step > last:
            controller.record_checkpoint(step, f"step-{step}")
    return trace
