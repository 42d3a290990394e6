"""Layer-by-layer construction environment with a progressive accuracy-delta reward."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from trlhpo.evaluator import CHANCE, N_BATCHES, EvalCache, EvalOutcome, eval_cached
from trlhpo.space import MAX_LAYERS, MNIST_SHAPE, ArchSpec, LayerSpec, decode_action

log = logging.getLogger(__name__)

IMR_DIM = 64
ACTION_DIM = 4
IMR_INPUT = ACTION_DIM + N_BATCHES

MIN_IMPROVEMENT = 0.001
MIN_ACCURACY = 0.60

MAX_LAYERS_REASON = "max-layers"
MIN_IMPROVEMENT_REASON = "min-improvement"
LOW_ACCURACY_REASON = "low-accuracy"


class EpisodeAborted(RuntimeError):
    """The evaluator failed; the step's transition must be discarded."""


class ImrEncoder:
    """Frozen random map (action, 32 batch accuracies) -> 64 values in (-1, 1)."""

    def __init__(self, seed: int = 0, zero_bias: bool = False):
        rng = np.random.default_rng(seed)
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(IMR_INPUT), size=(IMR_INPUT, IMR_DIM))
        self.bias = np.zeros(IMR_DIM) if zero_bias else rng.normal(0.0, 0.1, size=IMR_DIM)
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    def __call__(self, action, batch_accuracies) -> np.ndarray:
        return encode_imr(self, action, batch_accuracies)


def encode_imr(encoder: ImrEncoder, action, batch_accuracies) -> np.ndarray:
    x = np.concatenate([np.asarray(action, dtype=float), np.asarray(batch_accuracies, dtype=float)])
    if x.shape != (IMR_INPUT,):
        raise ValueError(f"IMR input must have {IMR_INPUT} values, got {x.shape}")
    return np.tanh(x @ encoder.weight + encoder.bias)


@dataclass(frozen=True)
class EnvState:
    slots: np.ndarray
    layer_count: int = 0
    last_accuracy: float = CHANCE
    arch: ArchSpec = field(default_factory=ArchSpec)

    def __post_init__(self):
        slots = np.array(self.slots, dtype=float)
        slots.setflags(write=False)
        object.__setattr__(self, "slots", slots)

    @property
    def full(self) -> bool:
        return self.layer_count >= MAX_LAYERS

    def __eq__(self, other) -> bool:
        if not isinstance(other, EnvState):
            return NotImplemented
        return (self.layer_count == other.layer_count and self.last_accuracy == other.last_accuracy
                and self.arch == other.arch and np.array_equal(self.slots, other.slots))


@dataclass(frozen=True)
class Transition:
    state: EnvState
    action: tuple[float, ...]
    reward: float
    next_state: EnvState
    done: bool


@dataclass
class StepResult:
    state: EnvState
    reward: float
    done: bool
    info: dict


def compute_reward(prev_acc: float, new_acc: float) -> float:
    return new_acc - prev_acc


def check_stop(layer_count: int, reward: float, new_acc: float) -> tuple[bool, str | None]:
    """Stop rules in fixed priority order; the improvement rule starts at the second layer."""
    if layer_count >= MAX_LAYERS:
        return True, MAX_LAYERS_REASON
    if layer_count >= 2 and reward < MIN_IMPROVEMENT:
        return True, MIN_IMPROVEMENT_REASON
    if new_acc < MIN_ACCURACY:
        return True, LOW_ACCURACY_REASON
    return False, None


class Environment:
    def __init__(self, evaluator: Callable[[ArchSpec], EvalOutcome], encoder: ImrEncoder | None = None,
                 cache: EvalCache | None = None, input_shape=MNIST_SHAPE, num_classes: int = 10):
        self.evaluator = evaluator
        self.encoder = encoder or ImrEncoder()
        self.cache = cache
        self.input_shape = tuple(input_shape)
        self.baseline = 1.0 / num_classes

    def reset(self) -> EnvState:
        return EnvState(np.zeros((MAX_LAYERS, IMR_DIM)), 0, self.baseline, ArchSpec(self.input_shape))

    def step(self, state: EnvState, action) -> StepResult:
        if state.full:
            raise ValueError("step called on a full architecture")
        action = tuple(float(min(max(a, 0.0), 1.0)) for a in action)
        layer: LayerSpec = decode_action(action, state.arch.output_shape)
        arch = state.arch.append(layer)
        try:
            outcome = eval_cached(arch, self.evaluator, self.cache)
        except Exception as exc:
            log.error("evaluation of %s failed: %s", arch, exc)
            raise EpisodeAborted(f"evaluation of {arch} failed: {exc}") from exc
        reward = compute_reward(state.last_accuracy, outcome.overall_accuracy)
        slots = np.array(state.slots)
        slots[state.layer_count] = self.encoder(action, outcome.batch_accuracies)
        count = state.layer_count + 1
        done, reason = check_stop(count, reward, outcome.overall_accuracy)
        nxt = EnvState(slots, count, outcome.overall_accuracy, arch)
        info = {"layer": layer, "arch": arch, "outcome": outcome, "reason": reason, "attention": None}
        return StepResult(nxt, reward, done, info)
