"""Scoring candidate architectures: real MNIST training, an analytic surrogate, and a cache."""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from trlhpo import tensor as T
from trlhpo.data import Dataset
from trlhpo.nn import AdamState, Conv2d, Linear, Module, adam_step
from trlhpo.space import CONV, FCL, POOL, ArchSpec, ModelStage, arch_hash, build_model
from trlhpo.tensor import GradTape, Tensor

log = logging.getLogger(__name__)

N_BATCHES = 32
BATCH_SIZE = 16
CHANCE = 0.10


@dataclass
class EvalOutcome:
    overall_accuracy: float
    batch_accuracies: tuple[float, ...]
    train_time_s: float = field(default=0.0, compare=False)
    param_count: int = 0
    diverged: bool = False

    def __post_init__(self):
        self.batch_accuracies = tuple(float(a) for a in self.batch_accuracies)

    @property
    def profile_mean(self) -> float:
        return float(np.mean(self.batch_accuracies))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_accuracies"] = list(self.batch_accuracies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalOutcome:
        return cls(
            overall_accuracy=float(d["overall_accuracy"]),
            batch_accuracies=tuple(d["batch_accuracies"]),
            train_time_s=float(d.get("train_time_s", 0.0)),
            param_count=int(d.get("param_count", 0)),
            diverged=bool(d.get("diverged", False)),
        )


@dataclass(frozen=True)
class TrainBudget:
    epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


# --------------------------------------------------------------------------
# candidate networks


class CandidateNet(Module):
    """Trainable network laid out by :func:`trlhpo.space.build_model`."""

    def __init__(self, stages: list[ModelStage], rng: np.random.Generator):
        self.stages = stages
        self.blocks = []
        for st in stages:
            if st.op == "conv":
                self.blocks.append(Conv2d(st.in_shape[0], st.layer["filters"], st.layer["kernel"], st.layer["stride"], rng))
            elif st.op == "dense":
                self.blocks.append(Linear(st.in_shape[0], st.out_shape[0], rng, bias=st.bias))
            else:
                self.blocks.append(None)

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for st, block in zip(self.stages, self.blocks):
            if st.op == "conv":
                # conv layers carry no activation choice in the grid; ReLU throughout
                h = T.relu(block(h))
            elif st.op == "pool":
                h = T.maxpool2d(h, st.layer["kernel"], st.layer["stride"], st.layer["padding"])
            elif st.op == "flatten":
                h = T.flatten(h)
            else:
                h = block(h)
                if st.index is not None:
                    h = T.ACTIVATIONS[st.activation](h)
        return h

    def predict(self, x: np.ndarray, chunk: int = 512) -> np.ndarray:
        out = [self(x[i : i + chunk]).data.argmax(axis=1) for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def validate_batches(predict: Callable[[np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray,
                     n_batches: int = N_BATCHES, batch_size: int = BATCH_SIZE) -> list[float]:
    """Accuracy on each of the first ``n_batches`` consecutive batches of ``(x, y)``.

    Callers pass the validation set already in its fixed per-run shuffled order.
    """
    need = n_batches * batch_size
    if len(x) < need:
        raise ValueError(f"validation profile needs {need} samples, got {len(x)}")
    pred = np.asarray(predict(x[:need]))
    hits = (pred == np.asarray(y[:need])).reshape(n_batches, batch_size)
    return [float(v) for v in hits.mean(axis=1)]


def train_candidate(arch: ArchSpec, data: Dataset, budget: TrainBudget,
                    profile_order: np.ndarray | None = None) -> EvalOutcome:
    """Train ``arch`` plus its classification head and score it on the validation split.

    ``profile_order`` indexes the validation samples making up the 32x16
    profile; it defaults to a permutation seeded by ``budget.seed``.
    """
    rng = np.random.default_rng(budget.seed)
    net = CandidateNet(build_model(arch, data.num_classes), rng)
    params = net.parameters()
    opt = AdamState.for_params(params, lr=budget.lr)
    start = time.perf_counter()
    diverged = False
    n = len(data.x_train)
    for _ in range(budget.epochs):
        order = rng.permutation(n)
        for i in range(0, n, budget.batch_size):
            idx = order[i : i + budget.batch_size]
            with GradTape() as tape:
                loss = T.cross_entropy(net(data.x_train[idx]), data.y_train[idx])
            if not np.isfinite(loss.item()):
                diverged = True
                break
            adam_step(params, tape.gradient(loss, params), opt)
        if diverged:
            break
    elapsed = time.perf_counter() - start
    n_params = net.num_parameters()
    if diverged or not all(np.all(np.isfinite(p.data)) for p in params):
        log.warning("candidate %s diverged", arch)
        return EvalOutcome(0.0, (0.0,) * N_BATCHES, elapsed, n_params, diverged=True)
    if profile_order is None:
        profile_order = np.random.default_rng(budget.seed).permutation(len(data.x_val))
    pred = net.predict(data.x_val)
    overall = float(np.mean(pred == data.y_val))
    ordered = profile_order[: N_BATCHES * BATCH_SIZE]
    batches = validate_batches(lambda _: pred[ordered], data.x_val[ordered], data.y_val[ordered])
    return EvalOutcome(overall, tuple(batches), elapsed, n_params)


# --------------------------------------------------------------------------
# evaluators


class Evaluator:
    """Callable ``arch -> EvalOutcome`` that counts how often it actually evaluates."""

    fingerprint = "evaluator"

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, arch: ArchSpec) -> EvalOutcome:
        with self._lock:
            self.calls += 1
        return self.evaluate(arch)

    def evaluate(self, arch: ArchSpec) -> EvalOutcome:
        raise NotImplementedError


class TrainingEvaluator(Evaluator):
    def __init__(self, data: Dataset, budget: TrainBudget = TrainBudget(), profile_seed: int = 0):
        super().__init__()
        self.data = data
        self.budget = budget
        self.profile_order = np.random.default_rng(profile_seed).permutation(len(data.x_val))
        self.fingerprint = (
            f"train:e{budget.epochs}:b{budget.batch_size}:lr{budget.lr!r}:s{budget.seed}"
            f":n{len(data.x_train)}/{len(data.x_val)}:p{profile_seed}"
        )

    def evaluate(self, arch: ArchSpec) -> EvalOutcome:
        return train_candidate(arch, self.data, self.budget, self.profile_order)


# surrogate shaping -----------------------------------------------------------

CONV_GAINS = (0.70, 0.06)
CONV_EXTRA_PENALTY = 0.02
POOL_GAIN = 0.04
POOL_GAIN_NO_CONV = 0.02
FCL_GAIN_AFTER_CONV = 0.05
FCL_GAIN_RAW = 0.62
FCL_REPEAT_PENALTY = 0.03
SURROGATE_NOISE = 0.02
# bump when the shaping changes so persisted caches are not reused
SURROGATE_VERSION = 2

_ACTIVATION_COST = {"relu": 0.0, "leakyrelu": 0.002, "gelu": 0.002, "elu": 0.005,
                    "tanh": 0.015, "sigmoid": 0.03, None: 0.05}


def hp_quality(layer) -> float:
    """How close a layer's hyper-parameters are to the surrogate's preferred ones, in (0.9, 1].

    The spread is deliberately narrow: on MNIST the choice of layer kinds moves
    accuracy far more than the choice of filters, kernels or widths.
    """
    if layer.kind == CONV:
        return (1.0 - 0.015 * abs(math.log2(layer["filters"] / 64))
                - {3: 0.0, 5: 0.01, 7: 0.02}[layer["kernel"]]
                - 0.015 * (layer["stride"] - 1))
    if layer.kind == FCL:
        return (1.0 - 0.01 * abs(math.log2(layer["neurons"] / 128))
                - (0.0 if layer["bias"] else 0.01)
                - _ACTIVATION_COST[layer["activation"]])
    return (1.0 - 0.01 * (layer["kernel"] - 2)
            - {1: 0.01, 2: 0.0, 3: 0.02}[layer["stride"]]
            - 0.01 * layer["padding"])


BEST_HP = {
    CONV: dict(filters=64, kernel=3, stride=1),
    FCL: dict(neurons=128, bias=True, activation="relu"),
    POOL: dict(kernel=2, stride=2, padding=0),
}


def surrogate_accuracy(arch: ArchSpec) -> float:
    """Deterministic stand-in for trained accuracy.

    Chance level plus diminishing gains for convolutions, pools and a first
    dense layer; convolutions past the second and dense layers stacked on
    dense layers cost accuracy.
    """
    acc = CHANCE
    n_conv = n_pool = 0
    prev = None
    for layer in arch.layers:
        q = hp_quality(layer)
        if layer.kind == CONV:
            acc += CONV_GAINS[n_conv] * q if n_conv < len(CONV_GAINS) else -CONV_EXTRA_PENALTY
            n_conv += 1
        elif layer.kind == POOL:
            acc += (POOL_GAIN if n_conv else POOL_GAIN_NO_CONV) * q * 0.5**n_pool
            n_pool += 1
        elif prev == FCL:
            acc -= FCL_REPEAT_PENALTY
        else:
            acc += (FCL_GAIN_AFTER_CONV if n_conv else FCL_GAIN_RAW) * q
        prev = layer.kind
    return min(max(acc, 0.0), 1.0)


def surrogate_eval(arch: ArchSpec, seed: int = 0) -> EvalOutcome:
    digest = arch_hash(arch)
    overall = surrogate_accuracy(arch)
    rng = np.random.default_rng([seed, int(digest[:15], 16)])
    noisy = np.clip(overall + rng.normal(0.0, SURROGATE_NOISE, N_BATCHES), 0.0, 1.0)
    return EvalOutcome(overall, tuple(noisy), 0.0, 0)


class SurrogateEvaluator(Evaluator):
    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.fingerprint = f"surrogate-v{SURROGATE_VERSION}:s{seed}"

    def evaluate(self, arch: ArchSpec) -> EvalOutcome:
        return surrogate_eval(arch, self.seed)


# --------------------------------------------------------------------------
# cache


class EvalCache:
    """Digest-keyed outcome store, optionally persisted as append-only JSON lines.

    Each line is ``{"digest": ..., "context": ..., "outcome": {...}}``; the
    context is the evaluator fingerprint so one file can serve several
    evaluators without mixing their results.
    """

    def __init__(self, path=None, context: str = ""):
        self.path = Path(path) if path is not None else None
        self.context = context
        self._entries: dict[str, EvalOutcome] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("%s:%d: skipping unreadable cache line", self.path, lineno)
                    continue
                if rec.get("context", "") == self.context:
                    self._entries[rec["digest"]] = EvalOutcome.from_dict(rec["outcome"])

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: str) -> bool:
        return digest in self._entries

    def get(self, digest: str) -> EvalOutcome | None:
        return self._entries.get(digest)

    def put(self, digest: str, outcome: EvalOutcome) -> None:
        with self._lock:
            if digest in self._entries:
                return
            if self.path is not None:
                line = json.dumps({"digest": digest, "context": self.context, "outcome": outcome.to_dict()})
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            self._entries[digest] = outcome


def eval_cached(arch: ArchSpec, evaluator: Callable[[ArchSpec], EvalOutcome], cache: EvalCache | None) -> EvalOutcome:
    if cache is None:
        return evaluator(arch)
    digest = arch_hash(arch)
    hit = cache.get(digest)
    if hit is not None:
        return hit
    outcome = evaluator(arch)
    cache.put(digest, outcome)
    return outcome
