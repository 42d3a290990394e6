"""Episode orchestration: concurrent rollouts, replay, update rounds, JSON-lines run log."""

from __future__ import annotations

import dataclasses
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from trlhpo.ddpg import DdpgAgent, DdpgConfig, ReplayBuffer, select_action
from trlhpo.env import Environment, EpisodeAborted, ImrEncoder, Transition
from trlhpo.evaluator import EvalCache, Evaluator, SurrogateEvaluator, TrainBudget, TrainingEvaluator
from trlhpo.space import arch_hash
from trlhpo.transformer import acting_attention, actor_forward

log = logging.getLogger(__name__)

LOG_VERSION = 1


@dataclass
class RunConfig:
    # data
    mnist_dir: str | None = None
    n_train: int = 20_000
    n_val: int = 10_000
    split_seed: int = 0
    # candidate evaluation
    evaluator: str = "real"  # real | surrogate
    train_epochs: int = 1
    train_batch_size: int = 64
    train_lr: float = 1e-3
    use_cache: bool = True
    cache_path: str | None = None
    # controller
    actor_lr: float = 1e-5
    critic_lr: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.005
    rl_batch_size: int = 64
    buffer_capacity: int = 2000
    update_after: int | None = None  # transitions buffered before updates start; None = capacity
    sigma: float = 0.2
    sigma_decay: float = 0.99
    heads: int = 4
    n_blocks: int = 2
    expansion: int = 4
    # schedule
    episodes: int = 50
    exploration_episodes: int | None = None  # None = 80% of episodes
    offline_exploitation: bool = True
    models_per_episode: int = 10
    opt_rounds_per_episode: int = 5
    workers: int = 1
    wallclock_budget_s: float | None = None
    seed: int = 0
    out_dir: str = "runs/latest"

    def __post_init__(self):
        if self.evaluator not in ("real", "surrogate"):
            raise ValueError(f"evaluator must be 'real' or 'surrogate', got {self.evaluator!r}")
        for name in ("episodes", "models_per_episode", "rl_batch_size", "buffer_capacity", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_explore(self) -> int:
        if self.exploration_episodes is not None:
            return self.exploration_episodes
        return int(round(0.8 * self.episodes))

    @property
    def warmup(self) -> int:
        return self.buffer_capacity if self.update_after is None else self.update_after

    def ddpg(self) -> DdpgConfig:
        return DdpgConfig(
            actor_lr=self.actor_lr, critic_lr=self.critic_lr, gamma=self.gamma, tau=self.tau,
            batch_size=self.rl_batch_size, buffer_capacity=self.buffer_capacity, sigma=self.sigma,
            sigma_decay=self.sigma_decay, heads=self.heads, n_blocks=self.n_blocks, expansion=self.expansion,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# run log


class RunLog:
    """Single-writer JSON-lines log. Records for replayed episodes can be muted."""

    def __init__(self, path, mode: str = "w", start: float | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, mode, encoding="utf-8")
        self._lock = threading.Lock()
        self.start = time.perf_counter() if start is None else start
        self.muted = False
        self.count = 0

    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def write(self, record: dict) -> None:
        if self.muted:
            return
        line = json.dumps(record)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            self.count += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list[dict]:
    """Parse a run log, ignoring a torn final line from an interrupted writer."""
    records = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                log.warning("%s: ignoring truncated final record", path)
                continue
            raise
    return records


# --------------------------------------------------------------------------
# rollouts


@dataclass
class StepRecord:
    transition: Transition
    info: dict
    clean_action: np.ndarray
    attention: np.ndarray
    final_attention: np.ndarray | None = None


@dataclass
class Rollout:
    steps: list[StepRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def ret(self) -> float:
        return float(sum(s.transition.reward for s in self.steps))

    @property
    def final_accuracy(self) -> float | None:
        return self.steps[-1].transition.next_state.last_accuracy if self.steps else None


def run_rollout(env: Environment, actor, sigma: float, rng: np.random.Generator,
                random_policy: bool = False) -> Rollout:
    """Build one architecture layer by layer until a stop rule fires."""
    state = env.reset()
    out = Rollout()
    done = False
    while not done:
        if random_policy:
            action = rng.uniform(0.0, 1.0, size=4)
            clean, attn = action, None
        else:
            action, clean, attn = select_action(actor, state, sigma, rng)
        try:
            res = env.step(state, action)
        except EpisodeAborted as exc:
            out.error = str(exc)
            return out
        tr = Transition(state, tuple(float(a) for a in action), res.reward, res.state, res.done)
        row = acting_attention(attn, state.layer_count) if attn is not None else np.zeros(0)
        rec = StepRecord(tr, res.info, np.asarray(clean), row)
        if res.done and not random_policy:
            # the terminal state is never acted on; record where the policy would look
            _, final = actor_forward(actor, res.state)
            rec.final_attention = acting_attention(final, res.state.layer_count)
        out.steps.append(rec)
        state, done = res.state, res.done
    return out


def make_evaluator(config: RunConfig) -> Evaluator:
    if config.evaluator == "surrogate":
        return SurrogateEvaluator(config.seed)
    from trlhpo.data import load_dataset

    data = load_dataset(config.mnist_dir, config.n_train, config.n_val, config.split_seed)
    budget = TrainBudget(config.train_epochs, config.train_batch_size, config.train_lr, config.seed)
    return TrainingEvaluator(data, budget, profile_seed=config.seed)


def make_cache(config: RunConfig, evaluator: Evaluator) -> EvalCache | None:
    if not config.use_cache:
        return None
    path = config.cache_path or (Path(config.out_dir) / "eval_cache.jsonl")
    return EvalCache(path, context=evaluator.fingerprint)


def _rollout_rng(seed: int, episode: int, rollout: int) -> np.random.Generator:
    return np.random.default_rng([seed, episode, rollout])


def _step_record(episode: int, rollout: int, idx: int, phase: str, rec: StepRecord,
                 buffered: bool, t: float) -> dict:
    tr, info = rec.transition, rec.info
    outcome = info["outcome"]
    d = {
        "type": "step",
        "episode": episode,
        "rollout": rollout,
        "step": idx,
        "phase": phase,
        "action": list(tr.action),
        "clean_action": [float(a) for a in rec.clean_action],
        "layer": info["layer"].to_dict(),
        "arch": info["arch"].to_dict(),
        "digest": arch_hash(info["arch"]),
        "reward": tr.reward,
        "overall_accuracy": outcome.overall_accuracy,
        "batch_accuracies": list(outcome.batch_accuracies),
        "attention": [float(a) for a in rec.attention],
        "done": tr.done,
        "stop_reason": info["reason"],
        "buffered": buffered,
        "t": t,
    }
    if rec.final_attention is not None:
        d["final_attention"] = [float(a) for a in rec.final_attention]
    return d


@dataclass
class SearchResult:
    log_path: Path
    episode_returns: list[list[float]]
    phases: list[str]
    best: dict | None
    episodes_completed: int
    evaluations: int
    buffer_size: int
    agent: DdpgAgent | None = None
    stopped: str = "episodes"

    def returns_for(self, phase: str) -> list[float]:
        return [r for rs, p in zip(self.episode_returns, self.phases) if p == phase for r in rs]

    def reward_sequence(self) -> list[float]:
        return [r for rs in self.episode_returns for r in rs]


def _completed_episodes(path: Path) -> int:
    """Truncate ``path`` after its last complete episode and return how many there were."""
    records = read_log(path)
    keep, done = [], 0
    pending = []
    for rec in records:
        pending.append(rec)
        if rec.get("type") in ("header", "episode"):
            keep.extend(pending)
            pending = []
            if rec["type"] == "episode":
                done = rec["episode"] + 1
    with open(path, "w", encoding="utf-8") as fh:
        for rec in keep:
            fh.write(json.dumps(rec) + "\n")
    return done


def run_search(config: RunConfig, evaluator: Evaluator | None = None, resume: bool = False,
               on_episode: Callable[[int, list[Rollout]], None] | None = None) -> SearchResult:
    """Run the full exploration/exploitation schedule and write ``<out_dir>/run.jsonl``.

    Per episode: ``models_per_episode`` rollouts against frozen actor
    parameters, then (once the buffer holds ``warmup`` transitions)
    ``opt_rounds_per_episode`` DDPG updates. After ``n_explore`` episodes the
    noise drops to zero and, in offline mode, the buffer is frozen.

    With ``resume`` the run is replayed deterministically from the start,
    reusing cached evaluations, and logging restarts after the last complete
    episode already on disk.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "run.jsonl"
    evaluator = evaluator or make_evaluator(config)
    cache = make_cache(config, evaluator)
    input_shape = getattr(getattr(evaluator, "data", None), "input_shape", (1, 28, 28))
    env = Environment(evaluator, ImrEncoder(config.seed), cache, input_shape)
    agent = DdpgAgent(config.ddpg(), seed=config.seed)
    buffer = ReplayBuffer(config.buffer_capacity)

    skip = _completed_episodes(log_path) if resume and log_path.exists() else 0
    runlog = RunLog(log_path, mode="a" if skip else "w")
    if not skip:
        runlog.write({"type": "header", "version": LOG_VERSION, "config": config.to_dict(),
                      "evaluator": evaluator.fingerprint, "started": time.time()})
    wall_start = time.perf_counter()
    result = SearchResult(log_path, [], [], None, 0, 0, 0, agent)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for episode in range(config.episodes):
            runlog.muted = episode < skip
            if (config.wallclock_budget_s is not None and episode >= skip
                    and time.perf_counter() - wall_start >= config.wallclock_budget_s):
                result.stopped = "wallclock"
                break
            exploit = episode >= config.n_explore
            phase = "exploit" if exploit else "explore"
            sigma = 0.0 if exploit else config.sigma * config.sigma_decay**episode

            def one(rollout_id: int) -> Rollout:
                return run_rollout(env, agent.actor, sigma, _rollout_rng(config.seed, episode, rollout_id))

            ids = range(config.models_per_episode)
            rollouts = list(pool.map(one, ids)) if pool else [one(i) for i in ids]

            returns = []
            for rid, ro in enumerate(rollouts):
                write_buffer = not (exploit and config.offline_exploitation)
                if ro.error is not None:
                    runlog.write({"type": "incident", "episode": episode, "rollout": rid,
                                  "step": len(ro.steps), "error": ro.error, "t": runlog.elapsed()})
                for idx, rec in enumerate(ro.steps):
                    if write_buffer:
                        buffer.add(rec.transition)
                    runlog.write(_step_record(episode, rid, idx, phase, rec, write_buffer, runlog.elapsed()))
                if ro.steps:
                    returns.append(ro.ret)
            result.episode_returns.append(returns)
            result.phases.append(phase)

            if len(buffer) >= max(config.warmup, config.rl_batch_size):
                for rnd in range(config.opt_rounds_per_episode):
                    c_loss, a_loss = agent.update(buffer.sample(config.rl_batch_size, agent.rng))
                    runlog.write({"type": "update", "episode": episode, "round": rnd,
                                  "critic_loss": c_loss, "actor_loss": a_loss, "t": runlog.elapsed()})
            runlog.write({"type": "episode", "episode": episode, "phase": phase, "sigma": sigma,
                          "returns": returns, "buffer": len(buffer), "evaluations": evaluator.calls,
                          "t": runlog.elapsed()})
            result.episodes_completed = episode + 1
            if on_episode is not None:
                on_episode(episode, rollouts)
    finally:
        if pool is not None:
            pool.shutdown()
        runlog.muted = False
        result.evaluations = evaluator.calls
        result.buffer_size = len(buffer)
        result.best = best_model(read_log(log_path)) if log_path.exists() else None
        runlog.write({"type": "summary", "episodes_completed": result.episodes_completed,
                      "stopped": result.stopped, "best": result.best, "evaluations": evaluator.calls,
                      "t": runlog.elapsed()})
        runlog.close()
    agent.save(out_dir / "agent.json")
    return result


def best_model(records: list[dict]) -> dict | None:
    best = None
    for rec in records:
        if rec.get("type") != "step":
            continue
        if best is None or rec["overall_accuracy"] > best["accuracy"]:
            best = {"digest": rec["digest"], "arch": rec["arch"], "accuracy": rec["overall_accuracy"],
                    "episode": rec["episode"], "rollout": rec["rollout"], "t": rec["t"]}
    return best


def random_policy_returns(config: RunConfig, n_episodes: int = 100, evaluator: Evaluator | None = None,
                          seed: int | None = None) -> list[float]:
    """Returns of uniformly random actions through the same environment and evaluator."""
    evaluator = evaluator or make_evaluator(config)
    env = Environment(evaluator, ImrEncoder(config.seed), None)
    rng = np.random.default_rng([config.seed if seed is None else seed, 0x5EED])
    rets = []
    for _ in range(n_episodes):
        ro = run_rollout(env, None, 0.0, rng, random_policy=True)
        if ro.steps:
            rets.append(ro.ret)
    return rets
