"""DDPG agent: online/target transformer actor and critic, replay, Gaussian exploration."""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from trlhpo import tensor as T
from trlhpo.env import EnvState, Transition
from trlhpo.nn import AdamState, adam_step, load_checkpoint, save_checkpoint
from trlhpo.tensor import GradTape, Tensor
from trlhpo.transformer import TransformerNet, stack_states


@dataclass
class DdpgConfig:
    actor_lr: float = 1e-5
    critic_lr: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    buffer_capacity: int = 2000
    sigma: float = 0.2
    sigma_decay: float = 0.99
    heads: int = 4
    n_blocks: int = 2
    expansion: int = 4
    embed_dim: int = 64


class ReplayBuffer:
    def __init__(self, capacity: int = 2000):
        if capacity <= 0:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) >= self.capacity

    def add(self, transition: Transition) -> None:
        self._items.append(transition)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._items) < batch_size:
            raise ValueError(f"cannot sample {batch_size} from a buffer of {len(self._items)}")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


def soft_update(online: list[Tensor], target: list[Tensor], tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if len(online) != len(target):
        raise T.ShapeError(f"soft_update: {len(online)} online vs {len(target)} target tensors")
    for src, dst in zip(online, target):
        if src.shape != dst.shape:
            raise T.ShapeError(f"soft_update: online {src.shape} vs target {dst.shape}")
        dst.data = tau * src.data + (1.0 - tau) * dst.data


def select_action(actor: TransformerNet, state: EnvState, sigma: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noisy action, the clean actor output, and the final block attention."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    slots, counts = stack_states([state])
    out, attns = actor(slots, counts)
    clean = out.data[0]
    noisy = clean if sigma == 0 else np.clip(clean + rng.normal(0.0, sigma, clean.shape), 0.0, 1.0)
    return noisy, clean, attns[-1].data[0]


class DdpgAgent:
    def __init__(self, config: DdpgConfig | None = None, seed: int = 0):
        self.config = cfg = config or DdpgConfig()
        rng = np.random.default_rng(seed)
        net_kw = dict(dim=cfg.embed_dim, heads=cfg.heads, n_blocks=cfg.n_blocks, expansion=cfg.expansion)
        self.actor = TransformerNet("actor", rng, **net_kw)
        self.critic = TransformerNet("critic", rng, **net_kw)
        self.actor_target = TransformerNet("actor", rng, **net_kw)
        self.critic_target = TransformerNet("critic", rng, **net_kw)
        self.actor_target.load_state_dict(self.actor.state_dict())
        self.critic_target.load_state_dict(self.critic.state_dict())
        self.actor_opt = AdamState.for_params(self.actor.parameters(), lr=cfg.actor_lr)
        self.critic_opt = AdamState.for_params(self.critic.parameters(), lr=cfg.critic_lr)
        self.rng = np.random.default_rng(rng.integers(2**63))
        self.updates = 0

    def td_targets(self, batch: list[Transition]) -> np.ndarray:
        cfg = self.config
        next_slots, next_counts = stack_states([t.next_state for t in batch])
        rewards = np.array([t.reward for t in batch])
        done = np.array([t.done for t in batch], dtype=float)
        next_actions, _ = self.actor_target(next_slots, next_counts)
        q_next, _ = self.critic_target(next_slots, next_counts, next_actions.data)
        return rewards + cfg.gamma * (1.0 - done) * q_next.data

    def critic_loss(self, batch: list[Transition], targets: np.ndarray) -> tuple[Tensor, GradTape]:
        slots, counts = stack_states([t.state for t in batch])
        actions = np.array([t.action for t in batch])
        with GradTape() as tape:
            q, _ = self.critic(slots, counts, actions)
            diff = q - targets
            loss = T.mean(diff * diff)
        return loss, tape

    def update(self, batch: list[Transition]) -> tuple[float, float]:
        """One critic step on the TD error, one actor step up the critic, then soft target updates."""
        cfg = self.config
        y = self.td_targets(batch)

        critic_params = self.critic.parameters()
        c_loss, tape = self.critic_loss(batch, y)
        adam_step(critic_params, tape.gradient(c_loss, critic_params), self.critic_opt)

        slots, counts = stack_states([t.state for t in batch])
        actor_params = self.actor.parameters()
        with GradTape() as tape:
            actions, _ = self.actor(slots, counts)
            q, _ = self.critic(slots, counts, actions)
            a_loss = -T.mean(q)
        adam_step(actor_params, tape.gradient(a_loss, actor_params), self.actor_opt)

        soft_update(actor_params, self.actor_target.parameters(), cfg.tau)
        soft_update(critic_params, self.critic_target.parameters(), cfg.tau)
        self.updates += 1
        return c_loss.item(), a_loss.item()

    # checkpoints -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("actor", self.actor), ("critic", self.critic),
                            ("actor_target", self.actor_target), ("critic_target", self.critic_target)):
            out.update({f"{prefix}.{k}": v for k, v in net.state_dict().items()})
        for prefix, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                out[f"{prefix}.m.{i}"] = m
                out[f"{prefix}.v.{i}"] = v
        return out

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "updates": self.updates,
                "actor_opt_t": self.actor_opt.t, "critic_opt_t": self.critic_opt.t}
        save_checkpoint(path, self.state_dict(), meta)

    def load(self, path) -> None:
        params, meta = load_checkpoint(path)
        for prefix, net in (("actor", self.actor), ("critic", self.critic),
                            ("actor_target", self.actor_target), ("critic_target", self.critic_target)):
            net.load_state_dict({k[len(prefix) + 1:]: v for k, v in params.items()
                                 if k.startswith(prefix + ".") and not k.startswith(prefix + "_")})
        for prefix, opt, key in (("actor_opt", self.actor_opt, "actor_opt_t"),
                                 ("critic_opt", self.critic_opt, "critic_opt_t")):
            opt.m = [params[f"{prefix}.m.{i}"] for i in range(len(opt.m))]
            opt.v = [params[f"{prefix}.v.{i}"] for i in range(len(opt.v))]
            opt.t = int(meta.get(key, 0))
        self.updates = int(meta.get("updates", 0))
