"""Causally masked transformer stacks used for the actor and the critic."""

from __future__ import annotations

import numpy as np

from trlhpo import tensor as T
from trlhpo.env import ACTION_DIM, IMR_DIM
from trlhpo.nn import LayerNorm, Linear, Module
from trlhpo.space import MAX_LAYERS
from trlhpo.tensor import Tensor


def positional_encoding(seq_len: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding: even columns sin(pos / 10000^(2i/dim)), odd columns cos."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(seq_len, dtype=float)[:, None]
    rate = 10000.0 ** (np.arange(0, dim, 2, dtype=float) / dim)
    pe = np.empty((seq_len, dim))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


def causal_mask(seq_len: int) -> np.ndarray:
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"embedding {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Return the projected output and the (B, heads, T, T) attention weights."""
        b, t, d = x.shape
        q, k, v = (self._split(proj(x), b, t) for proj in (self.q, self.k, self.v))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1, mask=mask)
        y = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return self.out(y), attn


def mhsa_forward(layer: MultiHeadSelfAttention, x, causal: bool = True) -> tuple[Tensor, Tensor]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    y, attn = layer(x, causal_mask(x.shape[1]) if causal else None)
    if squeeze:
        y, attn = T.reshape(y, y.shape[1:]), T.reshape(attn, attn.shape[1:])
    return y, attn


class Block(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, expansion: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff_in = Linear(dim, expansion * dim, rng)
        self.ff_out = Linear(expansion * dim, dim, rng)

    def __call__(self, x: Tensor, mask) -> tuple[Tensor, Tensor]:
        a, attn = self.attn(self.norm1(x), mask)
        x = x + a
        # GELU keeps the stack smooth enough for tight finite-difference checks
        x = x + self.ff_out(T.gelu(self.ff_in(self.norm2(x))))
        return x, attn


def _small_head(n_in: int, n_out: int, rng: np.random.Generator) -> Linear:
    head = Linear(n_in, n_out, rng)
    head.weight.data = rng.uniform(-3e-3, 3e-3, size=(n_in, n_out))
    return head


class TransformerNet(Module):
    """Shared body for actor and critic.

    The actor reads the token at the next empty slot (the last slot once the
    architecture is full); the critic appends the action as a seventh token
    and reads that.
    """

    def __init__(self, role: str, rng: np.random.Generator, dim: int = IMR_DIM, heads: int = 4,
                 n_blocks: int = 2, expansion: int = 4, slots: int = MAX_LAYERS):
        if role not in ("actor", "critic"):
            raise ValueError(f"role must be actor or critic, got {role!r}")
        self.role = role
        self.n_slots = slots
        self.embed = Linear(IMR_DIM, dim, rng)
        self.action_embed = Linear(ACTION_DIM, dim, rng) if role == "critic" else None
        self.blocks = [Block(dim, heads, expansion, rng) for _ in range(n_blocks)]
        self.norm = LayerNorm(dim)
        self.head = _small_head(dim, ACTION_DIM if role == "actor" else 1, rng)
        seq = slots + (1 if role == "critic" else 0)
        self.pe = positional_encoding(seq, dim)
        self.mask = causal_mask(seq)

    def __call__(self, slots, counts, action=None) -> tuple[Tensor, list[Tensor]]:
        """``slots`` (B, 6, 64), ``counts`` (B,), ``action`` (B, 4) for the critic.

        Returns the head output, (B, 4) or (B,), and the per-block attention tensors.
        """
        slots = slots if isinstance(slots, Tensor) else Tensor(slots)
        b = slots.shape[0]
        h = self.embed(slots)
        if self.role == "critic":
            act = action if isinstance(action, Tensor) else Tensor(action)
            h = T.concat([h, T.reshape(self.action_embed(act), (b, 1, -1))], axis=1)
            read = np.full(b, self.n_slots)
        else:
            read = np.minimum(np.asarray(counts, dtype=int), self.n_slots - 1)
        h = h + self.pe
        attns = []
        for block in self.blocks:
            h, attn = block(h, self.mask)
            attns.append(attn)
        z = self.head(self.norm(T.getitem(h, (np.arange(b), read))))
        if self.role == "actor":
            return T.sigmoid(z), attns
        return T.reshape(T.tanh(z), (b,)), attns


def stack_states(states) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.slots for s in states]), np.array([s.layer_count for s in states], dtype=int)


def actor_forward(actor: TransformerNet, state) -> tuple[np.ndarray, np.ndarray]:
    """Action in [0, 1]^4 and the final block's (heads, T, T) attention for one state."""
    slots, counts = stack_states([state])
    out, attns = actor(slots, counts)
    return out.data[0], attns[-1].data[0]


def critic_forward(critic: TransformerNet, state, action) -> float:
    slots, counts = stack_states([state])
    q, _ = critic(slots, counts, np.asarray(action, dtype=float)[None, :])
    return float(q.data[0])


def acting_attention(attn: np.ndarray, layer_count: int, n_slots: int = MAX_LAYERS) -> np.ndarray:
    """Head-averaged attention row of the position the actor reads for ``layer_count``."""
    row = min(layer_count, n_slots - 1)
    return attn.mean(axis=0)[row]
