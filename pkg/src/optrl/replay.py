"""Replay buffers and the sampling strategies used during fine-tuning.

Buffers keep their transitions in flat numpy arrays so batches are gathered
with one fancy-index per field; ``buffer[i]`` still hands back an immutable
:class:`~optrl.toyworld.Transition`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffcore import MlpLayout, ParamVector, OptimizerState, forward, \
    grad, mlp_init, sgd_or_adam_step, NetworkLoss
from .toyworld import Transition, EnvSpec, DatasetTier, write_dataset, read_dataset, ReferenceReturns

OFFLINE, ONLINE = 0, 1


class EmptyBufferError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray  # (B, 1)
    s_next: np.ndarray
    terminal: np.ndarray  # (B, 1) float 0/1
    origin: np.ndarray  # (B,) int, OFFLINE / ONLINE

    def __len__(self):
        return self.s.shape[0]

    def transition(self, i: int) -> Transition:
        return Transition(self.s[i].copy(), self.a[i].copy(), float(self.r[i, 0]),
                          self.s_next[i].copy(), bool(self.terminal[i, 0]))

    @property
    def sa(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    @staticmethod
    def concat(parts: list["Batch"]) -> "Batch":
        return Batch(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                       ("s", "a", "r", "s_next", "terminal", "origin")))


class ReplayBuffer:
    """Append-only transition store with optional FIFO capacity."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int | None = None,
                 origin: str = "offline"):
        if origin not in ("offline", "online"):
            raise ValueError("origin must be 'offline' or 'online'")
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.state_dim, self.action_dim = state_dim, action_dim
        self.capacity = capacity
        self.origin_tag = origin
        n0 = capacity if capacity is not None else 1024
        self._s = np.empty((n0, state_dim))
        self._a = np.empty((n0, action_dim))
        self._r = np.empty((n0, 1))
        self._s2 = np.empty((n0, state_dim))
        self._d = np.empty((n0, 1))
        self._size = 0
        self._head = 0  # next write slot when running as a ring

    @property
    def origin_code(self) -> int:
        return ONLINE if self.origin_tag == "online" else OFFLINE

    def __len__(self):
        return self._size

    def _grow(self):
        n = self._s.shape[0] * 2
        for name in ("_s", "_a", "_r", "_s2", "_d"):
            old = getattr(self, name)
            new = np.empty((n, old.shape[1]))
            new[:old.shape[0]] = old
            setattr(self, name, new)

    def push(self, t: Transition) -> "ReplayBuffer":
        s = np.asarray(t.s, dtype=np.float64)
        a = np.asarray(t.a, dtype=np.float64)
        s2 = np.asarray(t.s_next, dtype=np.float64)
        if s.shape != (self.state_dim,) or s2.shape != (self.state_dim,) or a.shape != (self.action_dim,):
            raise ValueError(f"transition dims {s.shape}/{a.shape} do not match buffer "
                             f"({self.state_dim}, {self.action_dim})")
        if self.capacity is None:
            if self._size == self._s.shape[0]:
                self._grow()
            i = self._size
            self._size += 1
        else:
            i = self._head
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        self._s[i], self._a[i], self._r[i, 0], self._s2[i], self._d[i, 0] = s, a, t.r, s2, float(t.terminal)
        return self

    def extend(self, transitions) -> "ReplayBuffer":
        for t in transitions:
            self.push(t)
        return self

    def _physical(self, idx: np.ndarray) -> np.ndarray:
        if self.capacity is None or self._size < self.capacity:
            return idx
        return (idx + self._head) % self.capacity

    def __getitem__(self, i: int) -> Transition:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        j = int(self._physical(np.array([i % self._size]))[0])
        return Transition(self._s[j].copy(), self._a[j].copy(), float(self._r[j, 0]),
                          self._s2[j].copy(), bool(self._d[j, 0]))

    def __iter__(self):
        return (self[i] for i in range(self._size))

    def gather(self, idx: np.ndarray) -> Batch:
        j = self._physical(np.asarray(idx))
        return Batch(self._s[j], self._a[j], self._r[j], self._s2[j], self._d[j],
                     np.full(len(j), self.origin_code, dtype=np.int64))

    def all(self) -> Batch:
        return self.gather(np.arange(self._size))

    def save(self, path, spec: EnvSpec, tier: DatasetTier, refs: ReferenceReturns | None = None):
        write_dataset(path, spec, tier, list(self), refs, [self.origin_code] * len(self))

    @classmethod
    def from_transitions(cls, transitions, state_dim, action_dim, origin="offline", capacity=None):
        return cls(state_dim, action_dim, capacity, origin).extend(transitions)

    @classmethod
    def load(cls, path, origin: str | None = None) -> "ReplayBuffer":
        f = read_dataset(path)
        if origin is None:
            origin = "online" if f.origins and f.origins[0] == ONLINE else "offline"
        sd, ad = int(f.header["state_dim"]), int(f.header["action_dim"])
        return cls.from_transitions(f.transitions, sd, ad, origin)


def sample_uniform(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    """i.i.d. draws with replacement."""
    if len(buffer) == 0:
        raise EmptyBufferError("cannot sample from an empty buffer")
    return buffer.gather(rng.integers(0, len(buffer), size=batch_size))


def sample_symmetric(b_off: ReplayBuffer, b_on: ReplayBuffer, batch_size: int,
                     rng: np.random.Generator) -> Batch:
    """Half of the batch from each buffer, offline half first."""
    if len(b_off) == 0 or len(b_on) == 0:
        raise EmptyBufferError("symmetric sampling needs both buffers non-empty")
    if batch_size % 2:
        raise ValueError("symmetric sampling needs an even batch size")
    half = batch_size // 2
    return Batch.concat([sample_uniform(b_off, half, rng), sample_uniform(b_on, half, rng)])


def sample_union(b_off: ReplayBuffer, b_on: ReplayBuffer, batch_size: int,
                 rng: np.random.Generator) -> Batch:
    n_off, n_on = len(b_off), len(b_on)
    if n_off + n_on == 0:
        raise EmptyBufferError("both buffers are empty")
    idx = np.sort(rng.integers(0, n_off + n_on, size=batch_size))
    return _gather_union(b_off, b_on, idx)


def _gather_union(b_off, b_on, idx):
    n_off = len(b_off)
    off = idx[idx < n_off]
    on = idx[idx >= n_off] - n_off
    parts = []
    if len(off):
        parts.append(b_off.gather(off))
    if len(on):
        parts.append(b_on.gather(on))
    return parts[0] if len(parts) == 1 else Batch.concat(parts)


# -- balanced replay ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BceWithLogits:
    """Binary cross-entropy on logits; label 1 = online origin."""

    labels: np.ndarray

    def value(self, out):
        z = out[:, 0]
        y = self.labels
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def d_out(self, out):
        z = out[:, 0]
        return ((_sigmoid(z) - self.labels) / len(z))[:, None]

    def d2_out(self, out):
        p = _sigmoid(out[:, 0])
        return (p * (1 - p) / len(p))[:, None]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class BalancedSampler:
    discriminator: ParamVector
    temperature: float = 5.0
    disc_train_batch: int = 64
    disc_lr: float = 1e-3
    pool_size: int = 256
    opt_state: OptimizerState | None = None
    last_loss: float | None = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.discriminator.layout.output_dim != 1:
            raise ValueError("the discriminator must output one logit")

    def logits(self, sa: np.ndarray) -> np.ndarray:
        return forward(self.discriminator, sa)[:, 0]


def make_balanced_sampler(state_dim: int, action_dim: int, seed: int, hidden=(64, 64),
                          **kw) -> BalancedSampler:
    layout = MlpLayout(state_dim + action_dim, tuple(hidden), 1, "relu", "identity")
    return BalancedSampler(mlp_init(layout, seed), **kw)


def constant_logit_sampler(state_dim: int, action_dim: int, logit: float = 0.0, **kw) -> BalancedSampler:
    """A frozen discriminator that outputs ``logit`` everywhere (bias only)."""
    layout = MlpLayout(state_dim + action_dim, (1,), 1)
    values = np.zeros(layout.n_params)
    values[-1] = logit
    return BalancedSampler(ParamVector(values, layout), **kw)


def train_discriminator(sampler: BalancedSampler, b_off: ReplayBuffer, b_on: ReplayBuffer,
                        steps: int, rng: np.random.Generator) -> BalancedSampler:
    """``steps`` Adam updates of the online-vs-offline classifier."""
    if steps == 0:
        return sampler
    if len(b_off) == 0 or len(b_on) == 0:
        raise EmptyBufferError("discriminator training needs both buffers non-empty")
    params = sampler.discriminator
    state = sampler.opt_state or OptimizerState("adam", lr=sampler.disc_lr)
    n = sampler.disc_train_batch
    labels = np.concatenate([np.zeros(n), np.ones(n)])
    loss = None
    for _ in range(steps):
        batch = Batch.concat([sample_uniform(b_off, n, rng), sample_uniform(b_on, n, rng)])
        loss, g = grad(params, NetworkLoss(batch.sa, BceWithLogits(labels)))
        params, state = sgd_or_adam_step(params, g, state)
    return replace(sampler, discriminator=params, opt_state=state, last_loss=loss)


def priorities(sampler: BalancedSampler, batch: Batch) -> np.ndarray:
    """w^(1/T) with w = exp(logit), floored at 1 for online-origin samples."""
    logit = sampler.logits(batch.sa)
    logit = np.where(batch.origin == ONLINE, np.maximum(logit, 0.0), logit)
    z = logit / sampler.temperature
    return np.exp(z - z.max())


def sample_balanced(sampler: BalancedSampler, b_off: ReplayBuffer, b_on: ReplayBuffer,
                    batch_size: int, rng: np.random.Generator) -> Batch:
    """Density-ratio prioritized draws from a uniform candidate pool over B_off u B_on."""
    n_off, n_on = len(b_off), len(b_on)
    if n_off + n_on == 0:
        raise EmptyBufferError("both buffers are empty")
    pool_idx = np.sort(rng.integers(0, n_off + n_on, size=sampler.pool_size))
    pool = _gather_union(b_off, b_on, pool_idx)
    p = priorities(sampler, pool)
    p = p / p.sum()
    pick = rng.choice(len(p), size=batch_size, p=p)
    return Batch(pool.s[pick], pool.a[pick], pool.r[pick], pool.s_next[pick],
                 pool.terminal[pick], pool.origin[pick])


def discriminator_accuracy(sampler: BalancedSampler, off: Batch, on: Batch) -> float:
    lo, ln = sampler.logits(off.sa), sampler.logits(on.sa)
    return float((np.sum(lo < 0) + np.sum(ln > 0)) / (len(lo) + len(ln)))


SAMPLER_MODES = ("balanced", "symmetric", "online_replay", "uniform_union")
