"""Loss constructors for the TD3 / TD3+BC and IQL backbones.

Each constructor freezes everything that is treated as a constant (bootstrap
targets, advantage weights, the other network's parameters) and returns an
object whose ``value_and_grad(params)`` differentiates with respect to one
network only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    ExpectileError, MlpLayout, NetworkLoss, ParamVector, SquaredError, backward, forward,
    forward_cache, mlp_init,
)
from .replay import Batch

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BackboneConfig:
    gamma: float = 0.99
    bc_weight: float = 2.5
    tau: float = 0.005
    policy_delay: int = 2
    target_noise_sigma: float = 0.2
    target_noise_clip: float = 0.5
    expectile_tau: float = 0.7
    awr_beta: float = 3.0
    awr_exp_clip: float = 10.0  # weights are clipped at exp(awr_exp_clip)
    max_action: float = 1.0
    twin: bool = True
    policy_critic_mode: str = "q1"  # "q1" | "min"

    def __post_init__(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))

    def violations(self) -> list[str]:
        errs = []
        if not 0.0 <= self.gamma < 1.0:
            errs.append("gamma must lie in [0, 1)")
        if self.bc_weight < 0:
            errs.append("bc_weight must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            errs.append("tau must lie in [0, 1]")
        if self.policy_delay < 1:
            errs.append("policy_delay must be >= 1")
        if self.target_noise_sigma < 0 or self.target_noise_clip < 0:
            errs.append("target noise sigma/clip must be >= 0")
        if not 0.0 < self.expectile_tau < 1.0:
            errs.append("expectile_tau must lie in (0, 1)")
        if self.awr_beta < 0:
            errs.append("awr_beta must be >= 0")
        if self.policy_critic_mode not in ("q1", "min"):
            errs.append("policy_critic_mode must be 'q1' or 'min'")
        return errs


@dataclass(frozen=True, eq=False)
class CriticPair:
    q1: ParamVector
    q2: ParamVector | None
    q1_target: ParamVector
    q2_target: ParamVector | None

    def __post_init__(self):
        nets = [n for n in (self.q1, self.q2, self.q1_target, self.q2_target) if n is not None]
        if any(n.layout != self.q1.layout for n in nets):
            raise ValueError("all critics in a pair must share one layout")
        if self.q1.layout.output_dim != 1:
            raise ValueError("critics output one value")
        if (self.q2 is None) != (self.q2_target is None):
            raise ValueError("q2 and its target must both be present or both absent")

    @property
    def twin(self) -> bool:
        return self.q2 is not None

    @property
    def online(self) -> list[ParamVector]:
        return [self.q1] if self.q2 is None else [self.q1, self.q2]

    @property
    def targets(self) -> list[ParamVector]:
        return [self.q1_target] if self.q2_target is None else [self.q1_target, self.q2_target]

    def digest(self) -> bytes:
        return b"".join(n.digest() for n in self.online + self.targets)


def make_critic_pair(layout: MlpLayout, seed: int, twin: bool = True) -> CriticPair:
    q1 = mlp_init(layout, seed)
    q2 = mlp_init(layout, seed + 1) if twin else None
    return CriticPair(q1, q2, q1, q2)


def q_value(critics: CriticPair, s: np.ndarray, a: np.ndarray, target: bool = False,
            reduce: str = "min") -> np.ndarray:
    """(B,) critic values at (s, a); ``reduce`` picks min over the twins or q1 only."""
    sa = np.concatenate([s, a], axis=1)
    nets = critics.targets if target else critics.online
    q = forward(nets[0], sa)[:, 0]
    if reduce == "min" and len(nets) > 1:
        q = np.minimum(q, forward(nets[1], sa)[:, 0])
    return q


def td_target(r, gamma, q_next, terminal):
    """r + gamma * q_next * (1 - terminal), elementwise."""
    return r + gamma * q_next * (1.0 - np.asarray(terminal, dtype=np.float64))


def policy_action(policy: ParamVector, s: np.ndarray, max_action: float = 1.0) -> np.ndarray:
    return max_action * forward(policy, s)


def smoothed_target_action(policy: ParamVector, s_next: np.ndarray, cfg: BackboneConfig,
                           rng: np.random.Generator | None) -> np.ndarray:
    a = policy_action(policy, s_next, cfg.max_action)
    if rng is not None and cfg.target_noise_sigma > 0:
        noise = rng.normal(0.0, cfg.target_noise_sigma * cfg.max_action, size=a.shape)
        clip = cfg.target_noise_clip * cfg.max_action
        a = np.clip(a + np.clip(noise, -clip, clip), -cfg.max_action, cfg.max_action)
    return a


@dataclass(frozen=True, eq=False)
class CriticLoss:
    """Mean over the batch of sum over critics of (Q_i(s, a) - y)^2, y frozen."""

    inputs: np.ndarray
    y: np.ndarray  # (B, 1)

    def network_loss(self) -> NetworkLoss:
        return NetworkLoss(self.inputs, SquaredError(self.y))

    def value(self, critics: CriticPair) -> float:
        nl = self.network_loss()
        return sum(nl.value(q) for q in critics.online)

    def value_and_grad(self, params: ParamVector):
        return self.network_loss().value_and_grad(params)


def critic_loss(critics: CriticPair, policy: ParamVector, batch: Batch, cfg: BackboneConfig,
                rng: np.random.Generator | None = None) -> CriticLoss:
    """Clipped double-Q TD loss with target policy smoothing.

    ``rng=None`` disables the smoothing noise.
    """
    a_next = smoothed_target_action(policy, batch.s_next, cfg, rng)
    q_next = q_value(critics, batch.s_next, a_next, target=True, reduce="min")
    y = td_target(batch.r[:, 0], cfg.gamma, q_next, batch.terminal[:, 0])
    return CriticLoss(batch.sa, y[:, None])


@dataclass(frozen=True, eq=False)
class ActorLoss:
    """mean_B[ -sum_j w_j Q_j(s, pi(s)) + bc_weight * ||pi(s) - a||^2 ]

    The critics are frozen; the gradient flows through their action input.
    """

    states: np.ndarray
    actions: np.ndarray
    critics: tuple  # ((CriticPair | ParamVector, weight), ...)
    bc_weight: float = 0.0
    max_action: float = 1.0
    critic_mode: str = "q1"

    def _terms(self, pi):
        sa = np.concatenate([self.states, pi], axis=1)
        B = len(self.states)
        adim = pi.shape[1]
        value = 0.0
        d_pi = np.zeros_like(pi)
        for critic, w in self.critics:
            if w == 0.0:
                continue
            nets = critic.online if isinstance(critic, CriticPair) else [critic]
            if self.critic_mode == "q1" or len(nets) == 1:
                nets = nets[:1]
            caches = []
            for net in nets:
                caches.append((net, forward_cache(net, sa)))
            if len(caches) == 1:
                net, c = caches[0]
                q = c.output[:, 0]
                value -= w * q.mean()
                _, d_in = backward(net, c, np.full((B, 1), -w / B), need_input_grad=True)
                d_pi += d_in[:, -adim:]
            else:
                q_all = np.stack([c.output[:, 0] for _, c in caches])
                pick = np.argmin(q_all, axis=0)
                value -= w * q_all[pick, np.arange(B)].mean()
                for k, (net, c) in enumerate(caches):
                    mask = (pick == k).astype(np.float64)[:, None]
                    _, d_in = backward(net, c, -w / B * mask, need_input_grad=True)
                    d_pi += d_in[:, -adim:]
        if self.bc_weight:
            diff = pi - self.actions
            value += self.bc_weight * np.sum(diff * diff) / B
            d_pi += 2.0 * self.bc_weight * diff / B
        return value, d_pi

    def value_and_grad(self, policy: ParamVector):
        cache = forward_cache(policy, self.states)
        pi = self.max_action * cache.output
        value, d_pi = self._terms(pi)
        g, _ = backward(policy, cache, self.max_action * d_pi)
        return float(value), g

    def value(self, policy: ParamVector) -> float:
        pi = self.max_action * forward(policy, self.states)
        return float(self._terms(pi)[0])

    def per_sample_q(self, policy: ParamVector) -> np.ndarray:
        """(B,) weighted critic value sum_j w_j Q_j(s, pi(s)) per batch element."""
        pi = self.max_action * forward(policy, self.states)
        sa = np.concatenate([self.states, pi], axis=1)
        out = np.zeros(len(self.states))
        for critic, w in self.critics:
            net = critic.q1 if isinstance(critic, CriticPair) else critic
            out += w * forward(net, sa)[:, 0]
        return out


def td3bc_policy_loss(policy: ParamVector, critic_q1, batch: Batch, cfg: BackboneConfig) -> ActorLoss:
    """-Q(s, pi(s)) + bc_weight * ||pi(s) - a||^2, batch-averaged."""
    return ActorLoss(batch.s, batch.a, ((critic_q1, 1.0),), cfg.bc_weight, cfg.max_action,
                     cfg.policy_critic_mode)


# -- IQL ---------------------------------------------------------------------

def iql_v_loss(v: ParamVector, q_target: CriticPair, batch: Batch, cfg: BackboneConfig) -> NetworkLoss:
    """Expectile regression of V(s) onto min target Q(s, a)."""
    q = q_value(q_target, batch.s, batch.a, target=True, reduce="min")
    return NetworkLoss(batch.s, ExpectileError(q[:, None], cfg.expectile_tau))


def iql_q_loss(critics: CriticPair, v: ParamVector, batch: Batch, cfg: BackboneConfig) -> CriticLoss:
    v_next = forward(v, batch.s_next)[:, 0]
    y = td_target(batch.r[:, 0], cfg.gamma, v_next, batch.terminal[:, 0])
    return CriticLoss(batch.sa, y[:, None])


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    """tanh-squashed mean network with a state-independent log standard deviation."""

    mean: ParamVector
    log_std: np.ndarray
    max_action: float = 1.0

    def __post_init__(self):
        ls = np.array(self.log_std, dtype=np.float64).reshape(self.mean.layout.output_dim)
        ls.flags.writeable = False
        object.__setattr__(self, "log_std", ls)

    @property
    def n_params(self) -> int:
        return len(self.mean) + len(self.log_std)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean.values, self.log_std])

    def with_flat(self, values: np.ndarray) -> "GaussianPolicy":
        n = len(self.mean)
        return GaussianPolicy(self.mean.replace(values[:n]), values[n:].copy(), self.max_action)

    def mu(self, s: np.ndarray) -> np.ndarray:
        return self.max_action * forward(self.mean, s)

    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu = self.mu(s)
        return mu + np.exp(self.clamped_log_std()) * rng.normal(size=mu.shape)

    def log_prob(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        ls = self.clamped_log_std()
        z = (a - self.mu(s)) / np.exp(ls)
        return np.sum(-0.5 * z * z - ls - 0.5 * _LOG_2PI, axis=1)

    def digest(self) -> bytes:
        return self.mean.digest() + self.log_std.tobytes()


def make_gaussian_policy(layout: MlpLayout, seed: int, max_action: float = 1.0,
                         log_std: float = 0.0) -> GaussianPolicy:
    return GaussianPolicy(mlp_init(layout, seed), np.full(layout.output_dim, log_std), max_action)


def advantage_weights(advantages: np.ndarray, beta: float, exp_clip: float = 10.0) -> np.ndarray:
    """exp(beta * A), clipped at exp(exp_clip)."""
    z = beta * np.asarray(advantages, dtype=np.float64)
    if not np.isfinite(z).all():
        raise FloatingPointError("non-finite advantage weight")
    return np.exp(np.minimum(z, exp_clip))


@dataclass(frozen=True, eq=False)
class AwrLoss:
    """-mean_B[ w(s, a) * log pi(a | s) ] over the flat (mean net, log_std) vector."""

    states: np.ndarray
    actions: np.ndarray
    weights: np.ndarray

    def value_and_grad(self, policy: GaussianPolicy):
        cache = forward_cache(policy.mean, self.states)
        mu = policy.max_action * cache.output
        ls = policy.clamped_log_std()
        inv_var = np.exp(-2.0 * ls)
        diff = self.actions - mu
        logp = np.sum(-0.5 * diff * diff * inv_var - ls - 0.5 * _LOG_2PI, axis=1)
        B = len(self.states)
        w = self.weights
        value = -float(np.mean(w * logp))
        # d(-w logp / B)/d mu = -w * diff * inv_var / B
        d_mu = -(w[:, None] * diff * inv_var) / B
        g_mean, _ = backward(policy.mean, cache, policy.max_action * d_mu)
        inside = (policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX)
        g_ls = -np.sum(w[:, None] * (diff * diff * inv_var - 1.0), axis=0) / B
        g_ls = np.where(inside, g_ls, 0.0)
        return value, np.concatenate([g_mean, g_ls])

    def value(self, policy: GaussianPolicy) -> float:
        return -float(np.mean(self.weights * policy.log_prob(self.states, self.actions)))


def awr_policy_loss(policy: GaussianPolicy, advantage_weights_: np.ndarray, batch: Batch,
                    cfg: BackboneConfig | None = None) -> AwrLoss:
    w = np.asarray(advantage_weights_, dtype=np.float64)
    if not np.isfinite(w).all():
        raise FloatingPointError("non-finite advantage weight")
    return AwrLoss(batch.s, batch.a, w)


def iql_advantages(q_target: CriticPair, v: ParamVector, batch: Batch) -> np.ndarray:
    q = q_value(q_target, batch.s, batch.a, target=True, reduce="min")
    return q - forward(v, batch.s)[:, 0]
