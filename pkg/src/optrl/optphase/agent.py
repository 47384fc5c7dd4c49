"""Agent state, phase budgets, per-backbone update steps and checkpoint files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..backbones import (
    AwrLoss, BackboneConfig, CriticPair, GaussianPolicy, ActorLoss, advantage_weights,
    critic_loss, iql_advantages, iql_q_loss, iql_v_loss, make_critic_pair, make_gaussian_policy,
    policy_action, q_value, td3bc_policy_loss, td_target,
)
from ..diffcore import (
    GradVector, MlpLayout, NetworkLoss, OptimizerState, ParamVector, forward, grad, meta_grad,
    mlp_init, polyak_update, sgd_or_adam_step,
)
from ..replay import Batch
from .objectives import blended_advantages, finetune_policy_loss

PHASES = ("offline", "online_pretrain", "finetune")

# independent random streams, one per purpose
STREAMS = {"init": 1, "env": 2, "explore": 3, "sample": 4, "noise_off": 5, "noise_on": 6,
           "disc": 7, "eval": 8, "collect": 9}


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def make_rngs(seed: int, phase: str) -> dict[str, np.random.Generator]:
    p = PHASES.index(phase) + 1
    return {k: np.random.default_rng([seed, p, code]) for k, code in STREAMS.items()}


@dataclass(frozen=True)
class PhaseBudget:
    n_offline_steps: int = 20_000
    n_tau: int = 1_000
    n_pretrain: int = 2_000
    n_finetune: int = 20_000
    utd_ratio: int = 5

    def __post_init__(self):
        for k in ("n_offline_steps", "n_tau", "n_pretrain", "n_finetune"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.utd_ratio < 1:
            raise ValueError("utd_ratio must be >= 1")

    @property
    def online_env_steps(self) -> int:
        return self.n_tau + self.n_finetune


@dataclass(frozen=True)
class NetSizes:
    state_dim: int
    action_dim: int
    hidden: tuple[int, ...] = (64, 64)

    def critic(self) -> MlpLayout:
        return MlpLayout(self.state_dim + self.action_dim, self.hidden, 1)

    def value(self) -> MlpLayout:
        return MlpLayout(self.state_dim, self.hidden, 1)

    def actor(self) -> MlpLayout:
        return MlpLayout(self.state_dim, self.hidden, self.action_dim, "relu", "tanh")


def _counters() -> dict[str, int]:
    return {"offline_steps": 0, "env_steps": 0, "critic_updates": 0, "policy_updates": 0,
            "pretrain_updates": 0, "finetune_steps": 0}


@dataclass
class AgentState:
    """Everything a run carries between phases.

    ``policy`` is a deterministic actor ParamVector (TD3) or a GaussianPolicy
    (IQL).  ``value_off``/``value_on`` are only used by IQL.  Optimizer states
    live in ``optimizers`` keyed like ``"off.q1"`` or ``"policy"``.
    """

    backbone: str
    policy: ParamVector | GaussianPolicy
    critic_off: CriticPair | None
    critic_on: CriticPair | None = None
    value_off: ParamVector | None = None
    value_on: ParamVector | None = None
    phase: str = "offline"
    counters: dict[str, int] = field(default_factory=_counters)
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)
    diagnostics: dict[str, float] = field(default_factory=dict)  # last losses, not checkpointed

    def check(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == "offline" and (self.critic_on is not None or self.value_on is not None):
            raise ValueError("the online pre-trained critic cannot exist during the offline phase")
        return self

    def frozen_digest(self) -> str:
        """sha256 over the policy and the offline critic (with targets and V)."""
        h = hashlib.sha256(self.policy.digest())
        if self.critic_off is not None:
            h.update(self.critic_off.digest())
        if self.value_off is not None:
            h.update(self.value_off.digest())
        return h.hexdigest()

    def act(self, s: np.ndarray, max_action: float = 1.0) -> np.ndarray:
        if isinstance(self.policy, GaussianPolicy):
            return self.policy.mu(s)
        return policy_action(self.policy, s, max_action)


def init_agent(backbone: str, sizes: NetSizes, seed: int, cfg: BackboneConfig) -> AgentState:
    if backbone not in ("td3", "iql"):
        raise ValueError(f"unknown backbone {backbone!r}")
    s_pol, s_q, s_v = (derive_seed(seed, STREAMS["init"], k) for k in (1, 2, 3))
    critic = make_critic_pair(sizes.critic(), s_q, cfg.twin)
    if backbone == "td3":
        return AgentState("td3", mlp_init(sizes.actor(), s_pol), critic)
    pol = make_gaussian_policy(sizes.actor(), s_pol, cfg.max_action)
    return AgentState("iql", pol, critic, value_off=mlp_init(sizes.value(), s_v))


def fresh_online_critics(agent: AgentState, sizes: NetSizes, seed: int, cfg: BackboneConfig):
    """New psi (and IQL nu) with targets copied from the fresh networks."""
    agent.critic_on = make_critic_pair(sizes.critic(), derive_seed(seed, STREAMS["init"], 4), cfg.twin)
    if agent.backbone == "iql":
        agent.value_on = mlp_init(sizes.value(), derive_seed(seed, STREAMS["init"], 5))
    for k in [k for k in agent.optimizers if k.startswith("on.")]:
        del agent.optimizers[k]
    return agent


# -- optimizer plumbing ------------------------------------------------------

@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 3e-4


def _step(agent: AgentState, key: str, params: ParamVector, g, opt: OptimConfig) -> ParamVector:
    state = agent.optimizers.get(key) or OptimizerState(opt.kind, lr=opt.lr)
    new, state = sgd_or_adam_step(params, g, state)
    agent.optimizers[key] = state
    return new


def _replace_online(pair: CriticPair, nets: list[ParamVector]) -> CriticPair:
    return CriticPair(nets[0], nets[1] if len(nets) > 1 else None, pair.q1_target, pair.q2_target)


def update_targets(pair: CriticPair, tau: float) -> CriticPair:
    q2t = polyak_update(pair.q2_target, pair.q2, tau) if pair.twin else None
    return CriticPair(pair.q1, pair.q2, polyak_update(pair.q1_target, pair.q1, tau), q2t)


def _critic_step(agent, which: str, pair: CriticPair, loss_nl: NetworkLoss, opt) -> tuple[CriticPair, float]:
    nets, total = [], 0.0
    for i, net in enumerate(pair.online):
        value, g = grad(net, loss_nl)
        nets.append(_step(agent, f"{which}.q{i + 1}", net, g, opt))
        total += value
    return _replace_online(pair, nets), total


def _pair(agent, which):
    return agent.critic_off if which == "off" else agent.critic_on


def _set_pair(agent, which, pair):
    if which == "off":
        agent.critic_off = pair
    else:
        agent.critic_on = pair


# -- TD3 ---------------------------------------------------------------------

def td3_critic_update(agent: AgentState, which: str, batch: Batch, cfg: BackboneConfig,
                      rng: np.random.Generator, opt: OptimConfig) -> float:
    pair = _pair(agent, which)
    loss = critic_loss(pair, agent.policy, batch, cfg, rng).network_loss()
    pair, value = _critic_step(agent, which, pair, loss, opt)
    _set_pair(agent, which, pair)
    return value


def td3_policy_update(agent: AgentState, loss: ActorLoss, opt: OptimConfig) -> float:
    value, g = grad(agent.policy, loss)
    agent.policy = _step(agent, "policy", agent.policy, g, opt)
    return value


def td3bc_offline_step(agent: AgentState, batch: Batch, cfg: BackboneConfig,
                       rng: np.random.Generator, opt: OptimConfig) -> dict[str, float]:
    out = {"critic_loss_off": td3_critic_update(agent, "off", batch, cfg, rng, opt)}
    agent.counters["offline_steps"] += 1
    if agent.counters["offline_steps"] % cfg.policy_delay == 0:
        loss = td3bc_policy_loss(agent.policy, agent.critic_off, batch, cfg)
        out["policy_loss"] = td3_policy_update(agent, loss, opt)
        agent.critic_off = update_targets(agent.critic_off, cfg.tau)
    return out


def td3_meta_update(agent: AgentState, which: str, off_batch: Batch, on_batch: Batch,
                    cfg: BackboneConfig, rng: np.random.Generator, alpha: float, mode: str,
                    opt: OptimConfig) -> float:
    """One step on L_off(psi) + L_on(psi - alpha grad L_off(psi)), then polyak the targets."""
    pair = _pair(agent, which)
    off = critic_loss(pair, agent.policy, off_batch, cfg, rng).network_loss()
    on = critic_loss(pair, agent.policy, on_batch, cfg, rng).network_loss()
    nets, total = [], 0.0
    for i, net in enumerate(pair.online):
        value, g = meta_grad(net, off, on, alpha, mode)
        nets.append(_step(agent, f"{which}.q{i + 1}", net, g, opt))
        total += value
    _set_pair(agent, which, update_targets(_replace_online(pair, nets), cfg.tau))
    return total


def td3_plain_pretrain_update(agent: AgentState, batch: Batch, cfg: BackboneConfig,
                              rng: np.random.Generator, opt: OptimConfig) -> float:
    """L_on only: a plain TD step of psi on online data."""
    value = td3_critic_update(agent, "on", batch, cfg, rng, opt)
    agent.critic_on = update_targets(agent.critic_on, cfg.tau)
    return value


def policy_loss_for(agent: AgentState, batch: Batch, kappa: float, drive: str,
                    cfg: BackboneConfig) -> ActorLoss:
    """Actor loss for fine-tuning: ``blend`` uses the kappa mixture, ``off`` the offline critic only."""
    if drive == "blend":
        return finetune_policy_loss(agent.policy, agent.critic_off, agent.critic_on, batch, kappa, cfg)
    return ActorLoss(batch.s, batch.a, ((agent.critic_off, 1.0),), 0.0, cfg.max_action,
                     cfg.policy_critic_mode)


# -- IQL ---------------------------------------------------------------------

def _value_key(which):
    return f"{which}.v"


def _get_v(agent, which):
    return agent.value_off if which == "off" else agent.value_on


def _set_v(agent, which, v):
    if which == "off":
        agent.value_off = v
    else:
        agent.value_on = v


def iql_value_critic_update(agent: AgentState, which: str, batch: Batch, cfg: BackboneConfig,
                            opt: OptimConfig) -> tuple[float, float]:
    """Expectile step on V, TD step on Q towards r + gamma V(s'), polyak on Q targets."""
    pair, v = _pair(agent, which), _get_v(agent, which)
    lv, gv = grad(v, iql_v_loss(v, pair, batch, cfg))
    v = _step(agent, _value_key(which), v, gv, opt)
    _set_v(agent, which, v)
    pair, lq = _critic_step(agent, which, pair, iql_q_loss(pair, v, batch, cfg).network_loss(), opt)
    _set_pair(agent, which, update_targets(pair, cfg.tau))
    return lq, lv


def iql_policy_update(agent: AgentState, batch: Batch, kappa: float, drive: str,
                      cfg: BackboneConfig, opt: OptimConfig) -> float:
    if drive == "blend":
        adv = blended_advantages(agent.critic_off, agent.value_off, agent.critic_on, agent.value_on,
                                 batch, kappa) if kappa < 1.0 else \
            iql_advantages(agent.critic_on, agent.value_on, batch)
    else:
        adv = iql_advantages(agent.critic_off, agent.value_off, batch)
    loss = AwrLoss(batch.s, batch.a, advantage_weights(adv, cfg.awr_beta, cfg.awr_exp_clip))
    pol = agent.policy
    value, g = loss.value_and_grad(pol)
    state = agent.optimizers.get("policy") or OptimizerState(opt.kind, lr=opt.lr)
    new, state = sgd_or_adam_step(_FlatParams(pol.flat()), GradVector(g), state)
    agent.optimizers["policy"] = state
    agent.policy = pol.with_flat(new.values)
    return float(value)


class _FlatParams:
    """Minimal ParamVector stand-in so the shared optimizer can step [mean params, log_std]."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def replace(self, values) -> "_FlatParams":
        return _FlatParams(values)


def iql_offline_step(agent: AgentState, batch: Batch, cfg: BackboneConfig,
                     opt: OptimConfig) -> dict[str, float]:
    lq, lv = iql_value_critic_update(agent, "off", batch, cfg, opt)
    lp = iql_policy_update(agent, batch, 1.0, "off", cfg, opt)
    agent.counters["offline_steps"] += 1
    return {"critic_loss_off": lq, "value_loss_off": lv, "policy_loss": lp}


def iql_meta_update(agent: AgentState, which: str, off_batch: Batch, on_batch: Batch,
                    cfg: BackboneConfig, alpha: float, mode: str, opt: OptimConfig) -> float:
    """Meta-adaptation step for V (expectile loss) and then Q (TD loss onto V)."""
    pair, v = _pair(agent, which), _get_v(agent, which)
    lv, gv = meta_grad(v, iql_v_loss(v, pair, off_batch, cfg), iql_v_loss(v, pair, on_batch, cfg),
                       alpha, mode)
    v = _step(agent, _value_key(which), v, gv, opt)
    _set_v(agent, which, v)
    off = iql_q_loss(pair, v, off_batch, cfg).network_loss()
    on = iql_q_loss(pair, v, on_batch, cfg).network_loss()
    nets, total = [], 0.0
    for i, net in enumerate(pair.online):
        value, g = meta_grad(net, off, on, alpha, mode)
        nets.append(_step(agent, f"{which}.q{i + 1}", net, g, opt))
        total += value
    _set_pair(agent, which, update_targets(_replace_online(pair, nets), cfg.tau))
    return total


# -- diagnostics -------------------------------------------------------------

def bellman_residual(pair: CriticPair, policy: ParamVector, batch: Batch, cfg: BackboneConfig) -> float:
    """Mean squared TD error of q1 against its noise-free clipped double-Q target."""
    a_next = policy_action(policy, batch.s_next, cfg.max_action)
    y = td_target(batch.r[:, 0], cfg.gamma, q_value(pair, batch.s_next, a_next, target=True),
                  batch.terminal[:, 0])
    q = forward(pair.q1, batch.sa)[:, 0]
    return float(np.mean((q - y) ** 2))


# -- checkpoints -------------------------------------------------------------

def _pv(p: ParamVector | None):
    if p is None:
        return None
    return {"layout": p.layout.to_dict(), "values": p.values.tolist()}


def _pv_load(d) -> ParamVector | None:
    if d is None:
        return None
    return ParamVector(np.array(d["values"], dtype=np.float64), MlpLayout.from_dict(d["layout"]))


def _pair_dump(pair: CriticPair | None):
    if pair is None:
        return None
    return {k: _pv(getattr(pair, k)) for k in ("q1", "q2", "q1_target", "q2_target")}


def _pair_load(d) -> CriticPair | None:
    if d is None:
        return None
    return CriticPair(*(_pv_load(d[k]) for k in ("q1", "q2", "q1_target", "q2_target")))


def _opt_dump(s: OptimizerState):
    return {"kind": s.kind, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t,
            "m": None if s.m is None else s.m.tolist(), "v": None if s.v is None else s.v.tolist()}


def _opt_load(d) -> OptimizerState:
    arr = lambda x: None if x is None else np.array(x, dtype=np.float64)  # noqa: E731
    return OptimizerState(d["kind"], d["lr"], d["beta1"], d["beta2"], d["eps"], arr(d["m"]),
                          arr(d["v"]), d["t"])


def agent_to_dict(agent: AgentState) -> dict:
    pol = agent.policy
    if isinstance(pol, GaussianPolicy):
        policy = {"kind": "gaussian", "mean": _pv(pol.mean), "log_std": pol.log_std.tolist(),
                  "max_action": pol.max_action}
    else:
        policy = {"kind": "deterministic", **_pv(pol)}
    return {
        "format": "optrl-checkpoint/1",
        "backbone": agent.backbone,
        "phase": agent.phase,
        "counters": dict(agent.counters),
        "policy": policy,
        "critic_off": _pair_dump(agent.critic_off),
        "critic_on": _pair_dump(agent.critic_on),
        "value_off": _pv(agent.value_off),
        "value_on": _pv(agent.value_on),
        "optimizers": {k: _opt_dump(v) for k, v in sorted(agent.optimizers.items())},
    }


def agent_from_dict(d: dict) -> AgentState:
    if d.get("format") != "optrl-checkpoint/1":
        raise ValueError("not an optrl checkpoint")
    p = d["policy"]
    if p["kind"] == "gaussian":
        policy = GaussianPolicy(_pv_load(p["mean"]), np.array(p["log_std"]), p["max_action"])
    else:
        policy = _pv_load(p)
    return AgentState(d["backbone"], policy, _pair_load(d["critic_off"]), _pair_load(d["critic_on"]),
                      _pv_load(d["value_off"]), _pv_load(d["value_on"]), d["phase"],
                      {**_counters(), **d["counters"]},
                      {k: _opt_load(v) for k, v in d["optimizers"].items()}).check()


def save_checkpoint(agent: AgentState, path) -> None:
    Path(path).write_text(json.dumps(agent_to_dict(agent), sort_keys=True) + "\n")


def load_checkpoint(path) -> AgentState:
    return agent_from_dict(json.loads(Path(path).read_text()))
