"""The three-phase pipeline: offline pre-training, online pre-training of a fresh
critic, and kappa-blended online fine-tuning, plus the baseline methods built
from the same pieces."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from ..backbones import BackboneConfig
from ..diffcore import forward
from ..metrics import ProbeSet, estimation_bias, make_probe_set
from ..replay import (
    BalancedSampler, ReplayBuffer, make_balanced_sampler, sample_balanced, sample_symmetric,
    sample_uniform, sample_union, train_discriminator,
)
from ..toyworld import (
    DatasetTier, EnvSpec, ReferenceReturns, Transition, build_oracle, clip_action,
    evaluate_policy, gen_dataset, make_env, normalized_score, read_dataset, reference_returns,
    reset, step,
)
from .agent import (
    AgentState, NetSizes, OptimConfig, PhaseBudget, fresh_online_critics, init_agent,
    iql_meta_update, iql_offline_step, iql_policy_update, iql_value_critic_update, make_rngs,
    policy_loss_for, td3_critic_update, td3_meta_update, td3_plain_pretrain_update,
    td3_policy_update, td3bc_offline_step, update_targets,
)
from .kappa import KappaSchedule, kappa_at

Rngs = dict[str, np.random.Generator]
StepHook = Callable[[AgentState, dict], None]


class EnvRunner:
    """Steps one environment, resetting at the horizon."""

    def __init__(self, spec: EnvSpec, rng: np.random.Generator):
        self.spec, self.rng = spec, rng
        self.state = reset(spec, rng)
        self.t = 0

    def step(self, action) -> Transition:
        a, _ = clip_action(self.spec, action)
        res = step(self.spec, self.state, a, self.rng, self.t)
        tr = Transition(self.state, a, res.reward, res.state, False)
        self.t += 1
        if res.terminal:
            self.state, self.t = reset(self.spec, self.rng), 0
        else:
            self.state = res.state
        return tr


@dataclass(frozen=True)
class PretrainSettings:
    objective: str = "meta"  # "meta" | "on_only" | "meta_off" | "none"
    alpha: float = 1e-3
    mode: str = "exact"
    batch_size: int = 256
    collect_noise: float = 0.0


@dataclass(frozen=True)
class FinetuneSettings:
    schedule: KappaSchedule = KappaSchedule.constant(1.0)
    sampler_mode: str = "balanced"
    drive: str = "blend"  # "blend" (kappa mixture) | "off" (offline critic only)
    train_off: bool = True
    train_on: bool = True
    batch_size: int = 256
    exploration_sigma: float = 0.1
    temperature: float = 5.0
    disc_train_batch: int = 64
    disc_lr: float = 1e-3
    disc_every: int = 10
    disc_hidden: int = 64
    pool_size: int = 256


# -- phases ------------------------------------------------------------------

def run_offline(agent: AgentState, b_off: ReplayBuffer, n_steps: int, cfg: BackboneConfig,
                rngs: Rngs, opt: OptimConfig, batch_size: int = 256,
                hook: Callable[[int, dict], None] | None = None) -> AgentState:
    """TD3+BC (or IQL) gradient steps on the offline buffer."""
    agent.phase = "offline"
    for i in range(n_steps):
        batch = sample_uniform(b_off, batch_size, rngs["sample"])
        if agent.backbone == "td3":
            info = td3bc_offline_step(agent, batch, cfg, rngs["noise_off"], opt)
        else:
            info = iql_offline_step(agent, batch, cfg, opt)
        if hook is not None:
            hook(i + 1, info)
    return agent


def _act(agent: AgentState, s: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    return agent.act(s[None, :], cfg.max_action)[0]


def collect_online(agent: AgentState, env: EnvSpec, n: int, rngs: Rngs, cfg: BackboneConfig,
                   noise: float = 0.0, hook: StepHook | None = None,
                   b_on: ReplayBuffer | None = None) -> ReplayBuffer:
    """N_tau transitions from the frozen policy (deterministic unless ``noise`` > 0)."""
    if b_on is None:
        b_on = ReplayBuffer(env.state_dim, env.action_dim, origin="online")
    runner = EnvRunner(env, rngs["env"])
    for _ in range(n):
        a = _act(agent, runner.state, cfg)
        if noise > 0:
            a = a + rngs["collect"].normal(0.0, noise * cfg.max_action, size=a.shape)
        b_on.push(runner.step(a))
        agent.counters["env_steps"] += 1
        if hook is not None:
            hook(agent, {})
    return b_on


def run_online_pretraining(agent: AgentState, b_off: ReplayBuffer, env: EnvSpec, budget: PhaseBudget,
                           rngs: Rngs, cfg: BackboneConfig, opt: OptimConfig,
                           settings: PretrainSettings = PretrainSettings(),
                           sizes: NetSizes | None = None, seed: int = 0,
                           hook: StepHook | None = None,
                           b_on: ReplayBuffer | None = None) -> tuple[AgentState, ReplayBuffer]:
    """Collect N_tau transitions with the frozen policy, then N_pretrain updates of the online critic.

    Each update samples one minibatch from B_off and one from B_on.  With the
    ``meta`` objective only psi (and its target) changes; ``on_only`` drops the
    offline term; ``meta_off`` applies the meta objective to the offline critic
    instead of a new one.
    """
    if settings.objective not in ("meta", "on_only", "meta_off", "none"):
        raise ValueError(f"unknown pre-training objective {settings.objective!r}")
    agent.phase = "online_pretrain"
    if settings.objective in ("meta", "on_only") and agent.critic_on is None:
        if sizes is None:
            raise ValueError("creating the online critic needs network sizes")
        fresh_online_critics(agent, sizes, seed, cfg)
    b_on = collect_online(agent, env, budget.n_tau, rngs, cfg, settings.collect_noise, hook, b_on)
    if settings.objective == "none":
        return agent, b_on
    which = "off" if settings.objective == "meta_off" else "on"
    noise_rng = rngs["noise_off"] if which == "off" else rngs["noise_on"]
    for _ in range(budget.n_pretrain):
        off_b = sample_uniform(b_off, settings.batch_size, rngs["sample"])
        on_b = sample_uniform(b_on, settings.batch_size, rngs["sample"])
        if settings.objective == "on_only":
            if agent.backbone == "td3":
                loss = td3_plain_pretrain_update(agent, on_b, cfg, noise_rng, opt)
            else:
                loss, _ = iql_value_critic_update(agent, "on", on_b, cfg, opt)
        elif agent.backbone == "td3":
            loss = td3_meta_update(agent, which, off_b, on_b, cfg, noise_rng, settings.alpha,
                                   settings.mode, opt)
        else:
            loss = iql_meta_update(agent, which, off_b, on_b, cfg, settings.alpha, settings.mode, opt)
        agent.counters["critic_updates"] += 1
        agent.counters["pretrain_updates"] += 1
        agent.diagnostics["pretrain_loss"] = loss
    return agent, b_on


class _Sampler:
    def __init__(self, settings: FinetuneSettings, b_off, b_on, env: EnvSpec, seed: int):
        self.s, self.b_off, self.b_on = settings, b_off, b_on
        self.balanced: BalancedSampler | None = None
        if settings.sampler_mode == "balanced":
            # reset at fine-tuning start
            self.balanced = make_balanced_sampler(
                env.state_dim, env.action_dim, seed, (settings.disc_hidden,) * 2,
                temperature=settings.temperature, disc_train_batch=settings.disc_train_batch,
                disc_lr=settings.disc_lr, pool_size=settings.pool_size)

    def maybe_train(self, t: int, rng):
        if self.balanced is not None and t % self.s.disc_every == 0:
            self.balanced = train_discriminator(self.balanced, self.b_off, self.b_on, 1, rng)

    def draw(self, rng):
        mode, n = self.s.sampler_mode, self.s.batch_size
        if mode == "balanced":
            return sample_balanced(self.balanced, self.b_off, self.b_on, n, rng)
        if mode == "symmetric":
            return sample_symmetric(self.b_off, self.b_on, n, rng)
        if mode == "online_replay":
            return sample_uniform(self.b_on, n, rng)
        if mode == "uniform_union":
            return sample_union(self.b_off, self.b_on, n, rng)
        raise ValueError(f"unknown sampler mode {mode!r}")


def run_finetuning(agent: AgentState, b_off: ReplayBuffer, b_on: ReplayBuffer, env: EnvSpec,
                   budget: PhaseBudget, rngs: Rngs, cfg: BackboneConfig, opt: OptimConfig,
                   settings: FinetuneSettings = FinetuneSettings(), seed: int = 0,
                   hook: StepHook | None = None) -> AgentState:
    """N_finetune environment steps with utd_ratio critic updates each.

    Critic batches come from the configured sampler and the policy update
    reuses the batch of the critic update that triggers it.  Targets are
    polyak-updated together with the policy, every ``policy_delay`` critic
    updates (IQL updates its policy after every critic update).
    """
    agent.phase = "finetune"
    if settings.drive == "blend" and agent.critic_on is None:
        raise ValueError("the blended policy loss needs an online critic")
    train_off = settings.train_off and agent.critic_off is not None
    train_on = settings.train_on and agent.critic_on is not None
    sampler = _Sampler(settings, b_off, b_on, env, int(rngs["disc"].integers(2**31)))
    runner = EnvRunner(env, rngs["env"])
    delay = cfg.policy_delay if agent.backbone == "td3" else 1
    n_updates = 0
    info: dict = {}
    for t in range(budget.n_finetune):
        kappa = kappa_at(settings.schedule, t)
        a = _act(agent, runner.state, cfg)
        if settings.exploration_sigma > 0:
            a = a + rngs["explore"].normal(0.0, settings.exploration_sigma * cfg.max_action, size=a.shape)
        b_on.push(runner.step(a))
        agent.counters["env_steps"] += 1
        agent.counters["finetune_steps"] += 1
        sampler.maybe_train(t, rngs["disc"])
        for _ in range(budget.utd_ratio):
            batch = sampler.draw(rngs["sample"])
            if agent.backbone == "td3":
                if train_off:
                    info["critic_loss_off"] = td3_critic_update(agent, "off", batch, cfg, rngs["noise_off"], opt)
                if train_on:
                    info["critic_loss_on"] = td3_critic_update(agent, "on", batch, cfg, rngs["noise_on"], opt)
            else:
                if train_off:
                    info["critic_loss_off"], _ = iql_value_critic_update(agent, "off", batch, cfg, opt)
                if train_on:
                    info["critic_loss_on"], _ = iql_value_critic_update(agent, "on", batch, cfg, opt)
            agent.counters["critic_updates"] += 1
            n_updates += 1
            if n_updates % delay == 0:
                if agent.backbone == "td3":
                    loss = policy_loss_for(agent, batch, kappa, settings.drive, cfg)
                    info["policy_loss"] = td3_policy_update(agent, loss, opt)
                    if train_off:
                        agent.critic_off = update_targets(agent.critic_off, cfg.tau)
                    if train_on:
                        agent.critic_on = update_targets(agent.critic_on, cfg.tau)
                else:
                    info["policy_loss"] = iql_policy_update(agent, batch, kappa, settings.drive, cfg, opt)
                agent.counters["policy_updates"] += 1
                info["kappa_used"] = kappa
        if hook is not None:
            hook(agent, info)
    return agent


# -- evaluation and bias -----------------------------------------------------

_ORACLES: dict = {}


def cached_oracle(spec: EnvSpec, state_bins: int, action_bins: int, gamma: float):
    key = (spec, state_bins, action_bins, gamma)
    if key not in _ORACLES:
        _ORACLES[key] = build_oracle(spec, state_bins, action_bins, gamma)
    return _ORACLES[key]


def evaluate(agent: AgentState, env: EnvSpec, n_episodes: int, seed: int,
             max_action: float = 1.0) -> float:
    """Mean return of deterministic episodes from a fixed set of start states."""
    rng = np.random.default_rng([seed, 8])
    return float(evaluate_policy(env, lambda s: agent.act(s, max_action), n_episodes, rng).mean())


def _q1(pair, s, a):
    return float(forward(pair.q1, np.concatenate([s, a]))[0])


def critic_biases(agent: AgentState, probes: ProbeSet, oracle, kappa: float | None) -> dict:
    """Bias of the offline, online and kappa-combined critics on the probe set."""
    out = {}
    evals = {}
    if agent.critic_off is not None:
        evals["off_pt"] = lambda s, a: _q1(agent.critic_off, s, a)
    if agent.critic_on is not None:
        evals["on_pt"] = lambda s, a: _q1(agent.critic_on, s, a)
    if "on_pt" in evals and "off_pt" in evals and kappa is not None:
        k = kappa
        evals["combined"] = lambda s, a: (1 - k) * _q1(agent.critic_off, s, a) + k * _q1(agent.critic_on, s, a)
    elif "on_pt" in evals and kappa is not None:
        evals["combined"] = evals["on_pt"]
    elif "off_pt" in evals:
        evals["combined"] = evals["off_pt"]
    for name in ("off_pt", "on_pt", "combined"):
        if name in evals:
            b, ab = estimation_bias(evals[name], probes, oracle)
            out[f"bias_{name}"], out[f"abs_bias_{name}"] = b, ab
        else:
            out[f"bias_{name}"] = out[f"abs_bias_{name}"] = None
    return out


# -- methods -----------------------------------------------------------------

@dataclass(frozen=True)
class MethodPlan:
    fresh_start: bool = False
    pretrain: str = "meta"  # PretrainSettings.objective or "skip"
    drive: str = "blend"
    keep_online_critic: bool = True
    finetune_includes_tau: bool = False  # fine-tune for N_tau + N_finetune steps, no collection


def method_plan(method: str, skip_online_pretrain: bool = False, no_onpt_critic: bool = False) -> MethodPlan:
    if method == "vanilla_finetune":
        return MethodPlan(pretrain="skip", drive="off", keep_online_critic=False, finetune_includes_tau=True)
    if method == "from_scratch":
        return MethodPlan(fresh_start=True, pretrain="skip", drive="off", keep_online_critic=False,
                          finetune_includes_tau=True)
    if method == "random_init_onpt" or (method in ("opt", "fixed_kappa") and skip_online_pretrain):
        return MethodPlan(pretrain="skip", finetune_includes_tau=True)
    if method == "pretrain_on_only":
        return MethodPlan(pretrain="on_only")
    if method == "no_onpt_critic" or (method in ("opt", "fixed_kappa") and no_onpt_critic):
        return MethodPlan(pretrain="meta_off", drive="off", keep_online_critic=False)
    if method in ("opt", "fixed_kappa"):
        return MethodPlan()
    raise ValueError(f"unknown method {method!r}")


@dataclass
class RunInputs:
    spec: EnvSpec
    b_off: ReplayBuffer
    refs: ReferenceReturns


_DATA: dict = {}


def load_inputs(config) -> RunInputs:
    """The offline buffer for ``config`` (read from ``dataset_path`` or generated and cached)."""
    if config.dataset_path:
        f = read_dataset(config.dataset_path)
        spec = f.spec
        b_off = ReplayBuffer.from_transitions(f.transitions, spec.state_dim, spec.action_dim)
        return RunInputs(spec, b_off, f.refs)
    spec = make_env(config.env, config.reward_kind)
    key = (spec, config.tier, config.dataset_size, config.dataset_seed)
    if key not in _DATA:
        trans = gen_dataset(spec, DatasetTier(config.tier, config.dataset_size, config.dataset_seed))
        _DATA[key] = ReplayBuffer.from_transitions(trans, spec.state_dim, spec.action_dim)
    return RunInputs(spec, _DATA[key], reference_returns(spec))


def budget_of(config) -> PhaseBudget:
    return PhaseBudget(config.n_offline_steps, config.n_tau, config.n_pretrain, config.n_finetune,
                       config.utd_ratio)


def sizes_of(config, spec: EnvSpec) -> NetSizes:
    return NetSizes(spec.state_dim, spec.action_dim, (config.hidden_width,) * config.hidden_layers)


def clone_agent(agent: AgentState) -> AgentState:
    return replace(agent, counters=dict(agent.counters), optimizers=dict(agent.optimizers))


def offline_phase(config, seed: int, inputs: RunInputs | None = None) -> AgentState:
    """TD3+BC / IQL offline training; shareable across methods with the same seed."""
    inputs = inputs or load_inputs(config)
    cfg = config.backbone_config()
    agent = init_agent(config.backbone, sizes_of(config, inputs.spec), seed, cfg)
    run_offline(agent, inputs.b_off, config.n_offline_steps, cfg, make_rngs(seed, "offline"),
                OptimConfig(config.optimizer, config.lr), config.batch_size)
    return agent


class PipelineRun:
    """One method on one seed, runnable end to end or one stage at a time.

    Staged execution reproduces the end-to-end run exactly: every phase draws
    from its own random streams, and the hand-off between stages is the agent
    checkpoint plus the online buffer.
    """

    def __init__(self, config, seed: int | None = None, inputs: RunInputs | None = None,
                 sink: Callable[[dict], None] | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.inputs = inputs or load_inputs(config)
        self.sink = sink
        self.cfg = config.backbone_config()
        self.opt = OptimConfig(config.optimizer, config.lr)
        self.sizes = sizes_of(config, self.inputs.spec)
        self.budget = budget_of(config)
        self.plan = method_plan(config.method_name, config.skip_online_pretrain, config.no_onpt_critic)
        self.schedule = config.kappa_schedule()
        self.run_id = f"{config.run_name}-{config.method}-s{self.seed}"
        self.records: list[dict] = []
        self.b_on = ReplayBuffer(self.inputs.spec.state_dim, self.inputs.spec.action_dim, origin="online")
        self.kappa = kappa_at(self.schedule, 0) if self.plan.drive == "blend" else None
        self.last: dict = {}
        self.t0 = time.perf_counter()
        self.oracle = self.probes = None
        if config.track_bias and self.inputs.spec.deterministic:
            self.oracle = cached_oracle(self.inputs.spec, config.oracle_state_bins,
                                        config.oracle_action_bins, self.cfg.gamma)
            self.probes = make_probe_set(self.oracle, config.n_probes, self.seed)

    # -- records
    def emit(self, kind: str, agent: AgentState, metrics: dict):
        wall = None
        if self.config.log_wall_time:
            wall = round((time.perf_counter() - self.t0) * 1000.0, 3)
        rec = {"run": self.run_id, "seed": self.seed, "method": self.config.method, "kind": kind,
               "step": agent.counters["env_steps"], "phase": agent.phase,
               "metrics": {**metrics, "counters": dict(agent.counters),
                           "buffer_off": len(self.inputs.b_off), "buffer_on": len(self.b_on),
                           "wall_ms": wall}}
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)

    def eval_metrics(self, agent: AgentState) -> dict:
        spec = self.inputs.spec
        ret = evaluate(agent, spec, self.config.eval_episodes, self.seed, self.cfg.max_action)
        m = {"episode_return": ret, "normalized_score": normalized_score(self.inputs.refs, ret),
             "kappa": self.kappa,
             "critic_loss_off": self.last.get("critic_loss_off"),
             "critic_loss_on": self.last.get("critic_loss_on"),
             "policy_loss": self.last.get("policy_loss")}
        if self.oracle is not None:
            m.update(critic_biases(agent, self.probes, self.oracle, self.kappa))
        return m

    def _hook(self, agent: AgentState, info: dict):
        self.last.update(info)
        if agent.phase == "finetune" and self.plan.drive == "blend":
            self.kappa = kappa_at(self.schedule, agent.counters["finetune_steps"])
        if agent.counters["env_steps"] % self.config.eval_interval == 0:
            self.emit("eval", agent, self.eval_metrics(agent))

    # -- stages
    def offline(self, offline_agent: AgentState | None = None) -> AgentState:
        """Offline training (or a fresh agent for from_scratch), then the step-0 evaluation.

        ``offline_agent`` (from :func:`offline_phase` with the same config and
        seed) is cloned instead of retraining.
        """
        if self.plan.fresh_start:
            agent = init_agent(self.config.backbone, self.sizes, self.seed, self.cfg)
        elif offline_agent is not None:
            agent = clone_agent(offline_agent)
        else:
            agent = offline_phase(self.config, self.seed, self.inputs)
        self.emit("phase_end", agent, {"offline_steps": agent.counters["offline_steps"],
                                       "frozen_hash": agent.frozen_digest()})
        self.emit("eval", agent, self.eval_metrics(agent))
        return agent

    def pretrain(self, agent: AgentState) -> AgentState:
        """Online pre-training; methods without it only get their fresh online critic here."""
        if self.plan.finetune_includes_tau:
            if self.plan.keep_online_critic and agent.critic_on is None:
                fresh_online_critics(agent, self.sizes, self.seed, self.cfg)
            return agent
        c = self.config
        settings = PretrainSettings(self.plan.pretrain, c.meta_inner_lr, c.meta_mode, c.batch_size,
                                    c.exploration_sigma if c.collect_noise else 0.0)
        pre_hash = agent.frozen_digest()
        agent, self.b_on = run_online_pretraining(
            agent, self.inputs.b_off, self.inputs.spec, self.budget,
            make_rngs(self.seed, "online_pretrain"), self.cfg, self.opt, settings, self.sizes,
            self.seed, self._hook, self.b_on)
        self.emit("phase_end", agent, {"frozen_hash_before": pre_hash,
                                       "frozen_hash": agent.frozen_digest(),
                                       "pretrain_loss": agent.diagnostics.get("pretrain_loss")})
        return agent

    def finetune(self, agent: AgentState) -> AgentState:
        c = self.config
        n_ft = self.budget.n_finetune
        if self.plan.finetune_includes_tau:
            n_ft += self.budget.n_tau
        settings = FinetuneSettings(
            schedule=self.schedule, sampler_mode=c.sampler_mode, drive=self.plan.drive,
            train_off=True, train_on=self.plan.keep_online_critic, batch_size=c.batch_size,
            exploration_sigma=c.exploration_sigma, temperature=c.temperature,
            disc_train_batch=c.disc_train_batch, disc_lr=c.disc_lr, disc_every=c.disc_every,
            disc_hidden=c.disc_hidden, pool_size=c.pool_size)
        agent.phase = "finetune"
        run_finetuning(agent, self.inputs.b_off, self.b_on, self.inputs.spec,
                       replace(self.budget, n_finetune=n_ft), make_rngs(self.seed, "finetune"),
                       self.cfg, self.opt, settings, self.seed, self._hook)
        self.emit("phase_end", agent, {})
        return agent

    def online_buffer_tier(self) -> DatasetTier:
        return DatasetTier(self.config.tier, max(len(self.b_on), 1), self.config.dataset_seed)


def run_pipeline(config, seed: int | None = None, offline_agent: AgentState | None = None,
                 sink: Callable[[dict], None] | None = None,
                 inputs: RunInputs | None = None) -> tuple[list[dict], AgentState]:
    """Run one method end to end and return its RunRecords and final agent.

    ``offline_agent`` (from :func:`offline_phase` with the same config and
    seed) skips re-running the offline phase; it is cloned, not mutated.
    """
    run = PipelineRun(config, seed, inputs, sink)
    agent = run.offline(offline_agent)
    agent = run.pretrain(agent)
    agent = run.finetune(agent)
    return run.records, agent
