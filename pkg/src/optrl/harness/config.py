"""Experiment configuration: INI files with one section per library module.

Key names are unique across sections, so ``OPT_<KEY>`` environment variables
and ``--set key=value`` overrides address a key without naming its section.
"""

from __future__ import annotations

import configparser
import difflib
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..backbones import BackboneConfig
from ..optphase.kappa import KAPPA_PRESETS, KappaSchedule, preset_for_tier
from ..replay import SAMPLER_MODES
from ..toyworld import ENVIRONMENTS, TIERS

METHODS = ("opt", "vanilla_finetune", "from_scratch", "random_init_onpt", "pretrain_on_only",
           "no_onpt_critic", "fixed_kappa")
_FIXED_KAPPA = re.compile(r"^fixed_kappa\(([^)]*)\)$")


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in violations))
        self.violations = violations


def _f(section: str, default, help: str = ""):
    return field(default=default, metadata={"section": section, "help": help})


@dataclass(frozen=True)
class ExperimentConfig:
    # toyworld
    env: str = _f("toyworld", "PointReach1D")
    reward_kind: str = _f("toyworld", "dense")
    tier: str = _f("toyworld", "medium")
    dataset_size: int = _f("toyworld", 10_000)
    dataset_seed: int = _f("toyworld", 0)
    dataset_path: str = _f("toyworld", "", "existing dataset file; empty = generate")
    # backbones
    backbone: str = _f("backbones", "td3")
    gamma: float = _f("backbones", 0.99)
    bc_weight: float = _f("backbones", 2.5)
    tau: float = _f("backbones", 0.005)
    policy_delay: int = _f("backbones", 2)
    target_noise_sigma: float = _f("backbones", 0.2)
    target_noise_clip: float = _f("backbones", 0.5)
    expectile_tau: float = _f("backbones", 0.7)
    awr_beta: float = _f("backbones", 3.0)
    awr_exp_clip: float = _f("backbones", 10.0)
    twin_critics: bool = _f("backbones", True)
    policy_critic_mode: str = _f("backbones", "q1")
    # diffcore
    hidden_width: int = _f("diffcore", 64)
    hidden_layers: int = _f("diffcore", 2)
    optimizer: str = _f("diffcore", "adam")
    lr: float = _f("diffcore", 3e-4)
    meta_inner_lr: float = _f("diffcore", 1e-3)
    meta_mode: str = _f("diffcore", "exact")
    # optphase
    method: str = _f("optphase", "opt")
    skip_online_pretrain: bool = _f("optphase", False)
    no_onpt_critic: bool = _f("optphase", False)
    n_offline_steps: int = _f("optphase", 20_000)
    n_tau: int = _f("optphase", 1_000)
    n_pretrain: int = _f("optphase", 2_000)
    n_finetune: int = _f("optphase", 20_000)
    utd_ratio: int = _f("optphase", 5)
    batch_size: int = _f("optphase", 64)
    kappa_preset: str = _f("optphase", "auto", "auto = by dataset tier, or a named kappa preset row, or 'custom'")
    kappa_init: float = _f("optphase", 0.1)
    kappa_t_decay: int = _f("optphase", 0, "0 = constant schedule; counted on a 275k-step fine-tuning run when kappa_rescale is on")
    kappa_end: float = _f("optphase", 0.9)
    kappa_rescale: bool = _f("optphase", True, "shrink t_decay by n_finetune / 275000")
    exploration_sigma: float = _f("optphase", 0.1)
    collect_noise: bool = _f("optphase", False)
    # replay
    sampler_mode: str = _f("replay", "balanced")
    temperature: float = _f("replay", 5.0)
    disc_train_batch: int = _f("replay", 64)
    disc_lr: float = _f("replay", 1e-3)
    disc_every: int = _f("replay", 10)
    disc_hidden: int = _f("replay", 32)
    pool_size: int = _f("replay", 256)
    # metrics
    eval_interval: int = _f("metrics", 500)
    eval_episodes: int = _f("metrics", 10)
    track_bias: bool = _f("metrics", True)
    n_probes: int = _f("metrics", 10)
    oracle_state_bins: int = _f("metrics", 101)
    oracle_action_bins: int = _f("metrics", 21)
    # harness
    preset: str = _f("harness", "desk")
    seed: int = _f("harness", 0)
    seeds: str = _f("harness", "0", "comma-separated seeds for multi-seed commands")
    run_name: str = _f("harness", "run")
    log_wall_time: bool = _f("harness", False)

    # -- derived ------------------------------------------------------------
    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in str(self.seeds).split(",") if s.strip()]

    @property
    def method_name(self) -> str:
        return "fixed_kappa" if _FIXED_KAPPA.match(self.method) else self.method

    @property
    def fixed_kappa(self) -> float | None:
        m = _FIXED_KAPPA.match(self.method)
        return float(m.group(1)) if m else None

    def backbone_config(self, max_action: float = 1.0) -> BackboneConfig:
        return BackboneConfig(self.gamma, self.bc_weight, self.tau, self.policy_delay,
                              self.target_noise_sigma, self.target_noise_clip, self.expectile_tau,
                              self.awr_beta, self.awr_exp_clip, max_action, self.twin_critics,
                              self.policy_critic_mode)

    def kappa_schedule(self, n_finetune: int | None = None) -> KappaSchedule:
        n = self.n_finetune if n_finetune is None else n_finetune
        if self.fixed_kappa is not None:
            return KappaSchedule.constant(self.fixed_kappa)
        if self.kappa_preset == "custom":
            t = self.kappa_t_decay or None
            sched = KappaSchedule(self.kappa_init, t, self.kappa_end if t else self.kappa_init)
        elif self.kappa_preset == "auto":
            sched = preset_for_tier(self.tier)
        else:
            sched = KAPPA_PRESETS[self.kappa_preset]
        return sched.rescaled(n) if self.kappa_rescale else sched

    def violations(self) -> list[str]:
        v = []
        if self.env not in ENVIRONMENTS:
            v.append(f"env: unknown environment {self.env!r} (known: {', '.join(sorted(ENVIRONMENTS))})")
        if self.reward_kind not in ("dense", "sparse"):
            v.append("reward_kind: must be 'dense' or 'sparse'")
        if self.tier not in TIERS:
            v.append(f"tier: must be one of {', '.join(TIERS)}")
        if self.dataset_size < 1:
            v.append("dataset_size: must be >= 1")
        if self.backbone not in ("td3", "iql"):
            v.append("backbone: must be 'td3' or 'iql'")
        try:
            self.backbone_config()
        except ValueError as e:
            v.extend(f"backbones: {m}" for m in str(e).split("; "))
        if self.hidden_width < 1 or self.hidden_layers < 1:
            v.append("hidden_width/hidden_layers: must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            v.append("optimizer: must be 'adam' or 'sgd'")
        if self.lr <= 0:
            v.append("lr: must be > 0")
        if self.meta_inner_lr < 0:
            v.append("meta_inner_lr: must be >= 0")
        if self.meta_mode not in ("exact", "first_order"):
            v.append("meta_mode: must be 'exact' or 'first_order'")
        if self.method_name not in METHODS:
            close = difflib.get_close_matches(self.method, METHODS, n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            v.append(f"method: unknown method {self.method!r}{hint}")
        fk = None
        try:
            fk = self.fixed_kappa
        except ValueError:
            v.append(f"method: cannot parse kappa in {self.method!r}")
        if fk is not None and not 0.0 < fk <= 1.0:
            v.append(f"method: fixed kappa {fk} violates 0 < kappa <= 1")
        for name in ("n_offline_steps", "n_tau", "n_pretrain", "n_finetune", "utd_ratio", "batch_size"):
            if getattr(self, name) < 0 or (name in ("utd_ratio", "batch_size") and getattr(self, name) < 1):
                v.append(f"{name}: must be >= {1 if name in ('utd_ratio', 'batch_size') else 0}")
        for name in ("kappa_init", "kappa_end"):
            k = getattr(self, name)
            if not 0.0 < k <= 1.0:
                v.append(f"{name}: {k} violates 0 < kappa <= 1")
        if self.kappa_t_decay < 0:
            v.append("kappa_t_decay: must be >= 0")
        if self.kappa_preset not in ("auto", "custom") and self.kappa_preset not in KAPPA_PRESETS:
            v.append(f"kappa_preset: unknown preset {self.kappa_preset!r}")
        if self.exploration_sigma < 0:
            v.append("exploration_sigma: must be >= 0")
        if self.sampler_mode not in SAMPLER_MODES:
            v.append(f"sampler_mode: must be one of {', '.join(SAMPLER_MODES)}")
        if self.sampler_mode == "symmetric" and self.batch_size % 2:
            v.append("batch_size: symmetric sampling needs an even batch size")
        if self.temperature <= 0:
            v.append("temperature: must be > 0")
        for name in ("disc_train_batch", "disc_every", "disc_hidden", "pool_size", "eval_interval",
                     "eval_episodes", "n_probes"):
            if getattr(self, name) < 1:
                v.append(f"{name}: must be >= 1")
        if self.oracle_state_bins < 2 or self.oracle_action_bins < 2:
            v.append("oracle bins: need at least 2 per dimension")
        if self.preset not in PRESETS:
            v.append(f"preset: unknown preset {self.preset!r}")
        try:
            if not self.seed_list:
                v.append("seeds: need at least one seed")
        except ValueError:
            v.append(f"seeds: cannot parse {self.seeds!r}")
        return v

    def validated(self) -> "ExperimentConfig":
        errs = self.violations()
        if errs:
            raise ConfigError(errs)
        return self

    def to_sections(self) -> dict[str, dict[str, object]]:
        out: dict[str, dict[str, object]] = {}
        for f in fields(self):
            out.setdefault(f.metadata["section"], {})[f.name] = getattr(self, f.name)
        return out

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_sections().items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_render(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


FIELDS = {f.name: f for f in fields(ExperimentConfig)}
SECTIONS = sorted({f.metadata["section"] for f in fields(ExperimentConfig)})

PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    # phase budgets at the scale of the original D4RL experiments
    "full": {"n_offline_steps": 1_000_000, "n_tau": 25_000, "n_pretrain": 50_000,
              "n_finetune": 275_000, "hidden_width": 256, "batch_size": 256, "disc_hidden": 256,
              "eval_interval": 5_000,
              "dataset_size": 1_000_000, "kappa_rescale": False},
    # tiny budgets for smoke tests
    "smoke": {"n_offline_steps": 200, "n_tau": 100, "n_pretrain": 50, "n_finetune": 300,
              "utd_ratio": 2, "batch_size": 32, "hidden_width": 16, "eval_interval": 100,
              "dataset_size": 500, "eval_episodes": 3},
}


def _coerce(name: str, raw: str):
    f = FIELDS[name]
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    if typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ == "int":
        try:
            return int(raw.replace("_", ""))
        except ValueError:
            raise ValueError(f"{name}: expected an integer, got {raw!r}") from None
    if typ == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{name}: expected a number, got {raw!r}") from None
    return raw


def _unknown(name: str) -> str:
    close = difflib.get_close_matches(name, list(FIELDS), n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return f"unknown key {name!r}{hint}"


def build_config(values: dict[str, str], violations: list[str] | None = None) -> ExperimentConfig:
    """Apply a preset (if named) then raw string overrides, collecting every problem."""
    errs = [] if violations is None else violations
    preset = values.get("preset", "desk").strip()
    base = dict(PRESETS.get(preset, {}))
    kw: dict[str, object] = {}
    for k, raw in values.items():
        if k not in FIELDS:
            errs.append(_unknown(k))
            continue
        try:
            kw[k] = _coerce(k, raw)
        except ValueError as e:
            errs.append(str(e))
    cfg = ExperimentConfig(**{**base, **kw})
    errs.extend(cfg.violations())
    if errs:
        raise ConfigError(errs)
    return cfg


def parse_ini(text: str, source: str = "<config>") -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError([f"{source}: line {e.lineno}: key outside of any [section]"]) from None
    except configparser.ParsingError as e:
        lines = ", ".join(str(ln) for ln, _ in e.errors)
        raise ConfigError([f"{source}: parse error at line(s) {lines}"]) from None
    except configparser.DuplicateOptionError as e:
        raise ConfigError([f"{source}: line {e.lineno}: duplicate key {e.option!r}"]) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError([f"{source}: line {e.lineno}: duplicate section {e.section!r}"]) from None
    errs, out = [], {}
    for section in cp.sections():
        if section not in SECTIONS:
            errs.append(f"unknown section [{section}] (known: {', '.join(SECTIONS)})")
            continue
        for k, v in cp.items(section):
            if k in FIELDS and FIELDS[k].metadata["section"] != section:
                errs.append(f"key {k!r} belongs in [{FIELDS[k].metadata['section']}], not [{section}]")
                continue
            out[k] = v
    if errs:
        raise ConfigError(errs)
    return out


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {k[4:].lower(): v for k, v in environ.items() if k.startswith("OPT_")}


def load_config(path=None, overrides: dict[str, str] | None = None, environ=None) -> ExperimentConfig:
    """File < OPT_* environment < explicit overrides; every violation is reported at once."""
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"{path}: no such config file"])
        values.update(parse_ini(p.read_text(), str(path)))
    values.update(env_overrides(environ))
    values.update({k: str(v) for k, v in (overrides or {}).items()})
    return build_config(values)


def manifest_dict(cfg: ExperimentConfig) -> dict:
    from .. import __version__
    return {"code_version": __version__, "config": cfg.to_sections(),
            "kappa_schedule": asdict(cfg.kappa_schedule())}


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw).validated()
