"""Run directories: manifest, RunRecord log and checkpoint, plus ablation suites."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..optphase.agent import AgentState, load_checkpoint, save_checkpoint
from ..optphase.pipeline import PipelineRun, RunInputs, load_inputs, offline_phase
from ..replay import ReplayBuffer
from .config import FIELDS, ConfigError, ExperimentConfig, build_config, manifest_dict

MANIFEST, LOG, CHECKPOINT, ONLINE_BUFFER = "manifest.json", "log.jsonl", "checkpoint.json", "online_buffer.csv"


def dump_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=True)


class RecordLog:
    """Append-only JSON-lines sink that also enforces a non-decreasing env step."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.write_text("")
        self._last = -1

    def __call__(self, rec: dict):
        if rec["step"] < self._last:
            raise RuntimeError(f"env step went backwards ({rec['step']} after {self._last})")
        self._last = rec["step"]
        with self.path.open("a") as f:
            f.write(dump_record(rec) + "\n")


def read_log(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / LOG
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run_dir: Path, cfg: ExperimentConfig, seed: int, stage: str, run_id: str,
                   source: str | None = None):
    m = manifest_dict(cfg)
    m.update({"seed": seed, "stage": stage, "run_id": run_id, "resumed_from": source})
    if cfg.dataset_path:
        m["dataset_sha256"] = file_sha256(cfg.dataset_path)
    (run_dir / MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def read_manifest(run_dir) -> dict:
    p = Path(run_dir) / MANIFEST
    if not p.exists():
        raise FileNotFoundError(f"{run_dir}: no {MANIFEST}")
    return json.loads(p.read_text())


def config_from_manifest(m: dict, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = {k: _text(v) for section in m["config"].values() for k, v in section.items()}
    values.update(overrides or {})
    return build_config(values)


def _text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# -- staged execution --------------------------------------------------------

STAGES = ("offline", "online_pretrain", "finetune", "pipeline")


def execute(cfg: ExperimentConfig, seed: int, run_dir, stage: str = "pipeline",
            source=None, offline_agent: AgentState | None = None,
            inputs: RunInputs | None = None) -> PipelineRun:
    """Run one stage (or the whole pipeline) into ``run_dir``.

    Later stages resume from ``source``, the directory written by the
    previous stage.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    if stage not in ("offline", "pipeline") and source is None:
        raise ValueError(f"stage {stage!r} needs the directory of the previous stage")
    # read every input before creating anything, so a bad path leaves no partial run behind
    inputs = inputs or load_inputs(cfg)
    resumed, b_on = None, None
    if stage not in ("offline", "pipeline"):
        resumed = load_checkpoint(Path(source) / CHECKPOINT)
        buf = Path(source) / ONLINE_BUFFER
        if buf.exists():
            b_on = ReplayBuffer.load(buf, origin="online")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sink = RecordLog(run_dir / LOG)
    run = PipelineRun(cfg, seed, inputs, sink)
    write_manifest(run_dir, cfg, seed, stage, run.run_id, None if source is None else str(source))
    if stage in ("offline", "pipeline"):
        agent = run.offline(offline_agent)
    else:
        agent = resumed
        if b_on is not None:
            run.b_on = b_on
    if stage in ("online_pretrain", "pipeline"):
        agent = run.pretrain(agent)
    if stage in ("finetune", "pipeline"):
        agent = run.finetune(agent)
    save_checkpoint(agent, run_dir / CHECKPOINT)
    if len(run.b_on):
        run.b_on.save(run_dir / ONLINE_BUFFER, run.inputs.spec, run.online_buffer_tier(), run.inputs.refs)
    run.agent = agent
    return run


# -- ablation suites ---------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    overrides: dict


def suite_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files(__package__).joinpath("suites").iterdir()
                  if p.name.endswith(".ini"))


def load_suite(name: str) -> list[Variant]:
    path = resources.files(__package__).joinpath("suites", f"{name}.ini")
    if not path.is_file():
        raise ConfigError([f"unknown suite {name!r} (known: {', '.join(suite_names())})"])
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(path.read_text(), source=f"{name}.ini")
    return [Variant(sec, dict(cp.items(sec))) for sec in cp.sections()]


def apply_variant(base: ExperimentConfig, variant: Variant) -> ExperimentConfig:
    """Base config plus the variant's overrides; ``*f`` scales the base value."""
    values = {k: _text(getattr(base, k)) for k in FIELDS}
    for k, raw in variant.overrides.items():
        if raw.startswith("*"):
            if k not in FIELDS:
                raise ConfigError([f"suite variant {variant.name}: unknown key {k!r}"])
            raw = str(round(getattr(base, k) * float(raw[1:])))
        values[k] = raw
    values["run_name"] = variant.name
    return build_config(values)


_OFFLINE_KEYS = ("env", "reward_kind", "tier", "dataset_size", "dataset_seed", "dataset_path",
                 "backbone", "gamma", "bc_weight", "tau", "policy_delay", "target_noise_sigma",
                 "target_noise_clip", "expectile_tau", "awr_beta", "awr_exp_clip", "twin_critics",
                 "policy_critic_mode", "hidden_width", "hidden_layers", "optimizer", "lr",
                 "n_offline_steps", "batch_size")


def offline_key(cfg: ExperimentConfig, seed: int) -> tuple:
    return (seed,) + tuple(getattr(cfg, k) for k in _OFFLINE_KEYS)


def run_suite(base: ExperimentConfig, suite: str, seeds, out_dir, log=print) -> list[Path]:
    """One run directory per (variant, seed); variants share their offline phase."""
    variants = [(v, apply_variant(base, v)) for v in load_suite(suite)]
    out_dir = Path(out_dir)
    dirs = []
    for seed in seeds:
        shared: dict = {}
        for v, cfg in variants:
            key = offline_key(cfg, seed)
            inputs = load_inputs(cfg)
            if key not in shared:
                shared[key] = offline_phase(cfg, seed, inputs)
            d = out_dir / v.name / f"s{seed}"
            execute(cfg, seed, d, "pipeline", offline_agent=shared[key], inputs=inputs)
            log(f"wrote {d}")
            dirs.append(d)
    return dirs
