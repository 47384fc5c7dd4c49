"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 invalid configuration, 4 missing or
protected files, 5 failure during a run.  Every failure also prints one
machine-readable line ``optrl-error {json}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..metrics import SUMMARY_COLUMNS, BiasReport, aggregate_runs
from ..optphase.agent import load_checkpoint
from ..optphase.kappa import kappa_at
from ..optphase.pipeline import PipelineRun, load_inputs
from ..toyworld import DatasetTier, gen_dataset, write_dataset
from . import plots
from .config import ConfigError, load_config
from .runs import (
    CHECKPOINT, dump_record, execute, read_log, read_manifest, config_from_manifest, run_suite,
    suite_names,
)

EXIT_USAGE, EXIT_CONFIG, EXIT_FILES, EXIT_RUN = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, details=()):
        super().__init__(message)
        self.code, self.kind, self.details = code, kind, list(details)


def _fail(kind: str, message: str, details=()) -> str:
    return "optrl-error " + json.dumps({"kind": kind, "message": message, "details": list(details)})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(_fail("usage", message), file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise CliError(EXIT_USAGE, "usage", f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, source_dir=None):
    over = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        over["seed"] = str(args.seed)
    if args.config is None and source_dir is not None:
        return config_from_manifest(read_manifest(source_dir), over)
    return load_config(args.config, over)


def _out_dir(args, cfg, seed):
    return Path(args.out) if args.out else Path("runs") / f"{cfg.run_name}-{cfg.method}-s{seed}"


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise CliError(EXIT_FILES, "files", f"{what} {path} is not a directory")
    return p


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out)
    if out.exists():
        raise CliError(EXIT_FILES, "files", f"{out} exists; dataset files are never overwritten")
    inputs = load_inputs(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    trans = gen_dataset(inputs.spec, DatasetTier(cfg.tier, cfg.dataset_size, cfg.dataset_seed))
    write_dataset(out, inputs.spec, DatasetTier(cfg.tier, cfg.dataset_size, cfg.dataset_seed), trans,
                  inputs.refs)
    print(f"wrote {len(trans)} transitions to {out}")


def _stage(stage):
    def run(args):
        source = _require_dir(args.from_dir, "--from") if getattr(args, "from_dir", None) else None
        cfg = _config(args, source)
        seed = cfg.seed
        if source is not None and args.seed is None:
            seed = read_manifest(source).get("seed", seed)
        out = _out_dir(args, cfg, seed)
        execute(cfg, seed, out, stage, source)
        print(f"wrote {out}")
    return run


def cmd_run_pipeline(args):
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    for seed in seeds:
        out = _out_dir(args, cfg, seed)
        if len(seeds) > 1:
            out = out / f"s{seed}"
        execute(cfg, seed, out, "pipeline")
        print(f"wrote {out}")


def cmd_ablate(args):
    if args.suite not in suite_names():
        raise CliError(EXIT_USAGE, "usage", f"unknown suite {args.suite!r}", suite_names())
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.seed_list
    run_suite(cfg, args.suite, seeds, Path(args.out or Path("runs") / f"ablate-{args.suite}"))


def cmd_evaluate(args):
    run_dir = _require_dir(args.run, "--run")
    m = read_manifest(run_dir)
    cfg = config_from_manifest(m, _overrides(args.set))
    agent = load_checkpoint(run_dir / CHECKPOINT)
    run = PipelineRun(cfg, m["seed"])
    if run.plan.drive == "blend" and agent.critic_on is not None:
        run.kappa = kappa_at(run.schedule, agent.counters["finetune_steps"])
    else:
        run.kappa = None
    run.emit("eval", agent, run.eval_metrics(agent))
    text = dump_record(run.records[0]) + "\n"
    _emit_text(text, args.out)


def cmd_bias_report(args):
    rows = []
    for d in args.runs:
        rep = BiasReport.from_records(read_log(_require_dir(d, "run")))
        rows += [(d, ln) for ln in rep.lines()]
    if not rows:
        raise CliError(EXIT_RUN, "missing", "no bias measurements in the given runs", args.runs)
    lines = ["run,critic,step,mean_bias,mean_abs_bias"]
    lines += [f"{d},{ln['critic']},{ln['step']},{ln['mean_bias']!r},{ln['mean_abs_bias']!r}"
              for d, ln in rows]
    _emit_text("\n".join(lines) + "\n", args.out)


def cmd_aggregate(args):
    groups = plots.group_runs([_require_dir(d, "run") for d in args.runs])
    lines = [",".join(("method",) + SUMMARY_COLUMNS)]
    for method in sorted(groups):
        names = [n for n, _ in groups[method]]
        try:
            rows = aggregate_runs([r for _, r in groups[method]], args.key, names)
        except ValueError as e:
            raise CliError(EXIT_RUN, "aggregate", str(e)) from None
        lines += [f"{method},{r.step},{r.n_runs},{r.mean!r},{r.iqm!r},{r.ci_lo!r},{r.ci_hi!r}"
                  for r in rows]
    _emit_text("\n".join(lines) + "\n", args.out)


def cmd_plot_data(args):
    try:
        paths = plots.plot_data([_require_dir(d, "run") for d in args.runs], args.kind, args.out,
                                not args.no_render, args.critic)
    except plots.MissingSeriesError as e:
        raise CliError(EXIT_RUN, "missing", str(e)) from None
    for p in paths:
        print(f"wrote {p}")


def _emit_text(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="optrl", description="Offline-to-online RL with an online pre-training phase.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI config file (default: built-in defaults)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("gen-data", help="write an offline dataset file"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train-offline", help="offline phase only"))
    sp.add_argument("--out")
    sp.set_defaults(func=_stage("offline"))

    for name, stage, helptext in (("pretrain-online", "online_pretrain", "online pre-training phase"),
                                  ("finetune", "finetune", "fine-tuning phase")):
        sp = common(sub.add_parser(name, help=f"{helptext}, resuming from a previous stage"))
        sp.add_argument("--from", dest="from_dir", required=True, help="run directory of the previous stage")
        sp.add_argument("--out")
        sp.set_defaults(func=_stage(stage))

    sp = common(sub.add_parser("run-pipeline", help="all phases of one method"))
    sp.add_argument("--seeds", help="comma-separated seeds; one sub-directory each")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_run_pipeline)

    sp = common(sub.add_parser("ablate", help="run an ablation suite"), seed=False)
    sp.add_argument("suite", help="one of: " + ", ".join(suite_names()))
    sp.add_argument("--seeds")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("evaluate", help="evaluate a run's checkpoint")
    sp.add_argument("--run", required=True)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bias-report", help="estimation bias per critic and step")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bias_report)

    sp = sub.add_parser("aggregate", help="mean, IQM and bootstrap CI across runs")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--key", default="normalized_score")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("plot-data", help="plot-ready CSV series and figures")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--kind", required=True, choices=plots.KINDS)
    sp.add_argument("--critic", default="combined", choices=("off_pt", "on_pt", "combined"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--no-render", action="store_true", help="write the CSV only")
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as e:
        print(_fail(e.kind, str(e), e.details), file=sys.stderr)
        return e.code
    except ConfigError as e:
        for v in e.violations:
            print(f"config: {v}", file=sys.stderr)
        print(_fail("config", "invalid configuration", e.violations), file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(_fail("files", str(e)), file=sys.stderr)
        return EXIT_FILES
    except (ValueError, RuntimeError, ArithmeticError) as e:
        print(_fail("run", f"{type(e).__name__}: {e}"), file=sys.stderr)
        return EXIT_RUN
    return 0


if __name__ == "__main__":
    sys.exit(main())
