"""Plot-ready series from finished run directories, optionally rendered with matplotlib.

Every CSV has a fixed header (see ``COLUMNS``) so downstream scripts can rely
on it.  Runs are grouped by the ``method`` label of their records, or by the
run name when several variants share a method (ablation suites).
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..metrics import bootstrap_ci, iqm, summarize
from .runs import read_log, read_manifest

KINDS = ("learning_curve", "bias_curve", "iqm_bar")
COLUMNS = {
    "learning_curve": ("method", "x", "mean", "lo", "hi"),
    "bias_curve": ("method", "x", "mean", "lo", "hi"),
    "iqm_bar": ("method", "iqm", "lo", "hi", "n_runs"),
}


class MissingSeriesError(ValueError):
    pass


def _label(run_dir: Path, records: list[dict]) -> str:
    try:
        name = read_manifest(run_dir)["config"]["harness"]["run_name"]
    except (FileNotFoundError, KeyError):
        name = "run"
    method = records[0]["method"] if records else "?"
    return method if name == "run" else name


def group_runs(run_dirs) -> dict[str, list[tuple[str, list[dict]]]]:
    groups: dict[str, list[tuple[str, list[dict]]]] = defaultdict(list)
    for d in map(Path, run_dirs):
        recs = read_log(d)
        groups[_label(d, recs)].append((str(d), recs))
    return dict(groups)


def _series(records: list[dict], key: str) -> dict[int, float]:
    out = {}
    for r in records:
        if r["kind"] == "eval":
            v = r["metrics"].get(key)
            if v is not None:
                out[int(r["step"])] = float(v)
    return out


def _curve_rows(groups, key: str, seed: int) -> list[tuple]:
    missing = []
    rows = []
    for method in sorted(groups):
        per_run = [(name, _series(recs, key)) for name, recs in groups[method]]
        missing += [name for name, s in per_run if not s]
        if any(not s for _, s in per_run):
            continue
        steps = sorted(set.intersection(*(set(s) for _, s in per_run)))
        for step in steps:
            r = summarize(np.sort([s[step] for _, s in per_run]), step, seed)
            rows.append((method, step, r.mean, r.ci_lo, r.ci_hi))
    if missing:
        raise MissingSeriesError(f"no {key!r} series in: " + ", ".join(missing))
    return rows


def _final_score(records: list[dict]) -> float | None:
    s = _series(records, "normalized_score")
    return s[max(s)] if s else None


def _bar_rows(groups, seed: int) -> list[tuple]:
    missing, rows = [], []
    for method in sorted(groups):
        finals = [(name, _final_score(recs)) for name, recs in groups[method]]
        missing += [name for name, v in finals if v is None]
        x = np.sort([v for _, v in finals if v is not None])
        if x.size == 0:
            continue
        lo, hi = (x[0], x[0]) if x.size == 1 else bootstrap_ci(x, "iqm", seed=seed)
        rows.append((method, iqm(x), float(lo), float(hi), int(x.size)))
    if missing:
        raise MissingSeriesError("no normalized_score series in: " + ", ".join(missing))
    return rows


def series_rows(run_dirs, kind: str, critic: str = "combined", seed: int = 0) -> list[tuple]:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    groups = group_runs(run_dirs)
    if not groups:
        raise MissingSeriesError("no runs given")
    if kind == "learning_curve":
        return _curve_rows(groups, "normalized_score", seed)
    if kind == "bias_curve":
        return _curve_rows(groups, f"abs_bias_{critic}", seed)
    return _bar_rows(groups, seed)


def write_csv(rows, kind: str, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS[kind])
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def render(rows, kind: str, path, title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if kind == "iqm_bar":
        names = [r[0] for r in rows]
        vals = np.array([r[1] for r in rows])
        err = np.array([[v - r[2] for v, r in zip(vals, rows)], [r[3] - v for v, r in zip(vals, rows)]])
        ax.barh(names, vals, xerr=err, color="tab:blue", alpha=0.8, capsize=3)
        ax.set_xlabel("IQM of final normalized score")
    else:
        by_method = defaultdict(list)
        for m, x, mean, lo, hi in rows:
            by_method[m].append((x, mean, lo, hi))
        for m, pts in by_method.items():
            x, mean, lo, hi = map(np.array, zip(*pts))
            ax.plot(x, mean, label=m)
            ax.fill_between(x, lo, hi, alpha=0.2)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("normalized score" if kind == "learning_curve" else "mean |estimation bias|")
        ax.legend(fontsize=8)
    ax.set_title(title or kind.replace("_", " "))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_data(run_dirs, kind: str, out_dir, render_figure: bool = True, critic: str = "combined",
              seed: int = 0) -> list[Path]:
    """Write ``<kind>.csv`` (and ``<kind>.png`` unless disabled) into ``out_dir``."""
    rows = series_rows(run_dirs, kind, critic, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(rows, kind, out_dir / f"{kind}.csv")]
    if render_figure:
        paths.append(render(rows, kind, out_dir / f"{kind}.png"))
    return paths
