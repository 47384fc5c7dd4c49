"""Score aggregation (IQM, bootstrap intervals) and value-estimation bias against
the tabular oracle."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .toyworld import TabularOracle, reset

STATISTICS = ("mean", "iqm")
CRITICS = ("off_pt", "on_pt", "combined")
SUMMARY_COLUMNS = ("step", "n_runs", "mean", "iqm", "ci_lo", "ci_hi")


def _as_scores(scores, min_len: int = 1) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} score(s), got {x.size}")
    return x


def iqm(scores: Sequence[float]) -> float:
    """Interquartile mean: sort, drop floor(n/4) values from each end, average the rest."""
    x = np.sort(_as_scores(scores))
    k = x.size // 4
    middle = x[k:x.size - k]
    if middle.size == 0:
        return float(np.median(x))
    if middle[0] == middle[-1]:
        return float(middle[0])  # exact on constant data, where a float mean can drift
    return float(middle.mean())


def _iqm_rows(x: np.ndarray) -> np.ndarray:
    x = np.sort(x, axis=1)
    k = x.shape[1] // 4
    return x[:, k:x.shape[1] - k].mean(axis=1)


def _statistic(name: str) -> Callable[[np.ndarray], float]:
    if name == "mean":
        return lambda x: float(np.mean(x))
    if name == "iqm":
        return iqm
    raise ValueError(f"statistic must be one of {STATISTICS}")


def bootstrap_ci(scores: Sequence[float], statistic: str = "mean", n_resamples: int = 2000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval, widened if needed so it brackets the point estimate."""
    x = _as_scores(scores, 2)
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    point = _statistic(statistic)(x)
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    rng = np.random.default_rng(seed)
    samples = x[rng.integers(0, x.size, size=(n_resamples, x.size))]
    stats = samples.mean(axis=1) if statistic == "mean" else _iqm_rows(samples)
    lo, hi = np.quantile(stats, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    return float(min(lo, point)), float(max(hi, point))


# -- estimation bias ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProbeSet:
    states: np.ndarray  # (n, state_dim)
    actions: np.ndarray  # (n, action_dim)
    source: str = ""

    def __post_init__(self):
        if len(self.states) == 0 or len(self.states) != len(self.actions):
            raise ValueError("a probe set needs a non-empty, equal number of states and actions")

    def __len__(self):
        return len(self.states)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.states, self.actions))


def make_probe_set(oracle: TabularOracle, n: int = 10, seed: int = 0) -> ProbeSet:
    """Initial-distribution states snapped onto the oracle grid, paired with oracle-greedy actions."""
    rng = np.random.default_rng([seed, 4242])
    states, actions = [], []
    for _ in range(n):
        s = oracle.state_of(oracle.state_index(reset(oracle.spec, rng)))
        states.append(s)
        actions.append(oracle.greedy_action(s))
    return ProbeSet(np.array(states), np.array(actions),
                    f"{n} initial states of {oracle.spec.name} with oracle-greedy actions (seed {seed})")


def estimation_bias(critic_eval: Callable[[np.ndarray, np.ndarray], float], probes: ProbeSet,
                    oracle: TabularOracle) -> tuple[float, float]:
    """(mean bias, mean |bias|) of critic_eval(s, a) - Q*(bin(s), bin(a)) over the probes."""
    errs = np.array([float(critic_eval(s, a)) - oracle.q(s, a) for s, a in probes.pairs])
    return float(errs.mean()), float(np.abs(errs).mean())


@dataclass
class BiasReport:
    per_step: dict[str, list[tuple[int, float, float]]] = field(
        default_factory=lambda: {c: [] for c in CRITICS})

    def add(self, critic: str, env_step: int, mean_bias: float, mean_abs_bias: float):
        rows = self.per_step.setdefault(critic, [])
        if rows and env_step <= rows[-1][0]:
            raise ValueError(f"env_step must increase ({env_step} after {rows[-1][0]})")
        rows.append((int(env_step), float(mean_bias), float(mean_abs_bias)))

    def lines(self) -> list[dict]:
        return [{"critic": c, "step": s, "mean_bias": b, "mean_abs_bias": a}
                for c, rows in self.per_step.items() for s, b, a in rows]

    @classmethod
    def from_records(cls, records) -> "BiasReport":
        rep = cls()
        for rec in records:
            m = rec.get("metrics", {})
            for c in CRITICS:
                if m.get(f"bias_{c}") is not None:
                    rep.add(c, rec["step"], m[f"bias_{c}"], m[f"abs_bias_{c}"])
        return rep


# -- aggregation -------------------------------------------------------------

def eval_series(records, key: str = "normalized_score") -> tuple[list[int], list[float]]:
    steps, values = [], []
    for rec in records:
        if rec.get("kind") == "eval":
            steps.append(int(rec["step"]))
            values.append(float(rec["metrics"][key]))
    return steps, values


@dataclass(frozen=True)
class SummaryRow:
    step: int | str
    n_runs: int
    mean: float
    iqm: float
    ci_lo: float
    ci_hi: float


def summarize(values, step, seed: int = 0, n_resamples: int = 2000, level: float = 0.95) -> SummaryRow:
    x = _as_scores(values)
    if x.size == 1:
        lo = hi = float(x[0])
    else:
        lo, hi = bootstrap_ci(x, "mean", n_resamples, level, seed)
    return SummaryRow(step, int(x.size), float(x.mean()), iqm(x), lo, hi)


def aggregate_runs(run_logs: Sequence[Sequence[dict]], key: str = "normalized_score",
                   names: Sequence[str] | None = None, seed: int = 0) -> list[SummaryRow]:
    """Per eval step mean / IQM / bootstrap CI across runs, then a ``final`` row.

    The result does not depend on the order of ``run_logs``: values are sorted
    before resampling.
    """
    if not run_logs:
        raise ValueError("no runs to aggregate")
    names = list(names) if names is not None else [f"run{i}" for i in range(len(run_logs))]
    series = [eval_series(log, key) for log in run_logs]
    grid = series[0][0]
    bad = [n for n, (steps, _) in zip(names, series) if steps != grid]
    if bad or not grid:
        raise ValueError("runs do not share an evaluation grid: " + ", ".join(bad or names))
    table = np.array([vals for _, vals in series])
    rows = [summarize(np.sort(table[:, j]), step, seed) for j, step in enumerate(grid)]
    rows.append(summarize(np.sort(table[:, -1]), "final", seed))
    return rows


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([r.step, r.n_runs, repr(r.mean), repr(r.iqm), repr(r.ci_lo), repr(r.ci_hi)])
    return buf.getvalue()
