"""Deterministic point-reaching environments, tiered offline datasets, and an
exact tabular oracle obtained by value iteration on a discretized copy of the
environment.

PointReach1D: position x in [0, 1], goal 0.9, actions in [-1, 1],
x' = clip(x + a, 0, 1).  Dense reward -|x' - 0.9|; sparse reward 1 inside the
0.05 goal band.  Episodes last ``horizon`` steps; there are no absorbing
states, so a horizon end is a time limit and transitions are stored with
``terminal=False`` (critics bootstrap through it).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

TIERS = ("random", "medium", "medium_replay")
_TIER_CODE = {"random": 1, "medium": 2, "medium_replay": 3}


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: float = -1.0
    action_high: float = 1.0
    horizon: int = 50
    reward_kind: str = "dense"
    noise_sigma: float = 0.0  # 0 => deterministic dynamics
    goal: float = 0.9
    goal_radius: float = 0.05
    init_low: float = 0.0
    init_high: float = 0.2

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.action_low < self.action_high:
            raise ValueError("action_low must be below action_high")
        if self.reward_kind not in ("dense", "sparse"):
            raise ValueError(f"unknown reward_kind {self.reward_kind!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def deterministic(self) -> bool:
        return self.noise_sigma == 0.0

    @property
    def goal_vector(self) -> np.ndarray:
        return np.full(self.state_dim, self.goal)


def point_reach_1d(reward_kind: str = "dense", **kw) -> EnvSpec:
    return EnvSpec("PointReach1D", 1, 1, reward_kind=reward_kind, **kw)


def point_reach_2d(reward_kind: str = "dense", **kw) -> EnvSpec:
    return EnvSpec("PointReach2D", 2, 2, reward_kind=reward_kind, **kw)


ENVIRONMENTS: dict[str, Callable[..., EnvSpec]] = {
    "PointReach1D": point_reach_1d,
    "PointReach2D": point_reach_2d,
}


def make_env(name: str, reward_kind: str = "dense") -> EnvSpec:
    try:
        return ENVIRONMENTS[name](reward_kind)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}") from None


@dataclass(frozen=True, eq=False)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool = False

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (np.array_equal(self.s, other.s) and np.array_equal(self.a, other.a)
                and self.r == other.r and np.array_equal(self.s_next, other.s_next)
                and self.terminal == other.terminal)

    def row(self) -> np.ndarray:
        return np.concatenate([self.s, self.a, [self.r], self.s_next, [float(self.terminal)]])


@dataclass(frozen=True)
class DatasetTier:
    tier: str
    size: int
    seed: int = 0

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}")
        if self.size < 1:
            raise ValueError("dataset size must be >= 1")


class StepResult(NamedTuple):
    state: np.ndarray
    reward: float
    terminal: bool
    clipped: bool


def reset(spec: EnvSpec, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.uniform(spec.init_low, spec.init_high, size=spec.state_dim)


def reward(spec: EnvSpec, s_next: np.ndarray) -> float:
    dist = float(np.linalg.norm(s_next - spec.goal_vector))
    if spec.reward_kind == "dense":
        return -dist
    return 1.0 if dist <= spec.goal_radius else 0.0


def clip_action(spec: EnvSpec, action) -> tuple[np.ndarray, bool]:
    a = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    c = np.clip(a, spec.action_low, spec.action_high)
    return c, bool(np.any(c != a))


def step(spec: EnvSpec, state, action, rng: np.random.Generator | None = None,
         t: int | None = None) -> StepResult:
    """One transition.  ``terminal`` is True when step index ``t`` is the last
    of the episode; ``clipped`` records an out-of-bounds action."""
    a, clipped = clip_action(spec, action)
    x = np.asarray(state, dtype=np.float64) + a
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy dynamics need an rng")
        x = x + rng.normal(0.0, spec.noise_sigma, size=spec.state_dim)
    x = np.clip(x, 0.0, 1.0)
    done = t is not None and t + 1 >= spec.horizon
    return StepResult(x, reward(spec, x), done, clipped)


def step_batch(spec: EnvSpec, states: np.ndarray, actions: np.ndarray,
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`step` over rows of ``states``; returns (next states, rewards)."""
    a = np.clip(np.asarray(actions, dtype=np.float64), spec.action_low, spec.action_high)
    x = np.asarray(states, dtype=np.float64) + a
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy dynamics need an rng")
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    x = np.clip(x, 0.0, 1.0)
    dist = np.linalg.norm(x - spec.goal_vector, axis=1)
    r = -dist if spec.reward_kind == "dense" else (dist <= spec.goal_radius).astype(np.float64)
    return x, r


def evaluate_policy(spec: EnvSpec, act: Callable[[np.ndarray], np.ndarray], n_episodes: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Undiscounted returns of ``n_episodes`` parallel episodes of a batch policy."""
    s = rng.uniform(spec.init_low, spec.init_high, size=(n_episodes, spec.state_dim))
    total = np.zeros(n_episodes)
    for _ in range(spec.horizon):
        s, r = step_batch(spec, s, act(s), rng)
        total += r
    return total


# -- controllers -------------------------------------------------------------

Controller = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def random_controller(spec: EnvSpec) -> Controller:
    return lambda s, rng: rng.uniform(spec.action_low, spec.action_high, size=spec.action_dim)


def medium_controller(spec: EnvSpec, gain: float = 0.3, sigma: float = 0.05) -> Controller:
    def act(s, rng):
        a = gain * (spec.goal_vector - s) + rng.normal(0.0, sigma, size=spec.action_dim)
        return np.clip(a, spec.action_low, spec.action_high)
    return act


def expert_controller(spec: EnvSpec) -> Controller:
    return lambda s, rng: np.clip(spec.goal_vector - s, spec.action_low, spec.action_high)


def _episode_rng(seed: int, stream: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, episode])


def rollout(spec: EnvSpec, controller: Controller, rng: np.random.Generator,
            max_steps: int | None = None) -> list[Transition]:
    s = reset(spec, rng)
    out = []
    n = spec.horizon if max_steps is None else min(spec.horizon, max_steps)
    for t in range(n):
        a, _ = clip_action(spec, controller(s, rng))
        res = step(spec, s, a, rng, t)
        out.append(Transition(s, a, res.reward, res.state, False))
        s = res.state
    return out


def episode_returns(spec: EnvSpec, controller: Controller, n_episodes: int, seed: int,
                    stream: int = 99) -> np.ndarray:
    return np.array([sum(t.r for t in rollout(spec, controller, _episode_rng(seed, stream, i)))
                     for i in range(n_episodes)])


def _collect(spec: EnvSpec, controller: Controller, size: int, seed: int, stream: int) -> list[Transition]:
    out: list[Transition] = []
    ep = 0
    while len(out) < size:
        out.extend(rollout(spec, controller, _episode_rng(seed, stream, ep), size - len(out)))
        ep += 1
    return out


def gen_dataset(spec: EnvSpec, tier: DatasetTier) -> list[Transition]:
    """Exactly ``tier.size`` transitions, deterministic in ``tier.seed``."""
    if tier.tier == "random":
        return _collect(spec, random_controller(spec), tier.size, tier.seed, _TIER_CODE["random"])
    if tier.tier == "medium":
        return _collect(spec, medium_controller(spec), tier.size, tier.seed, _TIER_CODE["medium"])
    half = tier.size // 2
    rand = _collect(spec, random_controller(spec), half, tier.seed, _TIER_CODE["medium_replay"])
    med = _collect(spec, medium_controller(spec), tier.size - half, tier.seed, _TIER_CODE["medium_replay"] + 10)
    return rand + med


# -- normalized score --------------------------------------------------------

@dataclass(frozen=True)
class ReferenceReturns:
    random: float
    expert: float


_REF_CACHE: dict[EnvSpec, ReferenceReturns] = {}


def reference_returns(spec: EnvSpec, n_episodes: int = 100, seed: int = 12345) -> ReferenceReturns:
    """Mean undiscounted returns of the uniform-random and expert controllers."""
    key = spec
    if key not in _REF_CACHE:
        r = episode_returns(spec, random_controller(spec), n_episodes, seed, stream=7)
        e = episode_returns(spec, expert_controller(spec), n_episodes, seed, stream=8)
        _REF_CACHE[key] = ReferenceReturns(float(r.mean()), float(e.mean()))
    return _REF_CACHE[key]


def normalized_score(spec: EnvSpec | ReferenceReturns, raw_return: float) -> float:
    ref = spec if isinstance(spec, ReferenceReturns) else reference_returns(spec)
    if ref.expert == ref.random:
        raise ValueError("expert and random reference returns coincide")
    return 100.0 * (raw_return - ref.random) / (ref.expert - ref.random)


# -- dataset files -----------------------------------------------------------

HEADER_TAG = "#optrl-dataset"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(path, spec: EnvSpec, tier: DatasetTier, transitions: Sequence[Transition],
                  refs: ReferenceReturns | None = None, origins: Sequence[int] | None = None) -> None:
    """One header line, then one comma-separated transition per line.

    Columns: s..., a..., r, s_next..., terminal(0/1)[, origin(0=offline, 1=online)].
    Floats use the shortest round-tripping decimal representation.
    """
    refs = refs or reference_returns(spec)
    fields = {
        "env": spec.name, "reward": spec.reward_kind, "tier": tier.tier, "size": len(transitions),
        "seed": tier.seed, "state_dim": spec.state_dim, "action_dim": spec.action_dim,
        "ref_random": _fmt(refs.random), "ref_expert": _fmt(refs.expert),
        "origin": int(origins is not None),
    }
    lines = [HEADER_TAG + " " + " ".join(f"{k}={v}" for k, v in fields.items())]
    for i, t in enumerate(transitions):
        cols = [_fmt(v) for v in t.s] + [_fmt(v) for v in t.a] + [_fmt(t.r)]
        cols += [_fmt(v) for v in t.s_next] + [str(int(t.terminal))]
        if origins is not None:
            cols.append(str(int(origins[i])))
        lines.append(",".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class DatasetFile:
    header: dict
    transitions: list[Transition]
    origins: list[int] | None = None

    @property
    def spec(self) -> EnvSpec:
        return make_env(self.header["env"], self.header.get("reward", "dense"))

    @property
    def refs(self) -> ReferenceReturns:
        return ReferenceReturns(float(self.header["ref_random"]), float(self.header["ref_expert"]))


def read_dataset(path) -> DatasetFile:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(HEADER_TAG):
        raise ValueError(f"{path}: missing dataset header")
    header = dict(kv.split("=", 1) for kv in text[0][len(HEADER_TAG):].split())
    sd, ad = int(header["state_dim"]), int(header["action_dim"])
    has_origin = header.get("origin", "0") == "1"
    width = 2 * sd + ad + 2 + int(has_origin)
    trans, origins = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cols = line.split(",")
        if len(cols) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(cols)}")
        v = [float(c) for c in cols[:2 * sd + ad + 1]]
        trans.append(Transition(np.array(v[:sd]), np.array(v[sd:sd + ad]), v[sd + ad],
                                np.array(v[sd + ad + 1:]), cols[2 * sd + ad + 1] == "1"))
        if has_origin:
            origins.append(int(cols[-1]))
    if len(trans) != int(header["size"]):
        raise ValueError(f"{path}: header says {header['size']} transitions, found {len(trans)}")
    return DatasetFile(header, trans, origins if has_origin else None)


# -- tabular oracle ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularOracle:
    spec: EnvSpec
    state_bins: int  # per state dimension
    action_bins: int  # per action dimension
    gamma: float
    q_star: np.ndarray  # (n_states, n_actions) over flattened grids
    v_star: np.ndarray
    next_index: np.ndarray  # (n_states, n_actions) successor state index
    rewards: np.ndarray  # (n_states, n_actions)
    mode: str = "discounted"  # "discounted" or "finite"
    sweeps: int = 0

    @property
    def state_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.state_bins)

    @property
    def action_grid(self) -> np.ndarray:
        return np.linspace(self.spec.action_low, self.spec.action_high, self.action_bins)

    def state_index(self, s) -> int:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        if s.shape != (self.spec.state_dim,) or np.any(s < -1e-12) or np.any(s > 1 + 1e-12):
            raise ValueError(f"state {s} outside the oracle domain")
        idx = np.rint(s * (self.state_bins - 1)).astype(int)
        return int(np.ravel_multi_index(tuple(idx), (self.state_bins,) * self.spec.state_dim))

    def action_index(self, a) -> int:
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        lo, hi = self.spec.action_low, self.spec.action_high
        if a.shape != (self.spec.action_dim,) or np.any(a < lo - 1e-12) or np.any(a > hi + 1e-12):
            raise ValueError(f"action {a} outside the oracle domain")
        idx = np.rint((a - lo) / (hi - lo) * (self.action_bins - 1)).astype(int)
        return int(np.ravel_multi_index(tuple(idx), (self.action_bins,) * self.spec.action_dim))

    def state_of(self, index: int) -> np.ndarray:
        idx = np.unravel_index(index, (self.state_bins,) * self.spec.state_dim)
        return self.state_grid[list(idx)]

    def action_of(self, index: int) -> np.ndarray:
        idx = np.unravel_index(index, (self.action_bins,) * self.spec.action_dim)
        return self.action_grid[list(idx)]

    def q(self, s, a) -> float:
        return float(self.q_star[self.state_index(s), self.action_index(a)])

    def greedy_action(self, s) -> np.ndarray:
        return self.action_of(int(np.argmax(self.q_star[self.state_index(s)])))

    def bellman_residual(self) -> float:
        """sup-norm of Q* - (r + gamma * max_a' Q*(s', a'))."""
        if self.mode == "finite":
            raise ValueError("finite-horizon oracles store a stage value; use the stage check")
        backup = self.rewards + self.gamma * self.q_star.max(axis=1)[self.next_index]
        return float(np.max(np.abs(self.q_star - backup)))


def _discretize(spec: EnvSpec, state_bins: int, action_bins: int):
    sg = np.linspace(0.0, 1.0, state_bins)
    ag = np.linspace(spec.action_low, spec.action_high, action_bins)
    S = np.stack(np.meshgrid(*([sg] * spec.state_dim), indexing="ij"), -1).reshape(-1, spec.state_dim)
    A = np.stack(np.meshgrid(*([ag] * spec.action_dim), indexing="ij"), -1).reshape(-1, spec.action_dim)
    nxt = np.clip(S[:, None, :] + A[None, :, :], 0.0, 1.0)
    idx = np.rint(nxt * (state_bins - 1)).astype(int)
    snapped = idx / (state_bins - 1)
    flat = np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), (state_bins,) * spec.state_dim)
    dist = np.linalg.norm(snapped - spec.goal_vector, axis=-1)
    if spec.reward_kind == "dense":
        rew = -dist
    else:
        rew = (dist <= spec.goal_radius + 1e-12).astype(np.float64)
    return flat, rew


def build_oracle(spec: EnvSpec, state_bins: int = 101, action_bins: int = 21, gamma: float = 0.99,
                 mode: str = "discounted", tol: float = 1e-10, max_sweeps: int = 1_000_000) -> TabularOracle:
    """Exact optimal action values of the discretized MDP.

    ``discounted``: infinite-horizon value iteration until successive value
    functions differ by less than ``tol`` in sup-norm.  ``finite``: ``horizon``
    backward-induction stages; q_star is the value with the full horizon left.
    """
    if not spec.deterministic:
        raise ValueError("the tabular oracle needs deterministic dynamics")
    if state_bins < 2 or action_bins < 2:
        raise ValueError("need at least 2 bins per dimension")
    if not 0.0 <= gamma < 1.0 and mode == "discounted":
        raise ValueError("discounted mode needs 0 <= gamma < 1")
    nxt, rew = _discretize(spec, state_bins, action_bins)
    v = np.zeros(nxt.shape[0])
    sweeps = 0
    if mode == "finite":
        for _ in range(spec.horizon):
            q = rew + gamma * v[nxt]
            v = q.max(axis=1)
            sweeps += 1
    elif mode == "discounted":
        while True:
            q = rew + gamma * v[nxt]
            v_new = q.max(axis=1)
            sweeps += 1
            delta = np.max(np.abs(v_new - v))
            v = v_new
            if delta < tol:
                q = rew + gamma * v[nxt]
                v = q.max(axis=1)
                break
            if sweeps >= max_sweeps:
                raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")
    else:
        raise ValueError(f"unknown oracle mode {mode!r}")
    return TabularOracle(spec, state_bins, action_bins, gamma, q, v, nxt, rew, mode, sweeps)


def policy_value(oracle: TabularOracle, policy: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Discounted value of a deterministic tabular policy (state index -> action index)."""
    n = oracle.next_index.shape[0]
    rows = np.arange(n)
    r = oracle.rewards[rows, policy]
    nxt = oracle.next_index[rows, policy]
    v = np.zeros(n)
    while True:
        v_new = r + oracle.gamma * v[nxt]
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new
