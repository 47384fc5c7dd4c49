"""Linear schedules for the critic blend weight kappa."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class KappaSchedule:
    kappa_init: float
    t_decay: int | None
    kappa_end: float

    def __post_init__(self):
        for name in ("kappa_init", "kappa_end"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} violates 0 < kappa <= 1")
        if self.t_decay is None and self.kappa_init != self.kappa_end:
            raise ValueError("a constant schedule (t_decay=None) needs kappa_init == kappa_end")
        if self.t_decay is not None and self.t_decay < 1:
            raise ValueError("t_decay must be >= 1 or None")

    @classmethod
    def constant(cls, kappa: float) -> "KappaSchedule":
        return cls(kappa, None, kappa)

    def rescaled(self, n_finetune: int, reference_finetune: int = 275_000) -> "KappaSchedule":
        """Shrink t_decay by n_finetune / reference_finetune (rounded, at least 1)."""
        if self.t_decay is None:
            return self
        return KappaSchedule(self.kappa_init, max(1, round(self.t_decay * n_finetune / reference_finetune)),
                             self.kappa_end)

    def label(self) -> str:
        if self.t_decay is None:
            return f"fixed {self.kappa_init:g}"
        return f"{self.kappa_init:g}->{self.kappa_end:g}@{self.t_decay}"


def kappa_at(schedule: KappaSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if schedule.t_decay is None:
        return schedule.kappa_init
    f = min(t / schedule.t_decay, 1.0)
    return schedule.kappa_init * (1.0 - f) + schedule.kappa_end * f


def _row(k0, t, k1):
    return KappaSchedule(k0, t, k1)


# kappa_init, T_decay, kappa_end per D4RL task
KAPPA_PRESETS: dict[str, KappaSchedule] = {
    "halfcheetah-r": _row(1.0, None, 1.0),
    "hopper-r": _row(1.0, None, 1.0),
    "walker2d-r": _row(1.0, None, 1.0),
    "halfcheetah-m": _row(0.3, 150_000, 0.9),
    "hopper-m": _row(0.3, 150_000, 0.9),
    "walker2d-m": _row(0.3, 150_000, 0.9),
    "halfcheetah-m-r": _row(0.1, 150_000, 0.9),
    "hopper-m-r": _row(0.1, 150_000, 0.9),
    "walker2d-m-r": _row(0.1, 150_000, 0.9),
    "umaze": _row(0.1, 100_000, 0.9),
    "umaze-diverse": _row(0.1, 100_000, 0.9),
    "medium-play": _row(0.1, 100_000, 0.9),
    "medium-diverse": _row(0.1, 100_000, 0.9),
    "large-play": _row(0.1, 100_000, 0.9),
    "large-diverse": _row(0.1, 200_000, 0.9),
    "pen-cloned": _row(0.1, 250_000, 0.9),
    "hammer-cloned": _row(0.1, 250_000, 0.9),
    "door-cloned": _row(0.1, 250_000, 0.9),
    "relocate-cloned": _row(0.1, 250_000, 0.9),
}

# toy dataset tiers borrow the MuJoCo rows of the same quality
TIER_PRESETS = {"random": "walker2d-r", "medium": "walker2d-m", "medium_replay": "walker2d-m-r"}


def preset_for_tier(tier: str, n_finetune: int | None = None) -> KappaSchedule:
    sched = KAPPA_PRESETS[TIER_PRESETS[tier]]
    return sched if n_finetune is None else sched.rescaled(n_finetune)
