"""Discrete diffusion noise schedule.

Holds the cumulative signal-retention table

    alpha_bar[t] = prod_{i<=t} (1 - beta_i),   t = 0 .. T-1,

which both the forward corruption and the deterministic sampler read from.
The special index ``TERMINAL_T = -1`` designates the fully clean state and
resolves to alpha_bar = 1 exactly; samplers use it as the last step target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TERMINAL_T = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative products."""

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unsupported schedule kind: {self.kind!r}")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)
        ab = np.cumprod(1.0 - betas)
        object.__setattr__(self, "alpha_bar", ab)
        if not (ab[0] >= 0.99):
            raise ValueError("alpha_bar[0] must stay close to 1")
        if np.any(np.diff(ab) >= 0) or np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar must be strictly decreasing within (0, 1]")

    @property
    def T(self) -> int:
        return self.timesteps

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar lookup; t = TERMINAL_T resolves to exactly 1 (clean state)."""
        if t == TERMINAL_T:
            return 1.0
        if not (0 <= t < self.timesteps):
            raise IndexError(f"timestep {t} outside [0, {self.timesteps})")
        return float(self.alpha_bar[t])

    def to_config(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return cls(
            timesteps=int(cfg["timesteps"]),
            beta_start=float(cfg["beta_start"]),
            beta_end=float(cfg["beta_end"]),
            kind=str(cfg.get("kind", "linear")),
        )


def sampling_timesteps(sched: NoiseSchedule, n_steps: int) -> list[int]:
    """Descending timestep plan for an n-step deterministic sampler.

    Evenly spaced over [0, T-1], starting at T-1; the implicit final target
    after the last entry is TERMINAL_T.
    """
    if not (1 <= n_steps <= sched.timesteps):
        raise ValueError(f"n_steps must be within [1, {sched.timesteps}]")
    if n_steps == 1:
        return [sched.timesteps - 1]
    pts = np.linspace(sched.timesteps - 1, 0, n_steps)
    ts = [int(round(p)) for p in pts]
    # rounding can collide on tiny schedules; enforce strict descent
    for i in range(1, len(ts)):
        if ts[i] >= ts[i - 1]:
            ts[i] = ts[i - 1] - 1
    if ts[-1] < 0:
        raise ValueError("n_steps too large for this schedule")
    return ts
