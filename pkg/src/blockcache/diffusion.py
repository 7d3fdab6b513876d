"""Noise schedules, DDIM updates, and the executor-driven sampling loop.

The sampler never calls the denoiser directly: each step delegates the
noise prediction to a step executor, so full computation and cached
partial computation are interchangeable without touching the loop.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DimensionError, SingularityError
from .model import BlockFeature, Conditioning, Model, OpCounter, forward_full, make_conditioning
from .rng import RngStream, gaussian


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise variances and their cumulative signal products."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps_train(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[int(t)])


def make_linear_schedule(
    steps_train: int, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> NoiseSchedule:
    if steps_train < 1:
        raise ConfigError(f"steps_train must be >= 1, got {steps_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if steps_train == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, steps_train)
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def make_cosine_schedule(steps_train: int, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine signal decay, expressed through per-step betas."""
    if steps_train < 1:
        raise ConfigError(f"steps_train must be >= 1, got {steps_train}")

    def f(u: float) -> float:
        return math.cos((u + 0.008) / 1.008 * math.pi / 2.0) ** 2

    betas = np.array(
        [
            min(1.0 - f((i + 1) / steps_train) / f(i / steps_train), max_beta)
            for i in range(steps_train)
        ]
    )
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


SCHEDULE_FAMILIES = {"linear": make_linear_schedule, "cosine": make_cosine_schedule}


@dataclass(frozen=True)
class SamplerPlan:
    """Inference timesteps (strictly decreasing) and the noise scale eta."""

    timesteps: tuple[int, ...]
    eta: float = 0.0

    def __post_init__(self):
        ts = self.timesteps
        if len(ts) < 1:
            raise ConfigError("plan needs at least one timestep")
        if any(ts[i] <= ts[i + 1] for i in range(len(ts) - 1)):
            raise ConfigError(f"timesteps must be strictly decreasing, got {ts}")
        if ts[-1] < 0:
            raise ConfigError(f"timesteps must be non-negative, got {ts}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")

    @property
    def steps(self) -> int:
        return len(self.timesteps)


def make_plan(steps_train: int, steps: int, eta: float = 0.0) -> SamplerPlan:
    """Uniform-stride descending subsequence of the train timesteps."""
    if not 1 <= steps <= steps_train:
        raise ConfigError(f"steps must lie in [1, {steps_train}], got {steps}")
    ts = tuple(round(j * steps_train / steps) - 1 for j in range(steps, 0, -1))
    return SamplerPlan(timesteps=ts, eta=eta)


def forward_diffuse(
    z0: np.ndarray, t: int, sched: NoiseSchedule, rng: RngStream, return_noise: bool = False
):
    """Noise a clean latent to timestep ``t`` in closed form."""
    z0 = np.asarray(z0, dtype=np.float64)
    ab = sched.alpha_bar(t)
    eps = gaussian(rng, z0.shape)
    z_t = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
    return (z_t, eps) if return_noise else z_t


def predict_x0(z_t: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """One-shot clean-data estimate from the current latent and noise guess."""
    ab = sched.alpha_bar(t)
    if ab == 0.0:
        raise SingularityError(f"alpha_bar is zero at t={t}")
    return (np.asarray(z_t) - math.sqrt(1.0 - ab) * np.asarray(eps)) / math.sqrt(ab)


def ddim_sigma(sched: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    return eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)


def ddim_step(
    z_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: Optional[RngStream] = None,
) -> np.ndarray:
    """One reverse update from timestep ``t`` to ``t_prev``.

    With ``eta == 0`` the update is fully deterministic and draws nothing
    from ``rng``.
    """
    if not t > t_prev >= 0:
        raise ConfigError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_p = sched.alpha_bar(t_prev)
    sigma = ddim_sigma(sched, t, t_prev, eta)
    direction_sq = 1.0 - ab_p - sigma * sigma
    if direction_sq < 0.0:
        raise ConfigError(f"sigma too large at t={t}: 1 - alpha_bar_prev - sigma^2 < 0")
    x0 = predict_x0(z_t, eps, t, sched)
    z_prev = math.sqrt(ab_p) * x0 + math.sqrt(direction_sq) * np.asarray(eps)
    if eta > 0.0 and sigma > 0.0:
        if rng is None:
            raise ConfigError("eta > 0 requires an rng for the stochastic term")
        z_prev = z_prev + sigma * gaussian(rng, z_prev.shape)
    return z_prev


@dataclass
class StepResult:
    """What an executor produced for one denoising step."""

    eps: np.ndarray
    kind: str  # "full" | "cache" | "reuse"
    blocks_executed: int
    macs: int
    taps: list[BlockFeature] = field(default_factory=list)


#: executor(step_index, train_timestep, z_t, cond) -> StepResult
StepExecutor = Callable[[int, int, np.ndarray, Conditioning], StepResult]


class FullExecutor:
    """Baseline executor: every step runs the whole block stack."""

    def __init__(self, model: Model, taps=()):
        self.model = model
        self.taps = tuple(taps)

    def __call__(self, step_index: int, t: int, z_t: np.ndarray, cond: Conditioning) -> StepResult:
        counter = OpCounter()
        eps, tapped = forward_full(self.model, z_t, cond, t, taps=self.taps, counter=counter)
        return StepResult(
            eps=eps, kind="full", blocks_executed=counter.blocks, macs=counter.macs, taps=tapped
        )


@dataclass
class StepRecord:
    step_index: int
    train_timestep: int
    kind: str
    blocks_executed: int
    macs: int
    wall_nanos: int = 0

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "train_timestep": self.train_timestep,
            "kind": self.kind,
            "blocks_executed": self.blocks_executed,
            "macs": self.macs,
            "wall_nanos": self.wall_nanos,
        }


@dataclass
class RunTrace:
    """Per-step execution record of one sampling run."""

    steps: list[StepRecord] = field(default_factory=list)

    def total_macs(self) -> int:
        return sum(r.macs for r in self.steps)

    def kinds(self) -> list[str]:
        return [r.kind for r in self.steps]

    def to_dict(self) -> dict:
        return {"steps": [r.to_dict() for r in self.steps], "total_macs": self.total_macs()}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunTrace":
        return cls(steps=[StepRecord(**r) for r in payload["steps"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample(
    model: Model,
    plan: SamplerPlan,
    sched: NoiseSchedule,
    context: np.ndarray,
    executor: StepExecutor,
    rng: Optional[RngStream] = None,
    z_init: Optional[np.ndarray] = None,
    start_index: int = 0,
    record_timings: bool = False,
    trajectory: Optional[list] = None,
    x0_out: Optional[list] = None,
    feature_sink: Optional[Callable[[int, int, list[BlockFeature]], None]] = None,
) -> tuple[np.ndarray, RunTrace]:
    """Iterate the plan's timesteps high to low, delegating eps to ``executor``.

    The final step extracts the clean-data prediction instead of stepping
    to another timestep. ``z_init``/``start_index`` resume a trajectory
    mid-plan (the latent entering ``plan.timesteps[start_index]``).
    Optional lists collect the post-step latents and per-step clean-data
    predictions; ``feature_sink`` receives any tapped features.
    """
    if z_init is None:
        if start_index != 0:
            raise ConfigError("start_index > 0 requires z_init")
        if rng is None:
            raise ConfigError("sampling from scratch requires an rng for the initial latent")
        z = gaussian(rng, (model.cfg.tokens, model.cfg.in_channels))
    else:
        z = np.asarray(z_init, dtype=np.float64).copy()
    if not 0 <= start_index < plan.steps:
        raise ConfigError(f"start_index {start_index} outside [0, {plan.steps})")

    trace = RunTrace()
    for idx in range(start_index, plan.steps):
        t = plan.timesteps[idx]
        cond = make_conditioning(model.cfg, t, context)
        began = time.perf_counter_ns() if record_timings else 0
        try:
            result = executor(idx, t, z, cond)
        except Exception as exc:
            exc.args = (f"step {idx} (t={t}): {exc}",)
            raise
        elapsed = (time.perf_counter_ns() - began) if record_timings else 0
        if result.eps.shape != z.shape:
            raise DimensionError(f"executor returned eps shape {result.eps.shape}, expected {z.shape}")
        if x0_out is not None:
            x0_out.append(predict_x0(z, result.eps, t, sched))
        if feature_sink is not None and result.taps:
            feature_sink(idx, t, result.taps)
        if idx < plan.steps - 1:
            z = ddim_step(z, result.eps, t, plan.timesteps[idx + 1], sched, plan.eta, rng)
        else:
            z = predict_x0(z, result.eps, t, sched)
        if trajectory is not None:
            trajectory.append(z.copy())
        trace.steps.append(
            StepRecord(
                step_index=idx,
                train_timestep=t,
                kind=result.kind,
                blocks_executed=result.blocks_executed,
                macs=result.macs,
                wall_nanos=elapsed,
            )
        )
    return z, trace


def latent_to_image(z: np.ndarray) -> np.ndarray:
    """Reshape a token grid (tokens x channels) to a square image (H x W x C)."""
    z = np.asarray(z)
    if z.ndim != 2:
        raise DimensionError(f"latent must be 2-D, got shape {z.shape}")
    side = math.isqrt(z.shape[0])
    if side * side != z.shape[0]:
        raise DimensionError(f"token count {z.shape[0]} is not a perfect square")
    return z.reshape(side, side, z.shape[1])
