"""Per-instance reuse policies trained with score-function gradients.

Actions are one Bernoulli draw per undecided step: 1 keeps the step a
cache step, 0 makes it a reuse step. The reward trades computation saved
(normalized count of reuse steps) against a pluggable quality score of
the final latent relative to the all-full reference trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import FullExecutor, NoiseSchedule, RunTrace, SamplerPlan, ddim_step, sample
from .engine import (
    CachingExecutor,
    FeatureCacheStore,
    StepKind,
    build_schedule_from_actions,
    execute_step,
)
from .errors import ConfigError, TrainingError
from .model import BlockFeature, Model, mac_count, make_conditioning
from .policy_net import DecisionNet, policy_backward, policy_forward
from .rng import RngStream, gaussian

# Stream id namespaces so instance generation and rollout sampling never collide.
_INSTANCE_STREAM_BASE = 0
_ROLLOUT_STREAM_BASE = 1 << 32


@dataclass
class PolicyOutput:
    """Cache probabilities, the actions taken, and their log-likelihood."""

    m: np.ndarray
    u: np.ndarray
    logprob: float


def sample_actions(m: np.ndarray, rng: RngStream) -> np.ndarray:
    """Independent Bernoulli draw per step: u_t = 1 with probability m_t."""
    m = np.asarray(m, dtype=np.float64)
    return (rng.uniforms(len(m)) <= m).astype(np.int64)


def greedy_actions(m: np.ndarray) -> np.ndarray:
    """Threshold at 0.5; ties resolve to 1 (cache, the conservative choice)."""
    return (np.asarray(m) >= 0.5).astype(np.int64)


def action_logprob(m: np.ndarray, u: np.ndarray) -> float:
    """Log-likelihood of actions under elementwise Bernoulli(m)."""
    m = np.asarray(m, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return float(np.sum(u * np.log(m) + (1.0 - u) * np.log(1.0 - m)))


def action_logprob_from_logits(logits: np.ndarray, u: np.ndarray) -> float:
    """Same likelihood computed from logits (stable for extreme probabilities)."""
    logits = np.asarray(logits, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return float(-np.sum(u * np.logaddexp(0.0, -logits) + (1.0 - u) * np.logaddexp(0.0, logits)))


def policy_output(
    net: DecisionNet, z_rho: np.ndarray, context: np.ndarray, rng: RngStream | None = None
) -> PolicyOutput:
    """Decide, act (sampled when ``rng`` is given, greedy otherwise), score."""
    logits, _ = policy_forward(net, z_rho, context)
    m = 1.0 / (1.0 + np.exp(-logits))
    u = greedy_actions(m) if rng is None else sample_actions(m, rng)
    return PolicyOutput(m=m, u=u, logprob=action_logprob_from_logits(logits, u))


@dataclass(frozen=True)
class RewardConfig:
    """Reward R = C + lambda * Q with a pluggable quality scorer."""

    lambda_quality: float = 2.0
    quality_fn: Callable[[np.ndarray, np.ndarray], float] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.lambda_quality < 0:
            raise ConfigError(f"lambda_quality must be >= 0, got {self.lambda_quality}")
        if self.quality_fn is None:
            object.__setattr__(self, "quality_fn", quality_proxy)


def compute_reward(u: np.ndarray, quality_score: float, cfg: RewardConfig) -> tuple[float, float, float]:
    """Returns (R, C, Q): C is the normalized count of reuse steps."""
    u = np.asarray(u)
    c = 1.0 - float(u.sum()) / len(u)
    q = float(quality_score)
    return c + cfg.lambda_quality * q, c, q


def quality_proxy(z0_policy: np.ndarray, z0_reference: np.ndarray) -> float:
    """1 - RMSE relative to the reference's RMS, clamped to [0, 1]."""
    a = np.asarray(z0_policy, dtype=np.float64)
    b = np.asarray(z0_reference, dtype=np.float64)
    rmse = math.sqrt(float(((a - b) ** 2).mean()))
    scale = math.sqrt(float((b * b).mean()))
    if scale == 0.0:
        scale = 1.0
    return 1.0 - min(1.0, rmse / scale)


def exact_match_quality(z0_policy: np.ndarray, z0_reference: np.ndarray) -> float:
    """1.0 only for a bit-identical result, else 0.0."""
    return 1.0 if np.array_equal(z0_policy, z0_reference) else 0.0


@dataclass
class ReinforceSample:
    z_rho: np.ndarray
    context: np.ndarray
    u: np.ndarray
    reward: float


def reinforce_grad(
    samples: list[ReinforceSample], net: DecisionNet, baseline: float = 0.0
) -> dict[str, np.ndarray]:
    """Mini-batch score-function gradient of the expected reward (ascent
    direction): mean over samples of (R - baseline) * grad log-likelihood.

    The log-likelihood gradient at the logits is (u - m); it is pushed
    through the network by the hand-written reverse pass. Accumulation
    order is fixed by sample order, keeping training bit-reproducible.
    """
    if not samples:
        raise ConfigError("reinforce_grad needs a non-empty batch")
    total: dict[str, np.ndarray] = {}
    for s in samples:
        if not math.isfinite(s.reward):
            raise TrainingError(f"non-finite reward {s.reward}")
        logits, tape = policy_forward(net, s.z_rho, s.context)
        m = 1.0 / (1.0 + np.exp(-logits))
        dlogits = (s.reward - baseline) * (np.asarray(s.u, dtype=np.float64) - m)
        grads = policy_backward(net, tape, dlogits)
        for name, g in grads.items():
            if name in total:
                total[name] += g
            else:
                total[name] = g.copy()
    inv = 1.0 / len(samples)
    return {name: g * inv for name, g in total.items()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_ascend(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update in the ascent direction of ``grads``."""
    state.t += 1
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**state.t)
        v_hat = state.v[name] / (1.0 - beta2**state.t)
        params[name] = params[name] + lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class PolicyInstance:
    """One training example: context, prefix state, and the full-compute reference."""

    instance_id: int
    context: np.ndarray
    z_rho: np.ndarray
    cache_entry: BlockFeature
    z0_reference: np.ndarray


def make_instances(
    model: Model,
    plan: SamplerPlan,
    sched: NoiseSchedule,
    cutoff_index: int,
    rho_steps: int,
    count: int,
    seed: int,
) -> list[PolicyInstance]:
    """Seeded instances: run the cache-only prefix once per instance and keep
    the resulting latent, cache entry, and all-full reference output."""
    if not 1 <= rho_steps < plan.steps:
        raise ConfigError(f"rho_steps must lie in [1, {plan.steps - 1}], got {rho_steps}")
    instances = []
    for i in range(count):
        rng = RngStream(seed, stream_id=_INSTANCE_STREAM_BASE + i)
        context = rng.normals(model.cfg.cond_dim)
        z = gaussian(rng, (model.cfg.tokens, model.cfg.in_channels))
        store = FeatureCacheStore()
        for idx in range(rho_steps):
            t = plan.timesteps[idx]
            cond = make_conditioning(model.cfg, t, context)
            eps, _ = execute_step(StepKind.CACHE, model, z, cond, t, store, cutoff_index)
            z = ddim_step(z, eps, t, plan.timesteps[idx + 1], sched, plan.eta)
        z0_ref, _ = sample(
            model, plan, sched, context, FullExecutor(model), z_init=z, start_index=rho_steps
        )
        instances.append(
            PolicyInstance(
                instance_id=i,
                context=context,
                z_rho=z,
                cache_entry=store.entry,
                z0_reference=z0_ref,
            )
        )
    return instances


def rollout(
    model: Model,
    plan: SamplerPlan,
    sched: NoiseSchedule,
    instance: PolicyInstance,
    u: np.ndarray,
    cutoff_index: int,
) -> tuple[np.ndarray, RunTrace]:
    """Resume the instance's trajectory after the prefix, following ``u``."""
    rho_steps = plan.steps - len(u)
    schedule = build_schedule_from_actions(u, rho_steps)
    store = FeatureCacheStore()
    store.put(instance.cache_entry)
    executor = CachingExecutor(model, schedule, cutoff_index, store)
    return sample(
        model, plan, sched, instance.context, executor, z_init=instance.z_rho, start_index=rho_steps
    )


def full_run_macs(trace: RunTrace, model: Model, rho_steps: int) -> int:
    """Total MACs of a resumed rollout including its cache-only prefix."""
    return rho_steps * mac_count(model.cfg, model.cfg.depth) + trace.total_macs()


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    baseline_decay: float = 0.9
    use_baseline: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError(f"invalid training hyperparameters: {self}")


def train_policy(
    model: Model,
    plan: SamplerPlan,
    sched: NoiseSchedule,
    instances: list[PolicyInstance],
    net: DecisionNet,
    reward_cfg: RewardConfig,
    hyper: TrainHyper,
    cutoff_index: int,
    history: list | None = None,
) -> list[dict]:
    """REINFORCE training loop: decide, sample actions, roll out the resumed
    trajectory, score quality, update with Adam. Returns per-epoch rows of
    (epoch, mean_R, mean_C, mean_Q, mean_sum_u); ``net`` is updated in place.

    A moving-average reward baseline (optional, on by default) reduces
    gradient variance without changing the expected gradient.
    """
    if not instances:
        raise ConfigError("training needs at least one instance")
    rho_steps = plan.steps - net.n_actions
    if not 1 <= rho_steps < plan.steps:
        raise ConfigError(
            f"net emits {net.n_actions} actions but the plan has {plan.steps} steps"
        )
    state = AdamState()
    baseline = 0.0
    baseline_ready = False
    rollout_index = 0
    rows = history if history is not None else []
    for epoch in range(hyper.epochs):
        sums = {"R": 0.0, "C": 0.0, "Q": 0.0, "u": 0.0}
        seen = 0
        for lo in range(0, len(instances), hyper.batch_size):
            batch = instances[lo : lo + hyper.batch_size]
            samples = []
            for inst in batch:
                rng = RngStream(hyper.seed, stream_id=_ROLLOUT_STREAM_BASE + rollout_index)
                rollout_index += 1
                out = policy_output(net, inst.z_rho, inst.context, rng=rng)
                z0, _ = rollout(model, plan, sched, inst, out.u, cutoff_index)
                q = reward_cfg.quality_fn(z0, inst.z0_reference)
                r, c, q = compute_reward(out.u, q, reward_cfg)
                samples.append(ReinforceSample(inst.z_rho, inst.context, out.u, r))
                sums["R"] += r
                sums["C"] += c
                sums["Q"] += q
                sums["u"] += float(out.u.sum())
                seen += 1
            use = baseline if (hyper.use_baseline and baseline_ready) else 0.0
            grads = reinforce_grad(samples, net, baseline=use)
            adam_ascend(
                net.params, grads, state, hyper.lr, hyper.beta1, hyper.beta2, hyper.adam_eps
            )
            for value in net.params.values():
                if not np.isfinite(value).all():
                    raise TrainingError(
                        f"non-finite policy weights after epoch {epoch}, batch at {lo}"
                    )
            batch_mean_r = sum(s.reward for s in samples) / len(samples)
            if hyper.use_baseline:
                if baseline_ready:
                    baseline = hyper.baseline_decay * baseline + (1.0 - hyper.baseline_decay) * batch_mean_r
                else:
                    baseline = batch_mean_r
                    baseline_ready = True
        rows.append(
            {
                "epoch": epoch,
                "mean_R": sums["R"] / seen,
                "mean_C": sums["C"] / seen,
                "mean_Q": sums["Q"] / seen,
                "mean_sum_u": sums["u"] / seen,
            }
        )
    return rows
