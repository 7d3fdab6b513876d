"""Cache/reuse step scheduling and execution.

A step schedule tags every denoising step as either a cache step (full
computation, storing the cutoff block's output features) or a reuse step
(resume from the cached features at the block after the cutoff,
recomputing only the deeper blocks). Grouped schedules keep a cache-only
prefix, partition a reuse window into groups of N steps (one cache step
leading N-1 reuse steps), and finish with cache-only steps after the
window.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ScheduleError
from .diffusion import RunTrace, StepResult
from .model import (
    BlockFeature,
    Conditioning,
    DitConfig,
    Model,
    OpCounter,
    forward_from_block,
    forward_full,
    mac_count,
)


class StepKind(enum.Enum):
    CACHE = "cache"
    REUSE = "reuse"


def default_cutoff_index(depth: int) -> int:
    """Scale the default cutoff (20 of 28 blocks) to an arbitrary depth."""
    return max(1, min(depth - 1, round(depth * 20 / 28)))


@dataclass(frozen=True)
class SchedulePolicy:
    """Parameters of a grouped cache/reuse schedule.

    ``rho`` is the cache-only prefix fraction, ``window_end`` the fraction
    where the reuse window closes (later steps are cache steps again), and
    ``group_size`` the reuse frequency N: each window group runs one cache
    step then N-1 reuse steps.
    """

    steps: int
    rho: float = 0.40
    window_end: float = 0.95
    group_size: int = 2
    cutoff_index: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.rho <= self.window_end <= 1.0:
            raise ConfigError(f"need 0 <= rho <= window_end <= 1, got {self.rho}, {self.window_end}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.cutoff_index is not None and self.cutoff_index < 1:
            raise ConfigError(f"cutoff_index must be >= 1, got {self.cutoff_index}")

    def resolve_cutoff(self, depth: int) -> int:
        cutoff = self.cutoff_index if self.cutoff_index is not None else default_cutoff_index(depth)
        if not 1 <= cutoff <= depth - 1:
            raise ConfigError(f"cutoff_index {cutoff} outside [1, {depth - 1}]")
        return cutoff


@dataclass(frozen=True)
class StepSchedule:
    """Per-step cache/reuse tags with the segmentation that produced them.

    Compact string form: three '|'-separated segments, prefix / window /
    tail. The window lists its groups separated by single spaces; each
    group is a run of 'C' and 'R' characters in step order. Empty segments
    are allowed (e.g. "CC||" for an all-prefix schedule).
    """

    kinds: tuple[StepKind, ...]
    prefix_len: int
    group_sizes: tuple[int, ...]
    tail_len: int

    def __post_init__(self):
        if len(self.kinds) == 0:
            raise ConfigError("schedule must cover at least one step")
        if self.kinds[0] is not StepKind.CACHE:
            raise ConfigError("first step must be a cache step")
        if self.prefix_len + sum(self.group_sizes) + self.tail_len != len(self.kinds):
            raise ConfigError("segment lengths do not cover the schedule")

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def n_cache(self) -> int:
        return sum(1 for k in self.kinds if k is StepKind.CACHE)

    @property
    def n_reuse(self) -> int:
        return len(self.kinds) - self.n_cache

    def compact(self) -> str:
        letters = ["C" if k is StepKind.CACHE else "R" for k in self.kinds]
        prefix = "".join(letters[: self.prefix_len])
        groups = []
        pos = self.prefix_len
        for size in self.group_sizes:
            groups.append("".join(letters[pos : pos + size]))
            pos += size
        tail = "".join(letters[pos:])
        return f"{prefix}|{' '.join(groups)}|{tail}"


def build_schedule(policy: SchedulePolicy) -> StepSchedule:
    """Grouped schedule: floor(rho*s) cache prefix, grouped window up to
    floor(window_end*s), cache tail afterwards."""
    s = policy.steps
    prefix_len = math.floor(policy.rho * s)
    window_end_idx = math.floor(policy.window_end * s)  # 1-based inclusive end
    kinds = [StepKind.CACHE] * s
    group_sizes = []
    pos = prefix_len  # 0-based index of the next window step
    while pos < window_end_idx:
        size = min(policy.group_size, window_end_idx - pos)
        for offset in range(1, size):
            kinds[pos + offset] = StepKind.REUSE
        group_sizes.append(size)
        pos += size
    return StepSchedule(
        kinds=tuple(kinds),
        prefix_len=prefix_len,
        group_sizes=tuple(group_sizes),
        tail_len=s - max(prefix_len, window_end_idx),
    )


def build_schedule_from_actions(u, rho_steps: int) -> StepSchedule:
    """Schedule from a binary action vector covering the post-prefix steps.

    ``u[t] == 1`` marks a cache step, 0 a reuse step. The prefix is always
    cache steps and must be non-empty so no reuse can precede a cache.
    """
    u = np.asarray(u)
    if u.ndim != 1 or not np.isin(u, (0, 1)).all():
        raise ConfigError("actions must be a flat binary vector")
    if rho_steps < 1:
        raise ConfigError(f"rho_steps must be >= 1, got {rho_steps}")
    kinds = [StepKind.CACHE] * rho_steps + [
        StepKind.CACHE if int(a) == 1 else StepKind.REUSE for a in u
    ]
    return StepSchedule(
        kinds=tuple(kinds),
        prefix_len=rho_steps,
        group_sizes=(len(u),) if len(u) else (),
        tail_len=0,
    )


def deepcache_style_schedule(steps: int, group_size: int, cutoff_index: int | None = None) -> StepSchedule:
    """Whole-process interval reuse: no cache prefix, window to the end."""
    policy = SchedulePolicy(
        steps=steps, rho=0.0, window_end=1.0, group_size=group_size, cutoff_index=cutoff_index
    )
    return build_schedule(policy)


class FeatureCacheStore:
    """Single-slot store for the latest cache step's block features."""

    def __init__(self):
        self.entry: BlockFeature | None = None

    def put(self, feature: BlockFeature) -> None:
        self.entry = feature

    def clear(self) -> None:
        self.entry = None

    @property
    def nbytes(self) -> int:
        return 0 if self.entry is None else self.entry.values.size * 8


def execute_step(
    kind: StepKind,
    model: Model,
    z_t: np.ndarray,
    cond: Conditioning,
    t: int,
    store: FeatureCacheStore,
    cutoff_index: int,
    counter: OpCounter | None = None,
) -> tuple[np.ndarray, int]:
    """Run one schedule step; returns (eps, blocks_executed).

    A cache step runs the full stack, tapping the cutoff block and
    replacing the store entry. A reuse step resumes from the stored
    features under the current conditioning and leaves the store alone.
    """
    counter = counter if counter is not None else OpCounter()
    if kind is StepKind.CACHE:
        eps, tapped = forward_full(model, z_t, cond, t, taps=(cutoff_index,), counter=counter)
        store.put(tapped[0])
    elif kind is StepKind.REUSE:
        if store.entry is None:
            raise ScheduleError("reuse step with an empty feature cache (invalid schedule)")
        if store.entry.block_index != cutoff_index:
            raise ScheduleError(
                f"cached block {store.entry.block_index} does not match cutoff {cutoff_index}"
            )
        eps = forward_from_block(model, store.entry, cond, t, counter=counter)
    else:
        raise ConfigError(f"unknown step kind {kind!r}")
    return eps, counter.blocks


class CachingExecutor:
    """Step executor that follows a StepSchedule with a single-slot cache."""

    def __init__(
        self,
        model: Model,
        schedule: StepSchedule,
        cutoff_index: int | None = None,
        store: FeatureCacheStore | None = None,
    ):
        self.model = model
        self.schedule = schedule
        self.cutoff_index = (
            cutoff_index if cutoff_index is not None else default_cutoff_index(model.cfg.depth)
        )
        if not 1 <= self.cutoff_index <= model.cfg.depth - 1:
            raise ConfigError(
                f"cutoff_index {self.cutoff_index} outside [1, {model.cfg.depth - 1}]"
            )
        self.store = store if store is not None else FeatureCacheStore()

    def __call__(self, step_index: int, t: int, z_t: np.ndarray, cond: Conditioning) -> StepResult:
        kind = self.schedule.kinds[step_index]
        counter = OpCounter()
        eps, blocks = execute_step(
            kind, self.model, z_t, cond, t, self.store, self.cutoff_index, counter=counter
        )
        return StepResult(eps=eps, kind=kind.value, blocks_executed=blocks, macs=counter.macs)


@dataclass(frozen=True)
class MacSummary:
    """Compute accounting for one run against an all-full baseline."""

    total_macs: int
    baseline_macs: int
    saved_fraction: float
    cache_bytes: int = 0


def mac_report(trace: RunTrace, cfg: DitConfig) -> MacSummary:
    total = trace.total_macs()
    baseline = len(trace.steps) * mac_count(cfg, cfg.depth)
    return MacSummary(
        total_macs=total,
        baseline_macs=baseline,
        saved_fraction=1.0 - total / baseline,
        cache_bytes=cfg.tokens * cfg.width * 8,
    )
