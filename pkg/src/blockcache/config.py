"""Run configuration: schema, validation, merging, and hashing.

Configs are JSON with a ``schema_version`` field. Unknown keys anywhere in
the tree are errors so typos in experiment sweeps fail loudly. Missing
keys fall back to defaults. Override precedence is flags > environment
variables > file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .engine import SchedulePolicy, StepSchedule, build_schedule, build_schedule_from_actions, deepcache_style_schedule
from .errors import ConfigError
from .diffusion import NoiseSchedule, SamplerPlan, SCHEDULE_FAMILIES, make_plan
from .model import DitConfig, PROFILES

SCHEMA_VERSION = 1

ENV_PREFIX = "BLOCKCACHE_"
ENV_CONFIG = ENV_PREFIX + "CONFIG"
ENV_SEED = ENV_PREFIX + "SEED"
ENV_OUT = ENV_PREFIX + "OUT"
ENV_THREADS = ENV_PREFIX + "THREADS"

DEFAULT_CONFIG: dict = {
    "schema_version": SCHEMA_VERSION,
    "profile": "toy",
    "model_seed": 0,
    "sampler": {
        "steps": 30,
        "steps_train": 1000,
        "eta": 0.0,
        "beta_schedule": "linear",
        "beta_start": 1e-4,
        "beta_end": 2e-2,
    },
    "schedule": {
        "kind": "grouped",
        "rho": 0.40,
        "window_end": 0.95,
        "group_size": 2,
        "cutoff_index": None,
        "rho_steps": None,
        "actions": None,
    },
    "seed": 0,
    "out_dir": "runs",
    "threads": 1,
    "report": {"timings": False, "trajectory": False},
    "bench": {"group_sizes": [1, 2, 3, 4]},
    "train": {
        "instances": 8,
        "holdout": 4,
        "epochs": 100,
        "batch_size": 16,
        "lr": 1e-5,
        "lambda_quality": 2.0,
        "rho_steps": None,
        "policy_width": 32,
        "policy_seed": 0,
        "baseline_decay": 0.9,
        "use_baseline": True,
        "quality": "rmse_proxy",
    },
}

_PROFILE_KEYS = {"depth", "width", "tokens", "heads", "cond_dim", "in_channels", "seed"}
_QUALITY_NAMES = ("rmse_proxy", "exact_match")


def _check_keys(section: dict, allowed: dict, path: str) -> None:
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(allowed[key], dict) and isinstance(value, dict) and key != "profile":
            _check_keys(value, allowed[key], f"{path}{key}.")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "profile":
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"config {path} must declare schema_version {SCHEMA_VERSION}, "
            f"got {payload.get('schema_version')!r}"
        )
    return payload


def resolve_config(
    file_payload: dict | None = None,
    env: dict | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    threads: int | None = None,
) -> "RunConfig":
    """Merge defaults, file, environment, and flag overrides (in that order)."""
    merged = copy.deepcopy(DEFAULT_CONFIG)
    if file_payload:
        _check_keys(file_payload, DEFAULT_CONFIG, "")
        merged = _deep_merge(merged, file_payload)

    env = os.environ if env is None else env
    if env.get(ENV_SEED):
        merged["seed"] = int(env[ENV_SEED])
    if env.get(ENV_OUT):
        merged["out_dir"] = env[ENV_OUT]
    if env.get(ENV_THREADS):
        merged["threads"] = int(env[ENV_THREADS])

    if seed is not None:
        merged["seed"] = int(seed)
    if out_dir is not None:
        merged["out_dir"] = str(out_dir)
    if threads is not None:
        merged["threads"] = int(threads)
    return RunConfig(merged)


@dataclass
class RunConfig:
    """Validated configuration with typed accessors for each subsystem."""

    data: dict

    def __post_init__(self):
        _check_keys(self.data, DEFAULT_CONFIG, "")
        self.dit_config()  # validate eagerly
        self.noise_schedule()
        self.plan()
        if self.data["schedule"]["kind"] != "full":
            self.schedule()
        if self.data["threads"] < 1:
            raise ConfigError(f"threads must be >= 1, got {self.data['threads']}")
        if not 0 <= self.data["seed"] < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.data['seed']}")
        if self.data["train"]["quality"] not in _QUALITY_NAMES:
            raise ConfigError(
                f"train.quality must be one of {_QUALITY_NAMES}, got {self.data['train']['quality']!r}"
            )

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    @property
    def threads(self) -> int:
        return int(self.data["threads"])

    @property
    def report(self) -> dict:
        return self.data["report"]

    def dit_config(self) -> DitConfig:
        profile = self.data["profile"]
        if isinstance(profile, str):
            if profile not in PROFILES:
                raise ConfigError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
            base = PROFILES[profile].to_dict()
        elif isinstance(profile, dict):
            unknown = set(profile) - _PROFILE_KEYS
            if unknown:
                raise ConfigError(f"unknown profile keys {sorted(unknown)}")
            base = PROFILES["toy"].to_dict()
            base.update(profile)
        else:
            raise ConfigError("profile must be a name or an object")
        base["seed"] = int(self.data["model_seed"])
        return DitConfig(**base)

    def noise_schedule(self) -> NoiseSchedule:
        s = self.data["sampler"]
        family = s["beta_schedule"]
        if family not in SCHEDULE_FAMILIES:
            raise ConfigError(f"unknown beta schedule {family!r}; known: {sorted(SCHEDULE_FAMILIES)}")
        if family == "linear":
            return SCHEDULE_FAMILIES[family](s["steps_train"], s["beta_start"], s["beta_end"])
        return SCHEDULE_FAMILIES[family](s["steps_train"])

    def plan(self) -> SamplerPlan:
        s = self.data["sampler"]
        return make_plan(s["steps_train"], s["steps"], s["eta"])

    def cutoff_index(self) -> int | None:
        return self.data["schedule"]["cutoff_index"]

    def schedule(self, group_size: int | None = None) -> StepSchedule:
        """Step schedule from the schedule section; ``group_size`` overrides
        the configured one (used by bench sweeps)."""
        section = self.data["schedule"]
        steps = int(self.data["sampler"]["steps"])
        kind = section["kind"]
        n = int(group_size if group_size is not None else section["group_size"])
        if kind == "grouped":
            policy = SchedulePolicy(
                steps=steps,
                rho=section["rho"],
                window_end=section["window_end"],
                group_size=n,
                cutoff_index=section["cutoff_index"],
            )
            return build_schedule(policy)
        if kind == "interval":
            return deepcache_style_schedule(steps, n, section["cutoff_index"])
        if kind == "actions":
            if section["actions"] is None or section["rho_steps"] is None:
                raise ConfigError("schedule.kind 'actions' requires 'actions' and 'rho_steps'")
            schedule = build_schedule_from_actions(section["actions"], int(section["rho_steps"]))
            if len(schedule) != steps:
                raise ConfigError(
                    f"actions cover {len(schedule)} steps but the sampler runs {steps}"
                )
            return schedule
        if kind == "full":
            raise ConfigError("a 'full' schedule has no cache/reuse structure to build")
        raise ConfigError(f"unknown schedule kind {kind!r}")

    def config_hash(self) -> str:
        """Hash of the semantic payload (everything but out_dir and threads)."""
        payload = copy.deepcopy(self.data)
        payload.pop("out_dir", None)
        payload.pop("threads", None)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def model_hash(self) -> str:
        """Hash of (model profile, sampler plan) for baseline-run caching."""
        payload = {
            "model": self.dit_config().to_dict(),
            "sampler": self.data["sampler"],
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
