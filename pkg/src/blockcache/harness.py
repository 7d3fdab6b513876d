"""Experiment orchestration behind the CLI subcommands.

Every run is reproducible byte for byte from (config, seed): output file
names embed the config hash, floats are serialized round-trip exact, and
wall-clock timing is a report toggle that defaults to off so artifacts
stay hash-stable.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffusion import FullExecutor, RunTrace, latent_to_image, sample
from .engine import CachingExecutor, default_cutoff_index, mac_report
from .errors import ConfigError
from .model import Model, init_model
from .policy import (
    PolicyInstance,
    RewardConfig,
    TrainHyper,
    exact_match_quality,
    full_run_macs,
    greedy_actions,
    make_instances,
    policy_output,
    quality_proxy,
    rollout,
    train_policy,
)
from .policy_net import DecisionNet, PolicyNetConfig, decide, init_policy_net, load_policy, save_policy
from .profiler import FeatureLog, cosine_matrix, l2_surface, pca_project, record_features, ssim, write_matrix_csv
from .rng import RngStream
from .tensor_io import write_bundle, write_tensor

_Z_STREAM = 0  # initial latent and any stochastic sampler noise
_CONTEXT_STREAM = 1  # context embedding


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _context_for(cfg: RunConfig, model: Model) -> np.ndarray:
    return RngStream(cfg.seed, stream_id=_CONTEXT_STREAM).normals(model.cfg.cond_dim)


def _run_once(cfg: RunConfig, model: Model, group_size: int | None = None):
    """One sampling run per the config's schedule section."""
    plan = cfg.plan()
    sched = cfg.noise_schedule()
    context = _context_for(cfg, model)
    if cfg.data["schedule"]["kind"] == "full":
        executor = FullExecutor(model)
        schedule = None
    else:
        schedule = cfg.schedule(group_size)
        executor = CachingExecutor(model, schedule, cfg.cutoff_index())
    rng = RngStream(cfg.seed, stream_id=_Z_STREAM)
    trajectory: list | None = [] if cfg.report["trajectory"] else None
    z0, trace = sample(
        model,
        plan,
        sched,
        context,
        executor,
        rng,
        record_timings=bool(cfg.report["timings"]),
        trajectory=trajectory,
    )
    return z0, trace, schedule, trajectory


def run_generate(cfg: RunConfig) -> dict[str, Path]:
    """Sample once and write the final latent plus the run trace."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.dit_config())
    z0, trace, schedule, trajectory = _run_once(cfg, model)
    tag = f"{cfg.config_hash()}-s{cfg.seed}"
    paths = {
        "z0": out / f"z0-{tag}.bin",
        "trace": out / f"trace-{tag}.json",
    }
    write_tensor(paths["z0"], z0)
    trace.save(paths["trace"])
    if trajectory is not None:
        paths["trajectory"] = out / f"trajectory-{tag}.bin"
        write_bundle(
            paths["trajectory"],
            {f"step{i:04d}": z for i, z in enumerate(trajectory)},
            meta={"kind": "trajectory", "config_hash": cfg.config_hash(), "seed": cfg.seed},
        )
    summary = mac_report(trace, model.cfg)
    print(
        f"generate: {len(trace.steps)} steps, {summary.total_macs} MACs "
        f"({summary.saved_fraction:.1%} saved vs all-full), "
        f"schedule {schedule.compact() if schedule else 'full'}"
    )
    return paths


def _baseline_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / f"baseline-{cfg.model_hash()}-s{cfg.seed}.bin"


def _baseline_z0(cfg: RunConfig, model: Model) -> np.ndarray:
    """All-full reference latent, cached on disk keyed by (model, sampler, seed)."""
    path = _baseline_path(cfg)
    if path.exists():
        from .tensor_io import read_tensor

        return read_tensor(path)
    rng = RngStream(cfg.seed, stream_id=_Z_STREAM)
    z0, _ = sample(
        model, cfg.plan(), cfg.noise_schedule(), _context_for(cfg, model), FullExecutor(model), rng
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(path, z0)
    return z0


def run_bench(cfg: RunConfig) -> Path:
    """Sweep reuse frequencies and report compute/consistency per row."""
    group_sizes = sorted(set(int(n) for n in cfg.data["bench"]["group_sizes"]) | {1})
    if cfg.data["schedule"]["kind"] not in ("grouped", "interval"):
        raise ConfigError("bench sweeps need a 'grouped' or 'interval' schedule")
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.dit_config())
    baseline = _baseline_z0(cfg, model)
    image_side = latent_to_image(baseline).shape[0]
    window = min(8, image_side)

    def one(n: int):
        z0, trace, schedule, _ = _run_once(cfg, model, group_size=n)
        return n, z0, trace, schedule

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, group_sizes))
    else:
        results = [one(n) for n in group_sizes]
    results.sort(key=lambda r: r[0])

    rows = []
    for n, z0, trace, schedule in results:
        summary = mac_report(trace, model.cfg)
        score = ssim(latent_to_image(baseline), latent_to_image(z0), window=window)
        wall = sum(r.wall_nanos for r in trace.steps) / 1e9
        rows.append(
            {
                "group_size": n,
                "n_cache": schedule.n_cache,
                "n_reuse": schedule.n_reuse,
                "total_macs": summary.total_macs,
                "baseline_macs": summary.baseline_macs,
                "saved_fraction": summary.saved_fraction,
                "ssim_vs_baseline": score,
                "cache_bytes": summary.cache_bytes,
                "wall_seconds": wall,
                "schedule": schedule.compact(),
            }
        )

    path = out / f"bench-{cfg.config_hash()}-s{cfg.seed}.csv"
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        cells = [
            _fmt(row[k]) if isinstance(row[k], float) else str(row[k])
            for k in header[:-1]
        ] + [f'"{row["schedule"]}"']
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    for row in rows:
        print(
            f"bench: N={row['group_size']} saved={row['saved_fraction']:.3f} "
            f"ssim={row['ssim_vs_baseline']:.4f}"
        )
    return path


def run_profile(cfg: RunConfig) -> Path:
    """Record per-block features over a full run and emit similarity reports."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.dit_config())
    plan = cfg.plan()
    sched = cfg.noise_schedule()
    context = _context_for(cfg, model)
    cutoff = cfg.cutoff_index() or default_cutoff_index(model.cfg.depth)
    tag = f"{cfg.config_hash()}-s{cfg.seed}"

    log_path = out / f"features-{tag}.bin"
    log = record_features(
        model,
        plan,
        sched,
        context,
        RngStream(cfg.seed, stream_id=_Z_STREAM),
        taps=range(1, model.cfg.depth + 1),
        path=log_path,
    )

    surface = l2_surface(log)
    cosine = cosine_matrix(log, cutoff)

    x0_list: list = []
    sample(
        model, plan, sched, context, FullExecutor(model),
        RngStream(cfg.seed, stream_id=_Z_STREAM), x0_out=x0_list,
    )
    window = min(8, latent_to_image(x0_list[0]).shape[0])
    ssim_by_step = np.array(
        [
            ssim(latent_to_image(x0_list[i]), latent_to_image(x0_list[i + 1]), window=window)
            for i in range(len(x0_list) - 1)
        ]
    )

    paths = {
        "features": log_path,
        "l2_surface": out / f"surface-{tag}.csv",
        "cosine": out / f"cosine-{tag}.csv",
        "ssim_by_step": out / f"ssim-steps-{tag}.csv",
        "pca": out / f"pca-{tag}.csv",
    }
    write_matrix_csv(paths["l2_surface"], surface.values)
    write_matrix_csv(paths["cosine"], cosine.values)
    write_matrix_csv(paths["ssim_by_step"], ssim_by_step.reshape(-1, 1), header=["ssim_adjacent"])

    k = min(2, model.cfg.in_channels, model.cfg.tokens)
    pca_lines = ["step_index,token," + ",".join(f"pc{j + 1}" for j in range(k))]
    for step in log.steps():
        proj = pca_project(log.get(step, cutoff), k=min(2, model.cfg.tokens, model.cfg.width))
        for token in range(proj.shape[0]):
            cells = [str(step), str(token)] + [_fmt(v) for v in proj[token][:k]]
            pca_lines.append(",".join(cells))
    paths["pca"].write_text("\n".join(pca_lines) + "\n")

    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "cutoff_index": cutoff,
        "log_bytes": log_path.stat().st_size,
        "files": {k: str(v.name) for k, v in paths.items()},
    }
    manifest_path = out / f"profile-{tag}.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"profile: {len(log)} features logged, reports under {out}")
    return manifest_path


def _quality_fn(name: str):
    return {"rmse_proxy": quality_proxy, "exact_match": exact_match_quality}[name]


def run_train(cfg: RunConfig, resume: str | None = None) -> dict[str, Path]:
    """Train the reuse policy; writes per-epoch checkpoints, the training
    curve, and a Pareto comparison against the grouped-N sweep."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    section = cfg.data["train"]
    model = init_model(cfg.dit_config())
    plan = cfg.plan()
    sched = cfg.noise_schedule()
    steps = plan.steps
    rho_steps = section["rho_steps"]
    if rho_steps is None:
        rho_steps = int(0.4 * steps)
    rho_steps = int(rho_steps)
    cutoff = cfg.cutoff_index() or default_cutoff_index(model.cfg.depth)

    if resume is not None:
        net = load_policy(resume)
        if net.cfg.n_actions != steps - rho_steps:
            raise ConfigError(
                f"resumed policy emits {net.cfg.n_actions} actions, run needs {steps - rho_steps}"
            )
    else:
        net = init_policy_net(
            PolicyNetConfig(
                in_channels=model.cfg.in_channels,
                cond_dim=model.cfg.cond_dim,
                n_actions=steps - rho_steps,
                width=int(section["policy_width"]),
                seed=int(section["policy_seed"]),
            )
        )

    n_train = int(section["instances"])
    n_holdout = int(section["holdout"])
    instances = make_instances(
        model, plan, sched, cutoff, rho_steps, n_train + n_holdout, cfg.seed
    )
    train_set, holdout = instances[:n_train], instances[n_train:]

    reward_cfg = RewardConfig(
        lambda_quality=float(section["lambda_quality"]),
        quality_fn=_quality_fn(section["quality"]),
    )
    hyper = TrainHyper(
        epochs=int(section["epochs"]),
        batch_size=int(section["batch_size"]),
        lr=float(section["lr"]),
        baseline_decay=float(section["baseline_decay"]),
        use_baseline=bool(section["use_baseline"]),
        seed=cfg.seed,
    )

    tag = f"{cfg.config_hash()}-s{cfg.seed}"
    ckpt_path = out / f"policy-{tag}.bin"
    curve_path = out / f"curve-{tag}.csv"
    rows: list[dict] = []
    meta = {"hyper": {k: section[k] for k in sorted(section)}, "rho_steps": rho_steps}

    # One epoch at a time so the last good checkpoint survives a divergence.
    for _ in range(hyper.epochs):
        train_policy(
            model, plan, sched, train_set, net, reward_cfg,
            TrainHyper(
                epochs=1, batch_size=hyper.batch_size, lr=hyper.lr,
                baseline_decay=hyper.baseline_decay, use_baseline=hyper.use_baseline,
                seed=hyper.seed,
            ),
            cutoff,
            history=rows,
        )
        save_policy(ckpt_path, net, extra_meta=meta)

    header = ["epoch", "mean_R", "mean_C", "mean_Q", "mean_sum_u"]
    lines = [",".join(header)]
    for i, row in enumerate(rows):
        lines.append(
            ",".join([str(i)] + [_fmt(row[k]) for k in header[1:]])
        )
    curve_path.write_text("\n".join(lines) + "\n")

    pareto_path = out / f"pareto-{tag}.csv"
    _write_pareto(cfg, model, net, holdout or train_set, cutoff, rho_steps, pareto_path)
    print(
        f"train-policy: {len(rows)} epochs, final mean_R={rows[-1]['mean_R']:.4f}, "
        f"mean_sum_u={rows[-1]['mean_sum_u']:.2f}"
    )
    return {"checkpoint": ckpt_path, "curve": curve_path, "pareto": pareto_path}


def _write_pareto(
    cfg: RunConfig,
    model: Model,
    net: DecisionNet,
    instances: list[PolicyInstance],
    cutoff: int,
    rho_steps: int,
    path: Path,
) -> None:
    """Greedy policy vs the grouped-N sweep, averaged over instances."""
    plan = cfg.plan()
    sched = cfg.noise_schedule()
    n_actions = plan.steps - rho_steps
    baseline_total = plan.steps * full_run_macs(RunTrace(), model, plan.steps) // plan.steps

    def evaluate(u_for) -> tuple[float, float]:
        saved, quality = 0.0, 0.0
        for inst in instances:
            u = u_for(inst)
            z0, trace = rollout(model, plan, sched, inst, u, cutoff)
            total = full_run_macs(trace, model, rho_steps)
            saved += 1.0 - total / baseline_total
            quality += quality_proxy(z0, inst.z0_reference)
        return saved / len(instances), quality / len(instances)

    rows = []
    for n in (1, 2, 3, 4):
        schedule = cfg.schedule(group_size=n)
        suffix = np.array(
            [1 if schedule.kinds[i].value == "cache" else 0 for i in range(rho_steps, plan.steps)]
        )
        if len(suffix) != n_actions:
            continue
        s, q = evaluate(lambda inst, u=suffix: u)
        rows.append((f"grouped-N{n}", s, q))
    s, q = evaluate(lambda inst: greedy_actions(decide(net, inst.z_rho, inst.context)))
    rows.append(("policy-greedy", s, q))

    lines = ["label,saved_fraction,quality_proxy"]
    for label, s, q in rows:
        lines.append(f"{label},{_fmt(s)},{_fmt(q)}")
    path.write_text("\n".join(lines) + "\n")


def inspect_trace(path) -> str:
    """Human-readable summary of a saved run trace."""
    trace = RunTrace.load(path)
    kinds = trace.kinds()
    letters = "".join({"cache": "C", "reuse": "R", "full": "F"}.get(k, "?") for k in kinds)
    counts = {k: kinds.count(k) for k in sorted(set(kinds))}
    lines = [
        f"steps: {len(trace.steps)}",
        f"kinds: {counts}",
        f"total_macs: {trace.total_macs()}",
        f"blocks_executed: {[r.blocks_executed for r in trace.steps]}",
        f"pattern: {letters}",
    ]
    return "\n".join(lines)
