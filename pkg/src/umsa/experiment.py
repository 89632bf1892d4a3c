"""Experiment orchestration: configs, synthetic data, estimate/MSE drivers.

All randomness is keyed off one master seed through named spawn keys, and
result CSVs contain only deterministic columns, so a rerun with the same
config (any thread count) reproduces them byte for byte. Wall-clock timings
go to the run manifest, which is not a result file.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import yaml

from .models import ObservationRecord, align_observation_times, kangaroo_model, ou_model
from .lattice import propagate_block
from .oracle import kalman_mle
from .sa import StepSchedule
from .streams import CountingStream
from .unbiased import (
    DEFAULT_FLAG_THRESHOLD,
    RandomizationLaw,
    run_replicates,
    umsa_estimate,
    write_records_csv,
)

_DEFAULTS = {
    "model": "ou",
    "model_params": {},
    "theta_true": [0.5],
    "theta0": [1.0],
    "observations": {
        "source": "synthetic",
        "horizon": 25,
        "seed": 7,
        "level": 12,
        "path": None,
        "times_spec": None,
    },
    "law": {"l_min": 3, "l_max": 12, "p_min": 1, "p_max": 12, "base_iters": 10},
    "schedule": {"gamma0": 0.1, "offset": 10.0, "kappa": 0.7},
    "n_particles": 50,
    "replicates": 1024,
    "m_values": [2**k for k in range(3, 14)],
    "repetitions": 100,
    "reference": {"kind": "kalman", "level": 12, "replicates": 4096, "seed": 99991},
    "seed": 1,
    "threads": 1,
    "flag_threshold": DEFAULT_FLAG_THRESHOLD,
    "oracle_level": 12,
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def ou_full_preset() -> dict:
    return dict(_DEFAULTS)


def ou_desk_preset() -> dict:
    """Scaled-down OU setup: shorter horizon, truncated level/iteration laws.

    The start point moves to x0 = 3 so the complete-data score at theta0 = 1
    stays O(10); from x0 = 100 the x0^2/(2 dt) term makes the first step of
    the default schedule overshoot by orders of magnitude. Observation seed
    21 gives a data set whose likelihood has a sharp interior maximum.
    """
    return _deep_merge(
        _DEFAULTS,
        {
            "model_params": {"x0": 3.0},
            "observations": {"horizon": 10, "seed": 21},
            "law": {"l_max": 6, "p_max": 8},
            "m_values": [2**k for k in range(3, 10)],
            "reference": {"kind": "kalman", "level": 12},
        },
    )


def kangaroo_preset() -> dict:
    """Count-data setup on irregular times.

    The growth-rate start point and step sizes are deliberately cautious:
    theta3 enters the drift inside exp(theta3 x), so one oversized update
    can push the next path simulation past float range. Starting theta3
    below its target and keeping gamma small (large offset) holds every
    iterate in the stable region.
    """
    return _deep_merge(
        _DEFAULTS,
        {
            "model": "kangaroo",
            "theta_true": [2.397, 4.429e-3, 0.84, 17.631],
            "theta0": [2.0, 3.0e-3, 0.9, 12.0],
            "observations": {
                "source": "csv",
                "path": "data/kangaroo_synthetic.csv",
                "level": 12,
                "seed": 11,
                "times_spec": {"n": 41, "seed": 11, "gap_lo": 0.15, "gap_hi": 0.45},
            },
            "law": {"l_min": 3, "l_max": 5, "p_min": 1, "p_max": 8},
            "schedule": {"gamma0": 0.001, "offset": 100.0, "kappa": 0.7},
            "m_values": [2**k for k in range(3, 7)],
            "repetitions": 20,
            "reference": {"kind": "self", "replicates": 512, "seed": 99991},
        },
    )


PRESETS = {
    "ou-full": ou_full_preset,
    "ou-desk": ou_desk_preset,
    "kangaroo": kangaroo_preset,
}


def resolve_config(cfg: dict) -> dict:
    base = PRESETS[cfg["preset"]]() if cfg.get("preset") else dict(_DEFAULTS)
    out = _deep_merge(base, {k: v for k, v in cfg.items() if k != "preset"})
    if out["model"] not in ("ou", "kangaroo"):
        raise ValueError(f"config field 'model': unknown model {out['model']!r}")
    if out["n_particles"] < 2:
        raise ValueError("config field 'n_particles': need at least 2")
    if int(out["replicates"]) < 1:
        raise ValueError("config field 'replicates': need at least 1")
    if any(int(m) < 1 for m in out["m_values"]):
        raise ValueError("config field 'm_values': entries must be positive")
    if int(out["repetitions"]) < 1:
        raise ValueError("config field 'repetitions': need at least 1")
    law = out["law"]
    RandomizationLaw(
        l_min=int(law["l_min"]),
        l_max=int(law["l_max"]),
        p_min=int(law["p_min"]),
        p_max=int(law["p_max"]),
        base_iters=int(law["base_iters"]),
    )
    sched = out["schedule"]
    StepSchedule(gamma0=float(sched["gamma0"]), offset=float(sched["offset"]), kappa=float(sched["kappa"]))
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} did not parse to a mapping")
    # a run manifest can be replayed directly as a config
    if "config" in raw and "command" in raw:
        raw = raw["config"]
    return raw


def build_model(cfg: dict):
    if cfg["model"] == "ou":
        return ou_model(**cfg.get("model_params", {}))
    return kangaroo_model()


def build_law(cfg: dict) -> RandomizationLaw:
    law = cfg["law"]
    return RandomizationLaw(
        l_min=int(law["l_min"]),
        l_max=int(law["l_max"]),
        p_min=int(law["p_min"]),
        p_max=int(law["p_max"]),
        base_iters=int(law["base_iters"]),
    )


def build_schedule(cfg: dict) -> StepSchedule:
    s = cfg["schedule"]
    return StepSchedule(gamma0=float(s["gamma0"]), offset=float(s["offset"]), kappa=float(s["kappa"]))


def irregular_times(n: int, seed: int, gap_lo: float, gap_hi: float, t_start: float = 0.0) -> np.ndarray:
    """Irregular observation times with gaps bounded away from zero.

    Gaps are rounded to hundredths; the lower bound keeps distinct times from
    colliding on any lattice of level >= 3 (gap > 2^-3).
    """
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    gaps = np.round(gen.uniform(gap_lo, gap_hi, size=n - 1), 2)
    return t_start + np.concatenate([[0.0], np.cumsum(gaps)])


def observation_times(cfg: dict) -> tuple[np.ndarray, float]:
    obs_cfg = cfg["observations"]
    if cfg["model"] == "ou":
        horizon = int(obs_cfg["horizon"])
        return np.arange(1.0, horizon + 1.0), 0.0
    spec = obs_cfg.get("times_spec") or {}
    times = irregular_times(
        n=int(spec.get("n", 41)),
        seed=int(spec.get("seed", 11)),
        gap_lo=float(spec.get("gap_lo", 0.15)),
        gap_hi=float(spec.get("gap_hi", 0.45)),
    )
    return times, float(times[0])


def generate_synthetic_observations(model, theta, times, t0, level: int, seed) -> ObservationRecord:
    """Simulate the level-`level` chain through the observation grid and observe it."""
    theta = model.validate_theta(theta)
    stream = CountingStream(np.random.SeedSequence(entropy=int(seed), spawn_key=(7,)))
    idx = align_observation_times(times, level, t0)
    x = model.sample_initial(theta, 1, stream)[0]
    pos = 0
    values = []
    for k in idx:
        k = int(k)
        if k > pos:
            block = propagate_block(model, theta, level, x, k - pos, stream)
            x = block[-1]
            pos = k
        values.append(model.sample_obs(theta, x, stream))
    return ObservationRecord(times=np.asarray(times, float), values=np.asarray(values), t0=t0)


def load_observations(cfg: dict, base_dir=".") -> ObservationRecord:
    obs_cfg = cfg["observations"]
    if obs_cfg["source"] == "csv":
        path = Path(base_dir) / obs_cfg["path"]
        record = ObservationRecord.from_csv(path)
        if cfg["model"] == "ou":
            record = ObservationRecord(record.times, record.values, t0=0.0)
        return record
    if obs_cfg["source"] != "synthetic":
        raise ValueError(f"config field 'observations.source': {obs_cfg['source']!r}")
    model = build_model(cfg)
    times, t0 = observation_times(cfg)
    return generate_synthetic_observations(
        model, np.asarray(cfg["theta_true"], float), times, t0, int(obs_cfg["level"]), obs_cfg["seed"]
    )


def reference_value(cfg: dict, obs: ObservationRecord) -> np.ndarray:
    """Target the MSE is measured against."""
    ref = cfg["reference"]
    if ref["kind"] == "kalman":
        if cfg["model"] != "ou":
            raise ValueError("config field 'reference.kind': kalman reference needs the ou model")
        model = build_model(cfg)
        theta = kalman_mle(
            obs.values[:, 0], int(ref["level"]), model.sigma, model.obs_sigma, model.x0
        )
        return np.array([theta])
    if ref["kind"] != "self":
        raise ValueError(f"config field 'reference.kind': {ref['kind']!r}")
    result = umsa_estimate(
        build_model(cfg),
        obs,
        build_law(cfg),
        np.asarray(cfg["theta0"], float),
        build_schedule(cfg),
        int(cfg["n_particles"]),
        int(ref["replicates"]),
        np.random.SeedSequence(int(ref["seed"])),
        n_jobs=int(cfg["threads"]),
        flag_threshold=float(cfg["flag_threshold"]),
    )
    return result.estimate


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_manifest(out_dir: Path, command: str, cfg: dict, extra: dict) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "package": "umsa 0.1.0",
        **extra,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")
    return path


def run_simulate(cfg: dict, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_begin = time.perf_counter()
    model = build_model(cfg)
    times, t0 = observation_times(cfg)
    record = generate_synthetic_observations(
        model,
        np.asarray(cfg["theta_true"], float),
        times,
        t0,
        int(cfg["observations"]["level"]),
        cfg["observations"]["seed"],
    )
    obs_path = out_dir / "observations.csv"
    record.to_csv(obs_path)
    write_manifest(
        out_dir, "simulate", cfg, {"timings": {"wall_seconds": time.perf_counter() - t_begin}}
    )
    return {"observations": obs_path, "n_observations": len(record)}


def run_estimate(cfg: dict, out_dir, base_dir=".") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_begin = time.perf_counter()
    obs = load_observations(cfg, base_dir)
    result = umsa_estimate(
        build_model(cfg),
        obs,
        build_law(cfg),
        np.asarray(cfg["theta0"], float),
        build_schedule(cfg),
        int(cfg["n_particles"]),
        int(cfg["replicates"]),
        int(cfg["seed"]),
        n_jobs=int(cfg["threads"]),
        flag_threshold=float(cfg["flag_threshold"]),
    )
    write_records_csv(result.records, out_dir / "replicates.csv")
    summary = {
        "estimate": [float(v) for v in result.estimate],
        "replicates": int(cfg["replicates"]),
        "aborted": result.n_aborted,
        "partial": result.partial,
        "flagged": sum(1 for r in result.records if r.flagged),
        "gaussians": sum(r.gaussians for r in result.records),
        "density_evals": sum(r.density_evals for r in result.records),
    }
    with open(out_dir / "estimate.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    write_manifest(
        out_dir,
        "estimate",
        cfg,
        {
            "timings": {"wall_seconds": time.perf_counter() - t_begin},
            "aborted": result.n_aborted,
        },
    )
    return summary


def run_mse(cfg: dict, out_dir, base_dir=".") -> dict:
    """Mean-squared-error sweep over replicate counts.

    Every (m, repetition, replicate) task owns the stream keyed by exactly
    that triple, so results do not depend on scheduling. Work is flattened
    across the whole sweep before being handed to the worker pool.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_begin = time.perf_counter()
    obs = load_observations(cfg, base_dir)
    model = build_model(cfg)
    reference = reference_value(cfg, obs)
    m_values = [int(m) for m in cfg["m_values"]]
    reps = int(cfg["repetitions"])
    keys = [
        (mi, rep, i)
        for mi in range(len(m_values))
        for rep in range(reps)
        for i in range(m_values[mi])
    ]
    args = {
        "entropy": int(cfg["seed"]),
        "prefix": (),
        "model": model,
        "obs": obs,
        "law": build_law(cfg),
        "theta0": np.asarray(cfg["theta0"], float),
        "schedule": build_schedule(cfg),
        "n_particles": int(cfg["n_particles"]),
        "flag_threshold": float(cfg["flag_threshold"]),
        "keep_trajectories": False,
    }
    records = run_replicates(args, keys, n_jobs=int(cfg["threads"]))
    write_records_csv(records, out_dir / "replicates.csv", key_names=("m", "repetition", "replicate"))

    by_cell: dict = {}
    for rec in records:
        by_cell.setdefault(rec.key[:2], []).append(rec)
    dim = model.theta_dim
    n_aborted = 0
    estimate_rows = []
    summary_rows = []
    for mi, m in enumerate(m_values):
        sq = np.zeros(dim)
        gaussians = 0
        density = 0
        for rep in range(reps):
            cell = by_cell[(mi, rep)]
            total = np.zeros(dim)
            n_ok = 0
            for rec in cell:  # replicate order
                gaussians += rec.gaussians
                density += rec.density_evals
                if rec.aborted:
                    n_aborted += 1
                else:
                    total += rec.contribution
                    n_ok += 1
            est = total / n_ok if n_ok else np.full(dim, np.nan)
            estimate_rows.append([m, rep] + [_fmt(v) for v in est])
            sq += (est - reference) ** 2
        summary_rows.append(
            [m] + [_fmt(v) for v in sq / reps] + [gaussians, density]
        )

    import csv as _csv

    with open(out_dir / "estimates.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["m", "repetition"] + [f"theta{j}" for j in range(dim)])
        writer.writerows(estimate_rows)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["m"] + [f"mse{j}" for j in range(dim)] + ["gaussians", "density_evals"])
        writer.writerows(summary_rows)
    write_manifest(
        out_dir,
        "mse",
        cfg,
        {
            "reference": [float(v) for v in reference],
            "aborted": n_aborted,
            "timings": {"wall_seconds": time.perf_counter() - t_begin},
        },
    )
    return {"reference": reference, "aborted": n_aborted, "summary": summary_rows}


def run_oracle(cfg: dict, out_dir, base_dir=".") -> dict:
    from .oracle import kalman_loglik_grad

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg["model"] != "ou":
        raise ValueError("config field 'model': the oracle command applies to the ou model")
    obs = load_observations(cfg, base_dir)
    model = build_model(cfg)
    level = int(cfg["oracle_level"])
    theta = kalman_mle(obs.values[:, 0], level, model.sigma, model.obs_sigma, model.x0)
    ll, dll = kalman_loglik_grad(obs.values[:, 0], theta, level, model.sigma, model.obs_sigma, model.x0)
    out = {"level": level, "theta_mle": theta, "loglik": ll, "grad_at_mle": dll}
    with open(out_dir / "oracle.json", "w") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    write_manifest(out_dir, "oracle", cfg, {})
    return out
