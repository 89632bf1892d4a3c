"""Doubly randomized single-term estimator built on the coupled recursions.

One replicate draws a level l and a horizon index p, runs the (coupled)
stochastic-approximation recursion to N_p iterations, and returns the
telescoping increment it witnessed divided by the probability of drawing
(l, p). Averages of independent replicates then estimate the limit the
coupled recursions telescope to, without running any chain to the limit.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .errors import DegenerateWeightsError, NumericOverflowError
from .sa import StepSchedule, msa_run, msa_run_coupled
from .streams import CountingStream

DEFAULT_FLAG_THRESHOLD = 1e4


@dataclass(frozen=True)
class RandomizationLaw:
    """Joint law of (level, horizon index) and the iteration ladder N_p.

    Levels carry mass proportional to 2^(-1.5 l) on {l_min..l_max}. Given l,
    the horizon index p carries mass proportional to

        2^(5 - p)              for p in {p_min .. min(5, l_max - l)}
        2^(-p) p log2(p)^2     for max(6, p_min) <= p <= p_max

    and the recursion is run for N_p = base_iters * 2^p iterations.
    """

    l_min: int
    l_max: int
    p_min: int
    p_max: int
    base_iters: int

    def __post_init__(self):
        if not 0 <= self.l_min <= self.l_max:
            raise ValueError("need 0 <= l_min <= l_max")
        if not 1 <= self.p_min <= self.p_max:
            raise ValueError("need 1 <= p_min <= p_max")
        if self.base_iters < 1:
            raise ValueError("base_iters must be at least 1")
        # sampling happens once per replicate but tests draw millions of
        # (l, p) pairs, so the inverse-CDF tables are built once here
        w = np.array([self.level_weight(int(l)) for l in self.level_support()])
        object.__setattr__(self, "_level_probs", w / w.sum())
        object.__setattr__(self, "_level_cum", np.cumsum(w / w.sum()))
        tables = {}
        for l in self.level_support():
            sup = self.p_support(int(l))
            if sup.size == 0:
                raise ValueError(f"empty horizon-index support at level {l}")
            pw = np.array([self.p_weight(int(p), int(l)) for p in sup])
            probs = pw / pw.sum()
            tables[int(l)] = (sup, probs, np.cumsum(probs))
        object.__setattr__(self, "_p_tables", tables)

    # --- level marginal -------------------------------------------------
    def level_support(self) -> np.ndarray:
        return np.arange(self.l_min, self.l_max + 1)

    def level_weight(self, l: int) -> float:
        return 2.0 ** (-1.5 * l)

    def level_probs(self) -> np.ndarray:
        return self._level_probs.copy()

    def level_prob(self, l: int) -> float:
        return self._level_probs[l - self.l_min]

    # --- horizon index given level ---------------------------------------
    def p_support(self, l: int) -> np.ndarray:
        lo_branch = np.arange(self.p_min, min(5, self.l_max - l, self.p_max) + 1)
        hi_branch = np.arange(max(6, self.p_min), self.p_max + 1)
        return np.concatenate([lo_branch, hi_branch])

    def p_weight(self, p: int, l: int) -> float:
        if self.p_min <= p <= min(5, self.l_max - l, self.p_max):
            return 2.0 ** (5 - p)
        if max(6, self.p_min) <= p <= self.p_max:
            return 2.0 ** (-p) * p * np.log2(p) ** 2
        return 0.0

    def p_probs(self, l: int) -> np.ndarray:
        return self._p_tables[int(l)][1].copy()

    def p_prob(self, p: int, l: int) -> float:
        sup, probs, _ = self._p_tables[int(l)]
        return probs[int(np.searchsorted(sup, p))]

    def iter_count(self, p: int) -> int:
        return self.base_iters * 2**p

    def sample(self, stream):
        cum_l = self._level_cum
        l = self.l_min + int(min(np.searchsorted(cum_l, stream.uniform()), len(cum_l) - 1))
        sup, _, cum_p = self._p_tables[l]
        p = int(sup[min(np.searchsorted(cum_p, stream.uniform()), len(sup) - 1)])
        return l, p


@dataclass
class EstimatorRecord:
    """Outcome of one replicate: its draw, contribution and cost."""

    key: tuple
    l: int
    p: int
    n_iters: int
    contribution: np.ndarray | None
    gaussians: int
    density_evals: int
    wall_seconds: float
    aborted: bool = False
    reason: str = ""
    flagged: bool = False
    trajectories: dict | None = None


@dataclass
class UmsaResult:
    estimate: np.ndarray
    records: list
    n_aborted: int
    partial: bool

    @property
    def contributions(self) -> np.ndarray:
        return np.array([r.contribution for r in self.records if not r.aborted])


def umsa_single(
    model,
    obs,
    law: RandomizationLaw,
    theta0,
    schedule: StepSchedule,
    n_particles: int,
    stream: CountingStream,
    flag_threshold: float = DEFAULT_FLAG_THRESHOLD,
    keep_trajectories: bool = False,
    key: tuple = (),
) -> EstimatorRecord:
    """One replicate of the randomized estimator.

    Both read points theta_{N_p} and theta_{N_{p-1}} come from a single
    recursion, so the telescoping increments refer to one chain per level.
    A replicate that overflows or degenerates is returned aborted, with the
    cost it burned; it must be reported, not dropped.
    """
    t_begin = time.perf_counter()
    l, p = law.sample(stream)
    n_hi = law.iter_count(p)
    n_lo = law.iter_count(p - 1)
    denom = law.level_prob(l) * law.p_prob(p, l)
    trajectories = None
    try:
        if l == law.l_min:
            run = msa_run(model, obs, l, theta0, schedule, n_hi, n_particles, stream)
            raw = run.thetas[n_hi].copy()
            if p > law.p_min:
                raw -= run.thetas[n_lo]
            if keep_trajectories:
                trajectories = {l: run.thetas}
        else:
            run_f, run_c = msa_run_coupled(
                model, obs, l, theta0, schedule, n_hi, n_particles, stream
            )
            raw = run_f.thetas[n_hi] - run_c.thetas[n_hi]
            if p > law.p_min:
                raw = raw - (run_f.thetas[n_lo] - run_c.thetas[n_lo])
            if keep_trajectories:
                trajectories = {l: run_f.thetas, l - 1: run_c.thetas}
    except (NumericOverflowError, DegenerateWeightsError) as err:
        return EstimatorRecord(
            key=key,
            l=l,
            p=p,
            n_iters=n_hi,
            contribution=None,
            gaussians=stream.gaussians,
            density_evals=stream.density_evals,
            wall_seconds=time.perf_counter() - t_begin,
            aborted=True,
            reason=f"{type(err).__name__}: {err}",
        )
    contribution = raw / denom
    return EstimatorRecord(
        key=key,
        l=l,
        p=p,
        n_iters=n_hi,
        contribution=contribution,
        gaussians=stream.gaussians,
        density_evals=stream.density_evals,
        wall_seconds=time.perf_counter() - t_begin,
        flagged=bool(np.max(np.abs(contribution)) > flag_threshold),
        trajectories=trajectories,
    )


def replicate_stream(seed_entropy, spawn_key: tuple) -> CountingStream:
    """Stream for one replicate, a pure function of (entropy, spawn key)."""
    return CountingStream(np.random.SeedSequence(entropy=seed_entropy, spawn_key=spawn_key))


def _run_chunk(args: dict, keys: list) -> list:
    out = []
    for key in keys:
        stream = replicate_stream(args["entropy"], args["prefix"] + key)
        out.append(
            umsa_single(
                args["model"],
                args["obs"],
                args["law"],
                args["theta0"],
                args["schedule"],
                args["n_particles"],
                stream,
                flag_threshold=args["flag_threshold"],
                keep_trajectories=args["keep_trajectories"],
                key=key,
            )
        )
    return out


def run_replicates(args: dict, keys: list, n_jobs: int = 1) -> list:
    """Run replicates for the given spawn-key suffixes, in stable order.

    Each replicate's stream depends only on (master entropy, prefix + key),
    so the result list is byte-identical for any n_jobs or chunking.
    """
    n_jobs = int(n_jobs) if n_jobs else 1
    if n_jobs == 1 or len(keys) <= 1:
        return _run_chunk(args, keys)
    n_chunks = max(1, min(len(keys), 8 * abs(n_jobs) if n_jobs > 0 else 64))
    chunks = [list(c) for c in np.array_split(np.arange(len(keys)), n_chunks) if len(c)]
    key_chunks = [[keys[i] for i in c] for c in chunks]
    results = Parallel(n_jobs=n_jobs)(delayed(_run_chunk)(args, kc) for kc in key_chunks)
    return [rec for chunk in results for rec in chunk]


def umsa_estimate(
    model,
    obs,
    law: RandomizationLaw,
    theta0,
    schedule: StepSchedule,
    n_particles: int,
    n_replicates: int,
    seed,
    n_jobs: int = 1,
    flag_threshold: float = DEFAULT_FLAG_THRESHOLD,
    keep_trajectories: bool = False,
) -> UmsaResult:
    """Average n_replicates independent contributions.

    The mean runs over completed replicates in replicate order; aborted
    replicates are counted and flagged via the partial bit. The averaged
    vector is a plain point estimate: individual contributions are signed
    and scaled, so it need not satisfy the model's positivity constraints.
    """
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    args = {
        "entropy": root.entropy,
        "prefix": tuple(root.spawn_key),
        "model": model,
        "obs": obs,
        "law": law,
        "theta0": theta0,
        "schedule": schedule,
        "n_particles": n_particles,
        "flag_threshold": flag_threshold,
        "keep_trajectories": keep_trajectories,
    }
    records = run_replicates(args, [(i,) for i in range(n_replicates)], n_jobs=n_jobs)
    total = np.zeros(model.theta_dim)
    n_ok = 0
    for rec in records:  # fixed order: replicate index
        if not rec.aborted:
            total += rec.contribution
            n_ok += 1
    estimate = total / n_ok if n_ok else np.full(model.theta_dim, np.nan)
    n_aborted = n_replicates - n_ok
    return UmsaResult(
        estimate=estimate,
        records=records,
        n_aborted=n_aborted,
        partial=n_aborted > 0,
    )


def write_records_csv(records: list, path, key_names=("replicate",)) -> None:
    """One row per replicate; floats carry 17 significant digits."""
    import csv as _csv

    dim = 0
    for rec in records:
        if rec.contribution is not None:
            dim = len(rec.contribution)
            break
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(
            list(key_names)
            + ["l", "p", "n_iters", "gaussians", "density_evals", "aborted", "flagged"]
            + [f"c{j}" for j in range(dim)]
        )
        for rec in records:
            contrib = (
                [f"{v:.17g}" for v in rec.contribution]
                if rec.contribution is not None
                else [""] * dim
            )
            writer.writerow(
                [str(k) for k in rec.key]
                + [
                    rec.l,
                    rec.p,
                    rec.n_iters,
                    rec.gaussians,
                    rec.density_evals,
                    int(rec.aborted),
                    int(rec.flagged),
                ]
                + contrib
            )
