"""Markovian stochastic approximation driven by conditional particle sweeps.

Each iteration refreshes the latent path with one particle sweep at the
current parameter, evaluates the score at (old parameter, new path), and
takes an ascent step. Strictly positive coordinates move in log coordinates
(the chain rule multiplies their score entry by the coordinate value), so
constraints hold by construction without projections.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import NumericOverflowError
from .lattice import initial_path, initial_path_coupled
from .models import ParameterVector
from .score import score_h_l
from .smc import ccpf_step, cpf_step


@dataclass(frozen=True)
class StepSchedule:
    """gamma_n = gamma0 * (n + offset)^(-kappa), n = 1, 2, ..."""

    gamma0: float
    offset: float = 0.0
    kappa: float = 0.7

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")
        if self.offset < 0:
            raise ValueError("offset must be nonnegative")
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (1/2, 1]")

    def gamma(self, n: int) -> float:
        return self.gamma0 * (n + self.offset) ** (-self.kappa)


@dataclass
class SaRun:
    """Iterate trajectory including the start, shape (n_iters + 1, theta_dim)."""

    thetas: np.ndarray
    reset_count: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]


def sa_update(theta, gamma: float, score, positive_mask) -> np.ndarray:
    """Ascent step; log-coordinate move on constrained coordinates."""
    theta = np.asarray(theta, dtype=float)
    score = np.asarray(score, dtype=float)
    out = theta + gamma * score
    if positive_mask.any():
        p = positive_mask
        with np.errstate(over="ignore"):
            out[p] = theta[p] * np.exp(gamma * score[p] * theta[p])
    if not np.all(np.isfinite(out)) or np.any(out[positive_mask] <= 0.0):
        raise NumericOverflowError(
            f"parameter update left the feasible region: {out}", theta=theta
        )
    return out


def _theta_values(model, theta0) -> np.ndarray:
    if isinstance(theta0, ParameterVector):
        theta0 = theta0.values
    return model.validate_theta(theta0).copy()


def _open_trace(trace_path, theta_dim):
    fh = open(trace_path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["n"] + [f"theta{j}" for j in range(theta_dim)] + ["gamma"])
    return fh, writer


def msa_run(
    model,
    obs,
    l: int,
    theta0,
    schedule: StepSchedule,
    n_iters: int,
    n_particles: int,
    stream,
    eps_schedule=None,
    compact_sets=None,
    trace_path=None,
) -> SaRun:
    """Single-level recursion; records every iterate.

    With eps_schedule/compact_sets given, a candidate iterate is kept only if
    it moved less than eps_n and lies inside the n-th box; otherwise the
    parameter resets to theta0 (the latent path is not reset). With both
    hooks absent the trajectory is the plain recursion on the same stream.
    """
    theta = _theta_values(model, theta0)
    start = theta.copy()
    idx = obs.grid_indices(l)
    path = initial_path(model, theta, l, int(idx[-1]), stream)
    thetas = np.empty((n_iters + 1, model.theta_dim))
    thetas[0] = theta
    resets = 0
    fh = writer = None
    if trace_path is not None:
        fh, writer = _open_trace(trace_path, model.theta_dim)
    try:
        for n in range(1, n_iters + 1):
            path = cpf_step(model, theta, l, obs, path, n_particles, stream)
            h = score_h_l(model, theta, path, obs)
            gamma = schedule.gamma(n)
            candidate = sa_update(theta, gamma, h, model.positive)
            if eps_schedule is not None or compact_sets is not None:
                ok = True
                if eps_schedule is not None:
                    ok = np.linalg.norm(candidate - theta) < eps_schedule(n)
                if ok and compact_sets is not None:
                    lo, hi = compact_sets(n)
                    ok = np.all(candidate >= lo) and np.all(candidate <= hi)
                if not ok:
                    candidate = start.copy()
                    resets += 1
            theta = candidate
            thetas[n] = theta
            if writer is not None:
                writer.writerow(
                    [n] + [f"{v:.17g}" for v in theta] + [f"{gamma:.17g}"]
                )
    finally:
        if fh is not None:
            fh.close()
    return SaRun(thetas=thetas, reset_count=resets)


def msa_run_reprojected(
    model,
    obs,
    l: int,
    theta0,
    schedule: StepSchedule,
    eps_schedule,
    compact_sets,
    n_iters: int,
    n_particles: int,
    stream,
) -> SaRun:
    """Recursion with the decreasing-step / growing-box acceptance rule."""
    return msa_run(
        model,
        obs,
        l,
        theta0,
        schedule,
        n_iters,
        n_particles,
        stream,
        eps_schedule=eps_schedule,
        compact_sets=compact_sets,
    )


def msa_run_coupled(
    model,
    obs,
    l: int,
    theta0,
    schedule: StepSchedule,
    n_iters: int,
    n_particles: int,
    stream,
):
    """Coupled recursion at levels (l, l-1) sharing one stream.

    Both parameter trajectories start at theta0 and use the same step sizes;
    only the sweep levels differ. Returns (fine SaRun, coarse SaRun).
    """
    theta_f = _theta_values(model, theta0)
    theta_c = theta_f.copy()
    idx_f = obs.grid_indices(l)
    idx_c = obs.grid_indices(l - 1)
    pair = initial_path_coupled(model, theta_f, l, int(idx_f[-1]), int(idx_c[-1]), stream)
    out_f = np.empty((n_iters + 1, model.theta_dim))
    out_c = np.empty((n_iters + 1, model.theta_dim))
    out_f[0] = theta_f
    out_c[0] = theta_c
    for n in range(1, n_iters + 1):
        pair = ccpf_step(model, theta_f, theta_c, l, obs, pair, n_particles, stream)
        h_f = score_h_l(model, theta_f, pair.fine, obs)
        h_c = score_h_l(model, theta_c, pair.coarse, obs)
        gamma = schedule.gamma(n)
        theta_f = sa_update(theta_f, gamma, h_f, model.positive)
        theta_c = sa_update(theta_c, gamma, h_c, model.positive)
        out_f[n] = theta_f
        out_c[n] = theta_c
    return SaRun(thetas=out_f), SaRun(thetas=out_c)
