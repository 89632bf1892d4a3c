"""Dyadic Euler lattices and synchronously coupled propagation.

Level l puts step size dt = 2^-l on the time axis. The coupled propagator
drives the level-(l-1) chain with pairwise sums of the level-l Gaussian
increments; that sharing is the whole variance-reduction mechanism, so the
draw order (fine block first, coarse remainders after) is part of the
reproducibility contract.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericOverflowError


def step_size(l: int) -> float:
    return 2.0 ** (-l)


def unit_steps(l: int) -> int:
    return 2**l


@dataclass(frozen=True)
class LatticePath:
    """States at every lattice point, shape (n_steps + 1, dim)."""

    level: int
    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValueError("states must have shape (n_steps + 1, dim)")
        object.__setattr__(self, "states", states)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def dt(self) -> float:
        return step_size(self.level)


@dataclass(frozen=True)
class CoupledPathPair:
    fine: LatticePath
    coarse: LatticePath

    def __post_init__(self):
        if self.coarse.level != self.fine.level - 1:
            raise ValueError("coarse path must sit one level below the fine path")


def _check_finite(x, theta, where):
    if not np.all(np.isfinite(x)):
        raise NumericOverflowError(
            f"non-finite state during {where} at theta={np.asarray(theta)}",
            theta=np.asarray(theta),
            state=np.asarray(x),
        )


def euler_step(model, theta, x, dt: float, dw):
    """One Euler-Maruyama step x + a_theta(x) dt + sigma(x) dw."""
    x = np.asarray(x, dtype=float)
    out = x + model.drift(theta, x) * dt + model.diffusion_apply(x, np.asarray(dw))
    _check_finite(out, theta, "euler step")
    return out


def _advance(model, theta, x, dt, increments):
    """Run the Euler recursion over a pre-drawn increment block.

    increments: (n_steps, *x.shape). Returns (n_steps, *x.shape) with the
    state after each step; the start point is not included.
    """
    out, bad = model.euler_block(theta, x, dt, increments)
    if bad >= 0:
        raise NumericOverflowError(
            f"non-finite state at step {bad} of a level block, theta={np.asarray(theta)}",
            theta=np.asarray(theta),
            state=out[bad],
        )
    return out


def propagate_block(model, theta, l: int, x_start, n_steps: int, stream):
    """n_steps Euler steps at level l from x_start (batched over leading axes).

    Consumes exactly n_steps Gaussian increments per state coordinate, in
    step order. Returns the states after each step, shape (n_steps, ..., dim).
    """
    x = np.asarray(x_start, dtype=float)
    dt = step_size(l)
    incs = stream.normal_increments(n_steps, x.shape, dt)
    return _advance(model, theta, x, dt, incs)


def propagate_unit(model, theta, l: int, x_start, stream):
    """One unit of time at level l: 2^l Euler steps."""
    return propagate_block(model, theta, l, x_start, unit_steps(l), stream)


def coarse_increments(incs_fine, n_coarse: int, dt_coarse: float, stream) -> np.ndarray:
    """Level-(l-1) increments driven by a level-l block: pairwise sums first.

    When observation rounding makes the segment lengths disagree (n_coarse
    != n_fine // 2, off by at most one step), leftover coarse steps use
    fresh increments drawn after the fine block; leftover fine increments
    simply go uncoupled. For dyadic-aligned segments every coarse increment
    is a pair sum and the identity is exact.
    """
    n_fine = incs_fine.shape[0]
    shape = incs_fine.shape[1:]
    n_paired = min(n_coarse, n_fine // 2)
    out = np.empty((n_coarse,) + shape)
    if n_paired:
        out[:n_paired] = incs_fine[0 : 2 * n_paired : 2] + incs_fine[1 : 2 * n_paired : 2]
    if n_coarse > n_paired:
        out[n_paired:] = stream.normal_increments(n_coarse - n_paired, shape, dt_coarse)
    return out


def propagate_block_coupled(
    model,
    theta_fine,
    theta_coarse,
    l: int,
    x_fine,
    x_coarse,
    n_fine: int,
    n_coarse: int,
    stream,
    return_increments: bool = False,
):
    """Advance a fine/coarse chain pair over one inter-observation segment.

    The fine chain takes n_fine steps at level l driven by fresh increments;
    the coarse chain takes n_coarse steps at level l-1 driven by
    coarse_increments of the fine block.
    """
    if l < 1:
        raise ValueError("coupled propagation needs l >= 1")
    x_f = np.asarray(x_fine, dtype=float)
    x_c = np.asarray(x_coarse, dtype=float)
    dt_f = step_size(l)
    dt_c = step_size(l - 1)

    incs_f = stream.normal_increments(n_fine, x_f.shape, dt_f)
    incs_c = coarse_increments(incs_f, n_coarse, dt_c, stream)

    block_f = _advance(model, theta_fine, x_f, dt_f, incs_f)
    block_c = _advance(model, theta_coarse, x_c, dt_c, incs_c)
    if return_increments:
        return block_f, block_c, incs_f, incs_c
    return block_f, block_c


def propagate_unit_coupled(
    model, theta_fine, theta_coarse, l: int, x_fine, x_coarse, stream, return_increments=False
):
    """One unit of time for both chains: 2^l fine steps, 2^(l-1) coarse steps."""
    return propagate_block_coupled(
        model,
        theta_fine,
        theta_coarse,
        l,
        x_fine,
        x_coarse,
        unit_steps(l),
        unit_steps(l - 1),
        stream,
        return_increments=return_increments,
    )


def initial_path(model, theta, l: int, n_steps: int, stream) -> LatticePath:
    """Unconditional simulation: one draw from mu_theta, then n_steps at level l."""
    x0 = model.sample_initial(theta, 1, stream)[0]
    states = np.empty((n_steps + 1, model.dim))
    states[0] = x0
    if n_steps:
        states[1:] = propagate_block(model, theta, l, x0, n_steps, stream)
    return LatticePath(level=l, states=states)


def initial_path_coupled(
    model, theta, l: int, n_fine: int, n_coarse: int, stream
) -> CoupledPathPair:
    """Coupled unconditional simulation; the initial point is shared by copy."""
    x0 = model.sample_initial(theta, 1, stream)[0]
    states_f = np.empty((n_fine + 1, model.dim))
    states_c = np.empty((n_coarse + 1, model.dim))
    states_f[0] = x0
    states_c[0] = x0
    block_f, block_c = propagate_block_coupled(
        model, theta, theta, l, x0, x0, n_fine, n_coarse, stream
    )
    if n_fine:
        states_f[1:] = block_f
    if n_coarse:
        states_c[1:] = block_c
    return CoupledPathPair(
        fine=LatticePath(level=l, states=states_f),
        coarse=LatticePath(level=l - 1, states=states_c),
    )
