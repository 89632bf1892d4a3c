"""Score functional on discretized paths.

For a level-l path x and observations y the functional accumulates, in fixed
left-to-right order over the lattice,

    sum_k  grad_b(x_k) @ [ sigma(x_k)^T Sigma^{-1}(x_k) (x_{k+1} - x_k) - dt b(x_k) ]
  + sum_i  grad log g_theta(x_{k_i}, y_i)
  + grad log mu_theta(x_0)

with b = sigma^T Sigma^{-1} a and Sigma = sigma sigma^T. This is the exact
theta-gradient of the discretized log joint density (dynamics enter through
the Girsanov weight of the driftless reference chain), so its zeros are the
level-l likelihood stationary points.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericOverflowError
from .lattice import LatticePath


def score_path_terms(model, theta, path: LatticePath):
    """Dynamic part of the score, shape (theta_dim,)."""
    states = path.states
    if states.shape[0] < 2:
        return np.zeros(model.theta_dim)
    dt = path.dt
    x = states[:-1]
    dx = states[1:] - x
    grad_b = model.grad_theta_b(theta, x)  # (K, p, d)
    b = model.b_vector(theta, x)           # (K, d)
    if model.scalar_diffusion is not None:
        w = dx / model.scalar_diffusion
    else:
        sig = model.diffusion(x)
        sigma2 = np.einsum("kij,kmj->kim", sig, sig)
        sol = np.linalg.solve(sigma2, dx[..., None])[..., 0]
        w = np.einsum("kji,kj->ki", sig, sol)
    return np.einsum("kpd,kd->p", grad_b, w - dt * b)


def score_h_l(model, theta, path: LatticePath, obs) -> np.ndarray:
    """Full score H_l(theta, path) for an aligned observation record."""
    theta = np.asarray(theta, dtype=float)
    idx = obs.grid_indices(path.level)
    if idx[-1] != path.n_steps:
        raise ValueError(
            f"path has {path.n_steps} steps but the last observation aligns to index {idx[-1]}"
        )
    out = score_path_terms(model, theta, path)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(
            f"non-finite dynamic score term at theta={theta}", theta=theta, state=path.states
        )
    out = out + model.grad_theta_log_obs_batch(theta, path.states[idx], obs.values).sum(axis=0)
    out = out + model.grad_theta_log_initial(theta, path.states[0])
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(
            f"non-finite observation/initial score term at theta={theta}",
            theta=theta,
            state=path.states,
        )
    return out
