"""Shared fixtures: toy models, scripted streams and independent reference
implementations used to cross-check the library code. Everything here is
deliberately written from first principles (plain numpy, no calls into the
hot paths under test) so a bug in the library cannot hide in its own test."""
from __future__ import annotations

import numpy as np

from umsa.lattice import LatticePath, CoupledPathPair, step_size
from umsa.models import SdeModel
from umsa.smc import _free_ancestors, _paired_ancestors
from umsa.streams import CountingStream


def stream(*key, entropy=2024):
    return CountingStream(np.random.SeedSequence(entropy=entropy, spawn_key=tuple(key)))


class ZeroStream(CountingStream):
    """All Gaussian increments zero, all uniforms 0.5; counters still work."""

    def __init__(self):
        super().__init__(0)

    def standard_normal(self, size=None):
        self.gaussians += 1 if size is None else int(np.prod(size))
        return np.zeros(size) if size is not None else np.zeros(())

    def uniform(self, size=None):
        return np.full(size, 0.5) if size is not None else 0.5


class ScriptedStream(CountingStream):
    """Returns scripted uniforms first, then falls through to the generator."""

    def __init__(self, scripted, seed=0):
        super().__init__(seed)
        self._scripted = list(scripted)

    def uniform(self, size=None):
        if not self._scripted:
            return super().uniform(size)
        if size is None:
            return self._scripted.pop(0)
        out = np.empty(int(size))
        for i in range(int(size)):
            out[i] = self._scripted.pop(0) if self._scripted else super().uniform()
        return out


class ThetaFreeModel(SdeModel):
    """Scalar model whose dynamics, initial law and likelihood ignore theta."""

    name = "theta-free"
    dim = 1
    obs_dim = 1
    theta_dim = 1
    positive = np.zeros(1, dtype=bool)
    scalar_diffusion = 1.0

    def drift(self, theta, x):
        return -0.5 * np.asarray(x)

    def grad_theta_drift(self, theta, x):
        return np.zeros(np.shape(x)[:-1] + (1, 1))

    def sample_initial(self, theta, n, stream):
        return stream.standard_normal((n, 1))

    def log_initial(self, theta, x):
        return -0.5 * np.asarray(x)[..., 0] ** 2

    def grad_theta_log_initial(self, theta, x):
        return np.zeros(np.shape(x)[:-1] + (1,))

    def log_obs(self, theta, x, y):
        return -0.5 * (np.asarray(x)[..., 0] - y[0]) ** 2

    def grad_theta_log_obs(self, theta, x, y):
        return np.zeros(np.shape(x)[:-1] + (1,))

    def sample_obs(self, theta, x, stream):
        return np.asarray(x)[..., :1] + stream.standard_normal(1)


class ZeroDriftModel(ThetaFreeModel):
    """Driftless unit-diffusion chain from a point mass; level-independent."""

    name = "zero-drift"

    def drift(self, theta, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def sample_initial(self, theta, n, stream):
        return np.full((n, 1), 0.7)


class PlanarModel(SdeModel):
    """Two-dimensional linear SDE with a full (non-scalar) diffusion matrix.

    drift(x) = [[-t1, 0.3], [0, -t2]] x, sigma = [[0.5, 0.1], [0.0, 0.4]],
    observed through y ~ N(x1 + x2, 1). Exercises every generic matrix code
    path (solve-based b_vector, einsum diffusion apply, python euler loop).
    """

    name = "planar"
    dim = 2
    obs_dim = 1
    theta_dim = 2
    positive = np.zeros(2, dtype=bool)
    scalar_diffusion = None
    _sigma = np.array([[0.5, 0.1], [0.0, 0.4]])

    def drift(self, theta, x):
        x = np.asarray(x, dtype=float)
        a = np.empty_like(x)
        a[..., 0] = -theta[0] * x[..., 0] + 0.3 * x[..., 1]
        a[..., 1] = -theta[1] * x[..., 1]
        return a

    def grad_theta_drift(self, theta, x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = -x[..., 0]
        g[..., 1, 1] = -x[..., 1]
        return g

    def diffusion(self, x):
        return np.broadcast_to(self._sigma, np.shape(x)[:-1] + (2, 2))

    def sample_initial(self, theta, n, stream):
        return 0.5 + 0.2 * stream.standard_normal((n, 2))

    def log_initial(self, theta, x):
        z = (np.asarray(x) - 0.5) / 0.2
        return -0.5 * (z**2).sum(axis=-1)

    def grad_theta_log_initial(self, theta, x):
        return np.zeros(np.shape(x)[:-1] + (2,))

    def log_obs(self, theta, x, y):
        x = np.asarray(x)
        return -0.5 * (x[..., 0] + x[..., 1] - y[0]) ** 2

    def grad_theta_log_obs(self, theta, x, y):
        return np.zeros(np.shape(x)[:-1] + (2,))

    def sample_obs(self, theta, x, stream):
        x = np.asarray(x)
        return x[..., :1] + x[..., 1:2] + stream.standard_normal(1)


def discretized_log_weight(model, theta, path: LatticePath, obs) -> float:
    """Log of the discretized joint weight, written independently of score.py.

    log mu_theta(x_0) + sum_i log g_theta(x_{k_i}, y_i)
      + sum_k [ a(x_k) . Sigma^{-1}(x_k) dx_k - (dt/2) a(x_k) . Sigma^{-1}(x_k) a(x_k) ]

    The quadratic form with Sigma^{-1} is evaluated with an explicit solve per
    lattice point; no reuse of the library's b_vector helpers.
    """
    theta = np.asarray(theta, dtype=float)
    states = path.states
    dt = path.dt
    total = float(np.sum(model.log_initial(theta, states[0])))
    idx = obs.grid_indices(path.level)
    for i, k in enumerate(idx):
        total += float(np.sum(model.log_obs(theta, states[int(k)], obs.values[i])))
    for k in range(states.shape[0] - 1):
        x = states[k]
        dx = states[k + 1] - x
        a = np.atleast_1d(model.drift(theta, x))
        if model.scalar_diffusion is not None:
            sol = dx / model.scalar_diffusion**2
            sol_a = a / model.scalar_diffusion**2
        else:
            sig = model.diffusion(x)
            big_sigma = sig @ sig.T
            sol = np.linalg.solve(big_sigma, dx)
            sol_a = np.linalg.solve(big_sigma, a)
        total += float(a @ sol) - 0.5 * dt * float(a @ sol_a)
    return total


def finite_difference_score(model, theta, path, obs, h=1e-5) -> np.ndarray:
    """Central finite differences of discretized_log_weight in theta."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty(theta.shape[0])
    for j in range(theta.shape[0]):
        step = h * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += step
        dn[j] -= step
        out[j] = (
            discretized_log_weight(model, up, path, obs)
            - discretized_log_weight(model, dn, path, obs)
        ) / (2.0 * step)
    return out


def random_path(model, theta, l: int, obs, rng) -> LatticePath:
    """A lattice path of the right length from plain-numpy Euler simulation."""
    n_steps = int(obs.grid_indices(l)[-1])
    dt = step_size(l)
    states = np.empty((n_steps + 1, model.dim))
    x = model.sample_initial(theta, 1, stream(int(rng.integers(2**32))))[0]
    states[0] = x
    for k in range(n_steps):
        dw = rng.standard_normal(model.dim) * np.sqrt(dt)
        x = x + model.drift(theta, x) * dt + model.diffusion_apply(x, dw)
        states[k + 1] = x
    return LatticePath(level=l, states=states)


def cpf_reference(model, theta, l: int, obs, conditioning, n_particles: int, stream):
    """Conditional sweep that copies full particle histories at every epoch.

    Same stream consumption as umsa.smc.cpf_step; used to pin down the
    lineage-stitching implementation bit for bit.
    """
    from umsa.lattice import _advance

    idx = obs.grid_indices(l)
    n_steps = int(idx[-1])
    dt = step_size(l)
    N = n_particles
    paths = np.empty((N, n_steps + 1, model.dim))
    paths[N - 1] = conditioning.states
    paths[: N - 1, 0] = model.sample_initial(theta, N - 1, stream)
    incs = stream.normal_increments(n_steps, (N - 1, model.dim), dt)
    pos = 0
    last = len(idx) - 1
    for i, k in enumerate(idx):
        k = int(k)
        if k > pos:
            block = _advance(model, theta, paths[: N - 1, pos], dt, incs[pos:k])
            paths[: N - 1, pos + 1 : k + 1] = block.transpose(1, 0, 2)
            pos = k
        log_w = model.log_obs(theta, paths[:, k], obs.values[i])
        stream.add_density_evals(N)
        if i < last:
            anc = _free_ancestors(log_w, N - 1, stream)
            paths[: N - 1, : k + 1] = paths[anc, : k + 1]
        else:
            pick = int(_free_ancestors(log_w, 1, stream)[0])
            return LatticePath(level=l, states=paths[pick].copy())


def ccpf_reference(model, theta_f, theta_c, l: int, obs, conditioning, n_particles: int, stream):
    """Coupled sweep with copy-on-resample histories; mirrors ccpf_step."""
    from umsa.lattice import _advance, coarse_increments

    idx_f = obs.grid_indices(l)
    idx_c = obs.grid_indices(l - 1)
    nf, nc = int(idx_f[-1]), int(idx_c[-1])
    dt_f, dt_c = step_size(l), step_size(l - 1)
    N = n_particles
    pf = np.empty((N, nf + 1, model.dim))
    pc = np.empty((N, nc + 1, model.dim))
    pf[N - 1] = conditioning.fine.states
    pc[N - 1] = conditioning.coarse.states
    pf[: N - 1, 0] = model.sample_initial(theta_f, N - 1, stream)
    pc[: N - 1, 0] = model.sample_initial(theta_c, N - 1, stream)
    incs_f = stream.normal_increments(nf, (N - 1, model.dim), dt_f)
    pos_f = pos_c = 0
    last = len(idx_f) - 1
    for i in range(last + 1):
        kf, kc = int(idx_f[i]), int(idx_c[i])
        if kf > pos_f:
            block = _advance(model, theta_f, pf[: N - 1, pos_f], dt_f, incs_f[pos_f:kf])
            pf[: N - 1, pos_f + 1 : kf + 1] = block.transpose(1, 0, 2)
        if kc > pos_c:
            incs_c = coarse_increments(incs_f[pos_f:kf], kc - pos_c, dt_c, stream)
            block = _advance(model, theta_c, pc[: N - 1, pos_c], dt_c, incs_c)
            pc[: N - 1, pos_c + 1 : kc + 1] = block.transpose(1, 0, 2)
        pos_f, pos_c = kf, kc
        log_wf = model.log_obs(theta_f, pf[:, kf], obs.values[i])
        log_wc = model.log_obs(theta_c, pc[:, kc], obs.values[i])
        stream.add_density_evals(2 * N)
        if i < last:
            anc_f, anc_c = _paired_ancestors(log_wf, log_wc, N - 1, stream)
            pf[: N - 1, : kf + 1] = pf[anc_f, : kf + 1]
            pc[: N - 1, : kc + 1] = pc[anc_c, : kc + 1]
        else:
            pick_f, pick_c = _paired_ancestors(log_wf, log_wc, 1, stream)
            return CoupledPathPair(
                fine=LatticePath(level=l, states=pf[int(pick_f[0])].copy()),
                coarse=LatticePath(level=l - 1, states=pc[int(pick_c[0])].copy()),
            )


def lattice_posterior_draws(y, theta, l, sigma, obs_sigma, x0, n_draws, rng):
    """Exact posterior draws of the full level-l lattice path for the linear
    model dX = -theta X dt + sigma dW observed at unit times, via a scalar
    forward filter / backward sampler over every lattice point."""
    T = len(y)
    m_steps = 2**l
    n = T * m_steps
    dt = 2.0**-l
    c = 1.0 - theta * dt
    q = sigma * sigma * dt
    r2 = obs_sigma * obs_sigma
    mf = np.empty(n + 1)
    pf = np.empty(n + 1)
    mf[0], pf[0] = x0, 0.0
    for k in range(1, n + 1):
        mp = c * mf[k - 1]
        pp = c * c * pf[k - 1] + q
        if k % m_steps == 0:
            yt = y[k // m_steps - 1]
            gain = pp / (pp + r2)
            mf[k] = mp + gain * (yt - mp)
            pf[k] = (1.0 - gain) * pp
        else:
            mf[k], pf[k] = mp, pp
    draws = np.empty((n_draws, n + 1))
    draws[:, n] = mf[n] + np.sqrt(pf[n]) * rng.standard_normal(n_draws)
    for k in range(n - 1, -1, -1):
        pp_next = c * c * pf[k] + q
        gain = pf[k] * c / pp_next
        cond_var = pf[k] - gain * gain * pp_next
        cond_mean = mf[k] + gain * (draws[:, k + 1] - c * mf[k])
        draws[:, k] = cond_mean + np.sqrt(max(cond_var, 0.0)) * rng.standard_normal(n_draws)
    return draws


def batch_means_se(values, n_batches=32):
    """Standard error of the mean of an autocorrelated chain via batch means."""
    values = np.asarray(values, dtype=float)
    usable = (len(values) // n_batches) * n_batches
    batches = values[:usable].reshape(n_batches, -1).mean(axis=1)
    return batches.std(ddof=1) / np.sqrt(n_batches)
