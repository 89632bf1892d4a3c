"""Conditional particle sweeps, single-level and coupled.

Both sweeps keep a conditioning trajectory pinned in the last slot at every
epoch, propagate the other N-1 slots freely, weight all N slots with the
observation density, and multinomially reassign the free slots as whole
trajectories. Interior epochs resample only the free slots; the terminal
epoch draws one index over all N slots. The coupled sweep moves a
fine/coarse pair with shared Gaussian increments and picks ancestor pairs
from the maximal coupling of the two weight vectors.

Trajectory resampling is bookkept through ancestor indices per epoch; only
the one returned trajectory is stitched together at the end, by walking its
lineage backwards. The distribution is exactly that of copying the full
particle histories at every epoch, without the per-epoch copies.

Stream layout per sweep: initial draws, then every propagation increment in
one block (the coupled sweep draws the fine block up front and any uncoupled
coarse leftovers inside the segment loop), then per epoch the observation
weights' selection uniforms. Categorical draws invert the unnormalized
cumulative weight at target u * total, which avoids normalizing divisions;
the compiled and plain-numpy selection paths implement the same recipe.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateWeightsError
from .lattice import (
    CoupledPathPair,
    LatticePath,
    _advance,
    coarse_increments,
    step_size,
)

try:
    from numba import njit
except ImportError:
    njit = None


def normalized_weights(log_w) -> np.ndarray:
    """exp-normalize in log space; raises if every weight vanishes."""
    log_w = np.asarray(log_w, dtype=float)
    m = np.max(log_w)
    if not np.isfinite(m):
        raise DegenerateWeightsError("all particle weights are zero at an epoch")
    w = np.exp(log_w - m)
    return w / w.sum()


def _categorical(cum, total, u):
    # inverse CDF at u * total; min() guards the top-edge rounding
    return np.minimum(np.searchsorted(cum, u * total), cum.shape[0] - 1)


def sample_categorical(pmf, stream, size=None):
    u = stream.uniform(1 if size is None else size)
    cum = np.cumsum(pmf)
    idx = _categorical(cum, cum[-1], u)
    return int(idx[0]) if size is None else idx


def maximal_coupling_sample(pmf_a, pmf_b, stream, size=None):
    """Draw (i, j) with marginals pmf_a, pmf_b and maximal meet probability.

    With probability sum_k min(a_k, b_k) both indices come from the
    normalized overlap and coincide; otherwise they are drawn independently
    from the two residuals. Always consumes 3 uniforms per pair so the
    stream position does not depend on which branch fires.
    """
    a = np.asarray(pmf_a, dtype=float)
    b = np.asarray(pmf_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("probability vectors must share a length")
    overlap = np.minimum(a, b)
    cum_meet = np.cumsum(overlap)
    alpha = cum_meet[-1]
    cum_a = np.cumsum(a - overlap)
    cum_b = np.cumsum(b - overlap)
    n = 1 if size is None else int(size)
    u = stream.uniform(3 * n)
    u_meet, u_a, u_b = u[:n], u[n : 2 * n], u[2 * n :]
    i = np.empty(n, dtype=np.int64)
    j = np.empty(n, dtype=np.int64)
    meet = u_meet < alpha
    if meet.any():
        k = _categorical(cum_meet, alpha, u_a[meet])
        i[meet] = k
        j[meet] = k
    miss = ~meet
    if miss.any():
        i[miss] = _categorical(cum_a, cum_a[-1], u_a[miss])
        j[miss] = _categorical(cum_b, cum_b[-1], u_b[miss])
    if size is None:
        return int(i[0]), int(j[0])
    return i, j


if njit is not None:

    @njit(cache=True)
    def _pick_free(log_w, u, out):
        """Categorical ancestor draws from log weights; 1 if all vanish."""
        n = log_w.shape[0]
        m = log_w[0]
        for k in range(1, n):
            if log_w[k] > m:
                m = log_w[k]
        if not np.isfinite(m):
            return 1
        cum = np.empty(n)
        s = 0.0
        for k in range(n):
            s += np.exp(log_w[k] - m)
            cum[k] = s
        top = n - 1
        for t in range(u.shape[0]):
            out[t] = min(np.searchsorted(cum, u[t] * s), top)
        return 0

    @njit(cache=True)
    def _pick_pairs(log_wf, log_wc, u, i_out, j_out):
        """Maximally coupled ancestor pairs from two log-weight vectors.

        Returns 1 / 2 if the fine / coarse weights all vanish. u holds the
        3 * n_pairs uniforms in (meet, left, right) blocks.
        """
        n = log_wf.shape[0]
        mf = log_wf[0]
        mc = log_wc[0]
        for k in range(1, n):
            if log_wf[k] > mf:
                mf = log_wf[k]
            if log_wc[k] > mc:
                mc = log_wc[k]
        if not np.isfinite(mf):
            return 1
        if not np.isfinite(mc):
            return 2
        wf = np.empty(n)
        wc = np.empty(n)
        sf = 0.0
        sc = 0.0
        for k in range(n):
            wf[k] = np.exp(log_wf[k] - mf)
            sf += wf[k]
            wc[k] = np.exp(log_wc[k] - mc)
            sc += wc[k]
        cum_meet = np.empty(n)
        cum_a = np.empty(n)
        cum_b = np.empty(n)
        alpha = 0.0
        ra = 0.0
        rb = 0.0
        for k in range(n):
            fa = wf[k] / sf
            fb = wc[k] / sc
            o = fa if fa < fb else fb
            alpha += o
            cum_meet[k] = alpha
            ra += fa - o
            cum_a[k] = ra
            rb += fb - o
            cum_b[k] = rb
        top = n - 1
        n_pairs = i_out.shape[0]
        for t in range(n_pairs):
            if u[t] < alpha:
                k = min(np.searchsorted(cum_meet, u[n_pairs + t] * alpha), top)
                i_out[t] = k
                j_out[t] = k
            else:
                i_out[t] = min(np.searchsorted(cum_a, u[n_pairs + t] * ra), top)
                j_out[t] = min(np.searchsorted(cum_b, u[2 * n_pairs + t] * rb), top)
        return 0

else:
    _pick_free = None
    _pick_pairs = None


def _free_ancestors(log_w, n_draws: int, stream):
    u = stream.uniform(n_draws)
    if _pick_free is not None:
        out = np.empty(n_draws, dtype=np.int64)
        if _pick_free(np.asarray(log_w, dtype=float), u, out):
            raise DegenerateWeightsError("all particle weights are zero at an epoch")
        return out
    log_w = np.asarray(log_w, dtype=float)
    m = np.max(log_w)
    if not np.isfinite(m):
        raise DegenerateWeightsError("all particle weights are zero at an epoch")
    cum = np.cumsum(np.exp(log_w - m))
    return _categorical(cum, cum[-1], u)


def _paired_ancestors(log_wf, log_wc, n_draws: int, stream):
    u = stream.uniform(3 * n_draws)
    i = np.empty(n_draws, dtype=np.int64)
    j = np.empty(n_draws, dtype=np.int64)
    if _pick_pairs is not None:
        status = _pick_pairs(
            np.asarray(log_wf, dtype=float), np.asarray(log_wc, dtype=float), u, i, j
        )
        if status:
            side = "fine" if status == 1 else "coarse"
            raise DegenerateWeightsError(f"all {side} particle weights are zero at an epoch")
        return i, j
    wf = normalized_weights(log_wf)
    wc = normalized_weights(log_wc)
    overlap = np.minimum(wf, wc)
    cum_meet = np.cumsum(overlap)
    alpha = cum_meet[-1]
    cum_a = np.cumsum(wf - overlap)
    cum_b = np.cumsum(wc - overlap)
    u_meet, u_a, u_b = u[:n_draws], u[n_draws : 2 * n_draws], u[2 * n_draws :]
    meet = u_meet < alpha
    if meet.any():
        k = _categorical(cum_meet, alpha, u_a[meet])
        i[meet] = k
        j[meet] = k
    miss = ~meet
    if miss.any():
        i[miss] = _categorical(cum_a, cum_a[-1], u_a[miss])
        j[miss] = _categorical(cum_b, cum_b[-1], u_b[miss])
    return i, j


def _aligned(obs, l):
    idx = obs.grid_indices(l)
    return idx, int(idx[-1])


def _stitch_lineage(idx, blocks, anc_hist, pick, cond_states, x0s):
    """Walk one slot's ancestry backwards and assemble its trajectory.

    blocks[i] holds the free slots' states over segment i, shape
    (seg_len, N-1, dim) or None for an empty segment; slot N-1 is the pinned
    conditioning trajectory at every epoch.
    """
    n_free = x0s.shape[0]
    out = np.empty((int(idx[-1]) + 1, x0s.shape[1]))
    slot = pick
    for i in range(len(idx) - 1, -1, -1):
        k = int(idx[i])
        prev = int(idx[i - 1]) if i > 0 else 0
        if k > prev:
            if slot == n_free:
                out[prev + 1 : k + 1] = cond_states[prev + 1 : k + 1]
            else:
                out[prev + 1 : k + 1] = blocks[i][:, slot]
        if i > 0 and slot != n_free:
            slot = int(anc_hist[i - 1][slot])
    out[0] = cond_states[0] if slot == n_free else x0s[slot]
    return out


def cpf_step(model, theta, l: int, obs, conditioning: LatticePath, n_particles: int, stream) -> LatticePath:
    """One sweep of the conditional particle filter; returns the new path.

    Invariant with respect to the level-l smoothing law at theta: the pinned
    slot makes the sweep a Markov kernel whose stationary distribution is the
    conditional law of the lattice path given the observations.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles (one free, one pinned)")
    idx, n_steps = _aligned(obs, l)
    if conditioning.level != l or conditioning.n_steps != n_steps:
        raise ValueError("conditioning path does not match the observation lattice")
    N = n_particles
    dt = step_size(l)
    cond = conditioning.states
    x0s = model.sample_initial(theta, N - 1, stream)
    incs = stream.normal_increments(n_steps, (N - 1, model.dim), dt)
    cur = np.empty((N, model.dim))
    cur[: N - 1] = x0s
    blocks = []
    anc_hist = []
    pos = 0
    last = len(idx) - 1
    for i, k in enumerate(idx):
        k = int(k)
        if k > pos:
            block = _advance(model, theta, cur[: N - 1], dt, incs[pos:k])
            cur[: N - 1] = block[-1]
            blocks.append(block)
            pos = k
        else:
            blocks.append(None)
        cur[N - 1] = cond[k]
        log_w = model.log_obs(theta, cur, obs.values[i])
        stream.add_density_evals(N)
        if i < last:
            anc = _free_ancestors(log_w, N - 1, stream)
            anc_hist.append(anc)
            cur[: N - 1] = cur[anc]
        else:
            pick = int(_free_ancestors(log_w, 1, stream)[0])
            return LatticePath(level=l, states=_stitch_lineage(idx, blocks, anc_hist, pick, cond, x0s))
    raise AssertionError("unreachable: observation record is never empty")


def ccpf_step(
    model,
    theta_fine,
    theta_coarse,
    l: int,
    obs,
    conditioning: CoupledPathPair,
    n_particles: int,
    stream,
) -> CoupledPathPair:
    """One coupled sweep at levels (l, l-1); returns the new path pair.

    Marginally each side is exactly a cpf_step at its own level and theta;
    jointly the propagation shares increments and the ancestor indices are
    maximally coupled, which is what makes fine-coarse differences small.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles (one free, one pinned)")
    idx_f, steps_f = _aligned(obs, l)
    idx_c, steps_c = _aligned(obs, l - 1)
    fine, coarse = conditioning.fine, conditioning.coarse
    if fine.level != l or fine.n_steps != steps_f:
        raise ValueError("fine conditioning path does not match the observation lattice")
    if coarse.level != l - 1 or coarse.n_steps != steps_c:
        raise ValueError("coarse conditioning path does not match the observation lattice")
    N = n_particles
    dt_f = step_size(l)
    dt_c = step_size(l - 1)
    x0s_f = model.sample_initial(theta_fine, N - 1, stream)
    x0s_c = model.sample_initial(theta_coarse, N - 1, stream)
    incs_f = stream.normal_increments(steps_f, (N - 1, model.dim), dt_f)
    cur_f = np.empty((N, model.dim))
    cur_c = np.empty((N, model.dim))
    cur_f[: N - 1] = x0s_f
    cur_c[: N - 1] = x0s_c
    blocks_f = []
    blocks_c = []
    anc_f_hist = []
    anc_c_hist = []
    pos_f = 0
    pos_c = 0
    last = len(idx_f) - 1
    for i in range(last + 1):
        kf, kc = int(idx_f[i]), int(idx_c[i])
        if kf > pos_f:
            block = _advance(model, theta_fine, cur_f[: N - 1], dt_f, incs_f[pos_f:kf])
            cur_f[: N - 1] = block[-1]
            blocks_f.append(block)
        else:
            blocks_f.append(None)
        if kc > pos_c:
            incs_c = coarse_increments(incs_f[pos_f:kf], kc - pos_c, dt_c, stream)
            block = _advance(model, theta_coarse, cur_c[: N - 1], dt_c, incs_c)
            cur_c[: N - 1] = block[-1]
            blocks_c.append(block)
        else:
            blocks_c.append(None)
        pos_f, pos_c = kf, kc
        cur_f[N - 1] = fine.states[kf]
        cur_c[N - 1] = coarse.states[kc]
        log_wf = model.log_obs(theta_fine, cur_f, obs.values[i])
        log_wc = model.log_obs(theta_coarse, cur_c, obs.values[i])
        stream.add_density_evals(2 * N)
        if i < last:
            anc_f, anc_c = _paired_ancestors(log_wf, log_wc, N - 1, stream)
            anc_f_hist.append(anc_f)
            anc_c_hist.append(anc_c)
            cur_f[: N - 1] = cur_f[anc_f]
            cur_c[: N - 1] = cur_c[anc_c]
        else:
            pick_f, pick_c = _paired_ancestors(log_wf, log_wc, 1, stream)
            return CoupledPathPair(
                fine=LatticePath(
                    level=l,
                    states=_stitch_lineage(
                        idx_f, blocks_f, anc_f_hist, int(pick_f[0]), fine.states, x0s_f
                    ),
                ),
                coarse=LatticePath(
                    level=l - 1,
                    states=_stitch_lineage(
                        idx_c, blocks_c, anc_c_hist, int(pick_c[0]), coarse.states, x0s_c
                    ),
                ),
            )
    raise AssertionError("unreachable: observation record is never empty")
