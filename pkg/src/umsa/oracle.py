"""Exact linear-Gaussian reference for the discretized OU model.

A level-l Euler chain for dX = -theta X dt + sigma dW aggregates over one
unit of time to

    X_{t+1} = phi X_t + xi_t,   phi = (1 - theta dt)^(2^l),
    Var(xi_t) = sigma^2 dt (1 + c^2 + ... + c^(2(2^l - 1))),  c = 1 - theta dt,

observed through Y_t ~ N(X_t, obs_sigma^2) at t = 1..T from a fixed start
x0. Everything here is closed-form Kalman algebra with an exact tangent
(d/d theta) recursion; the module is self-contained on purpose so it can
arbitrate the particle and stochastic-approximation code paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Unit-time transition of the level-l Euler OU chain, with derivatives."""

    phi: float
    trans_var: float
    obs_var: float
    x0: float
    dphi: float
    dtrans_var: float

    @classmethod
    def build(cls, theta: float, l: int, sigma: float, obs_sigma: float, x0: float):
        dt = 2.0 ** (-l)
        m = 2**l
        c = 1.0 - theta * dt
        r = c * c
        phi = c**m
        dphi = -m * dt * c ** (m - 1)
        if abs(1.0 - r) < 1e-12:
            q = sigma**2 * dt * m
            dq = 0.0  # boundary case c^2 == 1; unused by the experiments
        else:
            geo = (1.0 - r**m) / (1.0 - r)
            q = sigma**2 * dt * geo
            dr = -2.0 * dt * c
            dgeo = dr * ((1.0 - r**m) - m * r ** (m - 1) * (1.0 - r)) / (1.0 - r) ** 2
            dq = sigma**2 * dt * dgeo
        return cls(
            phi=phi,
            trans_var=q,
            obs_var=obs_sigma**2,
            x0=x0,
            dphi=dphi,
            dtrans_var=dq,
        )


def kalman_loglik_grad(y, theta: float, l: int, sigma: float, obs_sigma: float, x0: float):
    """Exact log-likelihood of the level-l chain and its theta-derivative."""
    spec = LinearGaussianSpec.build(theta, l, sigma, obs_sigma, x0)
    phi, q, R = spec.phi, spec.trans_var, spec.obs_var
    dphi, dq = spec.dphi, spec.dtrans_var
    m, P, dm, dP = spec.x0, 0.0, 0.0, 0.0
    ll = 0.0
    dll = 0.0
    for yt in np.asarray(y, dtype=float).ravel():
        mp = phi * m
        dmp = dphi * m + phi * dm
        Pp = phi * phi * P + q
        dPp = 2.0 * phi * dphi * P + phi * phi * dP + dq
        S = Pp + R
        dS = dPp
        v = yt - mp
        dv = -dmp
        ll += -0.5 * (np.log(2.0 * np.pi * S) + v * v / S)
        dll += -0.5 * dS / S - v * dv / S + 0.5 * v * v * dS / (S * S)
        K = Pp / S
        dK = dPp * R / (S * S)
        m = mp + K * v
        dm = dmp + dK * v + K * dv
        P = (1.0 - K) * Pp
        dP = -dK * Pp + (1.0 - K) * dPp
    return ll, dll


def kalman_filter_moments(y, theta: float, l: int, sigma: float, obs_sigma: float, x0: float):
    """Filtered and one-step-predicted moments at t = 0..T (t=0 is the start)."""
    spec = LinearGaussianSpec.build(theta, l, sigma, obs_sigma, x0)
    phi, q, R = spec.phi, spec.trans_var, spec.obs_var
    y = np.asarray(y, dtype=float).ravel()
    T = y.shape[0]
    mf = np.empty(T + 1)
    Pf = np.empty(T + 1)
    mp = np.empty(T + 1)  # predicted moments; entry 0 unused
    Pp = np.empty(T + 1)
    mf[0], Pf[0] = spec.x0, 0.0
    mp[0], Pp[0] = np.nan, np.nan
    for t in range(1, T + 1):
        mp[t] = phi * mf[t - 1]
        Pp[t] = phi * phi * Pf[t - 1] + q
        S = Pp[t] + R
        K = Pp[t] / S
        mf[t] = mp[t] + K * (y[t - 1] - mp[t])
        Pf[t] = (1.0 - K) * Pp[t]
    return mf, Pf, mp, Pp, phi


def kalman_smoother_moments(y, theta: float, l: int, sigma: float, obs_sigma: float, x0: float):
    """Smoothed means and variances at t = 0..T (forward filter, RTS backward)."""
    mf, Pf, mp, Pp, phi = kalman_filter_moments(y, theta, l, sigma, obs_sigma, x0)
    T = len(mf) - 1
    ms = mf.copy()
    Ps = Pf.copy()
    for t in range(T - 1, -1, -1):
        C = Pf[t] * phi / Pp[t + 1]
        ms[t] = mf[t] + C * (ms[t + 1] - mp[t + 1])
        Ps[t] = Pf[t] + C * C * (Ps[t + 1] - Pp[t + 1])
    return ms, Ps


def kalman_mle(
    y,
    l: int,
    sigma: float,
    obs_sigma: float,
    x0: float,
    lo: float = 0.02,
    hi: float = 1.95,
    n_scan: int = 40,
) -> float:
    """Level-l maximum-likelihood drift parameter.

    A coarse scan brackets the optimum first; when the scan minimum sits on
    an edge the range is widened (a few times, staying positive) until the
    bracket is interior. A monotone likelihood past the widened range falls
    back to a bounded search on the outermost cell. Golden-section search is
    limited to about sqrt(eps) relative accuracy by function flatness, so the
    result is polished to a root of the exact gradient.
    """

    def neg_ll(theta):
        return -kalman_loglik_grad(y, theta, l, sigma, obs_sigma, x0)[0]

    for _ in range(8):
        grid = np.linspace(lo, hi, n_scan)
        values = [neg_ll(g) for g in grid]
        j = int(np.argmin(values))
        if j == 0:
            lo = max(lo / 4.0, 1e-4)
            if grid[0] > 2e-4:
                continue
        elif j == n_scan - 1:
            hi = hi * 2.0
            if hi < 2.0 ** (l + 3):
                continue
        break
    if 0 < j < n_scan - 1:
        res = minimize_scalar(
            neg_ll,
            bracket=(grid[j - 1], grid[j], grid[j + 1]),
            method="golden",
            options={"xtol": 1e-13},
        )
    else:
        a = grid[max(j - 1, 0)]
        b = grid[min(j + 1, n_scan - 1)]
        res = minimize_scalar(neg_ll, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    est = float(res.x)

    def grad(theta):
        return kalman_loglik_grad(y, theta, l, sigma, obs_sigma, x0)[1]

    delta = max(1e-7, 1e-7 * est)
    for _ in range(24):
        a, b = max(est - delta, 1e-12), est + delta
        ga, gb = grad(a), grad(b)
        if ga == 0.0:
            return a
        if gb == 0.0:
            return b
        if np.sign(ga) != np.sign(gb):
            return float(brentq(grad, a, b, xtol=1e-14, rtol=8.9e-16))
        delta *= 4.0
        if delta > max(1.0, est):
            break
    return est
