"""State-space models: diffusion dynamics plus discrete-time observations.

A model bundles the drift a_theta, a theta-free diffusion coefficient
sigma(x), an initial law mu_theta and an observation density g_theta(x, y),
together with the theta-gradients of everything the score functional needs.
States are arrays with an explicit trailing coordinate axis, so every method
accepts a single point (d,) or any batch (..., d).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .errors import ObservationAlignmentError

try:
    from numba import njit
except ImportError:  # pure-numpy fallback keeps everything working, just slower
    njit = None

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ParameterVector:
    """Parameter values with per-coordinate positivity constraints."""

    values: np.ndarray
    positive: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        positive = np.atleast_1d(np.asarray(self.positive, dtype=bool))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "positive", positive)
        if values.ndim != 1 or positive.shape != values.shape:
            raise ValueError("values and positivity mask must be 1-d and equal length")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite parameter values: {values}")
        if np.any(values[positive] <= 0.0):
            raise ValueError(f"constrained coordinate not strictly positive: {values}")

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=float), self.positive)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class ObservationRecord:
    """Observation times and values, plus the lattice origin t0.

    t0 is the time of the initial state; all grid indices are counted from
    it. t0 == times[0] means the first observation sits on the initial state.
    """

    times: np.ndarray
    values: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "t0", float(self.t0))
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("need at least one observation time")
        if values.shape[0] != times.shape[0]:
            raise ValueError("times and values length mismatch")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("observation times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("observations must be finite")
        if self.t0 > times[0]:
            raise ValueError("lattice origin t0 must not exceed the first observation time")
        object.__setattr__(self, "_grid_cache", {})

    def __len__(self):
        return self.times.shape[0]

    def grid_indices(self, l: int) -> np.ndarray:
        """Level-l lattice indices of the observation times (cached)."""
        idx = self._grid_cache.get(l)
        if idx is None:
            idx = align_observation_times(self.times, l, self.t0)
            idx.setflags(write=False)
            self._grid_cache[l] = idx
        return idx

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time"] + [f"y{j}" for j in range(self.values.shape[1])])
            for t, row in zip(self.times, self.values):
                writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path, t0=None) -> "ObservationRecord":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = np.asarray(rows[1:], dtype=float)
        times = body[:, 0]
        if t0 is None:
            t0 = times[0]
        return cls(times=times, values=body[:, 1:], t0=t0)


def align_observation_times(times, l: int, t0: float) -> np.ndarray:
    """Round observation times onto the level-l dyadic grid anchored at t0.

    Returns integer grid indices k_i with rounded time t0 + k_i * 2^-l,
    using k_i = floor((t_i - t0) / dt + 1/2).
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    idx = np.floor((times - t0) * float(2**l) + 0.5).astype(np.int64)
    if idx[0] < 0:
        raise ObservationAlignmentError("observation precedes the lattice origin")
    if np.any(np.diff(idx) < 1):
        raise ObservationAlignmentError(
            f"observations collapse onto one level-{l} grid point: indices {idx}"
        )
    return idx


class SdeModel:
    """Base class; subclasses fill in dynamics, initial law and likelihood.

    Conventions: theta is a plain 1-d array in hot paths (ParameterVector at
    API boundaries), x has shape (..., dim), y is one observation (obs_dim,).
    grad_theta_* arrays carry the theta axis before the state axis.
    """

    name: str = "sde"
    dim: int = 1
    obs_dim: int = 1
    theta_dim: int = 1
    # positivity mask for theta, used by the stochastic-approximation layer
    positive: np.ndarray = np.zeros(1, dtype=bool)
    # set when sigma(x) == const * identity; enables scalar fast paths
    scalar_diffusion: float | None = None

    # --- dynamics -----------------------------------------------------
    def drift(self, theta, x):
        raise NotImplementedError

    def grad_theta_drift(self, theta, x):
        """d drift / d theta, shape (..., theta_dim, dim)."""
        raise NotImplementedError

    def diffusion(self, x):
        if self.scalar_diffusion is not None:
            eye = self.scalar_diffusion * np.eye(self.dim)
            return np.broadcast_to(eye, np.shape(x)[:-1] + (self.dim, self.dim))
        raise NotImplementedError

    def diffusion_apply(self, x, dw):
        """sigma(x) @ dw with matching batch shapes."""
        if self.scalar_diffusion is not None:
            return self.scalar_diffusion * dw
        return np.einsum("...ij,...j->...i", self.diffusion(x), dw)

    def euler_block(self, theta, x, dt: float, increments):
        """Euler recursion over a pre-drawn increment block.

        increments: (n_steps, *x.shape). Returns (states, bad) where states
        holds the state after each step (start point excluded) and bad is the
        first step index at which the state went non-finite, or -1. Entries
        past a bad step are garbage; callers must raise before using them.
        Concrete models override this with compiled kernels.
        """
        out = np.empty_like(increments)
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(increments.shape[0]):
                x = x + self.drift(theta, x) * dt + self.diffusion_apply(x, increments[k])
                out[k] = x
                if not np.all(np.isfinite(x)):
                    return out, k
        return out, -1

    # --- Girsanov drift b = sigma^T Sigma^{-1} a, Sigma = sigma sigma^T
    def b_vector(self, theta, x):
        a = self.drift(theta, x)
        if self.scalar_diffusion is not None:
            return a / self.scalar_diffusion
        sig = self.diffusion(x)
        sigma2 = np.einsum("...ik,...jk->...ij", sig, sig)
        sol = np.linalg.solve(sigma2, a[..., None])[..., 0]
        return np.einsum("...ji,...j->...i", sig, sol)

    def grad_theta_b(self, theta, x):
        ga = self.grad_theta_drift(theta, x)
        if self.scalar_diffusion is not None:
            return ga / self.scalar_diffusion
        sig = self.diffusion(x)
        sigma2 = np.einsum("...ik,...jk->...ij", sig, sig)
        sol = np.linalg.solve(sigma2, np.swapaxes(ga, -1, -2))  # (..., dim, theta_dim)
        return np.einsum("...ji,...jp->...pi", sig, sol)

    # --- initial law --------------------------------------------------
    def sample_initial(self, theta, n: int, stream):
        raise NotImplementedError

    def log_initial(self, theta, x):
        raise NotImplementedError

    def grad_theta_log_initial(self, theta, x):
        raise NotImplementedError

    # --- observation density -------------------------------------------
    def log_obs(self, theta, x, y):
        raise NotImplementedError

    def grad_theta_log_obs(self, theta, x, y):
        raise NotImplementedError

    def grad_theta_log_obs_batch(self, theta, xs, ys):
        """grad log g over aligned rows: xs (K, dim), ys (K, obs_dim) -> (K, theta_dim)."""
        return np.stack([self.grad_theta_log_obs(theta, x, y) for x, y in zip(xs, ys)])

    def sample_obs(self, theta, x, stream):
        """Draw one observation vector at state x (used for synthetic data)."""
        raise NotImplementedError

    # --- parameter helpers ----------------------------------------------
    def parameter_vector(self, values) -> ParameterVector:
        return ParameterVector(np.asarray(values, dtype=float), self.positive)

    def validate_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.theta_dim,):
            raise ValueError(f"{self.name}: expected {self.theta_dim} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError(f"{self.name}: non-finite parameters {theta}")
        if np.any(theta[self.positive] <= 0.0):
            raise ValueError(f"{self.name}: positivity constraint violated at {theta}")
        return theta


if njit is not None:

    @njit(cache=True)
    def _ou_euler_block(x, incs, theta0, sigma, dt):
        out = np.empty_like(incs)
        n_steps, n_paths = incs.shape
        for k in range(n_steps):
            total = 0.0
            for i in range(n_paths):
                xi = x[i] - theta0 * x[i] * dt + sigma * incs[k, i]
                x[i] = xi
                out[k, i] = xi
                total += xi
            if not np.isfinite(total):
                return out, k
        return out, -1

    @njit(cache=True)
    def _logistic_euler_block(x, incs, t1, t2, t3, dt):
        out = np.empty_like(incs)
        n_steps, n_paths = incs.shape
        c1 = t1 / t3
        c2 = t2 / t3
        for k in range(n_steps):
            total = 0.0
            for i in range(n_paths):
                xi = x[i] + (c1 - c2 * np.exp(t3 * x[i])) * dt + incs[k, i]
                x[i] = xi
                out[k, i] = xi
                total += xi
            if not np.isfinite(total):
                return out, k
        return out, -1


def _flatten_block(x, increments):
    # both models are scalar, so batches collapse to (n_steps, n_paths)
    n = increments.shape[0]
    x_flat = np.asarray(x, dtype=float).reshape(-1).copy()
    incs = np.ascontiguousarray(np.asarray(increments, dtype=float).reshape(n, -1))
    return x_flat, incs


class OrnsteinUhlenbeckModel(SdeModel):
    """dX_t = -theta X_t dt + sigma dW_t, fixed start x0, Y_k ~ N(X_k, obs_sigma^2)."""

    name = "ou"
    dim = 1
    obs_dim = 1
    theta_dim = 1
    positive = np.zeros(1, dtype=bool)

    def __init__(self, sigma: float = 0.4, obs_sigma: float = 1.0, x0: float = 100.0):
        if sigma <= 0 or obs_sigma <= 0:
            raise ValueError("sigma and obs_sigma must be positive")
        self.sigma = float(sigma)
        self.obs_sigma = float(obs_sigma)
        self.x0 = float(x0)
        self.scalar_diffusion = self.sigma
        self._inv_obs_sigma = 1.0 / self.obs_sigma
        self._obs_const = -_HALF_LOG_2PI - np.log(self.obs_sigma)

    def drift(self, theta, x):
        return -theta[0] * x

    def grad_theta_drift(self, theta, x):
        return -np.asarray(x)[..., None, :]

    # initial law is a point mass at x0; density w.r.t. itself is 1
    def sample_initial(self, theta, n, stream):
        return np.full((n, 1), self.x0)

    def log_initial(self, theta, x):
        return np.zeros(np.shape(x)[:-1])

    def grad_theta_log_initial(self, theta, x):
        return np.zeros(np.shape(x)[:-1] + (1,))

    def log_obs(self, theta, x, y):
        z = (np.asarray(x)[..., 0] - y[0]) * self._inv_obs_sigma
        return self._obs_const - 0.5 * z * z

    def grad_theta_log_obs(self, theta, x, y):
        return np.zeros(np.shape(x)[:-1] + (1,))

    def grad_theta_log_obs_batch(self, theta, xs, ys):
        return np.zeros((np.shape(xs)[0], 1))

    def sample_obs(self, theta, x, stream):
        return np.asarray(x)[..., :1] + self.obs_sigma * stream.standard_normal(1)

    def euler_block(self, theta, x, dt: float, increments):
        if njit is None:
            return super().euler_block(theta, x, dt, increments)
        x_flat, incs = _flatten_block(x, increments)
        out, bad = _ou_euler_block(x_flat, incs, theta[0], self.sigma, dt)
        return out.reshape(increments.shape), bad


class KangarooModel(SdeModel):
    """Lamperti-transformed stochastic logistic growth with paired count data.

    Latent dynamics (unit diffusion): dX_t = (t1/t3 - (t2/t3) e^{t3 X_t}) dt + dW_t,
    X at the first observation time ~ N(5/t3, (10/t3)^2). Each observation is a
    pair of conditionally independent negative binomial counts with mean
    e^{t3 x} and dispersion t4:
        NB(y; r, m) = Gamma(y+r) / (Gamma(r) y!) * (r/(r+m))^r * (m/(r+m))^y.
    theta = (t1, t2, t3, t4); t2, t3, t4 strictly positive.
    """

    name = "kangaroo"
    dim = 1
    obs_dim = 2
    theta_dim = 4
    positive = np.array([False, True, True, True])
    scalar_diffusion = 1.0

    init_loc_scale = 5.0   # initial mean = init_loc_scale / t3
    init_sd_scale = 10.0   # initial sd   = init_sd_scale / t3

    def drift(self, theta, x):
        t1, t2, t3 = theta[0], theta[1], theta[2]
        with np.errstate(over="ignore"):
            return t1 / t3 - (t2 / t3) * np.exp(t3 * np.asarray(x))

    def grad_theta_drift(self, theta, x):
        t1, t2, t3 = theta[0], theta[1], theta[2]
        x = np.asarray(x)
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.exp(t3 * x)
            g1 = np.full_like(x, 1.0 / t3)
            g2 = -e / t3
            g3 = -t1 / t3**2 + (t2 / t3**2) * e - (t2 / t3) * x * e
        g4 = np.zeros_like(x)
        return np.stack([g1, g2, g3, g4], axis=-2)

    def sample_initial(self, theta, n, stream):
        t3 = theta[2]
        loc = self.init_loc_scale / t3
        sd = self.init_sd_scale / t3
        return loc + sd * stream.standard_normal((n, 1))

    def log_initial(self, theta, x):
        t3 = theta[2]
        z = (t3 * np.asarray(x)[..., 0] - self.init_loc_scale) / self.init_sd_scale
        return np.log(t3) - np.log(self.init_sd_scale) - _HALF_LOG_2PI - 0.5 * z * z

    def grad_theta_log_initial(self, theta, x):
        t3 = theta[2]
        x0 = np.asarray(x)[..., 0]
        g3 = 1.0 / t3 - x0 * (t3 * x0 - self.init_loc_scale) / self.init_sd_scale**2
        out = np.zeros(np.shape(x)[:-1] + (4,))
        out[..., 2] = g3
        return out

    # log NB evaluated through log-mean lm = t3*x; stable for any finite x
    def _nb_pieces(self, theta, x):
        t3, r = theta[2], theta[3]
        lm = t3 * np.asarray(x)[..., 0]
        lse = np.logaddexp(np.log(r), lm)  # log(r + m)
        return r, lm, lse

    def log_obs(self, theta, x, y):
        r, lm, lse = self._nb_pieces(theta, x)
        out = 0.0
        for yc in y:
            out = out + (
                gammaln(yc + r) - gammaln(r) - gammaln(yc + 1.0)
                + r * np.log(r) - (r + yc) * lse + yc * lm
            )
        return out

    def grad_theta_log_obs(self, theta, x, y):
        r, lm, lse = self._nb_pieces(theta, x)
        x0 = np.asarray(x)[..., 0]
        rho = np.exp(lm - lse)        # m / (r + m)
        inv = np.exp(-lse)            # 1 / (r + m)
        g3 = np.zeros_like(x0)
        g4 = np.zeros_like(x0)
        for yc in y:
            g3 += x0 * (yc - (r + yc) * rho)
            g4 += digamma(yc + r) - digamma(r) + np.log(r) + 1.0 - lse - (r + yc) * inv
        out = np.zeros(np.shape(x)[:-1] + (4,))
        out[..., 2] = g3
        out[..., 3] = g4
        return out

    def grad_theta_log_obs_batch(self, theta, xs, ys):
        r, lm, lse = self._nb_pieces(theta, xs)
        x0 = np.asarray(xs)[..., 0]
        ys = np.asarray(ys, dtype=float)
        n_counts = ys.shape[1]
        y_sum = ys.sum(axis=1)
        rho = np.exp(lm - lse)
        inv = np.exp(-lse)
        out = np.zeros((ys.shape[0], 4))
        out[:, 2] = x0 * (y_sum - (n_counts * r + y_sum) * rho)
        out[:, 3] = (
            digamma(ys + r).sum(axis=1)
            + n_counts * (np.log(r) - digamma(r) + 1.0 - lse)
            - (n_counts * r + y_sum) * inv
        )
        return out

    def sample_obs(self, theta, x, stream):
        t3, r = theta[2], theta[3]
        mean = np.exp(t3 * np.asarray(x)[..., 0])
        prob = r / (r + mean)
        return stream.gen.negative_binomial(r, prob, size=2).astype(float)

    def euler_block(self, theta, x, dt: float, increments):
        if njit is None:
            return super().euler_block(theta, x, dt, increments)
        x_flat, incs = _flatten_block(x, increments)
        out, bad = _logistic_euler_block(x_flat, incs, theta[0], theta[1], theta[2], dt)
        return out.reshape(increments.shape), bad


def ou_model(sigma: float = 0.4, obs_sigma: float = 1.0, x0: float = 100.0) -> OrnsteinUhlenbeckModel:
    return OrnsteinUhlenbeckModel(sigma=sigma, obs_sigma=obs_sigma, x0=x0)


def kangaroo_model() -> KangarooModel:
    return KangarooModel()
