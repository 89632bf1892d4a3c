"""Stochastic approximation loops and step schedules."""
import csv

import numpy as np
import pytest
from scipy.stats import ks_2samp

import umsa.sa as sa_mod
from umsa.errors import NumericOverflowError
from umsa.models import ObservationRecord, ParameterVector, ou_model
from umsa.sa import StepSchedule, msa_run, msa_run_coupled, msa_run_reprojected, sa_update
from umsa.score import score_h_l

from support import ThetaFreeModel, stream


def _unit_obs(values, t0=0.0):
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    times = t0 + 1.0 + np.arange(len(values))
    return ObservationRecord(times=times, values=values, t0=t0)


_Y5 = [0.9, 0.4, 0.6, 0.1, 0.5]


def test_schedule_values_and_validation():
    s = StepSchedule(gamma0=0.1, offset=10.0, kappa=0.7)
    assert s.gamma(1) == pytest.approx(0.1 * 11.0**-0.7, rel=1e-15)
    assert s.gamma(100) < s.gamma(10) < s.gamma(1)
    with pytest.raises(ValueError):
        StepSchedule(gamma0=0.0)
    with pytest.raises(ValueError):
        StepSchedule(gamma0=0.1, offset=-1.0)
    with pytest.raises(ValueError):
        StepSchedule(gamma0=0.1, kappa=0.5)
    with pytest.raises(ValueError):
        StepSchedule(gamma0=0.1, kappa=1.01)


def test_sa_update_plain_and_log_coordinates():
    theta = np.array([1.5, 2.0, 0.5])
    score = np.array([-0.4, 1.2, -3.0])
    mask = np.array([False, True, True])
    out = sa_update(theta, 0.01, score, mask)
    assert out[0] == 1.5 + 0.01 * -0.4
    assert out[1] == 2.0 * np.exp(0.01 * 1.2 * 2.0)
    assert out[2] == 0.5 * np.exp(0.01 * -3.0 * 0.5)
    assert np.all(out[1:] > 0)


def test_sa_update_rejects_overflow():
    with pytest.raises(NumericOverflowError):
        sa_update(np.array([2.0]), 1.0, np.array([1e6]), np.array([True]))
    with pytest.raises(NumericOverflowError):
        sa_update(np.array([2.0]), 1.0, np.array([np.inf]), np.array([False]))


def test_theta_free_model_is_fixed_point():
    m = ThetaFreeModel()
    obs = _unit_obs([0.1, -0.3])
    sched = StepSchedule(gamma0=0.5)
    run = msa_run(m, obs, 2, np.array([0.8]), sched, 20, 6, stream(50))
    assert run.thetas.shape == (21, 1)
    assert np.all(run.thetas == 0.8)
    run_f, run_c = msa_run_coupled(m, obs, 2, np.array([0.8]), sched, 20, 6, stream(51))
    assert np.all(run_f.thetas == 0.8) and np.all(run_c.thetas == 0.8)


def test_accepts_parameter_vector_start():
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5[:2])
    sched = StepSchedule(gamma0=0.05, offset=10.0)
    theta0 = ParameterVector(values=np.array([1.0]), positive=m.positive)
    run = msa_run(m, obs, 2, theta0, sched, 5, 8, stream(52))
    assert run.thetas[0, 0] == 1.0


def test_every_update_is_gamma_times_score(monkeypatch):
    # replay the recursion from the logged latent paths
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5[:3])
    sched = StepSchedule(gamma0=0.1, offset=10.0)
    paths = []
    real = sa_mod.cpf_step

    def record(*args):
        out = real(*args)
        paths.append(out)
        return out

    monkeypatch.setattr(sa_mod, "cpf_step", record)
    run = msa_run(m, obs, 2, np.array([1.0]), sched, 15, 8, stream(53))
    for n in range(1, 16):
        prev = run.thetas[n - 1]
        h = score_h_l(m, prev, paths[n - 1], obs)
        expect = sa_update(prev, sched.gamma(n), h, m.positive)
        assert np.array_equal(run.thetas[n], expect)


def test_trace_file_round_trips(tmp_path):
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5[:2])
    sched = StepSchedule(gamma0=0.05, offset=5.0)
    trace = tmp_path / "trace.csv"
    run = msa_run(m, obs, 2, np.array([1.0]), sched, 12, 8, stream(54), trace_path=trace)
    with open(trace) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["n", "theta0", "gamma"]
    assert len(rows) == 13
    for n, row in enumerate(rows[1:], start=1):
        assert int(row[0]) == n
        assert float(row[1]) == run.thetas[n, 0]
        assert float(row[2]) == sched.gamma(n)


def test_reprojection_with_loose_rule_is_plain_run():
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5[:3])
    sched = StepSchedule(gamma0=0.1, offset=10.0)
    plain = msa_run(m, obs, 2, np.array([1.0]), sched, 30, 8, stream(55))
    loose = msa_run_reprojected(
        m, obs, 2, np.array([1.0]), sched,
        eps_schedule=lambda n: np.inf,
        compact_sets=lambda n: (np.array([-np.inf]), np.array([np.inf])),
        n_iters=30, n_particles=8, stream=stream(55),
    )
    assert loose.reset_count == 0
    assert np.array_equal(plain.thetas, loose.thetas)


def test_reprojection_with_zero_eps_always_resets():
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5[:2])
    sched = StepSchedule(gamma0=0.1, offset=10.0)
    run = msa_run_reprojected(
        m, obs, 2, np.array([1.0]), sched,
        eps_schedule=lambda n: 0.0,
        compact_sets=None,
        n_iters=25, n_particles=8, stream=stream(56),
    )
    assert run.reset_count == 25
    assert np.all(run.thetas == 1.0)


def test_reprojection_resets_die_out():
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5)
    sched = StepSchedule(gamma0=0.1, offset=10.0)
    n_iters = 10**4
    run = msa_run_reprojected(
        m, obs, 3, np.array([1.0]), sched,
        eps_schedule=lambda n: 10.0 * np.sqrt(sched.gamma(n)),
        compact_sets=lambda n: (
            np.array([1.0 - 0.2 * (1.0 + n) ** 0.2]),
            np.array([1.0 + 0.2 * (1.0 + n) ** 0.2]),
        ),
        n_iters=n_iters, n_particles=25, stream=stream(57),
    )
    hits = np.where(np.all(run.thetas[1:] == 1.0, axis=1))[0] + 1
    assert len(hits) == run.reset_count  # resets are exactly the theta0 returns
    assert np.all(np.isfinite(run.thetas))
    assert run.reset_count < n_iters // 10
    assert not np.any(hits > n_iters // 2)


def test_tail_spread_shrinks_with_more_iterations():
    # start near the optimum so the tail reflects stationary noise rather
    # than leftover transit from theta0
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5)
    sched = StepSchedule(gamma0=0.15, offset=10.0)
    reps = 24

    def tail_means(n_iters, salt):
        out = np.empty(reps)
        for r in range(reps):
            run = msa_run(m, obs, 3, np.array([0.6]), sched, n_iters, 25, stream(58, salt, r))
            tail = run.thetas[-(n_iters // 5):, 0]
            out[r] = tail.mean()
        return out

    sd_short = tail_means(500, 0).std(ddof=1)
    sd_long = tail_means(2000, 1).std(ddof=1)
    assert sd_long / sd_short < 0.75


def test_coupled_marginal_matches_single_level():
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5[:2])
    sched = StepSchedule(gamma0=0.1, offset=10.0)
    reps, n_iters = 1000, 10
    solo = np.empty(reps)
    fine = np.empty(reps)
    for r in range(reps):
        solo[r] = msa_run(m, obs, 2, np.array([1.0]), sched, n_iters, 8, stream(59, r)).final[0]
        fine[r] = msa_run_coupled(m, obs, 2, np.array([1.0]), sched, n_iters, 8, stream(60, r))[
            0
        ].final[0]
    assert ks_2samp(solo, fine).pvalue > 0.001


def test_coupled_trajectories_tighten_with_level():
    m = ou_model(x0=1.0)
    obs = _unit_obs(_Y5)
    sched = StepSchedule(gamma0=0.1, offset=10.0)
    reps, n_iters = 40, 200
    gaps = []
    for l in range(3, 7):
        g = np.empty(reps)
        for r in range(reps):
            run_f, run_c = msa_run_coupled(
                m, obs, l, np.array([1.0]), sched, n_iters, 10, stream(61, l, r)
            )
            g[r] = abs(run_f.final[0] - run_c.final[0])
        gaps.append(g.mean())
    assert all(b < a for a, b in zip(gaps, gaps[1:])), gaps
