import numpy as np
import pytest

from ssdgp_kit import jet as dm
from ssdgp_kit.discretise import TransitionPair, euler_maruyama, exact_linear, simulate
from ssdgp_kit.filtering import (
    MeasurementModel,
    TimeSeries,
    build_grid,
    gaussian_filter,
    gaussian_smoother,
    kalman_filter,
    make_rule,
    rts_smoother,
)
from ssdgp_kit.sde import LinearSdeModel, coordinated_turn_3d, duffing_van_der_pol
from ssdgp_kit.ssgp import MaternParams, batch_gp_posterior, matern_gram, matern_ssm
from ssdgp_kit.tme import tme_discretise


def _toy(T=60, seed=0):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 5, T))
    return TimeSeries(t, np.sin(t) + 0.1 * rng.standard_normal(T))


def _linear_pair(mod):
    LL = np.outer(mod.B, mod.B)

    def moments(x, dt):
        F, Q = exact_linear(mod.A, LL, dt)
        return F @ x, np.repeat(Q[:, :, None], x.shape[1], axis=2)

    return TransitionPair(moments, mod.dim, "linear", jacobian=lambda x, dt: exact_linear(mod.A, LL, dt)[0])


# -- quadrature ----------------------------------------------------------------

def test_gh3_moments():
    r = make_rule("gh3", 1)
    for k, want in enumerate([1, 0, 1, 0, 3, 0]):
        assert r.integrate(lambda x: x[0] ** k) == pytest.approx(want, abs=1e-12)


def test_cubature_nodes_and_weights():
    r = make_rule("cubature", 2)
    assert r.nodes.shape == (4, 2)
    np.testing.assert_allclose(r.wm, 0.25)


@pytest.mark.parametrize("family", ["gh3", "cubature", "unscented"])
def test_rules_integrate_one(family):
    assert make_rule(family, 3).integrate(lambda x: np.ones(x.shape[1])) == pytest.approx(1.0)


def test_unknown_rule():
    with pytest.raises(ValueError):
        make_rule("simpson", 2)


def test_build_grid_with_substeps():
    grid, idx = build_grid(np.array([1.0, 2.0]), t0=0.0, substeps=2)
    np.testing.assert_allclose(grid, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert list(idx) == [-1, -1, 0, -1, 1]


# -- Kalman --------------------------------------------------------------------

def test_perfect_observation():
    mod = LinearSdeModel(np.zeros((1, 1)), np.ones((1, 1)), np.zeros(1), np.eye(1))
    data = TimeSeries(np.arange(1.0, 6.0), np.array([0.3, -0.1, 0.8, 0.2, 0.0]))
    tr = kalman_filter(mod, MeasurementModel(H=[[1.0]], noise=0.0), data)
    np.testing.assert_allclose(tr.m_filt[:, 0], data.y[:, 0], atol=1e-12)
    assert np.max(np.abs(tr.P_filt)) < 1e-12


def test_prediction_only_track_is_prior():
    m = matern_ssm(MaternParams(1.5, 0.5, 1.2))
    data = TimeSeries(np.linspace(0, 3, 7), np.full(7, np.nan))
    tr = kalman_filter(m.linear_model(), MeasurementModel(H=m.H, noise=0.1), data)
    np.testing.assert_allclose(tr.m_filt, 0.0, atol=1e-14)
    np.testing.assert_allclose(tr.P_filt, np.broadcast_to(m.P0, tr.P_filt.shape), atol=1e-10)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_kf_rts_matches_batch(nu):
    data = _toy(100)
    p = MaternParams(nu, 0.7, 1.2)
    m = matern_ssm(p)
    tr = rts_smoother(kalman_filter(m.linear_model(), MeasurementModel(H=m.H, noise=0.01), data))
    mu, V = batch_gp_posterior(matern_gram(data.t, p), 0.01, data.y[:, 0])
    assert np.max(np.abs(tr.m_smooth[:, 0] - mu)) < 1e-6
    assert np.max(np.abs(tr.P_smooth[:, 0, 0] - np.diag(V))) < 1e-6
    assert np.all(tr.P_smooth[:, 0, 0] <= tr.P_filt[:, 0, 0] + 1e-12)


def test_single_measurement_smoother_is_filter():
    m = matern_ssm(MaternParams(1.5, 0.7, 1.2))
    data = TimeSeries([0.5], [0.4])
    tr = rts_smoother(kalman_filter(m.linear_model(), MeasurementModel(H=m.H, noise=0.01), data))
    np.testing.assert_allclose(tr.m_smooth, tr.m_filt)
    tr2 = gaussian_smoother(gaussian_filter(_linear_pair(m), MeasurementModel(H=m.H, noise=0.01), data,
                                            "gh3", m0=np.zeros(2), P0=m.P0))
    np.testing.assert_allclose(tr2.m_smooth, tr2.m_filt)


# -- Gaussian filters ----------------------------------------------------------

@pytest.mark.parametrize("rule", ["gh3", "cubature", "unscented", "taylor"])
def test_gaussian_filter_reduces_to_kalman(rule):
    data = _toy(50, seed=1)
    m = matern_ssm(MaternParams(1.5, 0.7, 1.2))
    meas = MeasurementModel(H=m.H, noise=0.01)
    kf = rts_smoother(kalman_filter(m.linear_model(), meas, data))
    gf = gaussian_smoother(gaussian_filter(_linear_pair(m), meas, data, rule, m0=np.zeros(2), P0=m.P0))
    np.testing.assert_allclose(gf.m_filt, kf.m_filt, atol=1e-10)
    np.testing.assert_allclose(gf.P_filt, kf.P_filt, atol=1e-10)
    np.testing.assert_allclose(gf.m_smooth, kf.m_smooth, atol=1e-10)
    assert gf.loglik == pytest.approx(kf.loglik, abs=1e-8)


def test_duffing_tme2_runs():
    model = duffing_van_der_pol(2.0)
    dt, n = 0.01, 1000
    grid = np.arange(n + 1) * dt
    x = simulate(model, tme_discretise(model, 2), [0.5, 0.0], grid, seed=0).states[0]
    y = x[1:, 0] + np.sqrt(0.1) * np.random.default_rng(1).standard_normal(n)
    tr = gaussian_filter(tme_discretise(model, 2), MeasurementModel(H=[[1.0, 0.0]], noise=0.1),
                         TimeSeries(grid[1:], y), "gh3", m0=[0.5, 0.0], P0=0.1 * np.eye(2), t0=0.0)
    assert np.all(np.isfinite(tr.m_filt))
    assert np.sqrt(np.mean((tr.m_filt[1:, 0] - x[1:, 0]) ** 2)) < 0.3


def _radar(x):
    px, py, pz = x[0], x[2], x[4]
    rng = dm.sqrt(px * px + py * py + pz * pz)
    return [rng, dm.arctan(py / px), dm.arctan(pz / dm.sqrt(px * px + py * py))]


def test_coordinated_turn_smoother_improves():
    model = coordinated_turn_3d(q_vel=0.5, q_turn=0.02)
    pair = tme_discretise(model, 2)
    R = np.diag([0.5**2, 0.01**2, 0.01**2])
    meas = MeasurementModel(h=lambda x, k: np.array(_radar(x)), noise=R, dim_y=3)
    x0 = np.array([50.0, 1.0, 40.0, 2.0, 10.0, 0.5, 0.1])
    dt, n = 0.5, 20
    grid = np.arange(n + 1) * dt
    fine = np.arange(10 * n + 1) * dt / 10
    wins = 0
    for seed in range(10):
        x = simulate(model, euler_maruyama(model), x0, fine, seed=seed).states[0, ::10]
        rng = np.random.default_rng([seed, 7])
        y = np.array(_radar(x[1:].T)).T + rng.standard_normal((n, 3)) @ np.sqrt(R)
        tr = gaussian_filter(pair, meas, TimeSeries(grid[1:], y), "cubature", m0=x0, P0=np.eye(7) * 0.1, t0=0.0)
        tr = gaussian_smoother(tr)
        pos = [0, 2, 4]
        ef = np.sqrt(np.mean((tr.m_filt[1:, pos] - x[1:, pos]) ** 2))
        es = np.sqrt(np.mean((tr.m_smooth[1:, pos] - x[1:, pos]) ** 2))
        wins += es < ef
    assert wins == 10
