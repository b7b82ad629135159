import numpy as np
import pytest

from ssdgp_kit.apps import (
    build_fourier_ssm,
    dare_residual,
    drift_dataset,
    drift_estimate_em,
    drift_estimate_ito15,
    solve_dare,
    spectro_estimate,
)
from ssdgp_kit.datasets import drift_paths, frequency_hopping, two_tone
from ssdgp_kit.discretise import exact_linear
from ssdgp_kit.filtering import TimeSeries
from ssdgp_kit.ssgp import MaternParams

# -- drift ---------------------------------------------------------------------


def test_drift_dataset_noise_and_order():
    d = drift_dataset(np.array([0.3, 0.1, 0.5, 0.2]), b=0.5, dt=0.1)
    assert np.all(np.diff(d.x) > 0)
    np.testing.assert_allclose(d.noise, 0.025)
    np.testing.assert_allclose(d.y[np.argsort(d.x)], d.y)
    # each increment stays attached to its start state
    pairs = dict(zip(np.round(d.x, 12), np.round(d.y, 12)))
    assert pairs[0.3] == pytest.approx(-0.2) and pairs[0.1] == pytest.approx(0.4)


def test_drift_dataset_breaks_ties():
    d = drift_dataset([np.array([1.0, 2.0]), np.array([1.0, 0.0])], b=1.0, dt=0.1)
    assert d.x.size == 2 and 0 < d.x[1] - d.x[0] < 1e-8


def test_drift_dataset_errors():
    with pytest.raises(ValueError):
        drift_dataset(np.array([0.0, 1.0]), b=1.0, dt=0.1)
    with pytest.raises(ValueError):
        drift_dataset(np.array([0.0, 1.0, 2.0]), b=1.0)
    with pytest.raises(ValueError):
        drift_dataset(np.array([0.0, 1.0, 2.0]), b=0.0, dt=0.1)


def test_em_drift_recovers_cubic():
    paths = drift_paths(lambda x: x - x**3, 0.5, 200, 4, 0.1, seed=0, substeps=10)
    d = drift_dataset(paths, 0.5, dt=0.1)
    grid = np.linspace(-1.5, 1.5, 31)
    est = drift_estimate_em(d, MaternParams(1.5, 1.0, 2.0), grid)
    truth = grid - grid**3
    assert np.corrcoef(est.mean, truth)[0, 1] > 0.9
    assert np.all(est.var > 0)


def test_em_drift_default_grid_is_data():
    d = drift_dataset(drift_paths(np.tanh, 1.0, 10, 5, 0.1, seed=1), 1.0, dt=0.1)
    est = drift_estimate_em(d, MaternParams(1.5, 1.0, 1.0))
    np.testing.assert_array_equal(est.x, d.x)


def test_ito15_linear_drift():
    paths = drift_paths(lambda x: -x, 0.3, 300, 5, 0.1, seed=2, substeps=10)
    d = drift_dataset(paths, 0.3, dt=0.1)
    grid = np.linspace(-1.5, 1.5, 21)
    est = drift_estimate_ito15(d, MaternParams(2.5, 2.0, 1.0), grid)
    assert np.sqrt(np.mean((est.mean + grid) ** 2)) < 0.15
    with pytest.raises(ValueError):
        drift_estimate_ito15(d, MaternParams(1.5, 1.0, 1.0))


def test_drift_csv(tmp_path):
    d = drift_dataset(drift_paths(np.tanh, 1.0, 5, 3, 0.1, seed=0), 1.0, dt=0.1)
    est = drift_estimate_em(d, MaternParams(0.5, 1.0, 1.0), [0.0, 0.5])
    est.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x,mean,var"


# -- Riccati -------------------------------------------------------------------

def test_dare_scalar_golden_ratio():
    P = solve_dare(1.0, 1.0, 1.0, 1.0)
    assert P[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-10)


def test_dare_zero_noise_stable():
    P = solve_dare(0.5 * np.eye(2), [[1.0, 0.0]], np.zeros((2, 2)), [[1.0]])
    assert np.max(np.abs(P)) < 1e-12


def test_dare_random_psd():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(4, 4))
    F *= 0.9 / np.max(np.abs(np.linalg.eigvals(F)))
    L = rng.normal(size=(4, 4))
    Q = L @ L.T
    H = rng.normal(size=(1, 4))
    P = solve_dare(F, H, Q, [[0.5]])
    assert np.linalg.eigvalsh(P)[0] > 0
    assert dare_residual(P, F, H, Q, [[0.5]]) < 1e-10


# -- spectro -------------------------------------------------------------------

def test_fourier_ssm_shapes_and_errors():
    ssm = build_fourier_ssm([5.0, 10.0], "matern32", 2.0, 1.0)
    assert ssm.dim == 10 and ssm.gamma == 2
    np.testing.assert_allclose(ssm.H(0.0)[0, [0, 2, 4, 6, 8]], [1, 1, 0, 1, 0])
    for bad in ([], [0.0, 1.0], [2.0, 2.0]):
        with pytest.raises(ValueError):
            build_fourier_ssm(bad)
    with pytest.raises(ValueError):
        build_fourier_ssm([1.0], prior="rbf")


def test_rotated_model_matches_unrotated_dynamics():
    ssm = build_fourier_ssm([3.0], "ou", 5.0, 1.0)
    A, H = ssm.rotated()
    t = 0.137
    z = np.random.default_rng(0).normal(size=(1, ssm.dim))
    x = ssm.unrotate(np.array([t]), z)
    assert (H @ z[0])[0] == pytest.approx((ssm.H(t) @ x[0])[0], abs=1e-12)


def _two_tone(T=512, fs=100.0):
    t = np.arange(T) / fs
    return t, two_tone(t, 10.0, 25.0)


def test_spectro_two_tone_magnitudes():
    t, y = _two_tone()
    freqs = np.arange(5.0, 41.0, 5.0)
    ssm = build_fourier_ssm(freqs, "ou", 10.0, 1.0)
    res = spectro_estimate(ssm, TimeSeries(t, y), 1e-4)
    mag = res.magnitude[100:-100].mean(axis=0)
    assert mag[1] == pytest.approx(1.0, abs=0.05)
    assert mag[4] == pytest.approx(0.5, abs=0.05)
    assert np.max(np.delete(mag, [1, 4])) < 0.05


def test_steady_state_matches_kalman_after_burn_in():
    t, y = _two_tone()
    ssm = build_fourier_ssm(np.arange(5.0, 41.0, 5.0), "ou", 10.0, 1.0)
    kf = spectro_estimate(ssm, TimeSeries(t, y), 1e-4)
    ss = spectro_estimate(ssm, TimeSeries(t, y), 1e-4, mode="steady_state")
    assert np.max(np.abs(kf.magnitude[50:] - ss.magnitude[50:])) < 1e-2
    A, H = ssm.rotated()
    F, Q = exact_linear(A, ssm.LL, 0.01)
    assert dare_residual(ss.P_steady, F, H, Q, [[1e-4]]) < 1e-10
    with pytest.raises(ValueError):
        spectro_estimate(ssm, TimeSeries(np.r_[t[:5], t[6:]], np.r_[y[:5], y[6:]]), 1e-4, mode="steady_state")


def test_frequency_hopping_argmax():
    fs, T = 100.0, 800
    t = np.arange(T) / fs
    freqs = [5.0, 15.0, 30.0, 10.0]
    y, f_true = frequency_hopping(t, freqs, 4)
    grid = np.arange(5.0, 36.0, 5.0)
    res = spectro_estimate(build_fourier_ssm(grid, "ou", 0.2, 1.0), TimeSeries(t, y), 1e-3)
    picked = grid[np.argmax(res.magnitude, axis=1)]
    assert np.mean(picked == f_true) >= 0.9


def test_vanishing_noise_interpolates():
    t, y = _two_tone(128)
    ssm = build_fourier_ssm([10.0, 25.0], "ou", 10.0, 1.0)
    res = spectro_estimate(ssm, TimeSeries(t, y), 1e-12)
    fit = np.array([(ssm.H(tk) @ m)[0] for tk, m in zip(t, res.filtered)])
    assert np.max(np.abs(fit - y)) < 1e-6


def test_flat_prior_least_squares_limit():
    # with long length scales and a stationary signal the smoother approaches least squares
    t, y = _two_tone(256)
    freqs = np.array([10.0, 25.0])
    ssm = build_fourier_ssm(freqs, "ou", 1e4, 1.0)
    res = spectro_estimate(ssm, TimeSeries(t, y), 1e-2)
    X = np.column_stack([np.ones_like(t)] + [f(2 * np.pi * fr * t) for fr in freqs for f in (np.cos, np.sin)])
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(res.smoothed[0, [0, 1, 2, 3, 4]], coef, atol=1e-2)


def test_spectro_csv(tmp_path):
    t, y = _two_tone(64)
    res = spectro_estimate(build_fourier_ssm([10.0], "ou", 5.0, 1.0), TimeSeries(t, y), 1e-3)
    res.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,f,alpha_mean,beta_mean,magnitude" and len(lines) == 65


def test_resonator_prior():
    ssm = build_fourier_ssm([10.0], "resonator", 2.0, 1.5, resonator_freq=0.5)
    assert ssm.gamma == 2 and ssm.dim == 6
    # stationary covariance of the measured component
    tau = 0.3
    F, _ = exact_linear(ssm.A[:2, :2], ssm.LL[:2, :2], tau)
    k = (F @ ssm.P0[:2, :2])[0, 0]
    assert k == pytest.approx(1.5**2 * np.exp(-tau / 2.0) * np.cos(2 * np.pi * 0.5 * tau), abs=1e-12)
    res = ssm.A[:2, :2] @ ssm.P0[:2, :2] + ssm.P0[:2, :2] @ ssm.A[:2, :2].T + ssm.LL[:2, :2]
    assert np.max(np.abs(res)) < 1e-12
    t, y = _two_tone(256)
    r = spectro_estimate(build_fourier_ssm([10.0, 25.0], "resonator", 10.0, 1.0, 0.0), TimeSeries(t, y), 1e-4)
    np.testing.assert_allclose(r.magnitude[50:-50].mean(axis=0), [1.0, 0.5], atol=0.05)
    with pytest.raises(ValueError):
        build_fourier_ssm([10.0], "resonator")
    with pytest.raises(ValueError):
        build_fourier_ssm([10.0], "ou", resonator_freq=1.0)
