"""Synthetic benchmark signals."""
from __future__ import annotations

import numpy as np

from .filtering import TimeSeries

__all__ = [
    "rectangular",
    "composite_sine",
    "two_tone",
    "frequency_hopping",
    "noisy",
    "drift_paths",
]


def rectangular(t):
    """Piecewise-constant signal with two pulses of different heights on ``[0, 1]``."""
    t = np.asarray(t, dtype=float)
    return np.select([(t >= 0.2) & (t < 0.4), (t >= 0.6) & (t < 0.8)], [1.0, 0.6], 0.0)


def composite_sine(t, low: float = 2.0, high: float = 12.0, split: float = 0.5):
    """Slow sinusoid before ``split``, fast one after it."""
    t = np.asarray(t, dtype=float)
    return np.where(t < split, np.sin(2 * np.pi * low * t), np.sin(2 * np.pi * high * t))


def two_tone(t, f1: float, f2: float):
    """``cos(2 pi f1 t) + 0.5 sin(2 pi f2 t)``."""
    t = np.asarray(t, dtype=float)
    return np.cos(2 * np.pi * f1 * t) + 0.5 * np.sin(2 * np.pi * f2 * t)


def frequency_hopping(t, freqs, n_segments: int):
    """Unit cosine whose frequency steps through ``freqs`` over equal segments.

    Returns ``(y, f_true)``.
    """
    t = np.asarray(t, dtype=float)
    seg = np.minimum((n_segments * (t - t[0]) / (np.ptp(t) + 1e-12)).astype(int), n_segments - 1)
    f = np.asarray(freqs, dtype=float)[seg % len(freqs)]
    return np.cos(2 * np.pi * f * t), f


def noisy(fn, T: int, Xi: float, seed: int, t0: float = 0.0, t1: float = 1.0) -> tuple:
    """Uniform grid sample of ``fn`` with Gaussian noise.  Returns ``(series, truth)``."""
    t = np.linspace(t0, t1, T)
    truth = fn(t)
    y = truth + np.sqrt(Xi) * np.random.default_rng(seed).standard_normal(T)
    return TimeSeries(t, y), truth


def drift_paths(drift, b: float, n_paths: int, n_steps: int, dt: float, seed: int,
                substeps: int = 50, x_range=(-2.0, 2.0)):
    """Short scalar paths from uniform random starts, simulated on a fine Euler grid.

    Returns a list of ``n_paths`` arrays of length ``n_steps + 1`` sampled every ``dt``.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(*x_range, n_paths)
    h = dt / substeps
    out = [x.copy()]
    for _ in range(n_steps):
        for _ in range(substeps):
            x = x + drift(x) * h + b * np.sqrt(h) * rng.standard_normal(n_paths)
        out.append(x.copy())
    return list(np.array(out).T)
