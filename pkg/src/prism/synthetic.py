"""Small synthetic datasets with known structure, for tests and desk-scale experiments."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data_store import Dataset, DataError

KINDS = ("coupled_rd", "clustered_sines", "shifted_pairs")

RD_KAPPA = 0.3
RD_GAMMA = 0.05


def ring_operator(D: int) -> np.ndarray:
    """Normalised ring adjacency; every node has two neighbours so it equals ``(A + I) / 3``."""
    A = np.zeros((D, D))
    idx = np.arange(D)
    A[idx, (idx + 1) % D] = 1.0
    A[(idx + 1) % D, idx] = 1.0
    deg = A.sum(axis=1) + 1.0
    s = 1.0 / np.sqrt(deg)
    return s[:, None] * (A + np.eye(D)) * s[None, :]


def rd_map(D: int, kappa: float = RD_KAPPA, gamma: float = RD_GAMMA) -> np.ndarray:
    return (1.0 - gamma - kappa) * np.eye(D) + kappa * ring_operator(D)


def coupled_rd(
    D: int,
    T: int,
    rng: np.random.Generator,
    noise: float = 0.1,
    kappa: float = RD_KAPPA,
    gamma: float = RD_GAMMA,
    spike_rate: float = 0.0,
    spike_scale: float = 3.0,
    burn_in: int = 200,
) -> np.ndarray:
    """``y <- M y + noise`` on a ring; spikes (if any) are added to the observations only."""
    M = rd_map(D, kappa, gamma)
    y = rng.standard_normal(D)
    out = np.empty((T, D))
    for s in range(burn_in + T):
        y = M @ y + noise * rng.standard_normal(D)
        if s >= burn_in:
            out[s - burn_in] = y
    if spike_rate > 0:
        hit = rng.random((T, D)) < spike_rate
        sign = rng.choice([-1.0, 1.0], size=(T, D))
        out = out + hit * sign * spike_scale * out.std(axis=0)
    return out


def clustered_sines(
    D: int,
    T: int,
    rng: np.random.Generator,
    periods=(12.0, 16.0),
    noise: float = 0.1,
) -> np.ndarray:
    """Two blocks (first and second half of the channels), each a noisy copy of its own sinusoid."""
    t = np.arange(T)
    out = np.empty((T, D))
    split = D // 2
    for c in range(D):
        k = 0 if c < split else 1
        base = np.sin(2 * np.pi * t / periods[k] + (0.3 if k else 0.0))
        amp = rng.uniform(0.8, 1.2)
        out[:, c] = amp * base + noise * rng.standard_normal(T)
    return out


def smooth_walk(T: int, rng: np.random.Generator, width: int = 9) -> np.ndarray:
    """Moving-averaged random walk: smooth and aperiodic, so lag peaks are unambiguous."""
    steps = rng.standard_normal(T + width - 1)
    walk = np.cumsum(steps)
    walk = np.convolve(walk, np.ones(width) / width, mode="valid")
    walk = walk - walk.mean()
    return walk / walk.std()


def shifted_pairs(D: int, T: int, rng: np.random.Generator, lag: int = 3, noise: float = 0.05) -> np.ndarray:
    """Channel ``2i+1`` trails channel ``2i`` by ``lag`` rows (``x_{2i+1}(t) = x_{2i}(t - lag) + noise``).

    An odd last channel is an independent walk.
    """
    if lag < 0:
        raise ValueError("lag must be >= 0")
    out = np.empty((T, D))
    for i in range(0, D - 1, 2):
        # use a differenced walk so the lagged autocorrelation falls off quickly
        base = np.diff(smooth_walk(T + lag + 1, rng, width=5))
        base = base / base.std()
        out[:, i] = base[lag:] + noise * rng.standard_normal(T)
        out[:, i + 1] = base[: T] + noise * rng.standard_normal(T)
    if D % 2:
        out[:, -1] = smooth_walk(T, rng)
    return out


def generate_synthetic(
    kind: str,
    D: int,
    T: int,
    seed: int = 0,
    holdout: Optional[int] = None,
    **kwargs,
) -> Dataset:
    """Build a :class:`Dataset` of one of :data:`KINDS`.

    ``holdout`` is the number of trailing test rows (default ``T // 10``).
    Extra keyword arguments go to the generator (noise level, spike rate, lag, ...).
    """
    if kind not in KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; choose one of {', '.join(KINDS)}")
    if D < 2 or T < 200:
        raise DataError(f"need D >= 2 and T >= 200, got D={D}, T={T}")
    rng = np.random.default_rng(seed)
    gen = {"coupled_rd": coupled_rd, "clustered_sines": clustered_sines, "shifted_pairs": shifted_pairs}[kind]
    values = gen(D, T, rng, **kwargs)
    return Dataset.from_array(values, holdout if holdout is not None else T // 10)
