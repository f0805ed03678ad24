"""Thresholded correlation graphs and their normalised propagation operator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .data_store import _jitter_constant_columns

log = logging.getLogger(__name__)

PSD_TOL = 1e-8


@dataclass
class GraphParams:
    tau: float = 0.5
    gamma_corr: float = 1.0
    k_min: int = 1
    K: Optional[int] = None

    def cap(self, D: int) -> int:
        """Per-row degree cap; defaults to max(4, ceil(D/4)) clipped to D-1."""
        K = self.K if self.K is not None else max(4, math.ceil(D / 4))
        return int(min(K, D - 1))

    def to_dict(self) -> dict:
        return {"tau": self.tau, "gamma_corr": self.gamma_corr, "k_min": self.k_min, "K": self.K}


@dataclass
class DynamicGraph:
    C: np.ndarray
    A: np.ndarray
    A_bar: np.ndarray
    window_end: int
    params: GraphParams = field(default_factory=GraphParams)


def windowed_correlation(X_window: np.ndarray, jitter_seed: int = 0) -> np.ndarray:
    """Pearson correlation matrix of the columns of a W x D window."""
    X = np.asarray(X_window, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"windowed_correlation: need a W x D window with W >= 2, got shape {X.shape}")
    X = _jitter_constant_columns(X, jitter_seed)
    C, _ = kernels.window_correlations(np.ascontiguousarray(X), np.array([X.shape[0] - 1]), X.shape[0])
    return C[0]


def threshold_weight(C: np.ndarray, tau: float, gamma_corr: float = 1.0) -> np.ndarray:
    """Keep ``|C|**gamma_corr`` where ``|C| > tau``; zero diagonal; symmetrise by max."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    if gamma_corr <= 0.0:
        raise ValueError(f"gamma_corr must be positive, got {gamma_corr}")
    absC = np.abs(np.asarray(C, dtype=np.float64))
    A = np.where(absC > tau, absC**gamma_corr, 0.0)
    np.fill_diagonal(A, 0.0)
    return np.maximum(A, A.T)


def degree_floor_cap(A: np.ndarray, C: np.ndarray, k_min: int, K: int, gamma_corr: float = 1.0) -> np.ndarray:
    """Raise every row to ``k_min`` neighbours and cut it to ``K``, then symmetrise.

    Rows below the floor gain their strongest-``|C|`` absent partners (weight
    ``|C|**gamma_corr``); rows above the cap keep their ``K`` heaviest edges.
    Ties go to the smaller column index.  Both decisions look at the input row
    only; the final max-symmetrisation can push a degree above ``K``.
    """
    A = np.asarray(A, dtype=np.float64)
    D = A.shape[0]
    if not 1 <= k_min <= K <= D - 1:
        raise ValueError(f"need 1 <= k_min <= K <= D-1, got k_min={k_min}, K={K}, D={D}")
    B = kernels.floor_cap_rows(np.ascontiguousarray(A), np.ascontiguousarray(C, dtype=np.float64), int(k_min), int(K), float(gamma_corr))
    return np.maximum(B, B.T)


def normalize(A: np.ndarray) -> np.ndarray:
    """``D^{-1/2} (A + I) D^{-1/2}`` with ``D = diag((A + I) 1)``."""
    A = np.asarray(A, dtype=np.float64)
    Ai = A + np.eye(A.shape[0])
    inv_sqrt = 1.0 / np.sqrt(Ai.sum(axis=1))
    out = inv_sqrt[:, None] * Ai * inv_sqrt[None, :]
    # exact symmetry despite rounding in the two products
    return 0.5 * (out + out.T)


@dataclass
class PowerResult:
    value: float
    iterations: int
    residual: float
    converged: bool


def extreme_eigenvalues(S: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000, seed: int = 0):
    """Largest and smallest eigenvalue of symmetric ``S`` by shifted power iteration.

    Shifting by the Gershgorin radius makes ``S + cI`` positive semidefinite,
    so its dominant eigenvalue is ``lambda_max + c``; ``-S`` gives the other end.
    """
    S = np.ascontiguousarray(S, dtype=np.float64)
    c = float(np.abs(S).sum(axis=1).max()) if S.size else 0.0
    x0 = np.random.default_rng(seed).normal(size=S.shape[0])
    hi = kernels.sym_power_iteration(S, c, x0, tol, max_iter)
    lo = kernels.sym_power_iteration(-S, c, x0, tol, max_iter)
    tol_hit = lambda r: r[3] <= tol * max(1.0, abs(r[0] + c))  # noqa: E731
    return (
        PowerResult(float(hi[0]), int(hi[2]), float(hi[3]), tol_hit(hi)),
        PowerResult(float(-lo[0]), int(lo[2]), float(lo[3]), tol_hit(lo)),
    )


def spectral_radius(S: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Largest absolute eigenvalue of a symmetric matrix."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=0.0, atol=1e-12):
        raise ValueError("spectral_radius: input must be a symmetric square matrix")
    hi, lo = extreme_eigenvalues(S, tol, max_iter)
    if not (hi.converged and lo.converged):
        log.warning(
            "spectral_radius: power iteration stopped at residual %.3g / %.3g before tol %.1g",
            hi.residual, lo.residual, tol,
        )
    return max(abs(hi.value), abs(lo.value))


def build_graph(X_window: np.ndarray, params: GraphParams, window_end: int = -1) -> DynamicGraph:
    C = windowed_correlation(X_window)
    return graph_from_correlation(C, params, window_end)


def graph_from_correlation(C: np.ndarray, params: GraphParams, window_end: int = -1) -> DynamicGraph:
    D = C.shape[0]
    A = threshold_weight(C, params.tau, params.gamma_corr)
    if D >= 2:
        K = params.cap(D)
        A = degree_floor_cap(A, C, min(params.k_min, K), K, params.gamma_corr)
    return DynamicGraph(C=C, A=A, A_bar=normalize(A), window_end=int(window_end), params=params)


def build_graph_sequence(X: np.ndarray, ends: np.ndarray, W: int, params: GraphParams):
    """Raw and normalised adjacencies for the windows ending at each row in ``ends``.

    Returns ``(A, A_bar)`` stacked along a leading window axis.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.int64)
    if ends.size and (ends.min() < W - 1 or ends.max() >= X.shape[0]):
        raise ValueError(f"window ends must lie in [{W - 1}, {X.shape[0] - 1}]")
    Cs, degenerate = kernels.window_correlations(X, ends, W)
    D = X.shape[1]
    A = np.empty((len(ends), D, D))
    A_bar = np.empty_like(A)
    for b, t in enumerate(ends):
        C = windowed_correlation(X[t - W + 1 : t + 1]) if degenerate[b] else Cs[b]
        g = graph_from_correlation(C, params, int(t))
        A[b], A_bar[b] = g.A, g.A_bar
    if ends.size:
        lam_min = np.linalg.eigvalsh(A_bar)[:, 0]
        bad = lam_min < -PSD_TOL
        if bad.any():
            log.warning(
                "%d of %d graphs have A_bar with a negative eigenvalue (worst %.3g)",
                int(bad.sum()), ends.size, float(lam_min.min()),
            )
    return A, A_bar


def psd_violation(A_bar: np.ndarray) -> float:
    """Most negative eigenvalue of ``A_bar`` (0 when it is PSD)."""
    return min(0.0, float(np.linalg.eigvalsh(A_bar)[0]))


# ------------------------------------------------------------------ export


def export_adjacency(graph: DynamicGraph, path) -> None:
    payload = {
        "A": graph.A.tolist(),
        "A_bar": graph.A_bar.tolist(),
        "C": graph.C.tolist(),
        "params": graph.params.to_dict(),
        "window_end": int(graph.window_end),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def import_adjacency(path) -> DynamicGraph:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    A = np.asarray(obj["A"], dtype=np.float64)
    return DynamicGraph(
        C=np.asarray(obj.get("C", np.eye(A.shape[0])), dtype=np.float64),
        A=A,
        A_bar=np.asarray(obj["A_bar"], dtype=np.float64),
        window_end=int(obj.get("window_end", -1)),
        params=GraphParams(**obj.get("params", {})),
    )


def export_adjacency_csv(graph: DynamicGraph, path) -> None:
    np.savetxt(path, graph.A, delimiter=",", fmt="%.17g")
