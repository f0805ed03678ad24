"""Numerical certificates for the reaction-diffusion horizon map and the graph blocks.

The horizon map is ``M = (1 - gamma - kappa) I + kappa * A_bar``.  For a
symmetric ``A_bar`` with spectrum in ``[0, 1]`` and ``kappa + gamma < 1`` its
spectral radius is at most ``1 - gamma``.  Everything here computes the
quantities directly rather than trusting those hypotheses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .graph_builder import PSD_TOL


class ConvergenceError(RuntimeError):
    """Power iteration did not reach its tolerance."""


class HypothesisError(ValueError):
    """A map in a sequence violates the assumptions of a bound."""


@dataclass
class HorizonMap:
    M: np.ndarray
    kappa: float
    gamma: float
    A_bar: np.ndarray


@dataclass
class StabilityReport:
    rho_M: float
    bound_1_minus_gamma: float
    sharpened_bound: float
    contractive: bool
    psd_violation: float
    kappa: float
    gamma: float
    lambda_min: float
    lambda_max: float
    psd_ok: bool
    hypotheses_hold: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        rows = [
            ("kappa", f"{self.kappa:.6g}"),
            ("gamma", f"{self.gamma:.6g}"),
            ("eig(A_bar) range", f"[{self.lambda_min:.6g}, {self.lambda_max:.6g}]"),
            ("PSD (tol 1e-8)", "yes" if self.psd_ok else f"NO (min eig {self.psd_violation:.3g})"),
            ("0<k, 0<g, k+g<1", "yes" if self.hypotheses_hold else "no"),
            ("rho(M)", f"{self.rho_M:.12g}"),
            ("bound 1-gamma", f"{self.bound_1_minus_gamma:.12g}"),
            ("sharpened bound", f"{self.sharpened_bound:.12g}"),
            ("contractive", "YES" if self.contractive else "NO"),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)


def _check_symmetric(S: np.ndarray, what: str) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=0.0, atol=1e-12):
        raise ValueError(f"{what} must be a symmetric square matrix")
    return S


def build_horizon_map(A_bar: np.ndarray, kappa: float, gamma: float) -> HorizonMap:
    A_bar = _check_symmetric(A_bar, "A_bar")
    if kappa <= 0 or gamma <= 0:
        raise ValueError("kappa and gamma must be positive")
    M = (1.0 - gamma - kappa) * np.eye(A_bar.shape[0]) + kappa * A_bar
    return HorizonMap(M=M, kappa=float(kappa), gamma=float(gamma), A_bar=A_bar)


def certify_contraction(hmap: HorizonMap) -> StabilityReport:
    lam = np.linalg.eigvalsh(hmap.A_bar)
    mu = np.linalg.eigvalsh(0.5 * (hmap.M + hmap.M.T))
    rho = float(np.abs(mu).max())
    k, g = hmap.kappa, hmap.gamma
    lam_min, lam_max = float(lam[0]), float(lam[-1])
    return StabilityReport(
        rho_M=rho,
        bound_1_minus_gamma=1.0 - g,
        sharpened_bound=1.0 - g - k * (1.0 - lam_max),
        contractive=rho < 1.0,
        psd_violation=min(0.0, lam_min),
        kappa=k,
        gamma=g,
        lambda_min=lam_min,
        lambda_max=lam_max,
        psd_ok=lam_min >= -PSD_TOL,
        hypotheses_hold=0 < k < 1 and 0 < g < 1 and k + g < 1,
    )


def rollout_norms(M: np.ndarray, y0: np.ndarray, steps: int) -> np.ndarray:
    """``||M^s y0||_2`` for ``s = 1..steps``."""
    out = np.empty(steps)
    y = np.asarray(y0, dtype=np.float64)
    for s in range(steps):
        y = M @ y
        out[s] = np.linalg.norm(y)
    return out


@dataclass
class UniformContraction:
    bound: float
    product_norm: float
    holds: bool


def uniform_contraction(maps: Sequence[HorizonMap], gamma_floor: float, slack: float = 1e-9) -> UniformContraction:
    """Check ``||M_{s-1} ... M_0||_2 <= (1 - gamma_floor)^s`` for the given sequence."""
    if not maps:
        raise ValueError("uniform_contraction: empty map sequence")
    for i, m in enumerate(maps):
        if m.gamma < gamma_floor or m.kappa + m.gamma >= 1.0 or m.kappa <= 0:
            raise HypothesisError(
                f"map {i}: need gamma >= {gamma_floor}, kappa > 0 and kappa + gamma < 1 "
                f"(kappa={m.kappa}, gamma={m.gamma})"
            )
    P = np.eye(maps[0].M.shape[0])
    for m in maps:
        P = m.M @ P
    bound = (1.0 - gamma_floor) ** len(maps)
    norm = float(np.linalg.norm(P, 2))
    return UniformContraction(bound=bound, product_norm=norm, holds=norm <= bound + slack)


def perturbation_margin(kappa: float, gamma: float, eps: float) -> Tuple[float, bool]:
    """Bound ``(1 - gamma) + kappa * eps`` on the perturbed map, and ``kappa * eps < gamma``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return (1.0 - gamma) + kappa * eps, kappa * eps < gamma


def operator_norm(G: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value via power iteration on ``G^T G``.

    Raises :class:`ConvergenceError` if the residual tolerance is not met.
    """
    G = np.asarray(G, dtype=np.float64)
    if not np.any(G):
        return 0.0
    GtG = np.ascontiguousarray(G.T @ G)
    x0 = np.random.default_rng(seed).normal(size=GtG.shape[0])
    lam, _, it, res = kernels.sym_power_iteration(GtG, 0.0, x0, tol, max_iter)
    if res > tol * max(1.0, abs(lam)):
        raise ConvergenceError(f"operator_norm: residual {res:.3g} after {it} iterations (tol {tol:g})")
    return float(np.sqrt(max(lam, 0.0)))


def block_lipschitz_bound(W_self: np.ndarray, U_nei: np.ndarray) -> float:
    W_self, U_nei = np.asarray(W_self), np.asarray(U_nei)
    if W_self.shape != U_nei.shape:
        raise ValueError(f"W_self {W_self.shape} and U_nei {U_nei.shape} must match")
    return operator_norm(W_self) + operator_norm(U_nei)


def stack_lipschitz_bound(layers: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    return float(np.prod([block_lipschitz_bound(W, U) for W, U in layers]))


def empirical_lipschitz(
    block: Callable[[np.ndarray], np.ndarray],
    in_shape: Tuple[int, int],
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
    norm: str = "fro",
) -> float:
    """Largest observed ``||f(Z1) - f(Z2)|| / ||Z1 - Z2||`` over random pairs.

    Parameters
    ----------
    norm : {"fro", "spectral"}
        Norm applied to the ``(D, d)`` differences.  The default treats them
        as vectors, which is the setting in which an elementwise 1-Lipschitz
        activation cannot increase distances.  With ``"spectral"`` a ReLU
        block can exceed ``||W_self|| + ||U_nei||``.
    """
    if norm not in ("fro", "spectral"):
        raise ValueError(f"norm must be 'fro' or 'spectral', got {norm!r}")
    order = "fro" if norm == "fro" else 2
    rng = rng if rng is not None else np.random.default_rng(0)
    best = 0.0
    for _ in range(n_samples):
        Z1 = rng.normal(size=in_shape)
        # mix far pairs with near pairs so both regimes of the ReLU are probed
        Z2 = Z1 + rng.normal(size=in_shape) * (10.0 ** rng.uniform(-3, 0))
        den = np.linalg.norm(Z1 - Z2, order)
        if den == 0.0:
            continue
        best = max(best, float(np.linalg.norm(block(Z1) - block(Z2), order) / den))
    return best


def mode_damping(kappa: float, gamma: float, lambdas) -> np.ndarray:
    """Per-mode decay factor ``|1 - gamma - kappa + kappa * lambda|``."""
    return np.abs(1.0 - gamma - kappa + kappa * np.asarray(lambdas, dtype=np.float64))
