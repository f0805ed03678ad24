"""The six training-objective terms as differentiable tape operations.

Forecasts are ``(H, D)`` or a batch ``(B, H, D)``; batched terms are the
mean of the per-window values.  Hinges ``[x]_+`` are ReLUs, so the
subgradient at a kink is 0.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from . import diff_engine as de
from .diff_engine import Tensor

Scalar = Union[Tensor, float]

TERMS = ("range", "vel", "acc", "pde", "cohere")


class EmptyEdgeSetWarning(UserWarning):
    """Lag coherence was asked for on a graph without usable edges."""


@dataclass
class LossWeights:
    lambda_range: float = 1.0
    lambda_vel: float = 1.0
    lambda_acc: float = 1.0
    lambda_pde: float = 1.0
    lambda_cohere: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0, got {v}")

    def of(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")


@dataclass
class LossBreakdown:
    data: float
    range: float
    vel: float
    acc: float
    pde: float
    cohere: float
    total: float
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in ("data",) + TERMS + ("total",)}

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def _batched(Y: Tensor) -> Tensor:
    Y = de.as_tensor(Y)
    if Y.ndim == 2:
        return de.reshape(Y, (1,) + Y.shape)
    if Y.ndim != 3:
        raise de.ShapeError(f"forecast must be (H, D) or (B, H, D), got {Y.shape}")
    return Y


def data_loss(Y_hat, Y) -> Tensor:
    Y_hat, Y = de.as_tensor(Y_hat), de.as_tensor(Y)
    if Y_hat.shape != Y.shape:
        raise de.ShapeError(f"data_loss: forecast shape {Y_hat.shape} != target shape {Y.shape}")
    return de.mean(de.square(de.sub(Y_hat, Y)))


def range_loss(Y_hat, m: np.ndarray, M: np.ndarray) -> Tensor:
    Y_hat = de.as_tensor(Y_hat)
    below = de.relu(de.sub(np.asarray(m, dtype=np.float64), Y_hat))
    above = de.relu(de.sub(Y_hat, np.asarray(M, dtype=np.float64)))
    return de.mean(de.add(de.square(below), de.square(above)))


def _hinge_abs_sq(x: Tensor, cap: np.ndarray) -> Tensor:
    # [|x| - cap]_+^2 == relu(x - cap)^2 + relu(-x - cap)^2 for cap >= 0
    cap = np.asarray(cap, dtype=np.float64)
    if np.any(cap < 0):
        raise ValueError("kinematic caps must be >= 0")
    return de.add(de.square(de.relu(de.sub(x, cap))), de.square(de.relu(de.sub(de.scale(x, -1.0), cap))))


def _diff_time(Y: Tensor) -> Tensor:
    H = Y.shape[1]
    return de.sub(de.slice_(Y, (slice(None), slice(1, H))), de.slice_(Y, (slice(None), slice(0, H - 1))))


def velocity_loss(Y_hat, v_max: np.ndarray) -> Tensor:
    Y = _batched(Y_hat)
    if Y.shape[1] < 2:
        raise de.ShapeError("velocity_loss: horizon must be >= 2")
    return de.mean(_hinge_abs_sq(_diff_time(Y), v_max))


def acceleration_loss(Y_hat, a_max: np.ndarray) -> Tensor:
    Y = _batched(Y_hat)
    if Y.shape[1] < 3:
        raise de.ShapeError("acceleration_loss: horizon must be >= 3")
    return de.mean(_hinge_abs_sq(_diff_time(_diff_time(Y)), a_max))


def pde_loss(Y_hat, x_last, A_bar, kappa: Scalar, gamma: Scalar) -> Tensor:
    """Mean squared residual of ``y(s) = y(s-1) + kappa (A_bar - I) y(s-1) - gamma y(s-1)``.

    ``y(0)`` is the last observed row and ``y(s)`` the ``s``-th forecast row.
    """
    Y = _batched(Y_hat)
    B, H, D = Y.shape
    x_last = np.asarray(x_last.data if isinstance(x_last, Tensor) else x_last, dtype=np.float64)
    if x_last.shape[-1] != D:
        raise de.ShapeError(f"pde_loss: x_last has {x_last.shape[-1]} channels, forecast has {D}")
    x_last = x_last.reshape(-1, 1, D)
    A_t = np.swapaxes(np.asarray(A_bar, dtype=np.float64), -1, -2)
    prev = de.concat([np.broadcast_to(x_last, (B, 1, D)), de.slice_(Y, (slice(None), slice(0, H - 1)))], axis=1)
    diffusion = de.sub(de.matmul(prev, A_t), prev)
    R = de.sub(de.sub(Y, prev), de.mul(kappa, diffusion))
    R = de.add(R, de.mul(gamma, prev))
    return de.mean(de.square(R))


def lag_coherence_loss(Y_hat, A, lags: np.ndarray) -> Tensor:
    """Mean over graph edges of the per-step squared gap after lag alignment.

    For an edge ``(i, j)`` with lag ``k = lags[i, j] >= 0`` (``j`` trails
    ``i``) the gap compares ``y_i[0:H-k]`` with ``y_j[k:H]``; negative lags
    mirror this.  Edges with ``|k| >= H`` are left out of both the sum and
    the edge count.  A window without usable edges contributes 0 and raises
    :class:`EmptyEdgeSetWarning`.
    """
    Y = _batched(Y_hat)
    B, H, D = Y.shape
    A = np.asarray(A, dtype=np.float64)
    A = np.broadcast_to(A.reshape((-1, D, D)), (B, D, D))
    lags = np.asarray(lags, dtype=np.int64)
    usable = (np.abs(lags) < H) & ~np.eye(D, dtype=bool)
    edges = (A > 0.0) & usable[None]
    counts = edges.sum(axis=(1, 2))
    if (counts == 0).any():
        warnings.warn(f"lag coherence: {(counts == 0).sum()} window(s) without usable edges", EmptyEdgeSetWarning, stacklevel=2)
    if counts.sum() == 0:
        return Tensor(0.0)
    per_edge = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / B  # (B,)

    total = None
    for k in np.unique(lags[usable & edges.any(axis=0)]):
        I, J = np.nonzero(usable & edges.any(axis=0) & (lags == k))
        a = abs(int(k))
        if k >= 0:
            lead = de.slice_(Y, (slice(None), slice(0, H - a), I))
            trail = de.slice_(Y, (slice(None), slice(a, H), J))
        else:
            lead = de.slice_(Y, (slice(None), slice(a, H), I))
            trail = de.slice_(Y, (slice(None), slice(0, H - a), J))
        gap = de.sum(de.square(de.sub(lead, trail)), axis=1)  # (B, P)
        weight = edges[:, I, J] * per_edge[:, None] / (H - a)
        term = de.sum(de.mul(gap, weight))
        total = term if total is None else de.add(total, term)
    return total


def total_loss(components: Dict[str, Tensor], weights: LossWeights) -> LossBreakdown:
    """``data + sum_k lambda_k * term_k``; missing terms count as 0."""
    obj = de.as_tensor(components["data"])
    values = {"data": obj.item()}
    for term in TERMS:
        t = components.get(term)
        values[term] = 0.0 if t is None else de.as_tensor(t).item()
        lam = weights.of(term)
        if t is not None and lam != 0.0:
            obj = de.add(obj, de.scale(t, lam))
    return LossBreakdown(total=obj.item(), objective=obj, **values)


def window_losses(
    Y_hat: Tensor,
    Y: np.ndarray,
    x_last: np.ndarray,
    A: np.ndarray,
    A_bar: np.ndarray,
    kappa: Scalar,
    gamma: Scalar,
    budgets,
    weights: LossWeights,
) -> LossBreakdown:
    """All six terms for one window (or a batch of windows) and their total.

    Terms whose weight is 0 are still evaluated so logs stay comparable.
    """
    comps = {
        "data": data_loss(Y_hat, Y),
        "range": range_loss(Y_hat, budgets.m, budgets.M),
        "vel": velocity_loss(Y_hat, budgets.v_max),
        "acc": acceleration_loss(Y_hat, budgets.a_max),
        "pde": pde_loss(Y_hat, x_last, A_bar, kappa, gamma),
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyEdgeSetWarning)
        comps["cohere"] = lag_coherence_loss(Y_hat, A, budgets.lags)
    return total_loss(comps, weights)
