"""The forecaster: value lift, per-channel transformer, graph blocks, per-node decoder.

All inputs may carry a leading batch axis: ``history`` is ``(L, D)`` or
``(B, L, D)``, ``A_bar`` is ``(D, D)`` or ``(B, D, D)``, and the forecast
comes back as ``(H, D)`` or ``(B, H, D)`` accordingly.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diff_engine as de
from .diff_engine import Tensor

INIT_KAPPA = 0.2
INIT_GAMMA = 0.2


def inverse_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class ModelConfig:
    L: int
    H: int
    D: int
    d: int = 16
    n_heads: int = 2
    n_enc_layers: int = 1
    graph_widths: List[int] = field(default_factory=lambda: [16, 16])
    dec_widths: List[int] = field(default_factory=lambda: [32])
    seed: int = 0

    def __post_init__(self):
        self.graph_widths = list(self.graph_widths)
        self.dec_widths = list(self.dec_widths)
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        for name in ("L", "H", "D", "d", "n_heads", "n_enc_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.graph_widths or min(self.graph_widths) < 1 or (self.dec_widths and min(self.dec_widths) < 1):
            raise ValueError("graph and decoder widths must be >= 1 and graph_widths non-empty")

    @classmethod
    def paper_preset(cls, L: int, H: int, D: int, seed: int = 0) -> "ModelConfig":
        """Width 64, 4 attention heads, 2 encoder layers."""
        return cls(L=L, H=H, D=D, d=64, n_heads=4, n_enc_layers=2, graph_widths=[64, 64], dec_widths=[128], seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


def graph_block(Z: np.ndarray, A_bar: np.ndarray, W_self: np.ndarray, U_nei: np.ndarray, activation: bool = True) -> np.ndarray:
    """Plain-numpy ``ReLU(Z W_self + A_bar Z U_nei)`` used by the stability checks."""
    out = Z @ W_self + A_bar @ Z @ U_nei
    return np.maximum(out, 0.0) if activation else out


class PrismModel:
    """Parameters live in ``self.params`` (insertion-ordered, name -> Tensor)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(config.seed)
        c = config

        self._linear(rng, "lift", 1, c.d)
        self._add("pe", rng.uniform(-1.0, 1.0, size=(c.L, c.d)) / math.sqrt(c.d))
        for k in range(c.n_enc_layers):
            p = f"enc{k}"
            self._layernorm(f"{p}.ln1", c.d)
            for w in ("q", "k", "v"):
                self._linear(rng, f"{p}.w{w}", c.d, c.d, bias=False)
            self._linear(rng, f"{p}.wo", c.d, c.d)
            self._layernorm(f"{p}.ln2", c.d)
            self._linear(rng, f"{p}.ff1", c.d, 2 * c.d)
            self._linear(rng, f"{p}.ff2", 2 * c.d, c.d)
        self._layernorm("enc.lnf", c.d)

        width = c.d
        for ell, g in enumerate(c.graph_widths):
            bound = 1.0 / math.sqrt(width)
            self._add(f"graph{ell}.w_self", rng.uniform(-bound, bound, size=(width, g)))
            self._add(f"graph{ell}.u_nei", rng.uniform(-bound, bound, size=(width, g)))
            width = g
        for k, w in enumerate(c.dec_widths):
            self._linear(rng, f"dec{k}", width, w)
            width = w
        self._linear(rng, "dec.out", width, c.H)

        self._add("raw_kappa", np.array(inverse_softplus(INIT_KAPPA)))
        self._add("raw_gamma", np.array(inverse_softplus(INIT_GAMMA)))

    # -- construction helpers -------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _linear(self, rng, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self._add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        if bias:
            self._add(f"{name}.b", np.zeros(fan_out))

    def _layernorm(self, name: str, width: int) -> None:
        self._add(f"{name}.g", np.ones(width))
        self._add(f"{name}.b", np.zeros(width))

    def _lin(self, x: Tensor, name: str) -> Tensor:
        y = de.matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return y if b is None else de.add(y, b)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return de.add(de.mul(de.layernorm_rowwise(x), self.params[f"{name}.g"]), self.params[f"{name}.b"])

    # -- learnable physics gains ------------------------------------------
    def kappa(self) -> Tensor:
        return de.softplus(self.params["raw_kappa"])

    def gamma(self) -> Tensor:
        return de.softplus(self.params["raw_gamma"])

    # -- forward pieces ---------------------------------------------------
    def lift_and_pe(self, history) -> Tensor:
        """``(..., L, D)`` history -> ``(..., D, L, d)`` lifted sequences."""
        hist = np.asarray(history.data if isinstance(history, Tensor) else history, dtype=np.float64)
        c = self.config
        if hist.shape[-2:] != (c.L, c.D):
            raise de.ShapeError(f"lift_and_pe: history shape {hist.shape} does not end in (L, D)=({c.L}, {c.D})")
        x = history if isinstance(history, Tensor) else Tensor(hist)
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
        x = de.reshape(de.transpose(x, axes), hist.shape[:-2] + (c.D, c.L, 1))
        return de.add(self._lin(x, "lift"), self.params["pe"])

    def _attention(self, x: Tensor, p: str, last_only: bool) -> Tensor:
        c = self.config
        lead = x.shape[:-2]
        L, h = x.shape[-2], c.n_heads
        dh = c.d // h
        nl = len(lead)
        split = lambda t, n: de.transpose(  # noqa: E731 - (..., n, d) -> (..., h, n, dh)
            de.reshape(t, lead + (n, h, dh)), list(range(nl)) + [nl + 1, nl, nl + 2]
        )
        xq = de.slice_(x, (Ellipsis, slice(L - 1, L), slice(None))) if last_only else x
        nq = xq.shape[-2]
        q = split(de.matmul(xq, self.params[f"{p}.wq.w"]), nq)
        k = split(de.matmul(x, self.params[f"{p}.wk.w"]), L)
        v = split(de.matmul(x, self.params[f"{p}.wv.w"]), L)
        scores = de.scale(de.matmul(q, de.transpose(k)), 1.0 / math.sqrt(dh))
        att = de.matmul(de.softmax_rowwise(scores), v)
        merged = de.reshape(de.transpose(att, list(range(nl)) + [nl + 1, nl, nl + 2]), lead + (nq, c.d))
        return self._lin(merged, f"{p}.wo")

    def temporal_encode(self, H0: Tensor) -> Tensor:
        """``(..., D, L, d)`` -> ``(..., D, d)``: pre-LN transformer, last position kept.

        The final layer only evaluates the last query position, which is all
        the retained output depends on.
        """
        c = self.config
        x = H0
        for k in range(c.n_enc_layers):
            p = f"enc{k}"
            last = k == c.n_enc_layers - 1
            att = self._attention(self._ln(x, f"{p}.ln1"), p, last_only=last)
            if last:
                x = de.slice_(x, (Ellipsis, slice(x.shape[-2] - 1, x.shape[-2]), slice(None)))
            x = de.add(x, att)
            ff = self._lin(de.relu(self._lin(self._ln(x, f"{p}.ln2"), f"{p}.ff1")), f"{p}.ff2")
            x = de.add(x, ff)
        z = self._ln(x, "enc.lnf")
        return de.reshape(z, z.shape[:-2] + (c.d,))

    def graph_encode(self, Z: Tensor, A_bar) -> Tensor:
        A = A_bar if isinstance(A_bar, Tensor) else Tensor(A_bar)
        Hl = Z
        for ell in range(len(self.config.graph_widths)):
            W = self.params[f"graph{ell}.w_self"]
            U = self.params[f"graph{ell}.u_nei"]
            if Hl.shape[-1] != W.shape[0]:
                raise de.ShapeError(f"graph_encode: layer {ell} expects width {W.shape[0]}, got {Hl.shape[-1]}")
            Hl = de.relu(de.add(de.matmul(Hl, W), de.matmul(de.matmul(A, Hl), U)))
        return Hl

    def decode(self, Hg: Tensor) -> Tensor:
        """Shared per-node MLP; ``(..., D, g)`` -> ``(..., H, D)``."""
        x = Hg
        for k in range(len(self.config.dec_widths)):
            x = de.relu(self._lin(x, f"dec{k}"))
        return de.transpose(self._lin(x, "dec.out"))

    def forward(self, history, A_bar) -> Tensor:
        return self.decode(self.graph_encode(self.temporal_encode(self.lift_and_pe(history)), A_bar))

    __call__ = forward

    def predict(self, history, A_bar) -> np.ndarray:
        return self.forward(history, A_bar).data.copy()

    # -- state ------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise de.ShapeError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def graph_weights(self):
        return [
            (self.params[f"graph{ell}.w_self"].data, self.params[f"graph{ell}.u_nei"].data)
            for ell in range(len(self.config.graph_widths))
        ]

    def n_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))
