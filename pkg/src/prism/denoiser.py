"""DDPM-style noise predictor used as a one-step denoiser for the training prefix.

The network sees one channel segment at a time, so a single model serves
every channel.  Denoising a long series slides half-overlapping segments over
it, projects each back to a clean estimate in one step and blends the
estimates with triangular weights.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import diff_engine as de
from . import kernels
from .diff_engine import Tensor

MIN_ALPHA_BAR = 1e-6


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T_diff(self) -> int:
        return int(self.alpha_bar.size)

    @classmethod
    def linear(cls, T_diff: int = 100, beta_start: Optional[float] = None, beta_end: Optional[float] = None) -> "NoiseSchedule":
        """Linear betas; defaults are the usual 1e-4..0.02 over 1000 steps rescaled to ``T_diff``."""
        scale = 1000.0 / T_diff
        b0 = 1e-4 * scale if beta_start is None else beta_start
        b1 = 0.02 * scale if beta_end is None else beta_end
        betas = np.linspace(b0, b1, T_diff)
        if not (0 < betas.min() and betas.max() < 1):
            raise ValueError("betas must lie in (0, 1)")
        return cls(betas=betas, alpha_bar=np.cumprod(1.0 - betas))

    @classmethod
    def from_alpha_bar(cls, alpha_bar) -> "NoiseSchedule":
        ab = np.asarray(alpha_bar, dtype=np.float64)
        prev = np.concatenate([[1.0], ab[:-1]])
        return cls(betas=1.0 - ab / prev, alpha_bar=ab)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T_diff):
            raise ValueError(f"diffusion step out of range [0, {self.T_diff})")


def time_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserNet:
    """Two-hidden-layer ReLU MLP: (segment, embedded step) -> predicted noise."""

    def __init__(self, seg_len: int, hidden: int = 64, emb_dim: int = 16, seed: int = 0):
        self.seg_len = seg_len
        self.hidden = hidden
        self.emb_dim = emb_dim
        rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        sizes = [(seg_len + emb_dim, hidden), (hidden, hidden), (hidden, seg_len)]
        for name, (fi, fo) in zip(("l0", "l1", "out"), sizes):
            bound = 1.0 / math.sqrt(fi)
            self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(fi, fo)), requires_grad=True, name=f"{name}.w")
            self.params[f"{name}.b"] = Tensor(np.zeros(fo), requires_grad=True, name=f"{name}.b")

    def __call__(self, x_t, t) -> Tensor:
        x = de.as_tensor(x_t)
        if x.shape[-1] != self.seg_len:
            raise de.ShapeError(f"denoiser: segment length {x.shape[-1]} != {self.seg_len}")
        x2 = de.reshape(x, (-1, self.seg_len))
        emb = time_embedding(np.broadcast_to(np.asarray(t), (x2.shape[0],)), self.emb_dim)
        h = de.concat([x2, emb], axis=1)
        p = self.params
        h = de.relu(de.add(de.matmul(h, p["l0.w"]), p["l0.b"]))
        h = de.relu(de.add(de.matmul(h, p["l1.w"]), p["l1.b"]))
        out = de.add(de.matmul(h, p["out.w"]), p["out.b"])
        return de.reshape(out, x.shape)


EpsModel = Callable[[np.ndarray, np.ndarray], Union[Tensor, np.ndarray]]


def _eval(eps_model: EpsModel, x, t) -> np.ndarray:
    out = eps_model(x, t)
    return np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)


def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` (``t`` broadcast over the leading axis)."""
    schedule.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    ab = np.asarray(schedule.alpha_bar[np.asarray(t)], dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def ddpm_loss(
    eps_model: EpsModel,
    schedule: NoiseSchedule,
    x0,
    rng: Optional[np.random.Generator] = None,
    t=None,
    eps=None,
) -> Tensor:
    """Mean squared error between the injected and the predicted noise.

    ``t`` (one step per segment) and ``eps`` are drawn from ``rng`` unless given.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError(f"ddpm_loss: need a non-empty (B, L_seg) batch, got shape {x0.shape}")
    rng = rng if rng is not None else np.random.default_rng()
    if t is None:
        t = rng.integers(0, schedule.T_diff, size=x0.shape[0])
    t = np.broadcast_to(np.asarray(t), (x0.shape[0],))
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, t, eps, schedule)
    pred = eps_model(x_t, t)
    return de.mean(de.square(de.sub(np.asarray(eps, dtype=np.float64), pred)))


def denoise_one_step(eps_model: EpsModel, schedule: NoiseSchedule, x_noisy, t: int) -> np.ndarray:
    """Closed-form inversion of :func:`forward_noise` with the predicted noise."""
    schedule.check_step(t)
    ab = float(schedule.alpha_bar[t])
    if ab < MIN_ALPHA_BAR:
        raise ValueError(f"alpha_bar[{t}]={ab:.3g} is below {MIN_ALPHA_BAR}; the inversion would blow up")
    x = np.asarray(x_noisy, dtype=np.float64)
    eps_hat = _eval(eps_model, x, np.full(x.shape[:-1] or (1,), t))
    return (x - math.sqrt(1.0 - ab) * eps_hat.reshape(x.shape)) / math.sqrt(ab)


def triangular_weights(seg_len: int) -> np.ndarray:
    """Weights that sum to exactly 1 wherever two segments at hop ``seg_len // 2`` overlap."""
    k = np.arange(seg_len)
    return 1.0 - np.abs(2 * k + 1 - seg_len) / seg_len


def segment_starts(n: int, seg_len: int) -> np.ndarray:
    if n < seg_len:
        raise ValueError(f"series of length {n} is shorter than the segment length {seg_len}")
    hop = max(seg_len // 2, 1)
    starts = list(range(0, n - seg_len + 1, hop))
    if starts[-1] != n - seg_len:
        starts.append(n - seg_len)
    return np.asarray(starts, dtype=np.int64)


def overlap_add_weight_sum(n: int, seg_len: int) -> np.ndarray:
    starts = segment_starts(n, seg_len)
    _, wsum = kernels.overlap_add(np.zeros((starts.size, seg_len)), starts, triangular_weights(seg_len), n)
    return wsum


def denoise_series(eps_model: EpsModel, schedule: NoiseSchedule, series: np.ndarray, seg_len: int, t_star: int) -> np.ndarray:
    """Denoise every column of a ``(T, D)`` array by segment projection and overlap-add."""
    X = np.asarray(series, dtype=np.float64)
    if X.ndim == 1:
        return denoise_series(eps_model, schedule, X[:, None], seg_len, t_star)[:, 0]
    n, D = X.shape
    starts = segment_starts(n, seg_len)
    idx = starts[:, None] + np.arange(seg_len)[None, :]
    segs = np.transpose(X[idx], (2, 0, 1)).reshape(D * starts.size, seg_len)  # channel-major
    clean = denoise_one_step(eps_model, schedule, segs, t_star).reshape(D, starts.size, seg_len)
    w = triangular_weights(seg_len)
    out = np.empty_like(X)
    for c in range(D):
        acc, wsum = kernels.overlap_add(np.ascontiguousarray(clean[c]), starts, w, n)
        out[:, c] = acc / wsum
    return out


@dataclass
class Denoiser:
    """A trained noise predictor together with its schedule and projection step."""

    net: DenoiserNet
    schedule: NoiseSchedule
    t_star: int = 10

    @property
    def seg_len(self) -> int:
        return self.net.seg_len

    def denoise_prefix(self, prefix: np.ndarray) -> np.ndarray:
        return denoise_series(self.net, self.schedule, prefix, self.seg_len, self.t_star)

    def save(self, path) -> None:
        meta = {
            "kind": "denoiser",
            "seg_len": self.net.seg_len,
            "hidden": self.net.hidden,
            "emb_dim": self.net.emb_dim,
            "betas": self.schedule.betas.tolist(),
            "t_star": self.t_star,
        }
        de.save_checkpoint(path, self.net.params, meta)

    @classmethod
    def load(cls, path) -> "Denoiser":
        params, meta = de.load_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise ValueError(f"{path}: not a denoiser checkpoint")
        net = DenoiserNet(meta["seg_len"], meta["hidden"], meta["emb_dim"])
        for k, v in params.items():
            net.params[k].data = v
        betas = np.asarray(meta["betas"], dtype=np.float64)
        return cls(net, NoiseSchedule(betas, np.cumprod(1.0 - betas)), int(meta["t_star"]))


def train_denoiser(
    prefix: np.ndarray,
    seg_len: int,
    steps: int = 2000,
    batch: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    schedule: Optional[NoiseSchedule] = None,
    t_star: int = 10,
    hidden: int = 64,
    log_every: int = 0,
):
    """Fit a :class:`DenoiserNet` on random segments of every prefix column.

    Returns the :class:`Denoiser` and the per-step loss history.
    """
    X = np.asarray(prefix, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, D = X.shape
    if n < seg_len:
        raise ValueError(f"prefix of length {n} is shorter than the segment length {seg_len}")
    schedule = schedule or NoiseSchedule.linear()
    rng = np.random.default_rng(seed)
    net = DenoiserNet(seg_len, hidden=hidden, seed=seed)
    opt = de.Adam(net.params, lr=lr)
    history = np.empty(steps)
    offsets = np.arange(seg_len)
    for step in range(steps):
        starts = rng.integers(0, n - seg_len + 1, size=batch)
        chans = rng.integers(0, D, size=batch)
        x0 = X[starts[:, None] + offsets[None, :], chans[:, None]]
        loss = ddpm_loss(net, schedule, x0, rng)
        opt.step(de.gradients(net.params, loss))
        history[step] = loss.item()
    return Denoiser(net, schedule, t_star), history
