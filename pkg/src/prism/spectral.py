"""Magnitude spectra of mean-removed series and truth/forecast comparisons."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import kernels

TAIL_BAND = (0.75, 1.0)
QUARTILES = ((0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0))


@dataclass
class Spectrum:
    freqs: np.ndarray  # cycles per sample, 0 .. 0.5
    mags: np.ndarray


def rfft_magnitude(series) -> Spectrum:
    x = np.asarray(series, dtype=np.float64).ravel()
    n = x.size
    if n < 4:
        raise ValueError(f"rfft_magnitude: need at least 4 samples, got {n}")
    mags = kernels.dft_magnitude(np.ascontiguousarray(x - x.mean()))
    return Spectrum(freqs=np.arange(n // 2 + 1) / n, mags=mags)


def _band_mask(spec: Spectrum, lo_frac: float, hi_frac: float) -> np.ndarray:
    if not 0.0 <= lo_frac < hi_frac <= 1.0:
        raise ValueError(f"need 0 <= lo_frac < hi_frac <= 1, got ({lo_frac}, {hi_frac})")
    rel = spec.freqs / 0.5
    mask = (rel >= lo_frac) & (rel < hi_frac)
    if hi_frac == 1.0:
        mask |= rel == 1.0
    return mask


def band_energy(spec: Spectrum, lo_frac: float, hi_frac: float) -> float:
    """Sum of squared magnitudes for bins with ``lo <= f / f_nyquist < hi`` (``hi = 1`` is closed)."""
    mask = _band_mask(spec, lo_frac, hi_frac)
    if not mask.any():
        raise ValueError(f"band [{lo_frac}, {hi_frac}) contains no frequency bins")
    return float(np.sum(spec.mags[mask] ** 2))


@dataclass
class SpectralComparison:
    fundamental_match: bool
    tail_ratio: float
    per_band_ratios: Dict[str, float]
    truth_peak_bin: int
    pred_peak_bin: int

    def as_dict(self) -> dict:
        return {
            "fundamental_match": self.fundamental_match,
            "tail_ratio": self.tail_ratio,
            "per_band_ratios": self.per_band_ratios,
            "truth_peak_bin": self.truth_peak_bin,
            "pred_peak_bin": self.pred_peak_bin,
        }


def _ratio(num: float, den: float) -> float:
    return num / max(den, 1e-12)


def compare_spectra(truth, pred) -> SpectralComparison:
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: truth {truth.size}, pred {pred.size}")
    st, sp = rfft_magnitude(truth), rfft_magnitude(pred)
    t_peak = int(np.argmax(st.mags[1:])) + 1
    p_peak = int(np.argmax(sp.mags[1:])) + 1
    bands = {}
    for lo, hi in QUARTILES:
        if _band_mask(st, lo, hi).any():
            bands[f"{lo:.2f}-{hi:.2f}"] = _ratio(band_energy(sp, lo, hi), band_energy(st, lo, hi))
    return SpectralComparison(
        fundamental_match=t_peak == p_peak,
        tail_ratio=_ratio(band_energy(sp, *TAIL_BAND), band_energy(st, *TAIL_BAND)),
        per_band_ratios=bands,
        truth_peak_bin=t_peak,
        pred_peak_bin=p_peak,
    )


def write_spectrum_csv(path, spec: Spectrum) -> None:
    """Two columns, ``freq`` (cycles/sample) and ``magnitude``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq", "magnitude"])
        for f, m in zip(spec.freqs, spec.mags):
            w.writerow([repr(float(f)), repr(float(m))])
