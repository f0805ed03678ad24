"""Hot inner loops, each in two flavours.

Every kernel has a loop implementation (compiled with ``numba.njit`` when
available) and a vectorised numpy implementation with identical semantics.
The module-level names (``dft_magnitude``, ``lag_matrix``, ...) are bound to
one of the two at import time, see :mod:`prism._accel`.  Both flavours stay
reachable through :func:`get` so tests and the benchmark can pit them against
each other.
"""

from typing import Callable, Dict, Tuple

import numpy as np

from ._accel import BACKEND, njit

__all__ = [
    "BACKEND",
    "dft_magnitude",
    "lag_matrix",
    "lagged_correlations",
    "overlap_add",
    "floor_cap_rows",
    "sym_power_iteration",
    "window_correlations",
    "get",
    "KERNEL_NAMES",
]


# --------------------------------------------------------------------------- DFT


def _dft_magnitude_loops(x):
    n = x.shape[0]
    n_bins = n // 2 + 1
    cos_t = np.empty(n)
    sin_t = np.empty(n)
    for m in range(n):
        ang = 2.0 * np.pi * m / n
        cos_t[m] = np.cos(ang)
        sin_t[m] = np.sin(ang)
    out = np.empty(n_bins)
    for k in range(n_bins):
        re = 0.0
        im = 0.0
        for t in range(n):
            m = (k * t) % n
            re += x[t] * cos_t[m]
            im -= x[t] * sin_t[m]
        out[k] = np.sqrt(re * re + im * im)
    return out


def _dft_magnitude_numpy(x):
    n = x.shape[0]
    ang = 2.0 * np.pi * np.arange(n) / n
    idx = np.outer(np.arange(n // 2 + 1), np.arange(n)) % n
    re = np.cos(ang)[idx] @ x
    im = -(np.sin(ang)[idx] @ x)
    return np.sqrt(re * re + im * im)


# --------------------------------------------------------------------------- lags


def _lagged_correlations_loops(x, y, tau_max):
    # entry k holds tau = k - tau_max; tau >= 0 pairs x[t] with y[t + tau]
    n = x.shape[0]
    out = np.zeros(2 * tau_max + 1)
    for k in range(2 * tau_max + 1):
        tau = k - tau_max
        if tau >= 0:
            xs = 0
            ys = tau
            m = n - tau
        else:
            xs = -tau
            ys = 0
            m = n + tau
        mx = 0.0
        my = 0.0
        for t in range(m):
            mx += x[xs + t]
            my += y[ys + t]
        mx /= m
        my /= m
        sxy = 0.0
        sxx = 0.0
        syy = 0.0
        for t in range(m):
            dx = x[xs + t] - mx
            dy = y[ys + t] - my
            sxy += dx * dy
            sxx += dx * dx
            syy += dy * dy
        if sxx > 0.0 and syy > 0.0:
            out[k] = sxy / np.sqrt(sxx * syy)
    return out


def _pick_lag(corrs, tau_max):
    # scan 0, -1, +1, -2, +2, ...; only a strictly larger value wins
    best = 0
    best_val = corrs[tau_max]
    for a in range(1, tau_max + 1):
        v = corrs[tau_max - a]
        if v > best_val:
            best_val = v
            best = -a
        v = corrs[tau_max + a]
        if v > best_val:
            best_val = v
            best = a
    return best


def _lag_matrix_loops(X, tau_max):
    d = X.shape[1]
    lags = np.zeros((d, d), dtype=np.int64)
    for i in range(d):
        xi = X[:, i].copy()
        for j in range(d):
            if i == j:
                continue
            corrs = _lagged_correlations_loops(xi, X[:, j].copy(), tau_max)
            lags[i, j] = _pick_lag(corrs, tau_max)
    return lags


def _lagged_correlation_cube(X, tau_max):
    """Correlations for every ordered pair and lag, shape (2*tau_max+1, D, D)."""
    n, d = X.shape
    cube = np.zeros((2 * tau_max + 1, d, d))
    for k in range(2 * tau_max + 1):
        tau = k - tau_max
        if tau >= 0:
            a, b = X[: n - tau], X[tau:]
        else:
            a, b = X[-tau:], X[: n + tau]
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        cov = a.T @ b
        sa = np.sqrt((a * a).sum(axis=0))
        sb = np.sqrt((b * b).sum(axis=0))
        denom = np.outer(sa, sb)
        ok = denom > 0
        cube[k][ok] = cov[ok] / denom[ok]
    return cube


def _lagged_correlations_numpy(x, y, tau_max):
    cube = _lagged_correlation_cube(np.column_stack([x, y]), tau_max)
    return cube[:, 0, 1].copy()


def _lag_matrix_numpy(X, tau_max):
    cube = _lagged_correlation_cube(X, tau_max)
    d = X.shape[1]
    best = np.zeros((d, d), dtype=np.int64)
    best_val = cube[tau_max].copy()
    for a in range(1, tau_max + 1):
        for tau in (-a, a):
            v = cube[tau + tau_max]
            win = v > best_val
            best_val = np.where(win, v, best_val)
            best = np.where(win, tau, best)
    np.fill_diagonal(best, 0)
    return best


# --------------------------------------------------------------------------- overlap-add


def _overlap_add_loops(segments, starts, weights, n):
    out = np.zeros(n)
    wsum = np.zeros(n)
    seg_len = segments.shape[1]
    for s in range(segments.shape[0]):
        base = starts[s]
        for k in range(seg_len):
            out[base + k] += weights[k] * segments[s, k]
            wsum[base + k] += weights[k]
    return out, wsum


def _overlap_add_numpy(segments, starts, weights, n):
    out = np.zeros(n)
    wsum = np.zeros(n)
    seg_len = segments.shape[1]
    # one segment at a time keeps the accumulation order identical to the loop kernel
    for s in range(segments.shape[0]):
        sl = slice(starts[s], starts[s] + seg_len)
        out[sl] += weights * segments[s]
        wsum[sl] += weights
    return out, wsum


# --------------------------------------------------------------------------- degree floor / cap


def _floor_cap_rows_loops(A, C, k_min, K, gamma):
    d = A.shape[0]
    B = A.copy()
    for i in range(d):
        deg = 0
        for j in range(d):
            if j != i and A[i, j] > 0.0:
                deg += 1
        if deg < k_min:
            order = np.argsort(-np.abs(C[i]), kind="mergesort")
            for j in order:
                if deg >= k_min:
                    break
                if j == i or A[i, j] > 0.0:
                    continue
                w = np.abs(C[i, j]) ** gamma
                if w > 0.0:
                    B[i, j] = w
                    deg += 1
        elif deg > K:
            order = np.argsort(-A[i], kind="mergesort")
            kept = 0
            for j in order:
                if j == i or A[i, j] <= 0.0:
                    continue
                if kept < K:
                    kept += 1
                else:
                    B[i, j] = 0.0
    return B


def _floor_cap_rows_numpy(A, C, k_min, K, gamma):
    d = A.shape[0]
    B = A.copy()
    cols = np.arange(d)
    present = (A > 0.0) & ~np.eye(d, dtype=bool)
    degree = present.sum(axis=1)
    for i in np.flatnonzero(degree < k_min):
        w = np.abs(C[i]) ** gamma
        cand = (cols != i) & ~present[i] & (w > 0.0)
        order = np.lexsort((cols, -np.abs(C[i])))
        picks = order[cand[order]][: k_min - degree[i]]
        B[i, picks] = w[picks]
    for i in np.flatnonzero(degree > K):
        order = np.lexsort((cols, -A[i]))
        order = order[present[i][order]]
        B[i, order[K:]] = 0.0
    return B


# --------------------------------------------------------------------------- power iteration


def _sym_power_iteration_loops(S, shift, x0, tol, max_iter):
    n = S.shape[0]
    x = x0.copy()
    nrm = 0.0
    for i in range(n):
        nrm += x[i] * x[i]
    x /= np.sqrt(nrm)
    y = np.empty(n)
    lam = 0.0
    res = np.inf
    it = 0
    while it < max_iter:
        it += 1
        for i in range(n):
            acc = shift * x[i]
            for j in range(n):
                acc += S[i, j] * x[j]
            y[i] = acc
        lam = 0.0
        for i in range(n):
            lam += x[i] * y[i]
        res = 0.0
        ny = 0.0
        for i in range(n):
            r = y[i] - lam * x[i]
            res += r * r
            ny += y[i] * y[i]
        res = np.sqrt(res)
        ny = np.sqrt(ny)
        if ny == 0.0:
            break
        for i in range(n):
            x[i] = y[i] / ny
        if res <= tol * max(1.0, abs(lam)):
            break
    return lam - shift, x, it, res


def _sym_power_iteration_numpy(S, shift, x0, tol, max_iter):
    x = x0 / np.linalg.norm(x0)
    lam = 0.0
    res = np.inf
    it = 0
    while it < max_iter:
        it += 1
        y = S @ x + shift * x
        lam = float(x @ y)
        res = float(np.linalg.norm(y - lam * x))
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            break
        x = y / ny
        if res <= tol * max(1.0, abs(lam)):
            break
    return lam - shift, x, it, res


# --------------------------------------------------------------------------- windowed correlations


def _window_correlations_loops(X, ends, W):
    nb = ends.shape[0]
    d = X.shape[1]
    out = np.empty((nb, d, d))
    degenerate = np.zeros(nb, dtype=np.bool_)
    mean = np.empty(d)
    cen = np.empty((W, d))
    ss = np.empty(d)
    for b in range(nb):
        lo = ends[b] - W + 1
        for c in range(d):
            acc = 0.0
            for t in range(W):
                acc += X[lo + t, c]
            mean[c] = acc / W
        for t in range(W):
            for c in range(d):
                cen[t, c] = X[lo + t, c] - mean[c]
        for c in range(d):
            acc = 0.0
            for t in range(W):
                acc += cen[t, c] * cen[t, c]
            ss[c] = acc
            if acc == 0.0:
                degenerate[b] = True
        for i in range(d):
            out[b, i, i] = 1.0
            for j in range(i + 1, d):
                acc = 0.0
                for t in range(W):
                    acc += cen[t, i] * cen[t, j]
                den = np.sqrt(ss[i] * ss[j])
                r = acc / den if den > 0.0 else 0.0
                if r > 1.0:
                    r = 1.0
                elif r < -1.0:
                    r = -1.0
                out[b, i, j] = r
                out[b, j, i] = r
    return out, degenerate


def _window_correlations_numpy(X, ends, W):
    win = np.lib.stride_tricks.sliding_window_view(X, W, axis=0)  # (T-W+1, D, W)
    win = win[ends - W + 1]
    cen = win - win.mean(axis=2, keepdims=True)
    cov = cen @ np.swapaxes(cen, 1, 2)
    ss = np.einsum("bdw,bdw->bd", cen, cen)
    degenerate = (ss == 0.0).any(axis=1)
    den = np.sqrt(ss[:, :, None] * ss[:, None, :])
    out = np.divide(cov, den, out=np.zeros_like(cov), where=den > 0.0)
    np.clip(out, -1.0, 1.0, out=out)
    idx = np.arange(X.shape[1])
    out[:, idx, idx] = 1.0
    return out, degenerate


# --------------------------------------------------------------------------- dispatch

_LOOPS: Dict[str, Callable] = {
    "dft_magnitude": _dft_magnitude_loops,
    "lagged_correlations": _lagged_correlations_loops,
    "lag_matrix": _lag_matrix_loops,
    "overlap_add": _overlap_add_loops,
    "floor_cap_rows": _floor_cap_rows_loops,
    "sym_power_iteration": _sym_power_iteration_loops,
    "window_correlations": _window_correlations_loops,
}
_NUMPY: Dict[str, Callable] = {
    "dft_magnitude": _dft_magnitude_numpy,
    "lagged_correlations": _lagged_correlations_numpy,
    "lag_matrix": _lag_matrix_numpy,
    "overlap_add": _overlap_add_numpy,
    "floor_cap_rows": _floor_cap_rows_numpy,
    "sym_power_iteration": _sym_power_iteration_numpy,
    "window_correlations": _window_correlations_numpy,
}
KERNEL_NAMES: Tuple[str, ...] = tuple(_LOOPS)

# helpers called from inside other loop kernels must be compiled too
_lagged_correlations_loops = njit(_lagged_correlations_loops)
_pick_lag = njit(_pick_lag)
_COMPILED: Dict[str, Callable] = {
    name: (_lagged_correlations_loops if name == "lagged_correlations" else njit(fn))
    for name, fn in _LOOPS.items()
}


def get(name: str, backend: str = BACKEND) -> Callable:
    """Return kernel ``name`` for ``backend`` ("numba" or "numpy")."""
    if backend == "numba":
        return _COMPILED[name]
    if backend == "numpy":
        return _NUMPY[name]
    raise ValueError(f"unknown backend {backend!r}")


dft_magnitude = get("dft_magnitude")
lagged_correlations = get("lagged_correlations")
lag_matrix = get("lag_matrix")
overlap_add = get("overlap_add")
floor_cap_rows = get("floor_cap_rows")
sym_power_iteration = get("sym_power_iteration")
window_correlations = get("window_correlations")
