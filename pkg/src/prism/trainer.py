"""Training, one-shot inference, evaluation and the one-component-at-a-time ablation harness.

Data flow for training on a dataset with ``train_len`` prefix rows:

* the prefix is read once through a :class:`~prism.data_store.RowAudit`;
* it is z-scored with prefix statistics;
* the denoiser (when enabled) is fitted on the prefix and produces ``X_dag``;
* range, kinematic and lag budgets and the correlation graphs come from
  ``X_dag``; histories and targets come from the standardised raw series;
* the last ``val_frac`` of the prefix drives early stopping.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diff_engine as de
from .data_store import (
    Dataset,
    DataError,
    PhysicsBudgets,
    RowAudit,
    Standardizer,
    compute_budgets,
    window_ends,
    zscore,
)
from .denoiser import Denoiser, DenoiserNet, NoiseSchedule, denoise_series, train_denoiser
from .graph_builder import GraphParams, build_graph, build_graph_sequence
from .model import ModelConfig, PrismModel
from .physics_losses import LossWeights, window_losses
from .synthetic import generate_synthetic  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_denoise", "static_graph", "no_pde", "no_constraints", "no_lag_cohere")


class TrainingError(RuntimeError):
    """Training could not continue (non-finite loss or gradient)."""


@dataclass
class TrainConfig:
    L: int = 48
    H: int = 12
    model: Dict = field(default_factory=dict)  # extra ModelConfig fields (d, n_heads, ...)
    weights: LossWeights = field(default_factory=LossWeights)
    graph: GraphParams = field(default_factory=GraphParams)
    W_corr: Optional[int] = None  # defaults to L
    tau_max: Optional[int] = None  # defaults to min(H - 1, L // 4)
    kin_quantile: float = 0.995
    lr: float = 3e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    val_frac: float = 0.1
    seed: int = 0
    denoise_enabled: bool = True
    denoise_steps: int = 2000
    denoise_t_star: int = 10
    denoise_at_inference: bool = False
    static_graph: bool = False
    ablation_variant: str = "full"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.graph, dict):
            self.graph = GraphParams(**self.graph)
        self.model = dict(self.model)
        if self.ablation_variant not in VARIANTS:
            raise ValueError(f"unknown ablation variant {self.ablation_variant!r}; choose one of {', '.join(VARIANTS)}")
        if self.L < 2 or self.H < 3:
            raise ValueError("need L >= 2 and H >= 3 (acceleration needs three steps)")
        if not 0.0 < self.val_frac < 0.5:
            raise ValueError("val_frac must lie in (0, 0.5)")
        for name in ("lr",):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def W(self) -> int:
        return self.W_corr if self.W_corr is not None else self.L

    @property
    def lag_window(self) -> int:
        return self.tau_max if self.tau_max is not None else max(1, min(self.H - 1, self.L // 4))

    def model_config(self, D: int) -> ModelConfig:
        return ModelConfig(L=self.L, H=self.H, D=D, seed=self.seed, **self.model)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = asdict(self.weights)
        out["graph"] = self.graph.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**obj)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


def apply_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Return ``cfg`` with exactly the fields that define ``variant`` changed."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    w = cfg.weights
    changes = {
        "full": {},
        "no_denoise": {"denoise_enabled": False},
        "static_graph": {"static_graph": True},
        "no_pde": {"weights": replace(w, lambda_pde=0.0)},
        "no_constraints": {"weights": replace(w, lambda_range=0.0, lambda_vel=0.0, lambda_acc=0.0)},
        "no_lag_cohere": {"weights": replace(w, lambda_cohere=0.0)},
    }[variant]
    return replace(cfg, ablation_variant=variant, **changes)


# ------------------------------------------------------------------ results


@dataclass
class EvalResult:
    mse: float
    mae: float
    per_step: List[float]

    @property
    def horizon_end_mse(self) -> float:
        return self.per_step[-1]

    def to_json(self) -> str:
        return json.dumps({"mse": self.mse, "mae": self.mae, "per_step": self.per_step}, sort_keys=True)


def evaluate(Y_hat, Y) -> EvalResult:
    """MSE and MAE over every entry; ``per_step`` is the MSE of each horizon step.

    Accepts ``(H, D)`` or a stack ``(N, H, D)`` of windows.
    """
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y_hat.shape != Y.shape:
        raise ValueError(f"evaluate: forecast shape {Y_hat.shape} != truth shape {Y.shape}")
    if Y.ndim not in (2, 3):
        raise ValueError(f"evaluate: expected (H, D) or (N, H, D), got {Y.shape}")
    err = Y_hat - Y
    sq = err**2
    axes = (1,) if Y.ndim == 2 else (0, 2)
    return EvalResult(
        mse=float(sq.mean()),
        mae=float(np.abs(err).mean()),
        per_step=[float(v) for v in sq.mean(axis=axes)],
    )


def persistence_baseline(history, H: int) -> np.ndarray:
    """Repeat the last observed row ``H`` times (works on stacks of histories too)."""
    history = np.asarray(history, dtype=np.float64)
    if history.shape[-2] == 0:
        raise ValueError("persistence_baseline: empty history")
    last = history[..., -1:, :]
    return np.repeat(last, H, axis=-2)


@dataclass
class TrainState:
    model: PrismModel
    config: TrainConfig
    scaler: Standardizer
    budgets: PhysicsBudgets
    static_A: Optional[np.ndarray] = None
    static_A_bar: Optional[np.ndarray] = None
    denoiser: Optional[Denoiser] = None
    best_epoch: int = -1

    @property
    def kappa(self) -> float:
        return float(self.model.kappa().item())

    @property
    def gamma(self) -> float:
        return float(self.model.gamma().item())


# ------------------------------------------------------------------ training


def _global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _batch_objective(model: PrismModel, hist, fut, A, A_bar, budgets, weights):
    Y_hat = model(hist, A_bar)
    return window_losses(Y_hat, fut, hist[:, -1, :], A, A_bar, model.kappa(), model.gamma(), budgets, weights)


def _predict_batched(model: PrismModel, hist: np.ndarray, A_bar: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    for i in range(0, hist.shape[0], chunk):
        out.append(model.predict(hist[i : i + chunk], A_bar[i : i + chunk]))
    return np.concatenate(out, axis=0) if out else np.empty((0,) + hist.shape[1:])


def train(
    config: TrainConfig,
    dataset: Dataset,
    audit: Optional[RowAudit] = None,
    log_file=None,
) -> Tuple[TrainState, List[dict]]:
    """Fit a model on the training prefix of ``dataset``.

    Returns the state with the best-validation parameters restored and the
    list of log records (one per optimiser step plus one validation record
    per epoch).  When ``log_file`` is a writable text stream every record is
    also written to it as a JSON line.
    """
    cfg = config
    audit = audit if audit is not None else RowAudit(dataset.values)
    n = dataset.train_len
    L, H, W = cfg.L, cfg.H, cfg.W
    first_end = max(L, W) - 1
    n_val = max(int(math.ceil(cfg.val_frac * n)), H)
    val_start = n - n_val
    if val_start - H - first_end < 1:
        raise DataError(f"prefix of {n} rows is too short for L={L}, H={H}, W={W} and a {n_val}-row validation tail")

    raw = audit.read(0, n, "prefix").copy()
    Z, scaler = zscore(raw)

    denoiser = None
    if cfg.denoise_enabled:
        denoiser, _ = train_denoiser(Z, seg_len=L, steps=cfg.denoise_steps, seed=cfg.seed, t_star=cfg.denoise_t_star)
        X_dag = denoiser.denoise_prefix(Z)
    else:
        X_dag = Z

    budgets = compute_budgets(X_dag, cfg.lag_window, cfg.kin_quantile)

    ends = window_ends(n, L, H)
    ends = ends[ends >= first_end]
    train_ends = ends[ends + H < val_start]
    val_ends = ends[ends >= val_start - 1]

    static_A = static_A_bar = None
    if cfg.static_graph:
        g = build_graph(X_dag, cfg.graph, window_end=n - 1)
        static_A, static_A_bar = g.A, g.A_bar
        A_all = np.broadcast_to(static_A, (ends.size,) + static_A.shape)
        Abar_all = np.broadcast_to(static_A_bar, A_all.shape)
    else:
        A_all, Abar_all = build_graph_sequence(X_dag, ends, W, cfg.graph)
    pos = {int(t): i for i, t in enumerate(ends)}

    idx = np.arange(L)[None, :] + (ends - L + 1)[:, None]
    hist_all = Z[idx]
    fut_all = Z[(ends + 1)[:, None] + np.arange(H)[None, :]]

    def select(ts):
        ii = np.array([pos[int(t)] for t in ts], dtype=np.int64)
        return hist_all[ii], fut_all[ii], np.asarray(A_all[ii]), np.asarray(Abar_all[ii])

    model = PrismModel(cfg.model_config(dataset.D))
    opt = de.Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    v_hist, v_fut, _, v_Abar = select(val_ends)

    records: List[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    best = (math.inf, -1, model.state_dict())
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train_ends.size)
        for b0 in range(0, order.size, cfg.batch_size):
            ts = train_ends[order[b0 : b0 + cfg.batch_size]]
            hist, fut, A, A_bar = select(ts)
            try:
                br = _batch_objective(model, hist, fut, A, A_bar, budgets, cfg.weights)
                if not math.isfinite(br.total):
                    raise de.NonFiniteError("loss is not finite")
                grads = de.gradients(model.params, br.objective)
                gn = _global_norm(grads)
                opt.step(grads)
            except (de.NonFiniteError, FloatingPointError) as exc:
                raise TrainingError(f"non-finite value at window end(s) t={ts.tolist()} in epoch {epoch}: {exc}") from exc
            emit({"epoch": epoch, "t": [int(t) for t in ts], "loss": br.as_dict(), "grad_norm": gn})

        val = evaluate(_predict_batched(model, v_hist, v_Abar), v_fut)
        emit({"epoch": epoch, "val_mse": val.mse, "kappa": float(model.kappa().item()), "gamma": float(model.gamma().item())})
        if val.mse < best[0]:
            best = (val.mse, epoch, model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.load_state_dict(best[2])
    state = TrainState(
        model=model,
        config=cfg,
        scaler=scaler,
        budgets=budgets,
        static_A=static_A,
        static_A_bar=static_A_bar,
        denoiser=denoiser,
        best_epoch=best[1],
    )
    return state, records


# ------------------------------------------------------------------ inference and evaluation


def _graph_for(state: TrainState, window: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if state.static_A_bar is not None:
        return state.static_A, state.static_A_bar
    g = build_graph(window, state.config.graph)
    return g.A, g.A_bar


def _prepare_history(state: TrainState, Zhist: np.ndarray) -> np.ndarray:
    cfg = state.config
    if cfg.denoise_at_inference and state.denoiser is not None:
        return denoise_series(state.denoiser.net, state.denoiser.schedule, Zhist, state.denoiser.seg_len, state.denoiser.t_star)
    return Zhist


def infer(state: TrainState, history) -> np.ndarray:
    """One forward pass on the latest rows of ``history`` (original units) -> ``(H, D)`` forecast."""
    cfg = state.config
    history = np.asarray(history, dtype=np.float64)
    need = max(cfg.L, cfg.W)
    if history.ndim != 2 or history.shape[0] < need:
        raise DataError(f"infer: need at least max(L, W_corr)={need} history rows, got shape {history.shape}")
    Zh = state.scaler.transform(history[-need:])
    graph_src = _prepare_history(state, Zh)
    _, A_bar = _graph_for(state, graph_src[-cfg.W :])
    Y = state.model.predict(Zh[-cfg.L :], A_bar)
    return state.scaler.inverse(Y)


def test_windows(state: TrainState, dataset: Dataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rolling forecasts whose targets lie entirely in the held-out rows.

    Returns ``(forecasts, truths, histories)`` in standardised units.
    """
    cfg = state.config
    Z = state.scaler.transform(dataset.values)
    n = dataset.train_len
    lo = max(n - 1, max(cfg.L, cfg.W) - 1)
    ends = np.arange(lo, dataset.T - cfg.H)
    if ends.size == 0:
        raise DataError(f"no test window: holdout of {dataset.holdout} rows is shorter than H={cfg.H}")
    hist = Z[np.arange(cfg.L)[None, :] + (ends - cfg.L + 1)[:, None]]
    truth = Z[(ends + 1)[:, None] + np.arange(cfg.H)[None, :]]
    if state.static_A_bar is not None:
        A_bar = np.broadcast_to(state.static_A_bar, (ends.size,) + state.static_A_bar.shape)
    elif cfg.denoise_at_inference and state.denoiser is not None:
        A_bar = np.stack([_graph_for(state, _prepare_history(state, Z[t - cfg.W + 1 : t + 1]))[1] for t in ends])
    else:
        _, A_bar = build_graph_sequence(Z, ends, cfg.W, cfg.graph)
    return _predict_batched(state.model, hist, np.asarray(A_bar)), truth, hist


def evaluate_on_test(state: TrainState, dataset: Dataset) -> Tuple[EvalResult, EvalResult]:
    """Model and persistence-baseline scores over the rolling test windows."""
    pred, truth, hist = test_windows(state, dataset)
    return evaluate(pred, truth), evaluate(persistence_baseline(hist, state.config.H), truth)


# ------------------------------------------------------------------ persistence


def save_state(path, state: TrainState) -> None:
    params = dict(state.model.params)
    meta = {
        "kind": "prism",
        "config": state.config.to_dict(),
        "D": state.model.config.D,
        "standardizer": state.scaler.to_dict(),
        "budgets": json.loads(state.budgets.to_json()),
        "best_epoch": state.best_epoch,
        "static_A": None if state.static_A is None else state.static_A.tolist(),
        "static_A_bar": None if state.static_A_bar is None else state.static_A_bar.tolist(),
        "denoiser": None,
    }
    if state.denoiser is not None:
        dn = state.denoiser
        for k, t in dn.net.params.items():
            params[f"denoiser.{k}"] = t
        meta["denoiser"] = {
            "seg_len": dn.net.seg_len,
            "hidden": dn.net.hidden,
            "emb_dim": dn.net.emb_dim,
            "betas": dn.schedule.betas.tolist(),
            "t_star": dn.t_star,
        }
    de.save_checkpoint(path, params, meta)


def load_state(path) -> TrainState:
    params, meta = de.load_checkpoint(path)
    if meta.get("kind") != "prism":
        raise DataError(f"{path}: not a forecaster checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    model = PrismModel(cfg.model_config(int(meta["D"])))
    model.load_state_dict({k: v for k, v in params.items() if not k.startswith("denoiser.")})
    denoiser = None
    if meta.get("denoiser"):
        dm = meta["denoiser"]
        net = DenoiserNet(dm["seg_len"], dm["hidden"], dm["emb_dim"])
        for k in net.params:
            net.params[k].data = params[f"denoiser.{k}"]
        betas = np.asarray(dm["betas"], dtype=np.float64)
        denoiser = Denoiser(net, NoiseSchedule(betas, np.cumprod(1.0 - betas)), int(dm["t_star"]))
    arr = lambda x: None if x is None else np.asarray(x, dtype=np.float64)  # noqa: E731
    return TrainState(
        model=model,
        config=cfg,
        scaler=Standardizer.from_dict(meta["standardizer"]),
        budgets=PhysicsBudgets.from_json(json.dumps(meta["budgets"])),
        static_A=arr(meta.get("static_A")),
        static_A_bar=arr(meta.get("static_A_bar")),
        denoiser=denoiser,
        best_epoch=int(meta.get("best_epoch", -1)),
    )


# ------------------------------------------------------------------ ablations


@dataclass
class AblationRow:
    variant: str
    mse: float
    mae: float
    horizon_end_mse: float
    delta_pct_mse: float
    delta_pct_mae: float


def run_ablation_suite(
    base: TrainConfig,
    dataset: Dataset,
    variants: Sequence[str] = VARIANTS,
) -> List[AblationRow]:
    """Train every variant with the same seed and split; ``full`` is always first and the baseline."""
    variants = ["full"] + [v for v in variants if v != "full"]
    results = {}
    for v in variants:
        state, _ = train(apply_variant(base, v), dataset)
        results[v], _ = evaluate_on_test(state, dataset)
    ref = results["full"]
    return [
        AblationRow(
            variant=v,
            mse=r.mse,
            mae=r.mae,
            horizon_end_mse=r.horizon_end_mse,
            delta_pct_mse=100.0 * (r.mse - ref.mse) / ref.mse,
            delta_pct_mae=100.0 * (r.mae - ref.mae) / ref.mae,
        )
        for v, r in ((v, results[v]) for v in variants)
    ]


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [f.name for f in fields(AblationRow)]
    w.writerow(cols)
    for r in rows:
        w.writerow([r.variant] + [f"{getattr(r, c):.6g}" for c in cols[1:]])
    return buf.getvalue()
