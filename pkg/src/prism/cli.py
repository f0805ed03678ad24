"""Command-line entry point: ``prism <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import diff_engine as de
from . import trainer as tr
from .data_store import DataError, load_csv, read_csv_matrix, write_csv, zscore
from .denoiser import Denoiser, train_denoiser
from .graph_builder import GraphParams, build_graph, export_adjacency, import_adjacency
from .spectral import compare_spectra, rfft_magnitude, write_spectrum_csv
from .stability import ConvergenceError, HypothesisError, build_horizon_map, certify_contraction
from .synthetic import KINDS

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _fmt() -> type:
    return argparse.ArgumentDefaultsHelpFormatter


def _add_data(p: argparse.ArgumentParser, holdout_help: str = "trailing test rows") -> None:
    p.add_argument("--data", required=True, help="input CSV, one column per channel")
    p.add_argument("--header", action="store_true", help="first CSV row holds channel names")
    p.add_argument("--holdout", type=int, default=None, help=f"{holdout_help} (default: H for train/eval, 1 otherwise)")


def _load(args, holdout: Optional[int] = None):
    return load_csv(args.data, has_header=args.header, holdout=args.holdout if args.holdout is not None else holdout)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    kw = {}
    if args.noise is not None:
        kw["noise"] = args.noise
    if args.spike_rate:
        if args.kind != "coupled_rd":
            raise UsageError("--spike-rate only applies to --kind coupled_rd")
        kw["spike_rate"] = args.spike_rate
    if args.lag is not None:
        if args.kind != "shifted_pairs":
            raise UsageError("--lag only applies to --kind shifted_pairs")
        kw["lag"] = args.lag
    ds = tr.generate_synthetic(args.kind, args.D, args.T, args.seed, **kw)
    write_csv(args.out, ds.values, ds.channel_names if args.header else None)
    print(f"wrote {ds.T}x{ds.D} {args.kind} series to {args.out}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    ds = _load(args)
    prefix = ds.values[: ds.train_len]
    Z, scaler = zscore(prefix)
    if args.fit_steps:
        dn, hist = train_denoiser(Z, seg_len=args.seg_len, steps=args.fit_steps, seed=args.seed, t_star=args.t_star)
        dn.save(args.checkpoint)
        print(f"trained denoiser for {args.fit_steps} steps (final loss {hist[-1]:.4g}); saved {args.checkpoint}")
    else:
        if not os.path.exists(args.checkpoint):
            raise DataError(f"{args.checkpoint}: no such denoiser checkpoint (pass --fit-steps to train one)")
        dn = Denoiser.load(args.checkpoint)
    out = ds.values.copy()
    out[: ds.train_len] = scaler.inverse(dn.denoise_prefix(Z))
    write_csv(args.out, out, ds.channel_names if args.header else None)
    print(f"denoised rows 0..{ds.train_len - 1}; held-out rows copied unchanged; wrote {args.out}")
    return EXIT_OK


def cmd_graph(args) -> int:
    ds = _load(args)
    end = ds.train_len - 1 if args.window_end is None else args.window_end
    if not args.W - 1 <= end < ds.T:
        raise DataError(f"--window-end {end} needs {args.W} rows before it inside [0, {ds.T})")
    params = GraphParams(tau=args.tau, gamma_corr=args.gamma_corr, k_min=args.k_min, K=args.K)
    g = build_graph(ds.values[end - args.W + 1 : end + 1], params, window_end=end)
    export_adjacency(g, args.out)
    print(f"graph on rows {end - args.W + 1}..{end}: {int((g.A > 0).sum()) // 2} edges; wrote {args.out}")
    return EXIT_OK


def _config_from(args) -> tr.TrainConfig:
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                base = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{args.config}: invalid JSON ({exc})") from exc
    cfg = tr.TrainConfig.from_dict(base)
    over = {}
    for flag, key in (("L", "L"), ("H", "H"), ("seed", "seed"), ("epochs", "max_epochs"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("patience", "patience"), ("W_corr", "W_corr"),
                      ("denoise_steps", "denoise_steps")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "no_denoise", False):
        over["denoise_enabled"] = False
    cfg = tr.TrainConfig.from_dict({**cfg.to_dict(), **over})
    variant = getattr(args, "variant", None)
    if variant:
        cfg = tr.apply_variant(cfg, variant)
    return cfg


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON training config; flags below override it")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--L", type=int, default=None, help="context length")
    p.add_argument("--H", type=int, default=None, help="forecast horizon")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="windows per optimiser step")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience in epochs")
    p.add_argument("--W-corr", dest="W_corr", type=int, default=None, help="correlation window (default L)")
    p.add_argument("--denoise-steps", dest="denoise_steps", type=int, default=None, help="denoiser training steps")
    p.add_argument("--no-denoise", action="store_true", help="skip prefix denoising")


def cmd_train(args) -> int:
    cfg = _config_from(args)
    ds = _load(args, holdout=cfg.H)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            state, records = tr.train(cfg, ds, log_file=fh)
    else:
        state, records = tr.train(cfg, ds)
    tr.save_state(args.out, state)
    print(f"trained {len([r for r in records if 'val_mse' in r])} epochs (best {state.best_epoch}); "
          f"kappa={state.kappa:.4f} gamma={state.gamma:.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    state = tr.load_state(args.checkpoint)
    values, names = read_csv_matrix(args.data, args.header)
    end = values.shape[0] - 1 if args.end is None else args.end
    if not 0 <= end < values.shape[0]:
        raise DataError(f"--end {end} outside [0, {values.shape[0]})")
    Y = tr.infer(state, values[: end + 1])
    write_csv(args.out, Y, names if args.header else None)
    print(f"forecast rows {end + 1}..{end + state.config.H} written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.pred or args.truth:
        if not (args.pred and args.truth):
            raise UsageError("--pred and --truth must be given together")
        res = tr.evaluate(read_csv_matrix(args.pred, args.header)[0], read_csv_matrix(args.truth, args.header)[0])
        _write_text(args.out, res.to_json())
        print(f"mse={res.mse:.6g} mae={res.mae:.6g}; wrote {args.out}")
        return EXIT_OK
    if not (args.checkpoint and args.data):
        raise UsageError("give --checkpoint with --data, or --pred with --truth")
    state = tr.load_state(args.checkpoint)
    ds = load_csv(args.data, has_header=args.header, holdout=args.holdout or state.config.H)
    model, base = tr.evaluate_on_test(state, ds)
    _write_text(args.out, model.to_json())
    print(f"model mse={model.mse:.6g} mae={model.mae:.6g} | persistence mse={base.mse:.6g} mae={base.mae:.6g}; wrote {args.out}")
    return EXIT_OK


def cmd_stability(args) -> int:
    g = import_adjacency(args.adjacency)
    kappa, gamma = args.kappa, args.gamma
    if args.checkpoint:
        state = tr.load_state(args.checkpoint)
        kappa = state.kappa if kappa is None else kappa
        gamma = state.gamma if gamma is None else gamma
    if kappa is None or gamma is None:
        raise UsageError("need --kappa and --gamma (or --checkpoint to read the learned values)")
    rep = certify_contraction(build_horizon_map(g.A_bar, kappa, gamma))
    _write_text(args.out, rep.to_json())
    print(rep.table())
    return EXIT_OK


def cmd_spectrum(args) -> int:
    truth, names = read_csv_matrix(args.truth, args.header)
    pred, _ = read_csv_matrix(args.pred, args.header)
    if truth.shape != pred.shape:
        raise DataError(f"truth {truth.shape} and forecast {pred.shape} differ in shape")
    names = names or [f"ch{i}" for i in range(truth.shape[1])]
    os.makedirs(args.out_dir, exist_ok=True)
    report = {}
    for c, name in enumerate(names):
        write_spectrum_csv(os.path.join(args.out_dir, f"{name}_truth.csv"), rfft_magnitude(truth[:, c]))
        write_spectrum_csv(os.path.join(args.out_dir, f"{name}_pred.csv"), rfft_magnitude(pred[:, c]))
        report[name] = compare_spectra(truth[:, c], pred[:, c]).as_dict()
    path = os.path.join(args.out_dir, "report.json")
    _write_text(path, json.dumps(report, sort_keys=True, indent=2))
    matched = sum(r["fundamental_match"] for r in report.values())
    print(f"fundamental matches {matched}/{len(report)} channels; wrote spectra and {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    ds = _load(args, holdout=cfg.H)
    rows = tr.run_ablation_suite(cfg, ds)
    text = tr.ablation_csv(rows)
    _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prism", description="Denoised, graph-coupled, physics-regularised forecaster.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic dataset", formatter_class=_fmt())
    p.add_argument("--kind", choices=KINDS, default="coupled_rd", help="generator")
    p.add_argument("--D", type=int, default=8, help="channels")
    p.add_argument("--T", type=int, default=2000, help="rows")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--noise", type=float, default=None, help="noise level (generator default if omitted)")
    p.add_argument("--spike-rate", dest="spike_rate", type=float, default=0.0, help="outlier rate (coupled_rd only)")
    p.add_argument("--lag", type=int, default=None, help="pair lag (shifted_pairs only)")
    p.add_argument("--header", action="store_true", help="write channel names as the first row")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("denoise", help="denoise the training prefix of a CSV", formatter_class=_fmt())
    _add_data(p)
    p.add_argument("--checkpoint", required=True, help="denoiser checkpoint to read (or write with --fit-steps)")
    p.add_argument("--fit-steps", dest="fit_steps", type=int, default=0, help="train a new denoiser for this many steps")
    p.add_argument("--seg-len", dest="seg_len", type=int, default=48, help="segment length when training")
    p.add_argument("--t-star", dest="t_star", type=int, default=10, help="projection step when training")
    p.add_argument("--seed", type=int, default=0, help="random seed when training")
    p.add_argument("--out", required=True, help="output CSV (same shape as input)")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("graph", help="build one correlation graph", formatter_class=_fmt())
    _add_data(p)
    p.add_argument("--window-end", dest="window_end", type=int, default=None, help="last row of the window (default: last prefix row)")
    p.add_argument("--W", type=int, default=48, help="correlation window length")
    p.add_argument("--tau", type=float, default=0.5, help="correlation threshold")
    p.add_argument("--gamma-corr", dest="gamma_corr", type=float, default=1.0, help="edge weight exponent")
    p.add_argument("--k-min", dest="k_min", type=int, default=1, help="degree floor")
    p.add_argument("--K", type=int, default=None, help="degree cap (default max(4, ceil(D/4)))")
    p.add_argument("--out", required=True, help="adjacency JSON")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", help="train a forecaster", formatter_class=_fmt())
    _add_data(p)
    _add_train_flags(p)
    p.add_argument("--variant", choices=tr.VARIANTS, default=None, help="ablation variant")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="JSON-lines training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="one-shot H-step forecast", formatter_class=_fmt())
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="observed series CSV")
    p.add_argument("--header", action="store_true", help="first CSV row holds channel names")
    p.add_argument("--end", type=int, default=None, help="last observed row to use (default: last row)")
    p.add_argument("--out", required=True, help="forecast CSV (H rows)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score forecasts", formatter_class=_fmt())
    p.add_argument("--checkpoint", default=None, help="trained checkpoint (rolling test-window mode)")
    p.add_argument("--data", default=None, help="series CSV (rolling test-window mode)")
    p.add_argument("--holdout", type=int, default=None, help="test rows (default H)")
    p.add_argument("--pred", default=None, help="forecast CSV (direct mode)")
    p.add_argument("--truth", default=None, help="truth CSV (direct mode)")
    p.add_argument("--header", action="store_true", help="CSV files have a header row")
    p.add_argument("--out", required=True, help="eval JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stability", help="contraction certificate for one graph", formatter_class=_fmt())
    p.add_argument("--adjacency", required=True, help="adjacency JSON from the graph command")
    p.add_argument("--kappa", type=float, default=None, help="diffusion gain")
    p.add_argument("--gamma", type=float, default=None, help="damping gain")
    p.add_argument("--checkpoint", default=None, help="read learned kappa/gamma from a checkpoint")
    p.add_argument("--out", default="stability.json", help="report JSON")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("spectrum", help="per-channel spectra and comparison report", formatter_class=_fmt())
    p.add_argument("--truth", required=True, help="truth CSV")
    p.add_argument("--pred", required=True, help="forecast CSV")
    p.add_argument("--header", action="store_true", help="CSV files have a header row")
    p.add_argument("--out-dir", dest="out_dir", required=True, help="directory for spectra CSVs and report.json")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("ablate", help="train all six variants and tabulate", formatter_class=_fmt())
    _add_data(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="ablation table CSV")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"prism {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError, KeyError, de.ShapeError, HypothesisError) as exc:
        print(f"prism {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (tr.TrainingError, de.NonFiniteError, ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"prism {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"prism {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
