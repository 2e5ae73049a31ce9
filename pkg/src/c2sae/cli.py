"""Command-line entry point: ``c2sae simulate|train|eval|infer|bench|export``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command that writes an artifact also writes ``<out>.manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._container import FormatError
from .channel import ChannelError, ScenarioConfig, SoundingConfig, load_scenario
from .model import MODEL_KINDS, ModelConfig, ModelError, load_checkpoint, predict_dps, save_checkpoint
from .ndiff import ConfigError
from .ranging import extract_paths
from .sounding import (
    DATASET_MAGIC,
    DatasetError,
    export_dps_csv,
    read_dataset,
    read_delimited,
    simulate_dataset,
    write_dataset,
)
from .train import (
    REPORT_COLUMNS,
    EvalReport,
    TrainConfig,
    TrainingDivergedError,
    benchmark_inference,
    evaluate_mse,
    roundtrip_mse,
    split_dataset,
    train,
    write_latency_table,
    write_loss_curve,
)

log = logging.getLogger("c2sae")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
TABLE_NP = (1, 2, 4, 8, 16, 32)


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# helpers


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("N_p values must be >= 1")
    return vals


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_manifest(out, command: str, config: dict, inputs: dict, outputs: list, seed, started: float) -> None:
    manifest = {
        "subcommand": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(o) for o in outputs],
        "seed": seed,
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    with open(f"{out}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _dataclass_from(cls, d: dict, what: str):
    try:
        return cls.from_dict(d)
    except TypeError as exc:
        raise UsageError(f"bad {what} config: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    started = time.time()
    base = load_scenario(args.config) if args.config else ScenarioConfig()
    d = base.to_dict()
    for key in ("scenario", "n_positions", "n_pairs", "n_points", "snr_db"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.periods is not None:
        d["sounding"] = {**d["sounding"], "periods": args.periods}
    sc = ScenarioConfig.from_dict(d)
    ds = simulate_dataset(sc, method=args.method)
    write_dataset(ds, args.out)
    _write_manifest(args.out, "simulate", {**sc.to_dict(), "method": args.method}, {}, [args.out], sc.seed, started)
    _say(args, f"wrote {len(ds)} windows (N_p={ds.n_points}, {ds.n_los} LoS / {ds.n_nlos} NLoS) to {args.out}")
    return EXIT_OK


def _model_and_train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    cfg = _load_json(args.config)
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    model = dict(cfg.get("model", {}))
    tcfg = dict(cfg.get("train", {}))
    for flag, key in (("n_layers", "n_layers"), ("d_model", "d_model"), ("n_heads", "n_heads")):
        if getattr(args, flag) is not None:
            model[key] = getattr(args, flag)
    for flag in ("steps", "batch_size", "lr", "eval_every", "patience", "split"):
        if getattr(args, flag) is not None:
            tcfg["split_policy" if flag == "split" else flag] = getattr(args, flag)
    if args.seed is not None:
        model["seed"] = args.seed
    try:
        return _dataclass_from(ModelConfig, model, "model"), _dataclass_from(TrainConfig, tcfg, "train")
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    started = time.time()
    model_cfg, train_cfg = _model_and_train_configs(args)
    ds = read_dataset(_require(args.dataset, "dataset"))
    train_set, val_set, _ = split_dataset(
        ds, train_cfg.split_policy, train_cfg.test_fraction, train_cfg.val_fraction, seed=model_cfg.seed
    )
    res = train(args.kind, train_set, val_set, model_cfg, train_cfg)
    save_checkpoint(res.checkpoint, args.out)
    curve = f"{args.out}.loss.csv"
    write_loss_curve(res, curve)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "kind": args.kind}
    _write_manifest(args.out, "train", config, {"dataset": args.dataset}, [args.out, curve], model_cfg.seed, started)
    meta = res.checkpoint.metadata
    _say(args, f"{args.kind}: {meta['steps']} steps, best val MSE {meta['best_val_mse']:.4f} at step {meta['best_step']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    ae = load_checkpoint(_require(args.ae, "checkpoint"))
    base = load_checkpoint(_require(args.baseline, "checkpoint"))
    ds = read_dataset(_require(args.dataset, "dataset"))
    if args.split == "none":
        test_set = ds.with_stats(ae.stats)
    else:
        tcfg = TrainConfig.from_dict(ae.metadata.get("train_config") or {})
        _, _, test_set = split_dataset(ds, args.split, tcfg.test_fraction, tcfg.val_fraction, seed=ae.config.seed)
    rep = evaluate_mse(ae, base, test_set, args.n_points)
    if args.latency_repeats > 0:
        rows = benchmark_inference(ae, args.n_points, repeats=args.latency_repeats)
        rep.latency_ms_mean = [r.mean_ms for r in rows]
        rep.latency_ms_std = [r.std_ms for r in rows]
    rep.to_csv(args.out)
    outputs = [args.out]
    if args.summary:
        Path(args.summary).write_text(rep.summary() + "\n")
        outputs.append(args.summary)
    config = {"n_points": args.n_points, "split": args.split, "latency_repeats": args.latency_repeats}
    inputs = {"ae": args.ae, "baseline": args.baseline, "dataset": args.dataset}
    _write_manifest(args.out, "eval", config, inputs, outputs, ae.config.seed, started)
    _say(args, rep.summary())
    if ae.kind == "c2s-ae":
        _say(args, f"AE round-trip MSE (decode(encode(P))): {roundtrip_mse(ae, test_set):.4f}")
    return EXIT_OK


def _read_csi(path) -> np.ndarray:
    header, data = read_delimited(_require(path, "CSI input"))
    cols = [h.strip().lower() for h in header]
    if "magnitude" in cols and "phase" in cols:
        data = data[:, [cols.index("magnitude"), cols.index("phase")]]
    elif data.shape[1] != 2:
        raise UsageError(f"{path}: expected columns magnitude,phase")
    if len(data) == 0:
        raise UsageError(f"{path}: no CSI rows")
    return data


def cmd_infer(args) -> int:
    started = time.time()
    ck = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    csi = _read_csi(args.csi)
    dps = predict_dps(ck, csi[None])[0]
    delay_step = ck.metadata.get("delay_step") or SoundingConfig().delay_step
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point"] + [f"dps_{k}" for k in range(dps.shape[1])])
        for i, row in enumerate(dps):
            w.writerow([i] + [repr(float(v)) for v in row])
    paths_out = f"{args.out}.paths.csv"
    with open(paths_out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "delay_s", "range_m", "power"])
        for i, row in enumerate(dps):
            for est in extract_paths(row, delay_step, args.threshold_db, args.min_separation):
                w.writerow([i, repr(est.delay), repr(est.range), repr(est.power)])
    config = {"threshold_db": args.threshold_db, "min_separation": args.min_separation}
    inputs = {"checkpoint": args.checkpoint, "csi": args.csi}
    _write_manifest(args.out, "infer", config, inputs, [args.out, paths_out], ck.config.seed, started)
    _say(args, f"predicted {len(dps)} DPS rows to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    started = time.time()
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    ck = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    rows = benchmark_inference(ck, args.n_points, repeats=args.repeats, warmup=args.warmup, seed=args.seed or 0)
    write_latency_table(rows, args.out)
    config = {"n_points": args.n_points, "repeats": args.repeats, "warmup": args.warmup, "batch_size": 1}
    _write_manifest(args.out, "bench", config, {"checkpoint": args.checkpoint}, [args.out], args.seed, started)
    for r in rows:
        _say(args, f"N_p={r.n_points:>2}  {r.mean_ms:8.3f} ms +/- {r.std_ms:.3f}")
    return EXIT_OK


def cmd_export(args) -> int:
    started = time.time()
    src = _require(args.input, "input")
    with open(src, "rb") as fh:
        magic = fh.read(8)
    if magic == DATASET_MAGIC:
        ds = read_dataset(src)
        if not 0 <= args.window < max(len(ds), 1):
            raise UsageError(f"--window {args.window} out of range for {len(ds)} windows")
        power = ds.batch(args.window)[0] if len(ds) else np.zeros((0, ds.n_bins))
        export_dps_csv(power, ds.delay_step, args.out, db=args.db)
        kind = "dps"
    else:
        header, data = read_delimited(src)
        if header[: len(REPORT_COLUMNS)] == REPORT_COLUMNS:
            rep = EvalReport.from_csv(src)
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["n_points", "mse_baseline", "mse_ae", "improvement_pct"])
                for r in rep.rows():
                    w.writerow([r[0]] + [repr(float(v)) for v in r[1:4]])
            kind = "mse"
        elif header and header[0] == "point":
            power = data[:, 1:]
            export_dps_csv(power, SoundingConfig().delay_step, args.out, db=args.db)
            kind = "dps"
        else:
            raise UsageError(f"{src}: not a dataset, report or predicted-DPS file")
    _write_manifest(args.out, "export", {"db": args.db, "kind": kind}, {"input": src}, [args.out], args.seed, started)
    _say(args, f"exported {kind} series to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed from the config")
    common.add_argument("--config", default=None, help="JSON config file; flags override its values")
    common.add_argument("--out", required=True, help="output path; a .manifest.json is written beside it")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="c2sae", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    defaults = json.dumps(ScenarioConfig().to_dict(), indent=2)
    s = sub.add_parser(
        "simulate",
        parents=[common],
        help="generate a synthetic DPS/CSI dataset",
        epilog=f"scenario config defaults:\n{defaults}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    s.add_argument("--scenario", choices=["los", "nlos", "mixed"])
    s.add_argument("--n-positions", dest="n_positions", type=int)
    s.add_argument("--n-pairs", dest="n_pairs", type=int)
    s.add_argument("--n-points", dest="n_points", type=int)
    s.add_argument("--snr-db", dest="snr_db", type=float)
    s.add_argument("--periods", type=int, help="sounding periods averaged per position")
    s.add_argument("--method", choices=["sound", "ideal"], default="sound")
    s.set_defaults(func=cmd_simulate)

    train_defaults = json.dumps({"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict()}, indent=2)
    t = sub.add_parser(
        "train",
        parents=[common],
        help="train the autoencoder or the decoder-only baseline",
        epilog=f"config defaults:\n{train_defaults}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    t.add_argument("--dataset", required=True)
    t.add_argument("--kind", choices=MODEL_KINDS, required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--split", choices=["spatial", "random"])
    t.add_argument("--n-layers", dest="n_layers", type=int)
    t.add_argument("--d-model", dest="d_model", type=int)
    t.add_argument("--n-heads", dest="n_heads", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="compare both models per N_p on held-out windows")
    e.add_argument("--ae", required=True, help="autoencoder checkpoint")
    e.add_argument("--baseline", required=True, help="baseline checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--n-points", dest="n_points", type=_int_list, default=list(TABLE_NP))
    e.add_argument("--split", choices=["spatial", "random", "none"], default="spatial")
    e.add_argument("--latency-repeats", dest="latency_repeats", type=int, default=0)
    e.add_argument("--summary", help="also write the human-readable summary here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="predict DPS from CSI and extract paths")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--csi", required=True, help="CSV with columns magnitude,phase; one row per point")
    i.add_argument("--threshold-db", dest="threshold_db", type=float, default=-25.0)
    i.add_argument("--min-separation", dest="min_separation", type=int, default=2)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", parents=[common], help="time batch-size-1 inference per N_p")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--n-points", dest="n_points", type=_int_list, default=list(TABLE_NP))
    b.add_argument("--repeats", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export", parents=[common], help="write plot-ready delimited text")
    x.add_argument("--input", required=True, help="dataset file, eval report or predicted-DPS CSV")
    x.add_argument("--db", action="store_true", help="write DPS as 10*log10(power)")
    x.add_argument("--window", type=int, default=0, help="dataset window to export")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (FormatError, TrainingDivergedError, OSError) as exc:
        print(f"c2sae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ConfigError, ChannelError, DatasetError, ModelError) as exc:
        print(f"c2sae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
