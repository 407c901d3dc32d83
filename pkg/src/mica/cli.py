"""Command line front end: train / eval / bench / flops.

Run configuration is a flat ``key = value`` file with ``#`` comments and
four sections distinguished by key prefix: ``model.``, ``train.``,
``data.`` and ``bench.``.  Unknown keys are rejected so typos cannot be
silently ignored.  Exit codes: 0 success, 1 runtime failure, 2 bad
configuration or data, 3 parameter-file integrity mismatch.
"""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .attention import GATE_KINDS, WEIGHT_MODES, MicaConfig
from .backbone import (HEAD_KINDS, ForecastModel, IntegrityError,
                       ModelConfig, config_digest, load_params, save_params)
from .bench import (MECHANISMS, fit_scaling, limit_threads, sweep_channels,
                    sweep_lengths)
from .data import ConfigError, PanelDataset, chrono_split, load_csv
from .tensor import no_grad
from .training import TrainConfig, TrainReport, eval_windows, evaluate, train


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_seeds(text: str) -> tuple[int, ...]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


# key -> (parser, default, help); None default means "required when used"
SCHEMA: dict[str, tuple] = {
    "model.horizon": (int, None, "forecast horizon H"),
    "model.input_size": (int, None, "input window length (default 2*H)"),
    "model.n_layers": (int, 4, "encoder layers"),
    "model.d_model": (int, 256, "token embedding width"),
    "model.n_heads": (int, 4, "attention heads"),
    "model.ff_hidden": (int, 1024, "feed-forward hidden width"),
    "model.d_k": (int, 32, "key/query head dimension"),
    "model.d_v": (int, 32, "value head dimension"),
    "model.patch_len": (int, 8, "patch length"),
    "model.stride": (int, 8, "patch stride"),
    "model.dropout": (float, 0.0, "residual/ffn dropout"),
    "model.head_kind": (str, "shared_linear",
                        f"one of {', '.join(HEAD_KINDS)}"),
    "model.mica": (_parse_bool, False,
                   "enable the gated global attention path"),
    "model.gate": (str, "shared_beta", f"one of {', '.join(GATE_KINDS)}"),
    "model.mlp_hidden": (int, 128, "gate mlp hidden width"),
    "model.mlp_layers": (int, 2, "gate mlp layer count"),
    "model.mlp_dropout": (float, 0.0, "gate mlp dropout"),
    "model.exclusion": (_parse_bool, False,
                        "exclude the own channel from the global memory"),
    "model.weight_mode": (str, "uniform",
                          f"one of {', '.join(WEIGHT_MODES)}"),
    "model.epsilon": (float, 1e-6, "global attention denominator guard"),
    "train.windows_batch": (int, 64, "windows per training step"),
    "train.max_steps": (int, 12000, "maximum optimizer steps"),
    "train.val_check_every": (int, 500, "steps between validation checks"),
    "train.lr0": (float, 1e-3, "initial learning rate"),
    "train.lr_decay": (float, 0.5, "multiplicative decay factor"),
    "train.lr_step": (int, 4000, "steps between decays"),
    "train.early_stop_patience": (int, 20,
                                  "validation checks without improvement"),
    "train.seeds": (_parse_seeds, (1, 2, 3, 4, 5),
                    "seed list, e.g. 1..5 or 1,7,13"),
    "data.path": (str, None, "dataset csv path"),
    "data.layout": (str, "wide", "csv layout: wide | long"),
    "data.frequency": (str, "unknown", "sampling frequency tag"),
    "data.forward_fill": (_parse_bool, False, "forward-fill missing values"),
    "data.val_size": (int, None, "validation split length (steps)"),
    "data.test_size": (int, None, "test split length (steps)"),
    "bench.sweep": (str, "C", "sweep variable: C (channels) | L (length)"),
    "bench.grid": (_parse_int_list, (8, 16, 32, 64, 128, 256, 512),
                   "sweep grid, comma separated"),
    "bench.mechanisms": (_parse_str_list, MECHANISMS,
                         f"subset of {', '.join(MECHANISMS)}"),
    "bench.channels": (int, 7, "fixed channel count for L sweeps"),
    "bench.measure": (_parse_bool, True, "measure wall-clock latency too"),
    "bench.repeats": (int, 5, "timed runs per point"),
    "bench.warmup": (int, 1, "untimed warmup runs per point"),
}


def parse_config(path) -> dict:
    """Read and validate a flat key = value configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    conf = {key: default for key, (_, default, _) in SCHEMA.items()}
    seen: set[str] = set()
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{line_no}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{path}:{line_no}: duplicate key '{key}'")
        seen.add(key)
        parser = SCHEMA[key][0]
        try:
            conf[key] = parser(value)
        except ValueError as err:
            raise ConfigError(f"{path}:{line_no}: bad value for "
                              f"'{key}': {err}") from None
    return conf


def _require(conf: dict, *keys: str) -> None:
    missing = [k for k in keys if conf[k] is None]
    if missing:
        raise ConfigError(f"missing required config keys: "
                          f"{', '.join(missing)}")


def model_config_from(conf: dict) -> ModelConfig:
    _require(conf, "model.horizon")
    mica = None
    if conf["model.mica"]:
        mica = MicaConfig(
            n_heads=conf["model.n_heads"], d_k=conf["model.d_k"],
            d_v=conf["model.d_v"], gate=conf["model.gate"],
            mlp_hidden=conf["model.mlp_hidden"],
            mlp_layers=conf["model.mlp_layers"],
            mlp_dropout=conf["model.mlp_dropout"],
            exclusion=conf["model.exclusion"],
            weight_mode=conf["model.weight_mode"],
            epsilon=conf["model.epsilon"])
    return ModelConfig(
        horizon=conf["model.horizon"], input_size=conf["model.input_size"],
        n_layers=conf["model.n_layers"], d_model=conf["model.d_model"],
        n_heads=conf["model.n_heads"], ff_hidden=conf["model.ff_hidden"],
        d_k=conf["model.d_k"], d_v=conf["model.d_v"],
        patch_len=conf["model.patch_len"], stride=conf["model.stride"],
        dropout=conf["model.dropout"], head_kind=conf["model.head_kind"],
        mica=mica)


def train_config_from(conf: dict) -> TrainConfig:
    return TrainConfig(
        windows_batch=conf["train.windows_batch"],
        max_steps=conf["train.max_steps"],
        val_check_every=conf["train.val_check_every"],
        lr0=conf["train.lr0"], lr_decay=conf["train.lr_decay"],
        lr_step=conf["train.lr_step"],
        early_stop_patience=conf["train.early_stop_patience"],
        seeds=tuple(conf["train.seeds"]))


def load_panel(conf: dict) -> PanelDataset:
    _require(conf, "data.path", "data.val_size", "data.test_size")
    panel = load_csv(conf["data.path"], layout=conf["data.layout"],
                     frequency=conf["data.frequency"],
                     forward_fill=conf["data.forward_fill"])
    return chrono_split(panel, conf["data.val_size"], conf["data.test_size"])


# -- output helpers ---------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _report_rows(report: TrainReport):
    for step, loss in report.train_trace:
        yield ["train", step, _fmt(loss), ""]
    for step, val_mae in report.val_trace:
        yield ["val", step, _fmt(val_mae), ""]
    yield ["summary", report.best_step, _fmt(report.test_mae),
           _fmt(report.test_rmse)]


# -- subcommands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    conf = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel = load_panel(conf)
    mcfg = model_config_from(conf)
    tcfg = train_config_from(conf)
    digest = config_digest(mcfg, panel.n_channels)

    def run_seed(seed: int) -> TrainReport:
        model = ForecastModel(mcfg, panel.n_channels, seed=seed)
        report = train(model, panel, tcfg, seed)
        save_params(out / f"params_seed{seed}.bin", model, digest)
        _write_csv(out / f"report_seed{seed}.csv",
                   ["record", "step", "mae", "rmse"], _report_rows(report))
        return report

    if args.parallel_seeds > 1:
        with ThreadPoolExecutor(max_workers=args.parallel_seeds) as pool:
            reports = list(pool.map(run_seed, tcfg.seeds))
    else:
        reports = [run_seed(seed) for seed in tcfg.seeds]

    rows = [[r.seed, r.best_step, _fmt(r.test_mae), _fmt(r.test_rmse)]
            for r in reports]
    maes = np.array([r.test_mae for r in reports])
    rmses = np.array([r.test_rmse for r in reports])
    rows.append(["mean", "", _fmt(maes.mean()), _fmt(rmses.mean())])
    rows.append(["std", "", _fmt(maes.std()), _fmt(rmses.std())])
    _write_csv(out / "summary.csv",
               ["seed", "best_step", "test_mae", "test_rmse"], rows)
    for r in reports:
        print(f"seed {r.seed}: best_step={r.best_step} "
              f"test_mae={r.test_mae:.6f} test_rmse={r.test_rmse:.6f}")
    print(f"mean test_mae={maes.mean():.6f} rmse={rmses.mean():.6f}")
    return 0


def cmd_eval(args) -> int:
    conf = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel = load_panel(conf)
    mcfg = model_config_from(conf)
    expected = config_digest(mcfg, panel.n_channels)
    stored, arrays = load_params(args.params)
    if stored != expected:
        raise IntegrityError(
            f"parameter file digest {stored[:12]}... does not match the "
            f"configured model ({expected[:12]}...); refusing to evaluate")
    model = ForecastModel(mcfg, panel.n_channels, seed=0)
    model.load_state(arrays)

    ctx, tgt = eval_windows(panel, mcfg.input_size, mcfg.horizon, "test")
    test_mae, test_rmse = evaluate(model, ctx, tgt)
    vctx, vtgt = eval_windows(panel, mcfg.input_size, mcfg.horizon, "val")
    val_mae, val_rmse = evaluate(model, vctx, vtgt)
    _write_csv(out / "metrics.csv", ["split", "mae", "rmse"],
               [["val", _fmt(val_mae), _fmt(val_rmse)],
                ["test", _fmt(test_mae), _fmt(test_rmse)]])

    preds = []
    with no_grad():
        for i in range(0, len(ctx), 64):
            preds.append(model.forward(ctx[i:i + 64]).data)
    pred = np.concatenate(preds, axis=0)
    rows = []
    for w in range(pred.shape[0]):
        for ci, cid in enumerate(panel.channel_ids):
            for h in range(mcfg.horizon):
                rows.append([w, cid, h + 1, _fmt(tgt[w, ci, h]),
                             _fmt(pred[w, ci, h])])
    _write_csv(out / "forecasts.csv",
               ["window", "channel", "h", "y_true", "y_pred"], rows)
    print(f"test mae={test_mae:.6f} rmse={test_rmse:.6f} "
          f"({pred.shape[0]} windows)")
    return 0


def _bench_rows_csv(rows):
    for r in rows:
        lat = _fmt(r.latency.mean_ms) if r.latency else ""
        yield [r.mechanism, r.size, r.flops.local_flops,
               r.flops.global_flops, r.flops.gate_flops,
               r.flops.backbone_flops, r.flops.total_flops, r.params, lat]


def cmd_bench(args) -> int:
    conf = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = model_config_from(conf)
    mechanisms = conf["bench.mechanisms"]
    unknown = set(mechanisms) - set(MECHANISMS)
    if unknown:
        raise ConfigError(f"unknown bench mechanisms: {sorted(unknown)}")
    if "mica" in mechanisms and mcfg.mica is None:
        raise ConfigError("bench includes 'mica' but model.mica = false")
    grid = list(conf["bench.grid"])
    limit_threads()
    common = dict(mechanisms=mechanisms, measure=conf["bench.measure"],
                  repeats=conf["bench.repeats"], warmup=conf["bench.warmup"])
    if conf["bench.sweep"] == "C":
        rows = sweep_channels(mcfg, grid, **common)
    elif conf["bench.sweep"] == "L":
        rows = sweep_lengths(mcfg, grid, n_channels=conf["bench.channels"],
                             **common)
    else:
        raise ConfigError(f"bench.sweep must be C or L, "
                          f"got {conf['bench.sweep']!r}")

    _write_csv(out / "bench.csv",
               ["mechanism", "size", "local_flops", "global_flops",
                "gate_flops", "backbone_flops", "total_flops", "params",
                "latency_ms"], _bench_rows_csv(rows))

    fit_rows = []
    for mech in mechanisms:
        pts = [r for r in rows if r.mechanism == mech]
        sizes = [r.size for r in pts]
        flop_fit = fit_scaling(sizes, [r.flops.total_flops for r in pts])
        fit_rows.append([mech, "flops", _fmt(flop_fit.exponent),
                         _fmt(flop_fit.r2)])
        print(f"{mech}: flop exponent {flop_fit.exponent:.3f} "
              f"(r2={flop_fit.r2:.4f})")
        if conf["bench.measure"]:
            lat_fit = fit_scaling(sizes,
                                  [r.latency.mean_ms for r in pts])
            fit_rows.append([mech, "latency", _fmt(lat_fit.exponent),
                             _fmt(lat_fit.r2)])
            print(f"{mech}: latency exponent {lat_fit.exponent:.3f} "
                  f"(r2={lat_fit.r2:.4f})")
    _write_csv(out / "bench_fits.csv",
               ["mechanism", "metric", "exponent", "r2"], fit_rows)
    return 0


def cmd_flops(args) -> int:
    from .bench import count_flops, count_params
    conf = parse_config(args.config)
    mcfg = model_config_from(conf)
    c = conf["bench.channels"]
    mechanisms = conf["bench.mechanisms"]
    if "mica" in mechanisms and mcfg.mica is None:
        raise ConfigError("flops for 'mica' need model.mica = true")
    rows = []
    for mech in mechanisms:
        rep = count_flops(mcfg, c, mech)
        params = count_params(mcfg, c, mech)
        rows.append([mech, c, rep.local_flops, rep.global_flops,
                     rep.gate_flops, rep.backbone_flops, rep.total_flops,
                     params, ""])
        print(f"{mech:9s} C={c}: total={rep.total_flops:,} "
              f"(local={rep.local_flops:,} global={rep.global_flops:,} "
              f"gate={rep.gate_flops:,} backbone={rep.backbone_flops:,}) "
              f"params={params:,}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "flops.csv",
                   ["mechanism", "channels", "local_flops", "global_flops",
                    "gate_flops", "backbone_flops", "total_flops", "params",
                    "latency_ms"], rows)
    return 0


# -- entry point -----------------------------------------------------------------------

def _schema_epilog() -> str:
    lines = ["configuration keys (key = value, # comments):"]
    for key, (_, default, help_text) in SCHEMA.items():
        shown = "required" if default is None else f"default {default}"
        lines.append(f"  {key:28s} {help_text} ({shown})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mica",
        description="Forecasting with gated local/global channel attention.",
        epilog=_schema_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train across seeds")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True,
                         help="output directory for params and reports")
    p_train.add_argument("--parallel-seeds", type=int, default=1)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate saved parameters")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--params", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_bench = sub.add_parser("bench", help="scaling sweep (flops + latency)")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(fn=cmd_bench)

    p_flops = sub.add_parser("flops", help="one-point cost breakdown")
    p_flops.add_argument("--config", required=True)
    p_flops.add_argument("--out", default=None)
    p_flops.set_defaults(fn=cmd_flops)

    for p in (p_train, p_eval, p_bench, p_flops):
        p.add_argument("--threads", type=int, default=None,
                       help="limit BLAS thread pools (bench forces 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            print("threadpoolctl not installed; --threads ignored",
                  file=sys.stderr)
    try:
        return args.fn(args)
    except IntegrityError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
