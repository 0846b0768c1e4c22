"""``droughtcast`` command line.

Exit codes: 0 success, 2 input or configuration error, 3 numerical or training failure.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from .datagen import synth_climate, synth_pdsi_field
from .evaluation import EvalReport, HorizonFailure, horizon_sweep, write_horizon_csv, write_report, write_summary
from .grid import GridSeries, load_grid_series, save_grid_series
from .indices import DEFAULT_AWC_MM, DailyClimate, htc, pdsi_grid, read_value_csv
from .pipeline import (
    ConfigError,
    PersistenceModel,
    RunConfig,
    evaluate_model,
    load_model,
    model_dims,
    save_model,
    synth_config_from_file,
    train_and_score,
    train_model,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("droughtcast")


class InputError(Exception):
    pass


def _load_grid(path, what: str) -> GridSeries:
    try:
        return load_grid_series(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"{what} file {path}: {exc}") from None


def _run_config(args, names=("model", "L", "k", "epochs", "lr", "seed")) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {name: getattr(args, name, None) for name in names}
    return cfg.override(**overrides)


def parse_ks(text: str) -> list[int]:
    """``"1..6"`` or ``"1,2,4"`` -> sorted horizons."""
    text = text.strip()
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        ks = list(range(a, b + 1))
    elif re.fullmatch(r"\d+(,\d+)*", text):
        ks = [int(v) for v in text.split(",")]
    else:
        raise InputError(f"malformed --ks {text!r}; use 'a..b' or a comma list")
    if not ks or min(ks) < 1 or sorted(set(ks)) != ks:
        raise InputError(f"--ks {text!r} must list strictly increasing horizons >= 1")
    return ks


def cmd_index(args) -> int:
    out = Path(args.out)
    if args.kind == "htc":
        try:
            precip, temps = read_value_csv(args.precip), read_value_csv(args.temps)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
        value = htc(DailyClimate(temps, precip))
        out.write_text("htc\n%.17g\n" % value)
        return EXIT_OK
    precip, temps = _load_grid(args.precip, "precip"), _load_grid(args.temps, "temps")
    if precip.shape != temps.shape:
        raise InputError(f"precip {args.precip} is {precip.shape}, temps {args.temps} is {temps.shape}")
    lats = [args.lat - args.lat_step * r for r in range(precip.H)]
    save_grid_series(pdsi_grid(precip, temps, lats, args.awc), out)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = synth_config_from_file(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    precip, temps = synth_climate(cfg)
    save_grid_series(precip, out / "precip.gsv")
    save_grid_series(temps, out / "temps.gsv")
    save_grid_series(synth_pdsi_field(cfg), out / "pdsi.gsv")
    manifest = {name: getattr(cfg, name) for name in cfg.field_names()}
    manifest.update(files="precip.gsv,temps.gsv,pdsi.gsv", rng="philox4x64-10")
    write_summary({k: ("%.17g" % v if isinstance(v, float) else str(v)) for k, v in manifest.items()},
                  out / "manifest.txt")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = args.data or cfg.data
    dest = args.out or cfg.out
    if not data or not dest:
        raise InputError("train needs --data and --out (or data=/out= in the config)")
    gs = _load_grid(data, "data")
    result = train_model(cfg, gs)
    save_model(result.model, dest, gs.H, gs.W)
    lines = [result.log_header] + [",".join("%.17g" % v if isinstance(v, float) else str(v) for v in row)
                                   for row in result.log_rows]
    Path(f"{dest}.log.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args, ("L", "k"))
    gs = _load_grid(args.data or cfg.data, "data")
    if args.model == "persistence":
        model = PersistenceModel(cfg.k, cfg.L)
    else:
        try:
            model = load_model(args.model)
        except (OSError, ValueError) as exc:
            raise InputError(f"model {args.model}: {exc}") from None
    dims = model_dims(model)
    if dims is not None and dims != (gs.H, gs.W):
        raise InputError(f"model grid {dims[0]}x{dims[1]} does not match data {gs.H}x{gs.W}")
    report = evaluate_model(model, gs, cfg.split_spec(), args.split)
    out = args.out_dir or cfg.out_dir
    if not out:
        raise InputError("evaluate needs --out-dir")
    write_report(report, out)
    if args.figures:
        from .plotting import plot_r2_map
        plot_r2_map(report.r2_map, Path(out) / "r2_map.png", f"R² per cell ({model.name}, k={model.horizon})")
    return EXIT_OK


def cmd_horizon(args) -> int:
    ks = parse_ks(args.ks)
    cfg = _run_config(args)
    gs = _load_grid(args.data or cfg.data, "data")
    out = Path(args.out_dir or cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    reports: dict[int, EvalReport] = {}

    def run(k):
        reports[k] = train_and_score(cfg.override(k=k), gs)
        log.info("k=%d mean R² %.6f", k, reports[k].mean_r2)
        return reports[k].mean_r2

    curve = horizon_sweep(run, ks)
    write_horizon_csv(curve, out / "horizon.csv")
    if args.figures:
        from .plotting import plot_horizon
        plot_horizon(curve, out / "horizon.png", f"Mean R² by horizon ({cfg.model})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="droughtcast", description="Drought indices and grid forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ix = sub.add_parser("index", help="compute PDSI grids or an HTC value")
    ix.add_argument("kind", choices=("pdsi", "htc"))
    ix.add_argument("--precip", required=True)
    ix.add_argument("--temps", required=True)
    ix.add_argument("--awc", type=float, default=DEFAULT_AWC_MM, help="soil water capacity, mm")
    ix.add_argument("--lat", type=float, default=42.0, help="latitude of row 0, degrees")
    ix.add_argument("--lat-step", type=float, default=0.0, help="degrees per row southward")
    ix.add_argument("--out", required=True)
    ix.set_defaults(func=cmd_index)

    sy = sub.add_parser("synth", help="generate synthetic climate and PDSI grids")
    sy.add_argument("--config", required=True)
    sy.add_argument("--out-dir", required=True)
    sy.set_defaults(func=cmd_synth)

    def run_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--data")
        sp.add_argument("--L", type=int)
        sp.add_argument("--k", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--seed", type=int)

    tr = sub.add_parser("train", help="train a forecaster")
    run_flags(tr)
    tr.add_argument("--model", choices=("convlstm", "gbt", "gbt-spatial"))
    tr.add_argument("--out")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score a checkpoint or the persistence baseline")
    run_flags(ev)
    ev.add_argument("--model", required=True, help="checkpoint path or 'persistence'")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--out-dir")
    ev.add_argument("--figures", action="store_true", help="also write r2_map.png")
    ev.set_defaults(func=cmd_evaluate)

    hz = sub.add_parser("horizon-sweep", help="train and score one model per horizon")
    run_flags(hz)
    hz.add_argument("--model", choices=("convlstm", "gbt", "gbt-spatial", "persistence"))
    hz.add_argument("--ks", required=True, help="'1..6' or '1,3,6'")
    hz.add_argument("--out-dir")
    hz.add_argument("--figures", action="store_true", help="also write horizon.png")
    hz.set_defaults(func=cmd_horizon)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HorizonFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
