"""Command-line interface.

Subcommands:
    run <config.yaml>          execute a scenario file
    preset <name>              execute a shipped preset (``--list`` to list)
    curve <config|preset> --loss-grid start:stop:step
                               SKR-versus-loss sweep
    figdata <report.json> --figure <id>
                               regenerate one figure CSV from a saved report

Outputs land under --out (default: $POLARLINK_OUT or ./runs), one directory
per run: config echo, machine-readable manifest, counts/blocks CSVs, figure
CSVs, and the full report JSON.

Exit codes: 0 success, 2 configuration error, 3 synchronization no-lock,
4 every analyzed block yielded zero key.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, NoLockError, UnsupportedFigureError
from .runner import RunReport, blocks_csv, emit_figure_data, run_curve, run_scenario
from .scenario import ScenarioConfig, dump_config, load_config, preset, preset_names

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_LOCK = 3
EXIT_ZERO_KEY = 4

_DEFAULT_FIGURES = ["qber_timeseries", "skr_timeseries", "cumulative_bits", "jitter_histogram"]


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("POLARLINK_OUT", "runs"))


def _write_outputs(report: RunReport, out_root: Path, figures: list[str]) -> Path:
    run_dir = out_root / report.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    manifest = {
        "schema_version": report.config.get("schema_version"),
        "config_hash": report.config_hash,
        "seed": report.seed,
        "versions": {
            "polarlink": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    (run_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    (run_dir / "counts.csv").write_text(report.totals.to_csv(), encoding="utf-8")
    if report.blocks:
        (run_dir / "blocks.csv").write_text(blocks_csv(report), encoding="utf-8")
    for fig in figures:
        try:
            (run_dir / f"{fig}.csv").write_text(emit_figure_data(report, fig), encoding="utf-8")
        except UnsupportedFigureError:
            continue
    return run_dir


def _finish_run(report: RunReport, args) -> int:
    run_dir = _write_outputs(report, _out_root(args), _DEFAULT_FIGURES)
    for line in report.diagnostics:
        print(f"note: {line}", file=sys.stderr)
    if report.sync is not None:
        s = report.sync
        print(
            f"sync: {s.n_tags} tags, period rel err {s.period_rel_err:.2e}, "
            f"confidence {s.confidence:.1f}, assignment {s.assignment_accuracy:.4%}, "
            f"jitter sigma {s.sigma_fit_ps:.1f} ps, QBER delta {s.qber_delta_pp:.4f} pp"
        )
    if report.blocks:
        print(
            f"blocks: {len(report.blocks)}, mean SKR {report.mean_skr_bps():.4g} b/s, "
            f"mean t_key {report.mean_t_key_s():.4g} s"
        )
    print(f"outputs: {run_dir}")
    if report.blocks and all(b.key_bits == 0 for b in report.blocks):
        print("error: zero secret key in every block", file=sys.stderr)
        return EXIT_ZERO_KEY
    return EXIT_OK


def _load_scenario(spec: str) -> ScenarioConfig:
    if Path(spec).exists():
        return load_config(spec)
    return preset(spec)


def _parse_grid(text: str):
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"bad --loss-grid {text!r}, expected start:stop:step") from exc
    if step <= 0 or stop < start:
        raise ConfigError("loss grid needs step > 0 and stop >= start")
    n = int(round((stop - start) / step)) + 1
    return [start + i * step for i in range(n)]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="polarlink", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"polarlink {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="execute a scenario config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)

    p_preset = sub.add_parser("preset", help="execute a shipped preset scenario")
    p_preset.add_argument("name", nargs="?")
    p_preset.add_argument("--list", action="store_true")
    p_preset.add_argument("--show", action="store_true", help="print the config instead of running")
    p_preset.add_argument("--out", default=None)

    p_curve = sub.add_parser("curve", help="SKR-versus-loss sweep")
    p_curve.add_argument("config", help="scenario file or preset name")
    p_curve.add_argument("--loss-grid", required=True, help="start:stop:step in dB")
    p_curve.add_argument("--out", default=None)

    p_fig = sub.add_parser("figdata", help="regenerate a figure CSV from a report")
    p_fig.add_argument("report")
    p_fig.add_argument("--figure", required=True)
    p_fig.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        if args.cmd == "run":
            return _finish_run(run_scenario(load_config(args.config)), args)

        if args.cmd == "preset":
            if args.list or not args.name:
                print("\n".join(preset_names()))
                return EXIT_OK
            cfg = preset(args.name)
            if args.show:
                print(dump_config(cfg), end="")
                return EXIT_OK
            return _finish_run(run_scenario(cfg), args)

        if args.cmd == "curve":
            cfg = _load_scenario(args.config)
            report = run_curve(cfg, _parse_grid(args.loss_grid))
            run_dir = _out_root(args) / report.name
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
            (run_dir / "skr_vs_loss.csv").write_text(
                emit_figure_data(report, "skr_vs_loss"), encoding="utf-8"
            )
            print(f"outputs: {run_dir}")
            return EXIT_OK

        if args.cmd == "figdata":
            report = RunReport.from_json(Path(args.report).read_text(encoding="utf-8"))
            csv_text = emit_figure_data(report, args.figure)
            if args.out:
                out = Path(args.out)
                out.parent.mkdir(parents=True, exist_ok=True)
                out.write_text(csv_text, encoding="utf-8")
                print(f"outputs: {out}")
            else:
                print(csv_text, end="")
            return EXIT_OK
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoLockError as exc:
        print(f"no lock: {exc}", file=sys.stderr)
        return EXIT_NO_LOCK
    except UnsupportedFigureError as exc:
        print(f"unsupported figure: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
