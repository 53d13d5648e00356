"""Command-line entry points.

``run`` executes a scenario (file path or shipped preset name) and writes
CSV time series, a metrics report and the resolved-config echo.  ``validate``
checks a scenario without running it.  ``report`` rebuilds the metrics
report from a finished run directory.

Exit codes: 0 success, 2 configuration error, 3 simulation divergence,
4 input/output error.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import runner as runner_mod
from .analysis import AnalysisError
from .errors import ConfigurationError, SimulationDivergence
from .runner import RunResult

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

PRESETS = ("baseline", "loadstep", "sharing")


def _load_scenario(name_or_path: str) -> config_mod.ScenarioConfig:
    path = Path(name_or_path)
    if path.exists():
        return config_mod.load_config(path)
    if name_or_path in PRESETS:
        text = resources.files("pvisland.scenarios").joinpath(
            f"{name_or_path}.cfg").read_text()
        return config_mod.parse_text(text)
    raise ConfigurationError(
        f"scenario {name_or_path!r} is neither a file nor one of the presets {PRESETS}")


def _apply_overrides(cfg_text_overrides: dict[str, str],
                     cfg: config_mod.ScenarioConfig) -> config_mod.ScenarioConfig:
    if not cfg_text_overrides:
        return cfg
    flat = dict(cfg.raw)
    flat.update(cfg_text_overrides)
    return config_mod.from_mapping(flat)


def cmd_run(args) -> int:
    cfg = _load_scenario(args.scenario)
    overrides: dict[str, str] = {}
    if args.duration is not None:
        overrides["solver.duration"] = repr(args.duration)
    if args.dt is not None:
        overrides["solver.dt"] = repr(args.dt)
    if args.vcc is not None:
        if args.vcc in ("on",):
            overrides["vcc.enable_at"] = "0.0"
        elif args.vcc == "off":
            overrides["vcc.enable_at"] = "off"
        elif args.vcc.startswith("at="):
            overrides["vcc.enable_at"] = args.vcc[3:]
        else:
            raise ConfigurationError("--vcc expects on, off or at=<seconds>")
    cfg = _apply_overrides(overrides, cfg)
    artifacts = runner_mod.run_scenario(cfg, args.out, with_plots=args.emit_plots)
    rep = artifacts.report
    print(f"run complete: {cfg.name}")
    print(f"  window      {rep.window[0]:.3f}..{rep.window[1]:.3f} s")
    thd_mean = sum(rep.thd_percent.values()) / 3.0
    print(f"  THD         {thd_mean:.3f} %   VUF {rep.vuf_percent:.3f} %")
    if rep.pre_thd_percent is not None:
        pre_mean = sum(rep.pre_thd_percent.values()) / 3.0
        print(f"  pre-THD     {pre_mean:.3f} %   pre-VUF {rep.pre_vuf_percent:.3f} %")
    print(f"  P1/P2       {rep.p_watts[0]:.1f} / {rep.p_watts[1]:.1f} W")
    print(f"  artifacts   {artifacts.out_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load_scenario(args.scenario)
    runner_mod.build_plant(cfg)
    runner_mod.build_controllers(cfg)
    runner_mod.build_compensator(cfg)
    print(f"scenario {cfg.name!r} is valid "
          f"({cfg.duration} s at dt={cfg.dt}, method={cfg.method})")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    echo_path = run_dir / "config.echo"
    csv_path = run_dir / "timeseries.csv"
    if not echo_path.exists() or not csv_path.exists():
        raise FileNotFoundError(f"{run_dir} does not look like a run directory")
    cfg = config_mod.load_config(echo_path)
    with open(csv_path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    if data.ndim == 1:
        data = data.reshape(1, -1)
    channels = {name: data[:, i] for i, name in enumerate(header) if name != "t"}
    plant = runner_mod.build_plant(cfg)
    # Windowed metrics rebuild exactly from the recorded channels; run-time
    # diagnostics (audit, residual, flags) live only in the original report.
    result = RunResult(
        cfg=cfg,
        times=data[:, header.index("t")],
        channels=channels,
        flags=[],
        mode_transitions=[],
        energy_audit_percent=0.0,
        max_kcl_residual=0.0,
        mpp_available_w=tuple(
            runner_mod._mpp_power(plant.dgs[d].pv, cfg.dgs[d].pv.irradiance)
            for d in range(2)),
    )
    report = runner_mod.assemble_report(result)
    path = run_dir / "report_rebuilt.txt"
    runner_mod.write_report(report, cfg, path)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvisland",
        description="Islanded PV microgrid scenario simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario")
    p_run.add_argument("scenario", help="scenario file or preset name "
                       f"({', '.join(PRESETS)})")
    p_run.add_argument("--out", default="run_out", help="output directory")
    p_run.add_argument("--duration", type=float, default=None,
                       help="override simulated seconds")
    p_run.add_argument("--dt", type=float, default=None,
                       help="override solver step in seconds")
    p_run.add_argument("--vcc", default=None,
                       help="compensator schedule: on, off or at=<seconds>")
    p_run.add_argument("--emit-plots", action="store_true",
                       help="write plot-ready data files")
    p_run.add_argument("--seedless", action="store_true",
                       help="reserved; no randomness exists in the simulator")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="check a scenario without running")
    p_val.add_argument("scenario")
    p_val.set_defaults(func=cmd_validate)

    p_rep = sub.add_parser("report", help="rebuild the report from a run directory")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationDivergence as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except AnalysisError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
