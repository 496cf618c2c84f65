"""Command-line entry point.

Examples
--------
    softbladder identify force --out results/
    softbladder identify bandwidth --pwm 10 25 40
    softbladder workspace
    softbladder simulate --curve C2 --rate 8 --mode discrete --seed 3
    softbladder matrix --out results/
    softbladder report --out results/
"""

import argparse
import logging
import sys
from pathlib import Path

from .core import SoftBladderError
from .harness import (
    RATES,
    format_summary,
    identify_bandwidth,
    identify_flow,
    identify_force,
    load_settings,
    read_matrix_csv,
    run_full_matrix,
    simulate,
    write_bode_data,
    write_record_plots,
    write_surface_data,
    write_workspace_data,
)
from .pneumatics import AVERAGED, DISCRETE, write_flow_map_csv
from .trajectories import CURVE_IDS

log = logging.getLogger("softbladder")


class StageError(Exception):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_identify(args, settings):
    out = _out_dir(args)
    if args.target == "force":
        model, r2, data = identify_force(settings, seed=args.seed)
        data.to_csv(out / "force_dataset.csv")
        write_surface_data(out, model, settings.params)
        values = {"r2": r2, **model.to_dict()}
    elif args.target == "flow":
        coeffs, data = identify_flow(settings, seed=args.seed)
        for direction, rows in data.items():
            write_flow_map_csv(out / f"flow_{direction}.csv", rows[:, 3], rows[:, 1])
        values = {}
        for name, pm in (("out_map", coeffs.out_map), ("in_map", coeffs.in_map)):
            values.update(zip((f"{name}_a", f"{name}_b", f"{name}_c"), pm.as_tuple()))
    else:
        values = {}
        for pwm in args.pwm:
            settings.params = settings.params.with_(pwm_frequency=pwm)
            fit, data, gains = identify_bandwidth(settings)
            tag = f"_{pwm:g}Hz"
            data.to_csv(out / f"bode{tag}.csv")
            write_bode_data(out, data, fit, tag)
            values.update({f"{k}{tag}": v for k, v in fit.to_dict().items()})
            values.update({f"kp{tag}": gains.kp, f"ki{tag}": gains.ki})
    text = format_summary(f"identify {args.target}", values)
    (out / f"identify_{args.target}.txt").write_text(text)
    print(text, end="")


def cmd_workspace(args, settings):
    out = _out_dir(args)
    env, inside = write_workspace_data(out, settings.model, settings.params)
    values = {"z_max_mm": float(env[-1, 0]), "floor_at_stroke_N": float(env[-1, 1]),
              "ceiling_at_stroke_N": float(env[-1, 2])}
    values.update({f"{cid}_inside_fraction": v for cid, v in inside.items()})
    print(format_summary("workspace", values), end="")


def cmd_simulate(args, settings):
    out = _out_dir(args)
    record = simulate(settings, args.curve, args.rate, args.seed, args.mode)
    record.to_csv(out / f"run_{args.curve}_{args.rate:g}.csv")
    write_record_plots(out, record)
    values = {**record.metadata, **record.summary}
    print(format_summary(f"simulate {args.curve} @ {args.rate:g} mm/s", values), end="")


def cmd_matrix(args, settings):
    out = _out_dir(args)
    result = run_full_matrix(settings, args.curves, args.rates, args.seed, out)
    print(result.format_table())
    if result.failures:
        raise StageError("matrix", f"{len(result.failures)} cell(s) failed")


def cmd_report(args, settings):
    out = Path(args.out)
    found = False
    for name in ("identify_force.txt", "identify_flow.txt", "identify_bandwidth.txt",
                 "identification.txt"):
        path = out / name
        if path.exists():
            print(path.read_text(), end="")
            found = True
    matrix_csv = out / "matrix.csv"
    if matrix_csv.exists():
        rows = read_matrix_csv(matrix_csv)
        ceiling = settings.model.force(settings.params.stroke, settings.params.supply_pressure)
        print("[matrix]")
        for row in rows:
            pct = 100.0 * row["mean_abs_error"] / ceiling
            print(f"{row['curve']} @ {row['rate_mm_s']:g} mm/s: mean |e| = "
                  f"{row['mean_abs_error']:.3f} N ({pct:.2f}% of ceiling), "
                  f"std = {row['std_abs_error']:.3f} N, status = {row['status']}")
        found = True
    if not found:
        raise StageError("report", f"no artifacts found in {out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="softbladder",
        description="Pneumatic bladder simulator: identification, tracking experiments, reports.",
    )
    parser.add_argument("--config", help="INI file with actuator/controller/sensor settings")
    parser.add_argument("--out", default="softbladder_out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identify", help="identify force surface, flow maps or bandwidth")
    p.add_argument("target", choices=("force", "flow", "bandwidth"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pwm", type=float, nargs="+", default=[40.0],
                   help="PWM frequencies for the bandwidth sweep (Hz)")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("workspace", help="write curves and the open-loop workspace")
    p.set_defaults(func=cmd_workspace)

    p = sub.add_parser("simulate", help="run one tracking experiment")
    p.add_argument("--curve", required=True, choices=CURVE_IDS)
    p.add_argument("--rate", required=True, type=float, help="compression rate (mm/s)")
    p.add_argument("--mode", choices=(AVERAGED, DISCRETE), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("matrix", help="run every curve at every rate")
    p.add_argument("--curves", nargs="+", choices=CURVE_IDS, default=list(CURVE_IDS))
    p.add_argument("--rates", nargs="+", type=float, default=list(RATES))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="summarize artifacts already in --out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config)
    except (OSError, SoftBladderError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(args, settings)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SoftBladderError, ValueError, OSError) as exc:
        stage = " ".join(filter(None, (args.command, getattr(args, "target", None))))
        print(f"error: {stage}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
