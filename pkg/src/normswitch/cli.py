"""Command-line entry point: ``normswitch <command> ...``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 dataset error, 4 incompatible or malformed inputs.
"""

import argparse
import csv
import os
import sys

from . import checks
from .analytics import (
    DEFAULT_RF_RANGES,
    bin_by_rf,
    fmt,
    import_trajectory,
    mu_sigma_divergence,
    trajectory_divergence,
)
from .config import load_config
from .errors import ConfigurationError, InputError, ParseError, UsageError
from .plotting import write_line_chart
from .snapshot import Snapshot
from .training import harden_finetune, save_run, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATASET, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _range_slug(label):
    return label.replace("<", "lt").replace(">", "gt").replace(" ", "")


def _progress(row):
    test = "" if row["test_acc"] is None else f" test_acc={row['test_acc']:.4f}"
    print(f"epoch {row['epoch']}: lr={row['lr']:.4g} loss={row['train_loss']:.4f} acc={row['train_acc']:.4f}{test}")


def write_report(report, out_dir, stem, title, final_only=False):
    """Per-layer CSV, RF-binned CSV and one SVG per non-empty RF range."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for lid in sorted(report.series):
        series = report.series[lid][-1:] if final_only else report.series[lid]
        rows.extend((lid, report.rfs[lid], e, v) for e, v in series)
    with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("layer_id", "rf", "epoch", "divergence"))
        w.writerows((lid, rf, e, fmt(v)) for lid, rf, e, v in rows)

    if final_only:
        binned = {"final": _final_binned(report)}
    else:
        binned = report.binned(DEFAULT_RF_RANGES)
    with open(os.path.join(out_dir, f"{stem}_binned.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "rf_range", "mean_divergence"))
        for epoch, means in binned.items():
            for r in DEFAULT_RF_RANGES:
                if r.label in means:
                    w.writerow((epoch, r.label, fmt(means[r.label])))

    written = []
    for r in DEFAULT_RF_RANGES:
        layers = [lid for lid in sorted(report.series) if r.contains(report.rfs[lid])]
        if not layers:
            continue
        if final_only:
            series = {"final": [(report.rfs[lid], report.series[lid][-1][1]) for lid in layers]}
            xlabel = "receptive field"
        else:
            series = {f"layer {lid} (rf {report.rfs[lid]})": report.series[lid] for lid in layers}
            series[f"mean {r.label}"] = [(e, m[r.label]) for e, m in binned.items() if r.label in m]
            xlabel = "epoch"
        path = os.path.join(out_dir, f"{stem}_{_range_slug(r.label)}.svg")
        write_line_chart(path, series, title=f"{title}, RF {r.label}", xlabel=xlabel, ylabel="divergence")
        written.append(path)
    return written


def _final_binned(report):
    return bin_by_rf(report.final(), report.rfs, DEFAULT_RF_RANGES)


# -- commands -----------------------------------------------------------------


def _load_cfg(args):
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc.strerror}") from None
    if args.output_dir:
        cfg = cfg.with_overrides(output_dir=args.output_dir)
    return cfg


def cmd_run(args):
    cfg = _load_cfg(args)
    result = train(cfg, progress=None if args.quiet else _progress)
    out = save_run(result, cfg)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_harden_finetune(args):
    cfg = _load_cfg(args)
    try:
        snap = Snapshot.load(args.snapshot)
    except OSError as exc:
        raise UsageError(f"cannot read snapshot {args.snapshot}: {exc.strerror}") from None
    except ParseError as exc:
        raise UsageError(f"snapshot {args.snapshot}: {exc}") from None
    result = harden_finetune(snap, cfg, progress=None if args.quiet else _progress)
    out = save_run(result, cfg)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_analyze(args):
    traj = import_trajectory(args.trajectory)
    out = args.output_dir or os.path.dirname(os.path.abspath(args.trajectory))
    report = mu_sigma_divergence(traj)
    write_report(report, out, "divergence", "D(mu||sigma)", final_only=args.final_only)
    print(f"wrote divergence.csv to {out}")
    return EXIT_OK


def cmd_compare(args):
    a = import_trajectory(args.a)
    b = import_trajectory(args.b)
    out = args.output_dir or "."
    which = ("mu", "sigma") if args.which == "both" else (args.which,)
    for w in which:
        report = trajectory_divergence(a, b, w)
        write_report(report, out, f"compare_{w}", f"cross-run divergence ({w})", final_only=args.final_only)
        print(f"wrote compare_{w}.csv to {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = checks.run_checks(args.module, seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        extra = f" ({r.error})" if r.error else ""
        print(f"{r.module:12s} {r.op:24s} worst_rel_err={r.max_rel_error:.3e} n={r.checked} {status}{extra}")
    if failed:
        names = ", ".join(f"{r.op} ({r.max_rel_error:.3e})" for r in failed)
        _err(f"gradient check failed for {names}")
        return EXIT_CHECK
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="normswitch", description="Switchable normalization experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a model from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--output-dir", help="override the config's output_dir")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    hf = sub.add_parser("harden-finetune", help="harden a soft snapshot's ratios and keep training")
    hf.add_argument("--snapshot", required=True)
    hf.add_argument("--config", required=True)
    hf.add_argument("--output-dir")
    hf.add_argument("--quiet", action="store_true")
    hf.set_defaults(func=cmd_harden_finetune)

    an = sub.add_parser("analyze", help="mu/sigma divergence of one trajectory")
    an.add_argument("trajectory")
    an.add_argument("--output-dir")
    an.add_argument("--final-only", action="store_true", help="use converged (final-epoch) ratios only")
    an.set_defaults(func=cmd_analyze)

    cp = sub.add_parser("compare", help="cross-run divergence of two trajectories")
    cp.add_argument("a")
    cp.add_argument("b")
    cp.add_argument("--which", choices=("mu", "sigma", "both"), default="both")
    cp.add_argument("--output-dir")
    cp.add_argument("--final-only", action="store_true")
    cp.set_defaults(func=cmd_compare)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every backward")
    gc.add_argument("--module", choices=("all",) + checks.MODULES, default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _err(exc)
        return EXIT_CONFIG
    except (InputError, ParseError, OSError) as exc:
        if args.command in ("run", "harden-finetune"):
            _err(f"dataset: {exc}")
            return EXIT_DATASET
        _err(exc)
        return EXIT_INCOMPATIBLE
    except UsageError as exc:
        _err(exc)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
