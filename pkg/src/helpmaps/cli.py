"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import collections
import logging
import sys
from pathlib import Path

from . import attnselect, baselines, justifier, metrics, usersim
from .core import (DegenerateStatisticError, FormatError, HelpmapsError, InsufficientDataError,
                   MissingMapError, NumericalError)
from .formats import read_records, rows_to_csv, write_records, write_report, atomic_write

log = logging.getLogger("helpmaps")

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

REPORT_COLUMNS = ("mode", "mean_rel_correct", "mean_rel_wrong", "help_z", "p_value", "n_correct",
                  "n_wrong", "n_excluded_correct", "n_excluded_wrong", "variance_mode")

STRATEGIES = {"baseline": attnselect.Strategy.BASELINE, "best": attnselect.Strategy.BEST_SINGLE,
              "best-head": attnselect.Strategy.BEST_HEAD, "best-layer": attnselect.Strategy.BEST_LAYER}


class UsageError(HelpmapsError):
    pass


def _csv_path(report: Path, explicit: str | None) -> Path:
    return Path(explicit) if explicit else report.with_suffix(".csv")


def _pair(text: str, n: int) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}") from None
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
    return vals


def cmd_ingest(args) -> int:
    ds = read_records(args.data, args.stacks)
    violations = ds.violations()
    counts = collections.Counter(v.split(": ", 1)[1].split(":", 1)[0] for v in violations)
    invalid_ids = sorted({v.split(": ", 1)[0] for v in violations})
    print(f"{len(ds) - len(invalid_ids)} valid, {len(invalid_ids)} invalid of {len(ds)} records")
    for field, n in sorted(counts.items()):
        print(f"  {field}: {n} violation(s)")
    for v in violations[:20]:
        log.warning(v)
    if violations:
        return EXIT_INVALID
    write_records(ds, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = read_records(args.data, args.stacks)
    records = ds.split(args.split)
    if not records:
        raise InsufficientDataError(f"split {args.split!r} is empty")
    modes = list(metrics.Mode) if args.mode == "all" else [metrics.Mode(args.mode)]
    reports, skipped = [], []
    for mode in modes:
        try:
            rep = metrics.help_score(records, mode, args.variance)
        except MissingMapError as e:
            if args.mode != "all":
                raise
            skipped.append({"mode": mode.value, "reason": str(e)})
            continue
        reports.append(rep)
        print(f"{mode.value:<10} relevance correct {rep.mean_rel_correct:+.3f}  "
              f"wrong {rep.mean_rel_wrong:+.3f}  HELP_Z {rep.help_z:+.2f}  p={rep.p_value:.3g}  "
              f"(n={rep.n_correct}/{rep.n_wrong}, excluded {rep.n_excluded})")
    if not reports:
        raise MissingMapError("no mode could be evaluated: " + "; ".join(s["reason"] for s in skipped))
    report = Path(args.report)
    write_report(report, {"data": str(args.data), "split": args.split, "variance_mode": args.variance,
                          "reports": [r.to_dict() for r in reports], "skipped": skipped})
    atomic_write(_csv_path(report, args.csv), rows_to_csv([r.to_dict() for r in reports], REPORT_COLUMNS))
    return EXIT_OK


def cmd_select(args) -> int:
    ds = read_records(args.data, args.stacks)
    strategy = STRATEGIES[args.strategy]
    if strategy is attnselect.Strategy.BASELINE:
        result, out = attnselect.apply_baseline(ds, args.val_split)
    else:
        result, out = attnselect.select_best(ds, strategy, args.val_split)
    write_records(out, args.out)
    report = Path(args.report) if args.report else Path(args.out).with_suffix(".selection.json")
    write_report(report, dict(result.to_dict(), val_split=args.val_split))
    rows = [{"candidate": attnselect.candidate_label(c), "help_z": s}
            for c, s in result.per_candidate_scores.items()]
    atomic_write(report.with_suffix(".csv"), rows_to_csv(rows, ("candidate", "help_z")))
    print(f"strategy {result.strategy.value}: layer {result.chosen_layer}, head {result.chosen_head}, "
          f"val HELP_Z {result.val_help_z:.3f}")
    return EXIT_OK


def cmd_train_justifier(args) -> int:
    ds = read_records(args.data, args.stacks)
    cfg = justifier.TrainConfig(epochs=args.epochs, learning_rate=args.lr, lambda_att=args.lambda_att,
                                seed=args.seed, batch_size=args.batch_size,
                                conv_channels=args.conv_channels, hidden=args.hidden)
    result = justifier.train(ds, cfg, split=args.train_split)
    result.params.save(args.out)
    summary = {"epochs": args.epochs, "learning_rate": args.lr, "lambda_att": args.lambda_att,
               "seed": args.seed, "loss_trace": result.loss_trace,
               "train_accuracy": justifier.failure_accuracy(result.params, ds.split(args.train_split))}
    print(f"final training loss {result.loss_trace[-1]:.4f}")
    val = ds.split(args.val_split)
    if val:
        summary["val_accuracy"] = justifier.failure_accuracy(result.params, val)
        print(f"val accuracy {summary['val_accuracy']:.4f}")
    if args.report:
        write_report(args.report, summary)
    return EXIT_OK


def cmd_gen_errormaps(args) -> int:
    ds = read_records(args.data, args.stacks)
    params = justifier.JustifierParams.load(args.params)
    split = None if args.split == "all" else args.split
    out = justifier.annotate_error_maps(params, ds, split, args.variant)
    write_records(out, args.out)
    n = len(out) if split is None else len(out.split(split))
    print(f"wrote error maps for {n} records")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = baselines.SynthConfig(
        n_records=args.n, grid_channels=args.channels, p_correct=args.p_correct,
        attention_signal=args.signal.replace("-", "_"), error_signal=args.error_signal.replace("-", "_"),
        noise_sigma=args.noise, seed=args.seed, contrary_fraction=args.contrary,
        centered_human_when_correct=args.centered_human, stack_shape=args.stack_shape,
        planted_head=args.planted_head, val_fraction=args.val_fraction, train_fraction=args.train_fraction)
    ds = baselines.generate(cfg)
    write_records(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    ds = read_records(args.data, args.stacks)
    records = ds.split(args.split) if args.split != "all" else list(ds)
    mode = metrics.Mode(args.mode)
    user_mode = usersim.USER_MODE_FOR[mode]
    base = usersim.default_user(records, user_mode, args.epsilon, args.seed)
    user = usersim.SimUser(tau_att=base.tau_att if args.user_tau is None else args.user_tau,
                           tau_err=base.tau_err if args.user_tau_err is None else args.user_tau_err,
                           epsilon=args.epsilon, mode=user_mode, seed=args.seed)
    curve = usersim.validate_metric(records, user, mode, args.subsets, args.subset_size, args.seed,
                                    n_bins=args.bins)
    print(f"user accuracy {usersim.accuracy(user, records):.4f}")
    print(f"pearson_r {curve.pearson_r:.4f}  spearman_rho {curve.spearman_rho:.4f}  "
          f"(binned pearson {curve.binned_pearson_r:.4f})" + ("  [degenerate]" if curve.degenerate else ""))
    if args.report:
        report = Path(args.report)
        write_report(report, {
            "mode": mode.value, "user": {"tau_att": user.tau_att, "tau_err": user.tau_err,
                                         "epsilon": user.epsilon, "mode": user.mode.value, "seed": user.seed},
            "pearson_r": curve.pearson_r, "spearman_rho": curve.spearman_rho,
            "binned_pearson_r": curve.binned_pearson_r, "binned_spearman_rho": curve.binned_spearman_rho,
            "degenerate": curve.degenerate, "n_skipped": curve.n_skipped,
            "bins": [{"bin_center": c, "mean_accuracy": a, "n": n} for c, a, n in curve.bins],
            "points": [{"help_z": z, "accuracy": a, "intuitive_fraction": q} for z, a, q in curve.points]})
        atomic_write(_csv_path(report, args.csv), curve.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="helpmaps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--data", required=True, help="record file (JSON lines)")
        sp.add_argument("--stacks", help="stack file for references without a path")
        sp.set_defaults(fn=fn)
        return sp

    sp = data_cmd("ingest", cmd_ingest, "validate a record file and write a normalized copy")
    sp.add_argument("--out", required=True)

    sp = data_cmd("eval", cmd_eval, "HELP_Z report for attention / error / joint explanations")
    sp.add_argument("--mode", choices=["attention", "error", "joint", "all"], default="all")
    sp.add_argument("--split", default="test")
    sp.add_argument("--variance", choices=["pooled", "unpooled"], default="pooled")
    sp.add_argument("--report", required=True, help="JSON report path")
    sp.add_argument("--csv", help="CSV twin (default: report path with .csv)")

    sp = data_cmd("select", cmd_select, "choose the displayed attention map on a validation split")
    sp.add_argument("--strategy", choices=list(STRATEGIES), default="best")
    sp.add_argument("--val-split", default="val")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = data_cmd("train-justifier", cmd_train_justifier, "train the failure-predicting justifier")
    sp.add_argument("--out", required=True, help="params file")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--epochs", type=int, default=300)
    sp.add_argument("--lr", type=float, default=0.5)
    sp.add_argument("--lambda-att", type=float, default=1.0)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--conv-channels", type=int, default=8)
    sp.add_argument("--hidden", type=int, default=96)
    sp.add_argument("--train-split", default="train")
    sp.add_argument("--val-split", default="val")
    sp.add_argument("--report")

    sp = data_cmd("gen-errormaps", cmd_gen_errormaps, "write GradCAM error maps onto records")
    sp.add_argument("--params", required=True)
    sp.add_argument("--split", default="test", help="split to annotate, or 'all'")
    sp.add_argument("--variant", choices=["gradcam", "grad_x_input"], default="gradcam")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.set_defaults(fn=cmd_synth)
    sp.add_argument("--n", type=int, default=400)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--signal", choices=["relevant-when-correct", "always-relevant", "random"],
                    default="relevant-when-correct")
    sp.add_argument("--error-signal", choices=["relevant-when-wrong", "random", "none"], default="none")
    sp.add_argument("--p-correct", type=float, default=0.5)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--contrary", type=float, default=0.0)
    sp.add_argument("--centered-human", action="store_true")
    sp.add_argument("--stack-shape", type=lambda t: _pair(t, 3), help="L,H,d")
    sp.add_argument("--planted-head", type=lambda t: _pair(t, 2), help="layer,head")
    sp.add_argument("--val-fraction", type=float, default=0.0)
    sp.add_argument("--train-fraction", type=float, default=0.0)
    sp.add_argument("--out", required=True)

    sp = data_cmd("simulate", cmd_simulate, "validate HELP_Z against simulated users")
    sp.add_argument("--mode", choices=["attention", "error", "joint"], default="attention")
    sp.add_argument("--split", default="all")
    sp.add_argument("--user-tau", type=float, help="attention threshold (default: median relevance)")
    sp.add_argument("--user-tau-err", type=float, help="error/joint threshold (default: median relevance)")
    sp.add_argument("--epsilon", type=float, default=0.1)
    sp.add_argument("--subsets", type=int, default=50)
    sp.add_argument("--subset-size", type=int, default=200)
    sp.add_argument("--bins", type=int, default=8)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--report")
    sp.add_argument("--csv")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (DegenerateStatisticError, NumericalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, MissingMapError, InsufficientDataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, UsageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
