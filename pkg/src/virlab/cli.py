"""Command-line surface.

Subcommands: train, eval, attack, theory, sweep, report. Run configuration
resolves in three layers, last writer wins:

    profile defaults  <  --config FILE (JSON)  <  --set dotted.path=value

Named flags (--seed, --epochs, ...) are sugar for the matching --set path
and therefore share the highest precedence. Exit codes: 0 success, 2 bad
configuration, 3 numeric abort mid-run, 4 I/O or file-format failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .attacks import LossMode, run_attack
from .config import PROFILES, canonical_json, config_to_obj, resolve_config
from .data import Dataset, save_csv
from .errors import ConfigError, DataFormatError, NumericAbort
from .gmm import GmmSpec, corollary_check, risk_report
from .models import load_checkpoint, predict_probs
from .reweight import WEIGHT_CSV_HEADER
from .training import condition_names, evaluate, sweep, train, write_confusions


def _parse_set(raw: str) -> tuple[str, object]:
    if "=" not in raw:
        raise ConfigError(f"--set expects path=value, got {raw!r}")
    path, text = raw.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return path, value


def _collect_overrides(args) -> list[tuple[str, object]]:
    overrides = [_parse_set(s) for s in (args.set or [])]
    for flag, path in (("seed", "seed"), ("epochs", "epochs"),
                       ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((path, value))
    return overrides


def _resolved(args):
    return resolve_config(args.profile, args.config, _collect_overrides(args))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                   help="named base config (default: desk)")
    p.add_argument("--config", metavar="FILE", help="JSON config file")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override one config field, e.g. "
                        "--set objective.weight_scheme.alpha=8 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--epochs", type=int, help="shorthand for --set epochs=N")
    p.add_argument("--batch-size", type=int, dest="batch_size",
                   help="shorthand for --set batch_size=N")


def _cmd_train(args) -> int:
    config = _resolved(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(canonical_json(config_to_obj(config)) + "\n")
    model, log = train(config, out_dir=args.out)
    last = log.rows[-1]
    robust = {k: v for k, v in last.robust_accuracy.items() if v is not None}
    print(f"trained {config.epochs} epochs; "
          f"clean {last.clean_accuracy:.4f}; "
          + "; ".join(f"{k} {v:.4f}" for k, v in robust.items()))
    print(f"artifacts in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, epoch, _ = load_checkpoint(args.checkpoint)
    config = _resolved(args)
    train_set, eval_set = config.dataset.load()
    dataset = eval_set if eval_set is not None else train_set
    report = evaluate(model, dataset, list(config.attack_eval))
    print(f"checkpoint epoch {epoch}: clean {report.clean_accuracy:.4f}")
    for name, acc in report.robust_accuracy.items():
        print(f"  robust[{name}] {acc:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_confusions(report, args.out)
        with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            names = list(report.robust_accuracy)
            writer.writerow(["clean_acc"] + [f"robust_acc_{n}" for n in names])
            writer.writerow([repr(report.clean_accuracy)]
                            + [repr(report.robust_accuracy[n]) for n in names])
        print(f"artifacts in {args.out}")
    return 0


def _cmd_attack(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    config = _resolved(args)
    train_set, eval_set = config.dataset.load()
    dataset = eval_set if eval_set is not None else train_set
    specs = list(config.attack_eval)
    if not 0 <= args.index < len(specs):
        raise ConfigError(
            f"--index {args.index} out of range; config has {len(specs)} "
            "eval attacks"
        )
    spec = specs[args.index]
    ref = (predict_probs(model, dataset.features)
           if spec.loss_mode is LossMode.KL else None)
    x_adv = run_attack(model, dataset.features, dataset.labels, spec,
                       reference_probs=ref)
    save_csv(Dataset(x_adv, dataset.labels), args.out)
    flipped = np.argmax(predict_probs(model, x_adv), axis=1) != dataset.labels
    print(f"{condition_names([spec])[0]}: wrote {len(dataset)} adversarial "
          f"examples to {args.out}; model now wrong on {flipped.mean():.4f}")
    return 0


def _cmd_theory(args) -> int:
    rows = []
    for k_var in args.k_var:
        spec = GmmSpec(d=args.d, eta=args.eta, sigma=args.sigma, k_var=k_var)
        rep = risk_report(spec, n=args.n, seed=args.seed)
        cor = corollary_check(spec, n=min(args.n, 100_000), seed=args.seed)
        rows.append({
            "d": args.d, "eta": args.eta, "sigma": args.sigma, "k_var": k_var,
            "risk_minus": rep.r_minus, "risk_plus": rep.r_plus,
            "mc_risk_minus": rep.mc_r_minus, "mc_risk_plus": rep.mc_r_plus,
            "se_minus": rep.se_minus, "se_plus": rep.se_plus,
            "mc_agrees": rep.mc_agrees,
            "p_minus": rep.p_minus, "p_plus": rep.p_plus,
            "corollary_holds": cor.passed,
        })
        print(f"k_var={k_var}: R-={rep.r_minus:.5f} R+={rep.r_plus:.5f} "
              f"mc_agrees={rep.mc_agrees} corollary={cor.passed}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]),
                                    lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
        print(f"wrote {args.out}")
    return 0


def _parse_grid(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}: {e}") from e


def _cmd_sweep(args) -> int:
    config = _resolved(args)
    rows = sweep(config, alphas=_parse_grid(args.alphas),
                 gammas=_parse_grid(args.gammas), betas=_parse_grid(args.betas),
                 out_dir=args.out)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"swept {len(rows)} points ({ok} ok); table in "
          f"{os.path.join(args.out, 'sweep.csv')}")
    return 0


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def _cmd_report(args) -> int:
    run = args.run
    metrics_path = os.path.join(run, "metrics.csv")
    weights_path = os.path.join(run, "weights.csv")
    wrote = []

    if os.path.exists(metrics_path):
        header, rows = _read_rows(metrics_path)
        keep = (["epoch", "clean_acc"]
                + [h for h in header if h.startswith("robust_acc_")]
                + [h for h in header if h.startswith("acc_class_")])
        idx = [header.index(h) for h in keep]
        out_path = os.path.join(run, "fig_accuracy.csv")
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(keep)
            for row in rows:
                if row[0] == "epoch":
                    writer.writerow([row[i] for i in idx])
        wrote.append(out_path)

    if os.path.exists(weights_path):
        header, rows = _read_rows(weights_path)
        if header != WEIGHT_CSV_HEADER:
            raise DataFormatError(f"{weights_path}: unexpected header {header}")
        sums: dict[int, dict[int, list]] = {}
        for row in rows:
            epoch, cls, w = int(row[0]), int(row[2]), float(row[6])
            cell = sums.setdefault(epoch, {}).setdefault(cls, [0.0, 0])
            cell[0] += w
            cell[1] += 1
        classes = sorted({c for per in sums.values() for c in per})
        out_path = os.path.join(run, "fig_class_weights.csv")
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch"] + [f"mean_weight_class_{c}" for c in classes])
            for epoch in sorted(sums):
                cells = [str(epoch)]
                for c in classes:
                    total, count = sums[epoch].get(c, (0.0, 0))
                    cells.append(repr(total / count) if count else "")
                writer.writerow(cells)
        wrote.append(out_path)

    for name in sorted(os.listdir(run)):
        if name.startswith("confusion_") and name.endswith(".csv"):
            matrix = np.loadtxt(os.path.join(run, name), delimiter=",",
                                dtype=np.float64, ndmin=2)
            row_sums = matrix.sum(axis=1, keepdims=True)
            normed = np.divide(matrix, np.maximum(row_sums, 1.0))
            out_path = os.path.join(run, "fig_" + name)
            with open(out_path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                for row in normed:
                    writer.writerow([repr(float(v)) for v in row])
            wrote.append(out_path)

    if not wrote:
        raise DataFormatError(f"no metrics.csv or weights.csv under {run}")
    for path in wrote:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="virlab",
        description="Adversarial training with vulnerability-aware instance "
                    "reweighting, at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured training recipe")
    _add_config_flags(p)
    p.add_argument("--out", "-o", default="run_out", help="artifact directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under the eval attacks")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", "-o", help="directory for eval.csv + confusions")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("attack", help="emit adversarial examples for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0,
                   help="which attack_eval entry to run (default 0)")
    p.add_argument("--out", "-o", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("theory", help="class-risk closed forms vs Monte Carlo")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--k-var", type=float, nargs="+", default=[2.0],
                   dest="k_var", help="one or more std ratios to sweep")
    p.add_argument("--n", type=int, default=1_000_000,
                   help="Monte Carlo sample count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", help="CSV path for the sweep table")
    p.set_defaults(func=_cmd_theory)

    p = sub.add_parser("sweep", help="grid over alpha/gamma/beta")
    _add_config_flags(p)
    p.add_argument("--alphas", help="comma-separated values, e.g. 1,7,15")
    p.add_argument("--gammas", help="comma-separated values")
    p.add_argument("--betas", help="comma-separated values")
    p.add_argument("--out", "-o", default="sweep_out", help="artifact directory")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="regenerate figure CSVs from a run directory")
    p.add_argument("--run", required=True, help="directory holding metrics.csv etc.")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
