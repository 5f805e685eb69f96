"""Command-line entry point: ``python -m udaqa <command> ...``.

Commands are ``generate``, ``train``, ``eval``, ``predict`` and ``report``.
Exit status is 0 on success, 1 for usage errors, 2 for data or validation
errors and 3 for numerical failures. Set ``UDAQA_LOG_LEVEL`` (for example
``INFO`` or ``DEBUG``) to change log verbosity; the default is ``WARNING``.

Every training option can also come from a JSON object passed with
``--config``. Its keys are the TrainConfig field names, and each key has
exactly one flag: ``learning_rate`` is ``--learning-rate``, and a switch
that defaults on, such as ``wa``, is turned off with ``--no-wa``. Flags
given on the command line override the file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .autodiff import NonFiniteError
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, select_split
from .layers import CheckpointError, NonFiniteGradientError, atomic_write_bytes
from .model import load_model, predict_batch, save_model
from .trainer import TrainConfig, TrainingDivergedError, denormalize_prediction, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("udaqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("expected at least one width")
    return out


_HELP = {
    "learning_rate": "Adam step size",
    "weight_decay": "L2 penalty added to the gradient",
    "alpha": "weight of the latent KL term",
    "beta": "weight of the uncertainty alignment term",
    "epochs": "maximum number of epochs",
    "batch_size": "minibatch size",
    "curriculum": "uncertainty-ordered staged training",
    "start_percent": "first curriculum stage, percent of the training set",
    "step_percent": "growth per curriculum stage, percent",
    "patience": "non-improving epochs before a stage advances",
    "wa": "weight-attention clip pooling",
    "cvae": "latent branch (prior, posterior, MapNet)",
    "reweight": "uncertainty-reweighted loss",
    "squared_error": "use squared instead of absolute error",
    "shuffle": "shuffle minibatches inside the active subset",
    "latent_dim": "latent dimension D",
    "wa_hidden": "hidden widths of the attention MLP, comma-separated",
    "prior_hidden": "hidden widths of prior and posterior MLPs",
    "map_hidden": "hidden widths of MapNet",
    "regressor_hidden": "hidden widths of the regressor",
    "logvar_bias_init": "initial bias of the log-variance outputs",
    "seed": "seed for initialization, label sampling and noise",
    "t_eval": "sampled scores per sample when evaluating after training",
    "log_subsets": "log the active subset and its u values each epoch",
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        help_ = _HELP.get(f.name, f.name)
        if f.type in ("bool", bool):
            if f.default:
                p.add_argument("--no-" + f.name.replace("_", "-"), dest=f.name, action="store_false",
                               default=argparse.SUPPRESS, help=f"disable: {help_}")
            else:
                p.add_argument(flag, dest=f.name, action="store_true", default=argparse.SUPPRESS, help=help_)
        elif "tuple" in str(f.type):
            p.add_argument(flag, dest=f.name, type=_int_tuple, default=argparse.SUPPRESS, metavar="W[,W...]",
                           help=help_)
        else:
            kind = int if f.type in ("int", int) else float
            p.add_argument(flag, dest=f.name, type=kind, default=argparse.SUPPRESS,
                           help=f"{help_} (default {f.default})")


def _train_config(args: argparse.Namespace) -> TrainConfig:
    names = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DatasetError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise DatasetError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise DatasetError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(raw) - set(names))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key, val in raw.items():
            if "tuple" in str(names[key].type) and val is not None:
                val = tuple(int(v) for v in val)
            values[key] = val
    for key in names:
        if key in vars(args):
            values[key] = getattr(args, key)
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise DatasetError(f"invalid training config: {exc}") from None
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="udaqa", description="Uncertainty-driven action quality assessment on feature datasets.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True, help="destination directory")
    d = SyntheticSpec()
    g.add_argument("--n-samples", type=int, default=d.n_samples)
    g.add_argument("--K", type=int, default=d.K, help="clips per video")
    g.add_argument("--M", type=int, default=d.M, help="clip feature width")
    g.add_argument("--N", type=int, default=d.N, help="video feature width")
    g.add_argument("--judges", type=int, default=d.judges)
    g.add_argument("--sigma-lo", type=float, default=d.sigma_lo, help="lowest judge noise, score units")
    g.add_argument("--sigma-hi", type=float, default=d.sigma_hi, help="highest judge noise, score units")
    g.add_argument("--difficulty-lo", type=float, default=d.difficulty_lo)
    g.add_argument("--difficulty-hi", type=float, default=d.difficulty_hi)
    g.add_argument("--clip-jitter", type=float, default=d.clip_jitter)
    g.add_argument("--actions", default=",".join(d.actions), help="comma-separated action names")
    g.add_argument("--seed", type=int, default=d.seed)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True, help="dataset directory or manifest path")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="epoch log path (default: <out>.log.jsonl)")
    t.add_argument("--train-split", default="train")
    t.add_argument("--val-split", default="val")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    _add_train_flags(t)

    for name, text in (("eval", "score a split and write metrics"),
                       ("predict", "write deterministic and sampled scores per sample")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--data", required=True, help="dataset directory or manifest path")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--split", default="test", help="split name, or 'all'")
        e.add_argument("--samples", type=int, default=7, help="sampled scores per sample (t)")
        e.add_argument("--seed", type=int, default=0, help="seed for the sampling noise")
        e.add_argument("--out", help="output file (default: stdout)")
        if name == "predict":
            e.add_argument("--ids", help="comma-separated sample ids (default: the whole split)")

    r = sub.add_parser("report", help="rank table joining predictions with labels")
    r.add_argument("--data", required=True, help="dataset directory or manifest path")
    r.add_argument("--predictions", required=True, help="CSV written by 'predict'")
    r.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.json")
    r.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the report is deterministic")
    return parser


def _samples_for(samples, split: str):
    chosen = list(samples) if split == "all" else select_split(samples, split)
    if not chosen:
        raise DatasetError(f"split {split!r} is empty or missing")
    return chosen


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_bytes(out, text.encode())
    else:
        sys.stdout.write(text)


def cmd_generate(args) -> None:
    spec = SyntheticSpec(
        n_samples=args.n_samples, K=args.K, M=args.M, N=args.N, judges=args.judges,
        sigma_lo=args.sigma_lo, sigma_hi=args.sigma_hi,
        difficulty_lo=args.difficulty_lo, difficulty_hi=args.difficulty_hi,
        clip_jitter=args.clip_jitter, actions=tuple(a for a in args.actions.split(",") if a),
        seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise DatasetError(f"invalid synthetic spec: {exc}") from None
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.records)} samples to {args.out}")


def cmd_train(args) -> None:
    cfg = _train_config(args)
    samples, manifest = load_dataset(args.data)
    tr = _samples_for(samples, args.train_split)
    va = _samples_for(samples, args.val_split)
    log = io.StringIO()
    result = train(tr, va, manifest, cfg, log_file=log)
    log_path = args.log or f"{args.out}.log.jsonl"
    extra = {
        "train_config": dataclasses.asdict(result.config),
        "score_range": {a: list(r) for a, r in manifest.score_range.items()},
        "best_epoch": result.best_epoch,
        "best_val_spearman": result.best_val,
    }
    save_model(result.params, args.out, extra)
    atomic_write_bytes(log_path, log.getvalue().encode())
    print(f"best val spearman {result.best_val:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {args.out}, log {log_path}")


def _load(args):
    if not Path(args.checkpoint).is_file():
        raise DatasetError(f"checkpoint not found: {args.checkpoint}")
    params, _ = load_model(args.checkpoint)
    samples, manifest = load_dataset(args.data)
    if args.samples < 1:
        raise UsageError("--samples must be a positive integer")
    return params, samples, manifest


def cmd_eval(args) -> None:
    params, samples, manifest = _load(args)
    chosen = _samples_for(samples, args.split)
    res = evaluate(chosen, manifest, params, t=args.samples, seed=args.seed)
    summary = res.summary()
    summary.update(split=args.split, samples=args.samples, seed=args.seed)
    text = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    rho = "undefined" if res.spearman is None else f"{res.spearman:.4f}"
    lines = [f"spearman {rho}", f"r_l2_x100 {res.r_l2_x100:.4f}"]
    if res.mean_u is not None:
        lines.append(f"mean_u {res.mean_u:.4f}")
    if res.fisher_z is not None:
        lines.append(f"fisher_z_average {res.fisher_z:.4f}")
    if args.out:
        atomic_write_bytes(args.out, text.encode())
        print("\n".join(lines))
    else:
        sys.stdout.write(text)


def cmd_predict(args) -> None:
    params, samples, manifest = _load(args)
    chosen = _samples_for(samples, args.split)
    if args.ids:
        wanted = [i for i in args.ids.split(",") if i]
        by_id = {s.id: s for s in samples}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise DatasetError(f"unknown sample ids: {', '.join(missing)}")
        chosen = [by_id[i] for i in wanted]
    t = args.samples if params.config.cvae else 0
    preds = predict_batch(chosen, params, t, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "action", "deterministic"] + [f"sample_{i + 1}" for i in range(t)] + ["u"])
    for s, p in zip(chosen, preds):
        p = denormalize_prediction(p, *manifest.range_for(s.action))
        u = "" if p.log_uncertainty is None else repr(p.log_uncertainty)
        w.writerow([s.id, s.action, repr(p.deterministic_score)] + [repr(v) for v in p.sampled_scores] + [u])
    _emit(buf.getvalue(), args.out)


def _descending_ranks(values) -> np.ndarray:
    return metrics.fractional_ranks(-np.asarray(values, dtype=np.float64))


def cmd_report(args) -> None:
    samples, manifest = load_dataset(args.data)
    by_id = {s.id: s for s in samples}
    try:
        with open(args.predictions, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read predictions {args.predictions}: {exc}") from None
    if not rows or "id" not in rows[0] or "deterministic" not in rows[0]:
        raise DatasetError(f"{args.predictions} is not a predictions file")
    table = []
    for row in rows:
        s = by_id.get(row["id"])
        if s is None:
            raise DatasetError(f"prediction for unknown sample id {row['id']!r}")
        try:
            sampled = [float(row[k]) for k in row if k.startswith("sample_")]
            pred = float(row["deterministic"])
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"bad number in predictions row {row['id']!r}: {exc}") from None
        table.append({
            "id": s.id, "action": s.action, "label": s.final_score, "predicted": pred,
            "sampled": sampled, "u": float(row["u"]) if row.get("u") else None,
        })
    for action in sorted({r["action"] for r in table}):
        group = [r for r in table if r["action"] == action]
        for r, lr, pr in zip(group, _descending_ranks([r["label"] for r in group]),
                             _descending_ranks([r["predicted"] for r in group])):
            r["label_rank"], r["predicted_rank"] = float(lr), float(pr)
    table.sort(key=lambda r: (r["action"], r["label_rank"], r["id"]))
    n_samples = max((len(r["sampled"]) for r in table), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["action", "id", "label", "label_rank", "predicted", "predicted_rank", "sample_mean", "sample_std"]
               + [f"sample_{i + 1}" for i in range(n_samples)] + ["u"])
    for r in table:
        sm = float(np.mean(r["sampled"])) if r["sampled"] else r["predicted"]
        sd = float(np.std(r["sampled"], ddof=1)) if len(r["sampled"]) > 1 else 0.0
        r["sample_mean"], r["sample_std"] = sm, sd
        w.writerow([r["action"], r["id"], repr(r["label"]), r["label_rank"], repr(r["predicted"]),
                    r["predicted_rank"], repr(sm), repr(sd)] + [repr(v) for v in r["sampled"]]
                   + ["" if r["u"] is None else repr(r["u"])])
    atomic_write_bytes(f"{args.out}.csv", buf.getvalue().encode())
    atomic_write_bytes(f"{args.out}.json", (json.dumps({"rows": table}, indent=1, sort_keys=True) + "\n").encode())
    print(f"wrote {args.out}.csv and {args.out}.json ({len(table)} rows)")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("UDAQA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NonFiniteError, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
