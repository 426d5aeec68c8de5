"""Command-line front end: ``dmp <subcommand> [options]``.

Subcommands ``gen``, ``train``, ``eval``, ``error-index``, ``grad-check`` and
``bound-check``. Options that mirror a configuration object may also come
from a JSON file given with ``--config``; explicit flags win over the file,
which wins over the built-in defaults. ``DMP_SEED`` supplies the default
seed. Every output directory receives ``config.json`` with the effective
settings.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (including failed checks).
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

import numpy as np

from . import bounds, gradcheck, linalg
from . import network as nn
from ._io import atomic_write_text
from .data import SOURCE, TARGET, SyntheticSpec, generate, load_features, load_labels, save_features, save_labels
from .errors import (ConfigurationError, DegenerateSpectrumError, InvalidInputError, NumericalDomainError,
                     ParseError)
from .manifold import covariance
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(x):
    return repr(float(x))


def _int_tuple(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_tuple(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _env_seed():
    raw = os.environ.get("DMP_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DMP_SEED must be an integer, got {raw!r}") from None


def _read_config_file(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}", path=path) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def _merge(cls, args, fields, base=None):
    """Build ``cls`` from defaults < config file < explicit flags.

    ``fields`` maps config keys to converters applied to file values.
    Unknown file keys are rejected.
    """
    file_cfg = _read_config_file(getattr(args, "config", None))
    unknown = sorted(set(file_cfg) - set(fields))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(base or {})
    for key, value in file_cfg.items():
        convert = fields[key]
        merged[key] = convert(value) if value is not None and convert is not None else value
    for key in fields:
        if hasattr(args, key):
            merged[key] = getattr(args, key)
    if "seed" in fields and "seed" not in file_cfg and not hasattr(args, "seed"):
        env = _env_seed()
        if env is not None:
            merged["seed"] = env
    try:
        return cls(**merged)
    except (ConfigurationError, InvalidInputError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _echo_config(out_dir, payload):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    atomic_write_text(Path(out_dir) / "config.json", text)


def _csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()


def _emit(text, out=None):
    if out is not None:
        atomic_write_text(out, text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# gen

_GEN_FIELDS = {
    "n_classes": int, "dim": int, "n_per_class": int, "target_per_class": int,
    "rotation": float, "translation": float, "noise": float, "separation": float,
    "partial_keep": int, "seed": int, "counts": tuple,
}


def cmd_gen(args):
    spec = _merge(SyntheticSpec, args, _GEN_FIELDS)
    source, target, yt = generate(spec)
    out = Path(args.out)
    ext = ".bin" if args.binary else ".csv"
    save_features(source, out / f"source{ext}")
    save_features(target, out / f"target{ext}")
    save_labels(yt, spec.n_classes, out / "target_labels.csv")
    _echo_config(out, {"command": "gen", "binary": bool(args.binary), **dataclasses.asdict(spec)})
    print(f"source,{source.n},{source.dim},{spec.n_classes}")
    print(f"target,{target.n},{target.dim},{spec.keep}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_FIELDS = {f.name: None for f in dataclasses.fields(TrainConfig)}
for _name in ("hidden", "activations", "ds_layers", "al_layers"):
    _TRAIN_FIELDS[_name] = tuple


def _load_target_labels(path, n, c):
    labels, c_file = load_labels(path)
    if labels.shape[0] != n:
        raise InvalidInputError(f"{path}: {labels.shape[0]} labels for {n} target samples")
    if c_file != c:
        raise InvalidInputError(f"{path}: label file declares {c_file} classes, source has {c}")
    return labels


def cmd_train(args):
    file_cfg = _read_config_file(args.config)
    mode = getattr(args, "mode", file_cfg.get("mode", "vanilla"))
    base = dataclasses.asdict(TrainConfig.partial_defaults()) if mode == "partial" else {}
    config = _merge(TrainConfig, args, _TRAIN_FIELDS, base)
    source = load_features(args.source, SOURCE)
    target = load_features(args.target, TARGET)
    if source.labels is None:
        raise InvalidInputError(f"{args.source}: source features must carry labels")
    yt = None
    if args.target_labels is not None:
        yt = _load_target_labels(args.target_labels, target.n, source.n_classes)
    params, report = train(config, source, target, yt)
    out = Path(args.out)
    nn.save_checkpoint(params, out / "checkpoint.bin")
    atomic_write_text(out / "log.csv", "\n".join(report.log_lines()) + "\n")
    lines = []
    if report.final_accuracy is not None:
        lines.append(f"final_accuracy,{_fmt(report.final_accuracy)}")
    lines.append("class_weights," + ",".join(_fmt(w) for w in report.weights))
    lines.append(f"skipped_alignment,{len(report.skipped_alignment)}")
    text = "\n".join(lines) + "\n"
    atomic_write_text(out / "report.csv", text)
    _echo_config(out, {"command": "train", "source": str(args.source), "target": str(args.target),
                       "target_labels": None if yt is None else str(args.target_labels),
                       **config.as_dict()})
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args):
    params = nn.load_checkpoint(args.checkpoint)
    batch = load_features(args.features, TARGET)
    if batch.dim != params.in_dim:
        raise InvalidInputError(f"features have dimension {batch.dim}, checkpoint expects {params.in_dim}")
    if args.labels is not None:
        labels = _load_target_labels(args.labels, batch.n, params.n_classes)
    elif batch.labels is not None:
        labels = batch.labels
    else:
        raise InvalidInputError("no labels: pass --labels or a labelled feature file")
    if labels.size and labels.max() >= params.n_classes:
        raise InvalidInputError(f"label {labels.max() + 1} exceeds checkpoint class count {params.n_classes}")
    ev = evaluate(params, batch.features, labels)
    counts = ev.confusion.sum(axis=1)
    rows = [{"class": i + 1, "accuracy": float(ev.per_class[i]), "count": int(counts[i])}
            for i in range(params.n_classes)]
    text = f"accuracy,{_fmt(ev.accuracy)}\n" + _csv_text(rows, ("class", "accuracy", "count"))
    _emit(text, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# error-index

def _spectrum(H):
    C = covariance(H)
    return linalg.sym_eig(C).eigenvalues, H.mean(axis=1)


def cmd_error_index(args):
    source = load_features(args.source, SOURCE)
    target = load_features(args.target, TARGET)
    Hs, Ht = source.features, target.features
    if args.checkpoint is not None:
        params = nn.load_checkpoint(args.checkpoint)
        if not 0 <= args.layer < params.n_manifold:
            raise UsageError(f"--layer must lie in [0, {params.n_manifold - 1}]")
        Hs = nn.forward(params, Hs).features[args.layer]
        Ht = nn.forward(params, Ht).features[args.layer]
    if Hs.shape[0] != Ht.shape[0]:
        raise InvalidInputError("source and target features differ in dimension")
    eig_s, mu_s = _spectrum(Hs)
    eig_t, mu_t = _spectrum(Ht)
    d_max = args.d_max if args.d_max is not None else Hs.shape[0] - 1
    affine = args.metric == "affine"
    try:
        curve = bounds.suggest_dimension(eig_s, eig_t, d_max, mu_s if affine else None,
                                         mu_t if affine else None, args.batch_size)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    rows = list(curve.rows())
    columns = list(rows[0].keys())
    _emit(_csv_text(rows, columns), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check / bound-check

def cmd_grad_check(args):
    base = args.seed if args.seed is not None else (_env_seed() or 0)
    results = gradcheck.run(range(base, base + args.seeds), tol=args.tol, inject=args.inject)
    rows = [{"seed": r.seed, "combination": r.combination, "rel_error": r.rel_error, "passed": int(r.passed)}
            for r in results]
    _emit(_csv_text(rows, ("seed", "combination", "rel_error", "passed")), args.out)
    failed = sum(not r.passed for r in results)
    print(f"grad_check,{'pass' if not failed else 'fail'},{failed}/{len(results)}")
    if failed:
        raise CheckFailed(f"{failed} of {len(results)} gradient checks exceeded tolerance {args.tol}")
    return EXIT_OK


def cmd_bound_check(args):
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    checks = ("projector", "grassmann", "affine") if args.check == "all" else (args.check,)
    out = Path(args.out) if args.out else None
    summary = []
    for name in checks:
        try:
            if name == "projector":
                res = bounds.monte_carlo_projector_bound(args.dim, args.n, args.d_prime, args.delta,
                                                         args.trials, seed=seed, workers=args.workers)
            else:
                res = bounds.monte_carlo_distance_bound(args.dim, args.n, args.d_prime, args.delta,
                                                        args.trials, metric=name, seed=seed,
                                                        workers=args.workers)
        except InvalidInputError as exc:
            raise UsageError(str(exc)) from None
        ok = res.fraction <= args.delta
        summary.append({"check": name, "n": res.n, "trials": res.trials, "violations": res.violations,
                        "rate": res.rate, "delta": args.delta, "passed": int(ok)})
        if out is not None:
            atomic_write_text(out / f"{name}_trials.csv",
                              _csv_text(list(res.rows()), ("trial", "deviation", "bound", "violated")))
    if out is not None:
        _echo_config(out, {"command": "bound-check", **{k: v for k, v in vars(args).items()
                                                         if k not in ("func", "out")}, "seed": seed})
    cols = ("check", "n", "trials", "violations", "rate", "delta", "passed")
    sys.stdout.write(_csv_text(summary, cols))
    if not all(s["passed"] for s in summary):
        raise CheckFailed("violation rate exceeded delta")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

S = argparse.SUPPRESS


def _add_gen(sub):
    p = sub.add_parser("gen", help="generate a synthetic source/target pair")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with SyntheticSpec keys")
    p.add_argument("--classes", dest="n_classes", type=int, default=S)
    p.add_argument("--dim", type=int, default=S)
    p.add_argument("--per-class", dest="n_per_class", type=int, default=S)
    p.add_argument("--target-per-class", type=int, default=S)
    p.add_argument("--rotation", type=float, default=S, help="rotation angle in radians")
    p.add_argument("--translation", type=float, default=S)
    p.add_argument("--noise", type=float, default=S)
    p.add_argument("--separation", type=float, default=S)
    p.add_argument("--partial-keep", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--binary", action="store_true", help="write the binary feature format")
    p.set_defaults(func=cmd_gen)


def _add_train(sub):
    p = sub.add_parser("train", help="train a network and write checkpoint, log and report")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--target-labels", help="held-out target labels, used only for reporting accuracy")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--lambda1", type=float, default=S)
    p.add_argument("--lambda2", type=float, default=S)
    p.add_argument("--lambda-ent", type=float, default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--t-max", type=int, default=S)
    p.add_argument("--t-up", type=int, default=S)
    p.add_argument("--warmup-intra", type=int, default=S)
    p.add_argument("--metric", choices=("grassmann", "affine", "log_euclidean"), default=S)
    p.add_argument("--d-prime", type=int, default=S)
    p.add_argument("--le-eps", type=float, default=S)
    p.add_argument("--mode", choices=("vanilla", "partial"), default=S)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--beta1", type=float, default=S)
    p.add_argument("--beta2", type=float, default=S)
    p.add_argument("--momentum", type=float, default=S)
    p.add_argument("--weight-decay", type=float, default=S)
    p.add_argument("--lr-decay", type=float, default=S)
    p.add_argument("--hidden", type=_int_tuple, default=S, help="comma-separated layer widths")
    p.add_argument("--activations", type=_str_tuple, default=S, help="comma-separated: leaky_relu,tanh,none")
    p.add_argument("--slope", type=float, default=S)
    p.add_argument("--ds-layers", type=_int_tuple, default=S)
    p.add_argument("--al-layers", type=_int_tuple, default=S)
    p.add_argument("--eval-every", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.set_defaults(func=cmd_train)


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint on labelled features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", help="label file; defaults to labels stored in the feature file")
    p.add_argument("--out", help="also write the metrics table here")
    p.set_defaults(func=cmd_eval)


def _add_error_index(sub):
    p = sub.add_parser("error-index", help="tabulate the subspace error index over d'")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--checkpoint", help="evaluate on this network's layer features instead of raw inputs")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--d-max", type=int)
    p.add_argument("--batch-size", type=int, default=50, help="marks d' = batch_size - 1 as reference")
    p.add_argument("--metric", choices=("grassmann", "affine"), default="grassmann")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_error_index)


def _add_grad_check(sub):
    p = sub.add_parser("grad-check", help="finite-difference check of the full objective gradient")
    p.add_argument("--seeds", type=int, default=20, help="number of random instances")
    p.add_argument("--seed", type=int, help="first instance seed")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject", type=float, default=0.0,
                   help="test hook: perturb one analytic gradient entry by this relative amount")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_grad_check)


def _add_bound_check(sub):
    p = sub.add_parser("bound-check", help="Monte-Carlo check of the projector and distance bounds")
    p.add_argument("--check", choices=("projector", "grassmann", "affine", "all"), default="all")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--d-prime", type=int, default=3)
    p.add_argument("--n", type=int, help="samples per trial; default is the smallest admissible")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for per-trial tables")
    p.set_defaults(func=cmd_bound_check)


def build_parser():
    parser = _Parser(prog="dmp", description="Discriminative manifold propagation on feature vectors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for add in (_add_gen, _add_train, _add_eval, _add_error_index, _add_grad_check, _add_bound_check):
        add(sub)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"dmp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, InvalidInputError, OSError) as exc:
        print(f"dmp {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckFailed, NumericalDomainError, DegenerateSpectrumError, FloatingPointError) as exc:
        print(f"dmp {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
