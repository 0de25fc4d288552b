"""Command-line interface.

Machine-readable output goes to stdout; logs and per-epoch progress go to
stderr.  Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from icd_embed import __version__
from icd_embed.attention import FusionMode
from icd_embed.data import (
    Admission,
    compute_stats,
    index_and_filter,
    load_admissions,
    prepare,
    split_train_test,
    to_raw,
    write_admissions,
)
from icd_embed.errors import DataError, NumericalError
from icd_embed.evaluation import DEFAULT_LS, cross_validate, evaluate, per_admission_metrics, sweep, sweep_table
from icd_embed.explain import explain, load_descriptions
from icd_embed.model import dataset_hash, load_model, recommend_top_l, save_model, score_all
from icd_embed.trainer import TrainConfig, train
from icd_embed.transport import OtConfig

log = logging.getLogger("icd_embed")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "ICD_EMBED_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here.
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _int_list(text):
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _code_list(text):
    out = [x.strip() for x in text.split(",") if x.strip()]
    if not out:
        raise argparse.ArgumentTypeError("empty code list")
    return out


def _default_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def _add_data(p, required=True):
    p.add_argument("--data", required=required, metavar="PATH", help="admissions file (JSON lines)")


def _add_model(p):
    p.add_argument("--model", required=True, metavar="PATH", help="model file written by 'train'")


def _add_ot(p):
    g = p.add_argument_group("optimal transport")
    g.add_argument("--beta", type=float, default=0.5, help="proximal weight (default: 0.5)")
    g.add_argument("--outer-max", type=int, default=None, help="proximal iterations cap")
    g.add_argument("--inner-max", type=int, default=None, help="Sinkhorn iterations cap per proximal step")
    g.add_argument("--inner-tol", type=float, default=None, help="Sinkhorn marginal-violation tolerance")


def _add_training(p):
    g = p.add_argument_group("training")
    g.add_argument("--M", type=int, default=200, help="embedding dimension (default: 200)")
    g.add_argument("--K", type=int, default=8, help="attention heads (default: 8)")
    g.add_argument("--alpha", type=float, default=0.1, help="transport regularizer weight; 0 disables it (default: 0.1)")
    g.add_argument("--epochs", type=int, default=25, help="training epochs (default: 25)")
    g.add_argument("--batch", type=int, default=300, help="batch size (default: 300)")
    g.add_argument("--lr", type=float, default=0.001, help="Adam learning rate (default: 0.001)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    g.add_argument("--fusion", choices=["mean", "max", "sa"], default="sa",
                   help="disease fusion: mean/max pooling or self-attention (default: sa)")
    g.add_argument("--min-count", type=int, default=1, help="drop codes seen fewer times (default: 1)")
    g.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for per-admission solves (default: ${THREADS_ENV} or 1)")
    g.add_argument("--deterministic", action="store_true",
                   help="sequential solves and fixed summation order; bit-reproducible runs")
    _add_ot(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icd-embed", description="Train, evaluate and explain ICD code embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="stderr log level (default: INFO)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("stats", help="vocabulary sizes and per-admission histograms (JSON)")
    _add_data(p)
    p.add_argument("--min-count", type=int, default=1, help="drop codes seen fewer times (default: 1)")
    p.add_argument("--vocab-out", metavar="PREFIX",
                   help="also write PREFIX.diseases.txt and PREFIX.procedures.txt")

    p = sub.add_parser("train", help="fit a model and write it to --out")
    _add_data(p)
    p.add_argument("--out", required=True, metavar="PATH", help="model file to write (sidecar at PATH.json)")
    p.add_argument("--report", metavar="PATH", help="write the JSON training report here instead of stdout")
    p.add_argument("--test-fraction", type=float, metavar="F",
                   help="hold out this fraction (seeded by --seed) before training")
    p.add_argument("--test-out", metavar="PATH", help="write the held-out admissions here (JSON lines)")
    _add_training(p)

    p = sub.add_parser("evaluate", help="top-L precision/recall/F1 on a test file")
    _add_model(p)
    _add_data(p)
    p.add_argument("--L", type=_int_list, default=list(DEFAULT_LS), help="comma-separated cutoffs (default: 1,3,5,10)")
    p.add_argument("--json", action="store_true", help="print JSON instead of a text table")
    p.add_argument("--per-admission", metavar="PATH", help="write per-admission metrics as JSON lines")

    p = sub.add_parser("recommend", help="top procedures for a disease set")
    _add_model(p)
    p.add_argument("--diseases", required=True, type=_code_list, help="comma-separated disease codes")
    p.add_argument("--top", type=int, default=5, help="number of procedures (default: 5)")
    p.add_argument("--json", action="store_true", help="print JSON instead of TAB-separated lines")

    p = sub.add_parser("explain", help="disease significance and transport to recommended procedures (JSON)")
    _add_model(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--diseases", type=_code_list, help="comma-separated disease codes")
    src.add_argument("--admission-id", help="take the disease set of this admission from --data")
    _add_data(p, required=False)
    p.add_argument("--L", type=int, default=5, help="number of recommended procedures (default: 5)")
    p.add_argument("--descriptions", metavar="PATH", help="code<TAB>description file")
    p.add_argument("--csv", metavar="PATH", help="also write the transport matrix as CSV")
    _add_ot(p)

    for name, helptext in (("sweep", "train and evaluate once per hyperparameter value (TSV)"),
                           ("cv", "k-fold cross-validation against a fixed test set (JSON)")):
        p = sub.add_parser(name, help=helptext)
        _add_data(p)
        p.add_argument("--test", metavar="PATH", help="test admissions; default: hold out --test-fraction of --data")
        p.add_argument("--test-fraction", type=float, default=0.2, metavar="F", help="held-out fraction (default: 0.2)")
        p.add_argument("--L", type=_int_list, default=list(DEFAULT_LS), help="comma-separated cutoffs (default: 1,3,5,10)")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=["M", "alpha", "K"], help="hyperparameter to vary")
            p.add_argument("--values", required=True, type=lambda s: [x for x in s.split(",") if x.strip()],
                           help="comma-separated values for --axis")
        else:
            p.add_argument("--folds", type=int, default=10, help="number of folds (default: 10)")
        _add_training(p)
    return parser


# --- helpers ---------------------------------------------------------------


def _ot_config(args, base: OtConfig) -> OtConfig:
    changes = {"beta": args.beta}
    for flag, name in (("outer_max", "outer_max"), ("inner_max", "inner_max"), ("inner_tol", "inner_tol")):
        value = getattr(args, flag)
        if value is not None:
            changes[name] = value
    return dataclasses.replace(base, **changes)


def _train_config(args) -> TrainConfig:
    threads = args.threads if args.threads is not None else _default_threads()
    return TrainConfig(
        M=args.M, K=args.K, alpha=args.alpha, learning_rate=args.lr, batch_size=args.batch,
        epochs=args.epochs, fusion_mode=FusionMode.parse(args.fusion), ot=_ot_config(args, TrainConfig().ot),
        seed=args.seed, threads=threads, deterministic=args.deterministic,
    )


def _read(path):
    try:
        return load_admissions(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def _open_out(path):
    try:
        return open(path, "w", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from None


def _index_with(raw, saved):
    admissions = index_and_filter(raw, saved.disease_vocab, saved.procedure_vocab)
    if len(admissions) < len(raw):
        log.warning("skipped %d admissions with no in-vocabulary diseases or procedures", len(raw) - len(admissions))
    if not admissions:
        raise DataError("no admission left after mapping codes onto the model vocabulary")
    return admissions


def _disease_indices(codes, saved):
    known = [c for c in codes if c in saved.disease_vocab]
    unknown = [c for c in codes if c not in saved.disease_vocab]
    if unknown:
        log.warning("ignoring diseases not in the model vocabulary: %s", ",".join(unknown))
    if not known:
        raise DataError("none of the given diseases is in the model vocabulary")
    return sorted({saved.disease_vocab.index_of[c] for c in known})


def _progress(err):
    def report(rec):
        print(f"epoch {rec.epoch}\tloss {rec.mean_loss:.6f}\tot {rec.mean_ot:.6f}\t{rec.seconds:.2f}s",
              file=err, flush=True)
    return report


def _train_and_test(args):
    """Shared set-up of ``sweep`` and ``cv``: vocabularies from --data, test from --test or a split."""
    raw = _read(args.data)
    admissions, dvocab, pvocab = prepare(raw, args.min_count)
    if args.test:
        train_set = admissions
        test = index_and_filter(_read(args.test), dvocab, pvocab)
        if not test:
            raise DataError(f"{args.test}: no admission left after vocabulary filtering")
    else:
        train_set, test = split_train_test(admissions, args.test_fraction, args.seed)
    return train_set, test, dvocab, pvocab


# --- commands --------------------------------------------------------------


def cmd_stats(args, out):
    raw = _read(args.data)
    admissions, dvocab, pvocab = prepare(raw, args.min_count)
    stats = compute_stats(admissions, len(dvocab), len(pvocab))
    if args.vocab_out:
        for vocab, suffix in ((dvocab, "diseases"), (pvocab, "procedures")):
            with _open_out(f"{args.vocab_out}.{suffix}.txt") as fh:
                vocab.write(fh)
    out.write(json.dumps(stats.to_dict(), indent=2) + "\n")


def cmd_train(args, out):
    cfg = _train_config(args)
    raw = _read(args.data)
    admissions, dvocab, pvocab = prepare(raw, args.min_count)
    log.info("%d admissions, %d diseases, %d procedures", len(admissions), len(dvocab), len(pvocab))
    train_set = admissions
    if args.test_fraction is not None:
        train_set, test = split_train_test(admissions, args.test_fraction, args.seed)
        log.info("held out %d admissions", len(test))
        if args.test_out:
            with _open_out(args.test_out) as fh:
                write_admissions([to_raw(a, dvocab, pvocab) for a in test], fh)
    elif args.test_out:
        raise UsageError("--test-out requires --test-fraction")

    params, report = train(train_set, cfg, len(dvocab), len(pvocab), progress=_progress(args.err))
    meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "dataset_hash": dataset_hash(train_set),
        "train_admissions": len(train_set),
        "config": cfg.to_dict(),
        "icd_embed_version": __version__,
    }
    try:
        save_model(args.out, params, dvocab, pvocab, meta)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.report:
        with _open_out(args.report) as fh:
            fh.write(text)
    else:
        out.write(text)


def cmd_evaluate(args, out):
    saved = load_model(args.model)
    test = _index_with(_read(args.data), saved)
    report = evaluate(saved.params, test, args.L)
    if args.per_admission:
        with _open_out(args.per_admission) as fh:
            for row in per_admission_metrics(saved.params, test, args.L):
                fh.write(json.dumps(row) + "\n")
    out.write(report.to_json() + "\n" if args.json else report.to_table())


def cmd_recommend(args, out):
    saved = load_model(args.model)
    d = _disease_indices(args.diseases, saved)
    rec = recommend_top_l(saved.params, d, args.top)
    scores = score_all(saved.params, d)
    rows = [(saved.procedure_vocab.codes[j], float(scores[j])) for j in rec]
    if args.json:
        out.write(json.dumps([{"code": c, "score": s} for c, s in rows], indent=2) + "\n")
    else:
        out.writelines(f"{c}\t{s:.6f}\n" for c, s in rows)


def cmd_explain(args, out):
    saved = load_model(args.model)
    if args.admission_id is not None:
        if not args.data:
            raise UsageError("--admission-id requires --data")
        match = [r for r in _read(args.data) if r.admission_id == args.admission_id]
        if not match:
            raise DataError(f"admission {args.admission_id!r} not found in {args.data}")
        d = _disease_indices(list(match[0].disease_codes), saved)
        adm_id = args.admission_id
    else:
        d = _disease_indices(args.diseases, saved)
        adm_id = ""
    # Explanation needs only the disease side; the placeholder positive is never read.
    adm = Admission(tuple(d), (0,), adm_id)
    descriptions = None
    if args.descriptions:
        try:
            with open(args.descriptions, encoding="utf-8") as fh:
                descriptions = load_descriptions(fh)
        except OSError as exc:
            raise DataError(f"cannot read {args.descriptions}: {exc.strerror or exc}") from None
    ex = explain(saved.params, adm, args.L, descriptions, _ot_config(args, OtConfig()),
                 saved.disease_vocab, saved.procedure_vocab)
    if args.csv:
        with _open_out(args.csv) as fh:
            fh.write(ex.to_csv())
    out.write(json.dumps(ex.to_dict(), indent=2) + "\n")


def cmd_sweep(args, out):
    cfg = _train_config(args)
    train_set, test, dvocab, pvocab = _train_and_test(args)

    def progress(row):
        status = "failed" if row.report is None else f"F1@{args.L[0]} {row.report.rows[0].f1:.2f}"
        print(f"{args.axis}={row.value:g}\t{status}", file=args.err, flush=True)

    try:
        rows = sweep(train_set, test, cfg, args.axis, args.values, args.L, len(dvocab), len(pvocab), progress)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.write(sweep_table(args.axis, rows, args.L))


def cmd_cv(args, out):
    cfg = _train_config(args)
    train_set, test, dvocab, pvocab = _train_and_test(args)

    def progress(k, rep):
        print(f"fold {k}\tF1@{args.L[0]} {rep.rows[0].f1:.2f}", file=args.err, flush=True)

    cv = cross_validate(train_set, test, cfg, args.folds, args.L, len(dvocab), len(pvocab), progress)
    payload = {"folds": [r.to_dict() for r in cv.folds], "mean": cv.mean.to_dict()}
    out.write(json.dumps(payload, indent=2) + "\n")


COMMANDS = {
    "stats": cmd_stats,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "recommend": cmd_recommend,
    "explain": cmd_explain,
    "sweep": cmd_sweep,
    "cv": cmd_cv,
}


def run(argv=None, stdout=None, stderr=None) -> int:
    """Parse ``argv``, dispatch, and return the process exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.err = stderr
    except UsageError as exc:
        stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        stderr.write(parser.format_usage())
        return EXIT_USAGE

    handler = logging.StreamHandler(stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("icd_embed")
    root.addHandler(handler)
    root.setLevel(args.log_level)
    try:
        COMMANDS[args.command](args, stdout)
        return EXIT_OK
    except UsageError as exc:
        stderr.write(f"icd-embed {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except DataError as exc:
        stderr.write(f"icd-embed {args.command}: data error: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        stderr.write(f"icd-embed {args.command}: numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except ValueError as exc:
        # Out-of-range flag values (L larger than the vocabulary, bad fractions, ...).
        stderr.write(f"icd-embed {args.command}: error: {exc}\n")
        return EXIT_USAGE
    finally:
        root.removeHandler(handler)


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
