"""Top-L precision / recall / F1, cross-validation and hyperparameter sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass

import numpy as np

from icd_embed.model import ModelParams, recommend_top_l

log = logging.getLogger(__name__)

DEFAULT_LS = (1, 3, 5, 10)


@dataclass
class MetricRow:
    L: int
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    rows: list[MetricRow]
    admission_count: int

    def row(self, L) -> MetricRow:
        for r in self.rows:
            if r.L == L:
                return r
        raise KeyError(L)

    def to_dict(self) -> dict:
        return {"admission_count": self.admission_count, "rows": [dataclasses.asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls([MetricRow(**r) for r in d["rows"]], d["admission_count"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self, label=None) -> str:
        """Plain-text table with R, P, F1 columns per L."""
        grid = [[], [], []]
        if label is not None:
            grid[0].append("Method")
            grid[1].append("")
            grid[2].append(label)
        for r in self.rows:
            grid[0] += [f"Top-{r.L} (%)", "", ""]
            grid[1] += ["R", "P", "F1"]
            grid[2] += [f"{r.recall:.1f}", f"{r.precision:.1f}", f"{r.f1:.1f}"]
        widths = [max(5, *(len(row[i]) for row in grid)) for i in range(len(grid[0]))]
        return "".join("  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in grid)


def admission_metrics(recommended, truth, L=None):
    """Per-admission ``(precision, recall, f1)`` as fractions; F1 is 0 when P + R = 0."""
    L = len(recommended) if L is None else L
    truth = set(truth)
    if not truth:
        raise ValueError("ground-truth set must be nonempty")
    hits = len(set(recommended[:L]) & truth)
    p = hits / L
    r = hits / len(truth)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def per_admission_metrics(params: ModelParams, test, Ls=DEFAULT_LS):
    """Yield one dict per admission with P/R/F1 (fractions) for every L."""
    Ls = list(Ls)
    _check_ls(Ls, params.n_procedures)
    lmax = max(Ls)
    for adm in test:
        ranked = recommend_top_l(params, adm.diseases, lmax)
        row = {"admission_id": adm.admission_id}
        for L in Ls:
            p, r, f1 = admission_metrics(ranked[:L], adm.positives, L)
            row[f"P@{L}"], row[f"R@{L}"], row[f"F1@{L}"] = p, r, f1
        yield row


def _check_ls(Ls, n_procedures):
    if not Ls:
        raise ValueError("at least one L is required")
    for L in Ls:
        if not 1 <= L <= n_procedures:
            raise ValueError(f"L={L} outside [1, {n_procedures}]")


def evaluate(params: ModelParams, test, Ls=DEFAULT_LS) -> EvalReport:
    """Mean top-L precision / recall / F1 over ``test``, in percent."""
    if not test:
        raise ValueError("test set is empty")
    Ls = list(Ls)
    sums = {L: np.zeros(3) for L in Ls}
    for row in per_admission_metrics(params, test, Ls):
        for L in Ls:
            sums[L] += (row[f"P@{L}"], row[f"R@{L}"], row[f"F1@{L}"])
    n = len(test)
    rows = [MetricRow(L, *(100.0 * sums[L] / n)) for L in Ls]
    return EvalReport(rows, n)


def mean_report(reports) -> EvalReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    rows = []
    for i, base in enumerate(reports[0].rows):
        vals = np.array([[r.rows[i].precision, r.rows[i].recall, r.rows[i].f1] for r in reports])
        rows.append(MetricRow(base.L, *vals.mean(axis=0)))
    return EvalReport(rows, reports[0].admission_count)


@dataclass
class CrossValidation:
    folds: list[EvalReport]
    mean: EvalReport


def fold_indices(n, folds, seed):
    """Contiguous folds of a seeded permutation of ``range(n)``."""
    order = np.random.default_rng(seed).permutation(n)
    return [chunk.tolist() for chunk in np.array_split(order, folds)]


def cross_validate(train_pool, test, cfg, folds=10, Ls=DEFAULT_LS, n_diseases=None, n_procedures=None,
                   progress=None) -> CrossValidation:
    """Train on all folds but one, score on the fixed ``test`` set, repeat per fold."""
    from icd_embed.trainer import train

    if folds < 2:
        raise ValueError("folds must be >= 2")
    chunks = fold_indices(len(train_pool), folds, cfg.seed)
    reports = []
    for k in range(folds):
        held = set(chunks[k])
        subset = [a for i, a in enumerate(train_pool) if i not in held]
        if not subset:
            raise ValueError(f"fold {k} leaves no training admissions")
        fold_cfg = dataclasses.replace(cfg, seed=cfg.seed + k)
        params, _ = train(subset, fold_cfg, n_diseases, n_procedures)
        rep = evaluate(params, test, Ls)
        reports.append(rep)
        if progress is not None:
            progress(k, rep)
    return CrossValidation(reports, mean_report(reports))


SWEEP_AXES = {"M": "M", "alpha": "alpha", "K": "K"}


@dataclass
class SweepRow:
    value: float
    report: EvalReport | None
    error: str | None = None


def sweep(train_set, test, base_cfg, axis, values, Ls=DEFAULT_LS, n_diseases=None, n_procedures=None,
          progress=None) -> list[SweepRow]:
    """Train and evaluate one model per value of ``axis``, all other settings fixed.

    A failing cell is recorded with its error message and the sweep continues.
    """
    from icd_embed.trainer import train

    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("no sweep values given")
    out = []
    for value in values:
        typed = float(value) if axis == "alpha" else int(value)
        try:
            cfg = dataclasses.replace(base_cfg, **{SWEEP_AXES[axis]: typed})
            params, _ = train(train_set, cfg, n_diseases, n_procedures)
            row = SweepRow(typed, evaluate(params, test, Ls))
        except Exception as exc:  # one bad cell must not sink the sweep
            log.error("sweep cell %s=%s failed: %s", axis, value, exc)
            row = SweepRow(typed, None, f"{type(exc).__name__}: {exc}")
        out.append(row)
        if progress is not None:
            progress(row)
    return out


def sweep_table(axis, rows: list[SweepRow], Ls=None) -> str:
    """Tab-separated sweep results: one line per value, R/P/F1 per L."""
    Ls = Ls or next((tuple(r.L for r in row.report.rows) for row in rows if row.report), DEFAULT_LS)
    header = [axis] + [f"{m}@{L}" for L in Ls for m in ("R", "P", "F1")] + ["error"]
    lines = ["\t".join(header)]
    for row in rows:
        cells = [f"{row.value:g}"]
        if row.report is None:
            cells += ["nan"] * (3 * len(Ls)) + [row.error or ""]
        else:
            for L in Ls:
                r = row.report.row(L)
                cells += [f"{r.recall:.2f}", f"{r.precision:.2f}", f"{r.f1:.2f}"]
            cells.append("")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
