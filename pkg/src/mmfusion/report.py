"""Fold-result CSVs and the two summary tables.

Table 1: models trained on correct pairs, tested correct / random PET /
random MRI. Table 2: every strategy trained and tested on correct pairs
versus trained and tested with random MRI pairs; single-modality rows have
no random-MRI cell.
"""

from __future__ import annotations

import csv
import io
import math
from typing import Sequence

from .evaluation import ExperimentReport, FoldResult

FOLD_FIELDS = ["task", "strategy", "train_scheme", "test_scheme", "fold", "repeats",
               "bacc", "recalls", "confusion", "epochs_run", "best_epoch"]

TABLE1_ROWS = [
    # (strategy, random MRI at test, random PET at test)
    (s, rm, rp)
    for s in ("early", "middle", "late")
    for rm, rp in ((False, False), (False, True), (True, False))
]
TABLE2_ROWS = ["single_pet", "single_mri", "early", "middle", "late"]
ROW_NAMES = {
    "single_pet": "PET only",
    "single_mri": "MRI only",
    "early": "Early Fusion",
    "middle": "Middle Fusion",
    "late": "Late Fusion",
}
MISSING = "---"


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def fold_results_csv(results: Sequence[FoldResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FOLD_FIELDS)
    key = lambda r: (r.task, r.strategy, r.train_scheme, r.test_scheme, r.fold)  # noqa: E731
    for r in sorted(results, key=key):
        w.writerow([
            r.task, r.strategy, r.train_scheme, r.test_scheme, r.fold, r.repeats, _num(r.bacc),
            ";".join(_num(x) for x in r.recalls),
            ";".join(_num(x) for row in r.confusion for x in row),
            r.epochs_run, r.best_epoch,
        ])
    return buf.getvalue()


def read_fold_results(text: str) -> list[FoldResult]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        recalls = [float(x) if x else None for x in row["recalls"].split(";")]
        flat = [float(x) for x in row["confusion"].split(";")]
        k = len(recalls)
        out.append(FoldResult(
            fold=int(row["fold"]), strategy=row["strategy"], train_scheme=row["train_scheme"],
            test_scheme=row["test_scheme"], bacc=float(row["bacc"]), recalls=recalls,
            confusion=[flat[i * k:(i + 1) * k] for i in range(k)], task=int(row["task"]),
            repeats=int(row["repeats"]), epochs_run=int(row["epochs_run"]), best_epoch=int(row["best_epoch"]),
        ))
    return out


def _cell(summary: dict, key) -> str:
    if key not in summary:
        return MISSING
    mean, std, _ = summary[key]
    if math.isnan(std):
        return f"{mean:.3f}"
    return f"{mean:.3f} ± {std:.3f}"


def _test_scheme(random_mri: bool, random_pet: bool) -> str:
    return "random_mri" if random_mri else "random_pet" if random_pet else "correct"


def table1_rows(report: ExperimentReport) -> list[list[str]]:
    summary = report.summary()
    rows = []
    for strategy, rm, rp in TABLE1_ROWS:
        test = _test_scheme(rm, rp)
        rows.append([ROW_NAMES[strategy], "yes" if rm else "no", "yes" if rp else "no",
                     *(_cell(summary, (task, strategy, "correct", test)) for task in (2, 3))])
    return rows


def table2_rows(report: ExperimentReport) -> list[list[str]]:
    summary = report.summary()
    rows = []
    for strategy in TABLE2_ROWS:
        cells = []
        for task in (2, 3):
            cells.append(_cell(summary, (task, strategy, "correct", "correct")))
            cells.append(_cell(summary, (task, strategy, "random_mri", "random_mri")))
        rows.append([ROW_NAMES[strategy], *cells])
    return rows


TABLE1_HEADER = ["", "Random MRI", "Random PET", "BACC 2-Class", "BACC 3-Class"]
TABLE2_HEADER = ["", "CN vs. AD Correct", "CN vs. AD Random MRI",
                 "CN vs. MCI vs. AD Correct", "CN vs. MCI vs. AD Random MRI"]


def _markdown(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def render_markdown(report: ExperimentReport) -> str:
    n_folds = len({r.fold for r in report.results})
    return (
        "# Balanced accuracy across folds\n\n"
        f"Mean ± sample standard deviation over {n_folds} fold(s).\n\n"
        "## Random pairing at test time (trained on correct pairs)\n\n"
        + _markdown(TABLE1_HEADER, table1_rows(report))
        + "\n## Training and testing on correct vs. random MRI pairs\n\n"
        + _markdown(TABLE2_HEADER, table2_rows(report))
    )


def render_tables_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", *TABLE1_HEADER])
    for r in table1_rows(report):
        w.writerow(["1", *r])
    w.writerow(["table", *TABLE2_HEADER])
    for r in table2_rows(report):
        w.writerow(["2", *r])
    return buf.getvalue()
