"""Defense-accuracy bookkeeping and report emission.

The headline metric is the accuracy improvement a defense buys over the
undefended network under the same attack: improvement = D - V. By default
a null (detected) output counts as a successfully defended sample; a
strict mode counts only exact label matches.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .defenses.base import NULL_LABEL, Defense
from .exceptions import UsageError

CSV_COLUMNS = ("defense", "attack", "mode", "adversary", "fraction", "clean_acc",
               "defense_acc", "vanilla_acc", "improvement", "queries", "seed")


@dataclass
class ReportRow:
    defense: str
    attack: str
    mode: str            # U | T
    adversary: str       # pure | mixed
    fraction: float
    clean_acc: float
    defense_acc: float
    vanilla_acc: float
    improvement: float
    queries: int
    seed: int


@dataclass
class ExperimentReport:
    rows: list

    def __len__(self):
        return len(self.rows)


def defense_accuracy(defense: Defense, adversarial_batch, true_labels,
                     null_counts_as_defended: bool = True, seed=None) -> float:
    """Fraction of adversarial samples the defense handles.

    A handled sample either gets the true label back or (by default) the
    null label, which means the attack was detected and neutralized.
    """
    labels = np.asarray(true_labels)
    if len(labels) == 0:
        raise UsageError("defense_accuracy: empty batch")
    out = defense.classify_batch(np.asarray(adversarial_batch, dtype=np.float32), seed=seed)
    good = out == labels
    if null_counts_as_defended:
        good = good | (out == NULL_LABEL)
    return float(np.mean(good))


def improvement(defense_acc: float, vanilla_acc: float) -> float:
    """Accuracy gained over the undefended network under the same attack."""
    return defense_acc - vanilla_acc


def finalize_rows(rows, vanilla_rows) -> list:
    """Fill vanilla_acc/improvement from the matching undefended rows.

    Matching key: (attack, mode, adversary, fraction). The vanilla rows
    themselves end up with improvement exactly 0.
    """
    index = {(r.attack, r.mode, r.adversary, r.fraction): r.defense_acc
             for r in vanilla_rows}
    for row in rows:
        key = (row.attack, row.mode, row.adversary, row.fraction)
        if key not in index:
            raise UsageError(f"finalize_rows: no vanilla baseline for {key}")
        row.vanilla_acc = index[key]
        row.improvement = improvement(row.defense_acc, row.vanilla_acc)
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def emit_report(report: ExperimentReport, fmt: str, path):
    """Write the report atomically as CSV (fixed column order) or JSON."""
    if fmt == "csv":
        lines = [",".join(CSV_COLUMNS)]
        for row in report.rows:
            rec = asdict(row)
            lines.append(",".join(_fmt(rec[c]) for c in CSV_COLUMNS))
        payload = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = json.dumps({"rows": [asdict(r) for r in report.rows]}, indent=2) + "\n"
    else:
        raise UsageError(f"emit_report: unknown format '{fmt}'")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return path


def load_report_json(path) -> ExperimentReport:
    with open(path) as fh:
        obj = json.load(fh)
    return ExperimentReport([ReportRow(**rec) for rec in obj["rows"]])
