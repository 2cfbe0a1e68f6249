"""Multi-label metric panel in the column layout of the results table.

Conventions that move the third decimal:

* precision, recall and F1 of a label are 0 when their denominator is 0;
* AUC is the Mann-Whitney statistic with tied scores given their midrank;
* "macro accuracy" is the unweighted mean of per-label binary accuracies;
* a label whose column holds a single class has no AUC and is left out of
  the macro AUC mean, with a warning recorded on the report.

The ``brute_*`` functions are slow, independent references used by the tests.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

COLUMNS = ("model", "macro_f1", "macro_auc", "macro_accuracy", "micro_f1",
           "macro_precision", "macro_recall", "micro_auc")
METRICS = COLUMNS[1:]


@dataclass
class EvalBatch:
    probabilities: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.probabilities.shape != self.labels.shape or self.probabilities.ndim != 2:
            raise ValueError("probabilities and labels must be matching (n, L) arrays")
        if not np.all(np.isfinite(self.probabilities)):
            raise ValueError("probabilities must be finite")

    @property
    def predictions(self):
        return self.probabilities >= self.threshold


@dataclass
class MetricsReport:
    macro_f1: float
    macro_auc: float
    macro_accuracy: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    micro_auc: float
    model: str = ""
    warnings: list = field(default_factory=list)

    def values(self):
        return {k: getattr(self, k) for k in METRICS}

    def to_csv_row(self):
        return [self.model] + [f"{getattr(self, k):.6f}" for k in METRICS]

    def to_dict(self):
        return asdict(self)


def per_label_counts(batch):
    """(L, 4) integer array of TP, FP, FN, TN per label."""
    pred = batch.predictions
    y = batch.labels
    tp = np.sum(pred & y, axis=0)
    fp = np.sum(pred & ~y, axis=0)
    fn = np.sum(~pred & y, axis=0)
    tn = np.sum(~pred & ~y, axis=0)
    return np.stack([tp, fp, fn, tn], axis=1)


def _ratio(num, den):
    return num / den if den else 0.0


def _prf(tp, fp, fn):
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f = _ratio(2 * tp, 2 * tp + fp + fn)
    return p, r, f


def auc(scores, labels):
    """Rank-statistic AUC; NaN when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = kernels.midrank(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metric_panel(batch, model=""):
    counts = per_label_counts(batch)
    n_labels = counts.shape[0]
    precs, recs, f1s, accs, aucs = [], [], [], [], []
    warnings = []
    for k in range(n_labels):
        tp, fp, fn, tn = (int(v) for v in counts[k])
        p, r, f = _prf(tp, fp, fn)
        precs.append(p)
        recs.append(r)
        f1s.append(f)
        accs.append((tp + tn) / (tp + fp + fn + tn))
        a = auc(batch.probabilities[:, k], batch.labels[:, k])
        if math.isnan(a):
            warnings.append(f"label {k} has a single class; excluded from macro AUC")
        else:
            aucs.append(a)
    tp, fp, fn = (int(counts[:, i].sum()) for i in range(3))
    micro_auc = auc(batch.probabilities.ravel(), batch.labels.ravel())
    if math.isnan(micro_auc):
        warnings.append("pooled labels have a single class; micro AUC undefined")
    return MetricsReport(
        macro_f1=float(np.mean(f1s)),
        macro_auc=float(np.mean(aucs)) if aucs else math.nan,
        macro_accuracy=float(np.mean(accs)),
        micro_f1=_ratio(2 * tp, 2 * tp + fp + fn),
        macro_precision=float(np.mean(precs)),
        macro_recall=float(np.mean(recs)),
        micro_auc=micro_auc,
        model=model,
        warnings=warnings,
    )


def macro_f1(probabilities, labels, threshold=0.5):
    return metric_panel(EvalBatch(probabilities, labels, threshold)).macro_f1


# ---------------------------------------------------------------- aggregation

@dataclass
class Aggregate:
    mean: float
    std: float
    k: int

    def format(self, digits=3):
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def seed_aggregate(reports):
    """Mean and sample std (divisor k-1) of each metric across seed repeats."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("seed_aggregate needs at least 2 reports")
    out = {}
    for name in METRICS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        # sort so the result does not depend on report order
        vals = np.sort(vals)
        out[name] = Aggregate(float(vals.mean()), float(vals.std(ddof=1)), len(vals))
    return out


def aggregate_csv(rows):
    """CSV text, Table-2 column order; ``rows`` is ``[(model, {metric: Aggregate})]``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for model, agg in rows:
        w.writerow([model] + [agg[m].format() if m in agg else "" for m in METRICS])
    return buf.getvalue()


# ------------------------------------------------------------ brute references

def brute_counts(probabilities, labels, threshold=0.5):
    n, n_labels = len(probabilities), len(probabilities[0])
    out = []
    for k in range(n_labels):
        tp = fp = fn = tn = 0
        for i in range(n):
            pred = probabilities[i][k] >= threshold
            truth = bool(labels[i][k])
            if pred and truth:
                tp += 1
            elif pred:
                fp += 1
            elif truth:
                fn += 1
            else:
                tn += 1
        out.append((tp, fp, fn, tn))
    return out


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return math.nan
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def brute_panel(probabilities, labels, threshold=0.5):
    probs = [list(map(float, row)) for row in probabilities]
    labs = [list(map(bool, row)) for row in labels]
    counts = brute_counts(probs, labs, threshold)
    L = len(counts)

    def safe(a, b):
        return a / b if b else 0.0

    prec = [safe(tp, tp + fp) for tp, fp, fn, tn in counts]
    rec = [safe(tp, tp + fn) for tp, fp, fn, tn in counts]
    f1 = [safe(2 * p * r, p + r) for p, r in zip(prec, rec)]
    acc = [(tp + tn) / (tp + fp + fn + tn) for tp, fp, fn, tn in counts]
    aucs = [brute_auc([row[k] for row in probs], [row[k] for row in labs]) for k in range(L)]
    aucs = [a for a in aucs if not math.isnan(a)]
    TP = sum(c[0] for c in counts)
    FP = sum(c[1] for c in counts)
    FN = sum(c[2] for c in counts)
    mp, mr = safe(TP, TP + FP), safe(TP, TP + FN)
    flat_s = [v for row in probs for v in row]
    flat_y = [v for row in labs for v in row]
    return {
        "macro_f1": sum(f1) / L,
        "macro_auc": sum(aucs) / len(aucs) if aucs else math.nan,
        "macro_accuracy": sum(acc) / L,
        "micro_f1": safe(2 * mp * mr, mp + mr),
        "macro_precision": sum(prec) / L,
        "macro_recall": sum(rec) / L,
        "micro_auc": brute_auc(flat_s, flat_y),
    }
