"""Threshold-free detection metrics and the corruption report.

Scores are always oriented so that higher means more out-of-distribution,
and OOD is the positive class.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

METRICS = ("ll", "typicality", "nsd")
REPORT_HEADER = ["corruption", "severity", "metric", "auroc", "fpr95", "n_id", "n_ood"]


def _check(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score lists must be nonempty")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """P(ood > id) + 0.5 P(ood == id), via the Mann-Whitney rank sum."""
    a, b = _check(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Fraction of ID scores at or above the highest threshold keeping TPR >= target."""
    a, b = _check(id_scores, ood_scores)
    if not 0 < tpr_target <= 1:
        raise ValueError("tpr_target must lie in (0, 1]")
    n = b.size
    k = math.ceil(tpr_target * n)
    while k > 1 and (k - 1) / n >= tpr_target:
        k -= 1
    threshold = np.sort(b)[::-1][k - 1]
    return float(np.mean(a >= threshold))


def orient(metric: str, ll=None, grad_norm=None, nsd=None) -> np.ndarray:
    """Map raw scores to higher-is-more-OOD."""
    if metric == "ll":
        return -np.asarray(ll, dtype=np.float64)
    if metric == "typicality":
        return np.asarray(grad_norm, dtype=np.float64)
    if metric == "nsd":
        return np.asarray(nsd, dtype=np.float64)
    raise ValueError(f"unknown metric {metric!r}")


def oriented_scores(records) -> dict[str, np.ndarray]:
    ll = np.array([r.log_likelihood for r in records])
    gn = np.array([r.grad_norm for r in records])
    d = np.array([r.nsd for r in records])
    return {m: orient(m, ll, gn, d) for m in METRICS}


@dataclass
class EvalReport:
    rows: list[dict]
    averages: list[dict] = field(default_factory=list)

    def average(self, metric: str, severity="all", key="auroc") -> float:
        for r in self.averages:
            if r["metric"] == metric and str(r["severity"]) == str(severity):
                return r[key]
        raise KeyError((metric, severity))

    def lookup(self, corruption: str, severity: int, metric: str) -> dict:
        for r in self.rows:
            if r["corruption"] == corruption and r["severity"] == severity and r["metric"] == metric:
                return r
        raise KeyError((corruption, severity, metric))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# scores oriented higher=OOD; OOD is the positive class for fpr95\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows + self.averages:
                w.writerow([r["corruption"], r["severity"], r["metric"], _f(r["auroc"]),
                            _f(r["fpr95"]), r["n_id"], r["n_ood"]])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header {header}")
        rows, avgs = [], []
        for c, s, m, a, f, ni, no in reader:
            row = {"corruption": c, "severity": int(s) if s.isdigit() else s, "metric": m,
                   "auroc": _p(a), "fpr95": _p(f), "n_id": int(ni), "n_ood": int(no)}
            (avgs if c == "AVERAGE" else rows).append(row)
        return cls(rows, avgs)


def _f(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _p(s):
    return float(s) if s != "" else float("nan")


def aggregate_report(id_scores: dict[str, np.ndarray],
                     ood_scores: dict[tuple[str, int], dict[str, np.ndarray] | None],
                     metrics=METRICS) -> EvalReport:
    """Rows per (corruption, severity, metric) plus per-severity and overall averages.

    ``ood_scores`` maps each condition to oriented scores per metric, or to
    None when the condition is missing; missing rows are kept with NaN
    metrics and left out of the averages.
    """
    rows = []
    for (corruption, severity), scores in sorted(ood_scores.items()):
        for m in metrics:
            if scores is None:
                log.warning("condition %s/%s missing; excluded from averages", corruption, severity)
                rows.append({"corruption": corruption, "severity": severity, "metric": m,
                             "auroc": float("nan"), "fpr95": float("nan"),
                             "n_id": len(id_scores[m]), "n_ood": 0})
                continue
            rows.append({"corruption": corruption, "severity": severity, "metric": m,
                         "auroc": auroc(id_scores[m], scores[m]),
                         "fpr95": fpr_at_tpr(id_scores[m], scores[m]),
                         "n_id": len(id_scores[m]), "n_ood": len(scores[m])})
    return EvalReport(rows, averages_of(rows, metrics))


def averages_of(rows: list[dict], metrics=METRICS) -> list[dict]:
    out = []
    severities = sorted({r["severity"] for r in rows})
    for m in metrics:
        for sev in severities + ["all"]:
            sel = [r for r in rows if r["metric"] == m and (sev == "all" or r["severity"] == sev)
                   and not math.isnan(r["auroc"])]
            if not sel:
                continue
            out.append({
                "corruption": "AVERAGE", "severity": sev, "metric": m,
                "auroc": float(np.mean([r["auroc"] for r in sel])),
                "fpr95": float(np.mean([r["fpr95"] for r in sel])),
                "n_id": sel[0]["n_id"], "n_ood": int(sum(r["n_ood"] for r in sel)),
            })
    return out
