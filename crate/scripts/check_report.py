#!/usr/bin/env python3
"""Recompute an evaluation report from its per-sample scores.

Usage: check_report.py SCORES.csv REPORT.json

Reads subject_id,view_index,score,label rows, recomputes the confusion
counts, accuracy, precision, recall, F1, ROC points and AUC (by pairwise
counting), and compares them with the report at six decimals. Exits 0 when
everything matches, 1 otherwise. Standard library only.
"""

import csv
import json
import sys


def fmt(x):
    return "%.6f" % x


def recompute(rows, threshold):
    tp = sum(1 for s, y in rows if s >= threshold and y == 1)
    fp = sum(1 for s, y in rows if s >= threshold and y == 0)
    tn = sum(1 for s, y in rows if s < threshold and y == 0)
    fn = sum(1 for s, y in rows if s < threshold and y == 1)
    n = len(rows)
    flags = []
    precision = tp / (tp + fp) if tp + fp else 0.0
    if tp + fp == 0:
        flags.append("precision_zero_denominator")
    recall = tp / (tp + fn) if tp + fn else 0.0
    if tp + fn == 0:
        flags.append("recall_zero_denominator")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.append("f1_zero_denominator")

    pos = [s for s, y in rows if y == 1]
    neg = [s for s, y in rows if y == 0]
    if pos and neg:
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        auc = wins / (len(pos) * len(neg))
        roc = [(0.0, 0.0)]
        for t in sorted({s for s, _ in rows}, reverse=True):
            tpr = sum(1 for p in pos if p >= t) / len(pos)
            fpr = sum(1 for q in neg if q >= t) / len(neg)
            roc.append((fpr, tpr))
    else:
        auc = None
        roc = []
        flags.append("auc_undefined_single_class")
    return {
        "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        "accuracy": (tp + tn) / n,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "auc": auc,
        "roc": roc,
        "n_samples": n,
        "flags": flags,
    }


def main(argv):
    if len(argv) != 3:
        sys.stderr.write(__doc__)
        return 2
    with open(argv[1], newline="", encoding="utf-8") as f:
        rows = [(float(r["score"]), int(r["label"])) for r in csv.DictReader(f)]
    with open(argv[2], encoding="utf-8") as f:
        report = json.load(f)
    want = recompute(rows, report["threshold"])

    problems = []
    for key in ("confusion", "n_samples", "flags"):
        if report[key] != want[key]:
            problems.append("%s: report %r, recomputed %r" % (key, report[key], want[key]))
    for key in ("accuracy", "precision", "recall", "f1"):
        if fmt(report[key]) != fmt(want[key]):
            problems.append("%s: report %s, recomputed %s" % (key, fmt(report[key]), fmt(want[key])))
    got_auc = None if report["auc"] is None else fmt(report["auc"])
    want_auc = None if want["auc"] is None else fmt(want["auc"])
    if got_auc != want_auc:
        problems.append("auc: report %s, recomputed %s" % (got_auc, want_auc))
    got_roc = [[fmt(x), fmt(y)] for x, y in report["roc"]]
    want_roc = [[fmt(x), fmt(y)] for x, y in want["roc"]]
    if got_roc != want_roc:
        problems.append("roc: %d points in report, %d recomputed or values differ" % (len(got_roc), len(want_roc)))

    for p in problems:
        print(p)
    print("report matches" if not problems else "%d mismatches" % len(problems))
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
