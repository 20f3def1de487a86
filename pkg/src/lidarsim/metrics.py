"""Pixel-error metrics between predicted and ground-truth visibility maps, in percent.

L1 = 100 mean|A - B|, L1+ = 100 mean max(A - B, 0), L1- = 100 mean max(B - A, 0),
L2 = 100 sqrt(mean (A - B)^2), with A the prediction and B the ground truth.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class DimensionMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    l1: float
    l1_pos: float
    l1_neg: float
    l2: float
    pixel_count: int
    pair_count: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_pair(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"prediction {a.shape} vs ground truth {b.shape}")
    d = a - b
    n = d.size
    pos = np.maximum(d, 0.0).sum()
    neg = np.maximum(-d, 0.0).sum()
    # l1 from the two parts so the decomposition holds up to one rounding
    return MetricsReport(
        l1=100.0 * (pos + neg) / n,
        l1_pos=100.0 * pos / n,
        l1_neg=100.0 * neg / n,
        l2=100.0 * math.sqrt(float(np.square(d).sum()) / n),
        pixel_count=n,
    )


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Pixel-weighted pooling: equal to evaluating all pairs concatenated."""
    if not reports:
        raise EmptyInput("nothing to aggregate")
    n = sum(r.pixel_count for r in reports)
    pos = sum(r.l1_pos * r.pixel_count for r in reports) / n
    neg = sum(r.l1_neg * r.pixel_count for r in reports) / n
    sq = sum((r.l2 / 100.0) ** 2 * r.pixel_count for r in reports) / n
    return MetricsReport(
        l1=sum(r.l1 * r.pixel_count for r in reports) / n,
        l1_pos=pos,
        l1_neg=neg,
        l2=100.0 * math.sqrt(sq),
        pixel_count=n,
        pair_count=sum(r.pair_count for r in reports),
    )


COLUMNS = ("L1", "L1+", "L1-", "L2")


def _cells(r: MetricsReport) -> list[str]:
    return [f"{r.l1:.2f}", f"{r.l1_pos:.2f}", f"{r.l1_neg:.2f}", f"{r.l2:.2f}"]


def emit_table(rows: Sequence[tuple[str, MetricsReport]], fmt: str = "markdown") -> str:
    if not rows:
        raise EmptyInput("no rows")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", *COLUMNS])
        for label, r in rows:
            w.writerow([label, *_cells(r)])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| | " + " | ".join(COLUMNS) + " |", "|---|" + "---|" * len(COLUMNS)]
        for label, r in rows:
            lines.append(f"| {label} | " + " | ".join(_cells(r)) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def dump_pairs_json(pairs: Sequence[tuple[str, MetricsReport]]) -> str:
    return json.dumps([{"name": name, **r.to_dict()} for name, r in pairs], indent=1, sort_keys=True) + "\n"
