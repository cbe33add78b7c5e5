"""Rate-performance analytics: Pareto fronts, BD-rate, bucketed reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class EvalError(ValueError):
    """Curve does not satisfy a BD computation's preconditions."""


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    metric: float
    label: str = ""

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not 0.0 <= self.metric <= 1.0:
            raise ValueError(f"metric must lie in [0,1], got {self.metric}")


@dataclass
class RDCurve:
    """Pareto-selected points, sorted by strictly increasing bpp."""

    points: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    def bpps(self) -> list:
        return [p.bpp for p in self.points]

    def metrics(self) -> list:
        return [p.metric for p in self.points]


def pareto_front(points) -> RDCurve:
    """Keep p iff no q has q.bpp <= p.bpp and q.metric >= p.metric with one
    strict; exact ties on both axes keep the first by label order."""
    if not points:
        raise ValueError("pareto_front needs at least one point")
    ordered = sorted(points, key=lambda p: (p.bpp, -p.metric, p.label))
    kept = []
    best = -math.inf
    for p in ordered:
        if p.metric > best:
            kept.append(p)
            best = p.metric
    return RDCurve(points=kept)


def _fit_log_rate(curve: RDCurve):
    if len(curve) < 4:
        raise EvalError(f"BD-rate needs >= 4 points per curve, got {len(curve)}")
    met = np.asarray(curve.metrics(), dtype=np.float64)
    rate = np.log10(np.asarray(curve.bpps(), dtype=np.float64))
    return np.polyfit(met, rate, 3)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average percent rate difference of ``test`` vs ``anchor`` over the
    overlapping metric range; negative means the test curve saves rate."""
    pa = _fit_log_rate(anchor)
    pt = _fit_log_rate(test)
    lo = max(min(anchor.metrics()), min(test.metrics()))
    hi = min(max(anchor.metrics()), max(test.metrics()))
    if not hi > lo:
        raise EvalError(f"metric ranges do not overlap: [{lo}, {hi}]")
    ia = np.polyint(pa)
    it = np.polyint(pt)
    int_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    int_t = np.polyval(it, hi) - np.polyval(it, lo)
    avg_diff = (int_t - int_a) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


@dataclass
class BucketReport:
    edges: list
    labels: list          # bucket display labels, low to high
    bd_rates: list        # per-bucket BD-rate or None when undefined
    total: float

    def rows(self):
        return list(zip(self.labels, self.bd_rates))

    def render_text(self, anchor_name: str = "anchor") -> str:
        cells = [f"{bd:+.2f}%" if bd is not None else "-" for bd in self.bd_rates]
        cells.append(f"{self.total:+.2f}%")
        header = ["Compared to"] + self.labels + ["Total"]
        row = [anchor_name] + cells
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        line1 = "  ".join(h.ljust(w) for h, w in zip(header, widths))
        line2 = "  ".join(r.ljust(w) for r, w in zip(row, widths))
        return line1 + "\n" + line2 + "\n"

    def to_csv(self) -> str:
        lines = ["bucket,bd_rate_percent"]
        for label, bd in zip(self.labels, self.bd_rates):
            lines.append(f"{label},{'' if bd is None else repr(float(bd))}")
        lines.append(f"total,{float(self.total)!r}")
        return "\n".join(lines) + "\n"


def _bucket_of(bpp: float, edges) -> int:
    if bpp < edges[0]:
        return 0
    for i in range(1, len(edges)):
        if edges[i - 1] <= bpp <= edges[i]:
            return i
    return len(edges)


def bucket_report(anchor: RDCurve, test: RDCurve, edges=(0.05, 0.1)) -> BucketReport:
    """Per-bpp-bucket BD-rates plus the full-range value.

    Buckets follow the <e0 / [e0,e1] / >e1 convention; a bucket without
    enough points on either curve is reported as absent, never as zero.
    The total is computed on the full overlap, not averaged from buckets.
    """
    edges = sorted(edges)
    if not edges:
        raise ValueError("need at least one bucket edge")
    n_buckets = len(edges) + 1
    labels = [f"<{edges[0]:g}"]
    for i in range(1, len(edges)):
        labels.append(f"[{edges[i - 1]:g},{edges[i]:g}]")
    labels.append(f">{edges[-1]:g}")

    per_bucket = []
    for b in range(n_buckets):
        a_pts = [p for p in anchor.points if _bucket_of(p.bpp, edges) == b]
        t_pts = [p for p in test.points if _bucket_of(p.bpp, edges) == b]
        try:
            per_bucket.append(bd_rate(RDCurve(a_pts), RDCurve(t_pts)))
        except EvalError:
            per_bucket.append(None)
    return BucketReport(edges=list(edges), labels=labels,
                        bd_rates=per_bucket, total=bd_rate(anchor, test))


def measure_bpp(bitstream, height: int, width: int, include_header: bool = False) -> float:
    """Bits per source pixel of a coded bitstream."""
    if height * width <= 0:
        raise ValueError("pixel count must be positive")
    bits = bitstream.payload_bits
    if include_header:
        bits += 8 * bitstream.header_bytes
    return bits / (height * width)


# ---------------------------------------------------------------------------
# curve I/O

def points_to_csv(points) -> str:
    lines = ["label,bpp,metric"]
    for p in points:
        lines.append(f"{p.label},{float(p.bpp)!r},{float(p.metric)!r}")
    return "\n".join(lines) + "\n"


def points_from_csv(text: str) -> list:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "label,bpp,metric":
        raise ValueError("expected header 'label,bpp,metric'")
    points = []
    for ln in lines[1:]:
        label, bpp, metric = ln.split(",")
        points.append(RDPoint(bpp=float(bpp), metric=float(metric), label=label))
    return points
