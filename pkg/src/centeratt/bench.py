"""Five-stage latency profiler and its table/CSV renderers.

CSV columns (milliseconds, one decimal)::

    variant,load_data,preprocess,collate,load_to_gpu,model,overall,quality

``quality`` is optional and left empty when unknown. ``overall`` is the sum of
the five stage columns as printed, so every row adds up exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

STAGES = ("load data", "preprocess", "collate", "load to GPU", "model")
CSV_COLUMNS = ("variant", "load_data", "preprocess", "collate", "load_to_gpu", "model",
               "overall", "quality")


@dataclass
class LatencyReport:
    variant: str
    samples: Dict[str, List[float]] = field(default_factory=lambda: {s: [] for s in STAGES})
    quality: Optional[float] = None

    @classmethod
    def from_means(cls, variant: str, means: Sequence[float],
                   quality: Optional[float] = None) -> "LatencyReport":
        """A one-sample report holding the given per-stage milliseconds."""
        if len(means) != len(STAGES):
            raise ValueError(f"expected {len(STAGES)} stage values, got {len(means)}")
        return cls(variant, {s: [float(m)] for s, m in zip(STAGES, means)}, quality)

    @property
    def runs(self) -> int:
        return len(self.samples[STAGES[0]])

    @property
    def means(self) -> Dict[str, float]:
        return {s: float(np.mean(v)) if v else 0.0 for s, v in self.samples.items()}

    @property
    def p90(self) -> Dict[str, float]:
        return {s: float(np.percentile(v, 90)) if v else 0.0 for s, v in self.samples.items()}

    @property
    def overall(self) -> float:
        return sum(self.means[s] for s in STAGES)

    def rounded(self) -> Tuple[List[float], float]:
        """Stage means at one decimal and their exact sum."""
        stages = [round(self.means[s], 1) for s in STAGES]
        return stages, round(sum(stages), 1)


def profile_pipeline(stages: Sequence[Tuple[str, Callable]], items: Sequence, runs: int = 1,
                     warmup: int = 0, variant: str = "pipeline") -> LatencyReport:
    """Time each stage with a monotonic clock.

    ``stages`` is an ordered list of ``(name, fn)``; each ``fn`` consumes the
    previous stage's output, the first one an element of ``items``. One run
    processes every item; its sample per stage is the mean over items in
    milliseconds. Warm-up runs are executed and discarded.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if not items:
        raise ValueError("need at least one scene to profile")
    names = [n for n, _ in stages]
    if tuple(names) != STAGES:
        raise ValueError(f"stages must be exactly {STAGES}, got {tuple(names)}")
    report = LatencyReport(variant)
    for r in range(warmup + runs):
        totals = [0.0] * len(stages)
        for item in items:
            out = item
            for k, (_, fn) in enumerate(stages):
                t0 = time.perf_counter()
                out = fn(out)
                totals[k] += time.perf_counter() - t0
        if r >= warmup:
            for name, total in zip(names, totals):
                report.samples[name].append(max(total, 0.0) * 1000.0 / len(items))
    return report


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.1f}"


def report_rows(reports: Sequence[LatencyReport]) -> List[List[str]]:
    rows = []
    for rep in reports:
        stages, overall = rep.rounded()
        rows.append([rep.variant, *(f"{v:.1f}" for v in stages), f"{overall:.1f}",
                     _fmt(rep.quality)])
    return rows


def to_csv(reports: Sequence[LatencyReport]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(r) for r in report_rows(reports)]
    return "\n".join(lines) + "\n"


def to_table(reports: Sequence[LatencyReport]) -> str:
    header = ["variant", *STAGES, "overall", "quality"]
    rows = [header] + report_rows(reports)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    out = []
    for n, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def table_row(report: LatencyReport) -> str:
    """Row in the typeset layout: ``name & v1 & ... & overall & quality \\\\``."""
    cells = report_rows([report])[0]
    if not cells[-1]:
        cells = cells[:-1]
    return " & ".join(cells) + r" \\"


def write_report(report: LatencyReport, comparisons: Sequence[LatencyReport] = (),
                 budget_ms: Optional[float] = None) -> Tuple[str, str]:
    """Return ``(csv, text table)`` with one row per variant.

    ``budget_ms`` appends an informational pass/fail line per row; nothing is
    enforced.
    """
    reports = [report, *comparisons]
    text = to_table(reports)
    if budget_ms is not None:
        for rep in reports:
            _, overall = rep.rounded()
            verdict = "within" if overall <= budget_ms else "over"
            text += f"{rep.variant}: {overall:.1f} ms, {verdict} the {budget_ms:.1f} ms budget\n"
    return to_csv(reports), text
