"""Experiment reports: canonical CSV, pivot tables, and figures.

The canonical serialization is ``runs.csv`` (one row per run; floats
written with ``repr`` so parsing returns the identical report).  On top
of that, ``emit_tables`` writes one method-by-sparsity table per
pattern in csv and markdown, with a trainable-percentage column, plus
matplotlib figures: perplexity vs. sparsity per pattern and the
validation-perplexity trajectories of every run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .retrain import TrajectoryPoint

__all__ = [
    "RunRecord",
    "ExperimentReport",
    "parse_report",
    "emit_tables",
    "write_trajectory",
    "write_layer_log",
]


@dataclass
class RunRecord:
    pattern: str
    sparsity: float
    criterion: str
    method: str
    seed: int
    test_ppl: Optional[float]
    trainable_fraction: float
    optimizer_floats: int
    tokens_per_sec: float
    lr: float
    trajectory_path: str = ""
    error: str = ""

    def cell(self) -> Tuple[str, float, str, str]:
        return (self.pattern, self.sparsity, self.criterion, self.method)


@dataclass
class ExperimentReport:
    rows: List[RunRecord] = field(default_factory=list)

    def aggregates(self) -> Dict[Tuple[str, float, str, str], float]:
        """Mean test perplexity per cell over the seeds that succeeded."""
        cells: Dict[Tuple[str, float, str, str], List[float]] = {}
        for row in self.rows:
            if row.test_ppl is not None and not row.error:
                cells.setdefault(row.cell(), []).append(row.test_ppl)
        return {cell: float(np.mean(v)) for cell, v in cells.items()}

    def save(self, path):
        cols = [f.name for f in fields(RunRecord)]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            for row in self.rows:
                out = []
                for c in cols:
                    v = getattr(row, c)
                    out.append("" if v is None else repr(v) if isinstance(v, float) else v)
                writer.writerow(out)


def parse_report(path) -> ExperimentReport:
    """Inverse of :meth:`ExperimentReport.save`."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(
                RunRecord(
                    pattern=rec["pattern"],
                    sparsity=float(rec["sparsity"]),
                    criterion=rec["criterion"],
                    method=rec["method"],
                    seed=int(rec["seed"]),
                    test_ppl=float(rec["test_ppl"]) if rec["test_ppl"] else None,
                    trainable_fraction=float(rec["trainable_fraction"]),
                    optimizer_floats=int(rec["optimizer_floats"]),
                    tokens_per_sec=float(rec["tokens_per_sec"]),
                    lr=float(rec["lr"]),
                    trajectory_path=rec["trajectory_path"],
                    error=rec["error"],
                )
            )
    return ExperimentReport(rows)


def write_trajectory(path, points: Sequence[TrajectoryPoint]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "lr", "train_loss", "val_ppl"])
        for p in points:
            writer.writerow([p.iteration, repr(p.lr), repr(p.train_loss), repr(p.val_ppl)])


def write_layer_log(path, logs):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "criterion", "steps", "obj_initial", "obj_final", "obj_oracle"])
        for row in logs:
            writer.writerow(
                [row.layer, row.criterion, row.steps, repr(row.obj_initial), repr(row.obj_final), repr(row.obj_oracle)]
            )


def _sorted_unique(values):
    return sorted(set(values))


def _fmt_ppl(v: Optional[float]) -> str:
    return "FAIL" if v is None else f"{v:.2f}"


def emit_tables(
    report: ExperimentReport,
    out_dir,
    formats: Sequence[str] = ("csv", "markdown"),
    figures: bool = True,
    expected: Optional[Sequence[Tuple[str, float, str, str]]] = None,
):
    """Write per-pattern method-by-sparsity tables, the canonical CSV, and figures.

    Every (pattern, sparsity, criterion, method) cell present in the
    report appears in its pattern's table; cells where every seed failed
    render as an explicit FAIL marker.  When ``expected`` cells are
    given, a report that lacks any of them is rejected with the missing
    cells listed.  Returns the list of files written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not report.rows:
        raise DataError("report has no rows to emit")
    if expected is not None:
        have = {r.cell() for r in report.rows}
        missing = [c for c in expected if tuple(c) not in have]
        if missing:
            raise DataError(f"report is missing cells: {missing}")
    written = []

    runs_csv = out_dir / "runs.csv"
    report.save(runs_csv)
    written.append(runs_csv)

    agg = report.aggregates()
    failed_cells = {r.cell() for r in report.rows if r.error} - set(agg)
    frac: Dict[Tuple[str, str, str], List[float]] = {}
    for r in report.rows:
        frac.setdefault((r.pattern, r.criterion, r.method), []).append(r.trainable_fraction)

    for pattern in _sorted_unique(r.pattern for r in report.rows):
        sparsities = _sorted_unique(r.sparsity for r in report.rows if r.pattern == pattern)
        methods = []
        for r in report.rows:
            if r.pattern == pattern and (r.criterion, r.method) not in methods:
                methods.append((r.criterion, r.method))
        header = ["criterion", "method", "% trainable"] + [f"{s:g}" for s in sparsities]
        table = []
        for criterion, method in methods:
            mean_frac = float(np.mean(frac[(pattern, criterion, method)]))
            line = [criterion, method, f"{100 * mean_frac:.3f}%"]
            for s in sparsities:
                cell = (pattern, s, criterion, method)
                if cell in agg:
                    line.append(_fmt_ppl(agg[cell]))
                elif cell in failed_cells:
                    line.append("FAIL")
                else:
                    line.append("")
            table.append(line)

        stem = f"table_{pattern.replace(':', 'of')}"
        if "csv" in formats:
            path = out_dir / f"{stem}.csv"
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(header)
                writer.writerows(table)
            written.append(path)
        if "markdown" in formats:
            path = out_dir / f"{stem}.md"
            with open(path, "w") as f:
                f.write("| " + " | ".join(header) + " |\n")
                f.write("|" + "|".join("---" for _ in header) + "|\n")
                for line in table:
                    f.write("| " + " | ".join(str(c) for c in line) + " |\n")
            written.append(path)

    if figures:
        written.extend(render_figures(report, out_dir))
    return written


def render_figures(report: ExperimentReport, out_dir) -> List[Path]:
    """Perplexity-vs-sparsity curves per pattern and per-run trajectories."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    agg = report.aggregates()
    written = []

    for pattern in _sorted_unique(r.pattern for r in report.rows):
        sparsities = _sorted_unique(r.sparsity for r in report.rows if r.pattern == pattern)
        if len(sparsities) < 2:
            continue
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        labels = []
        for r in report.rows:
            label = f"{r.criterion}/{r.method}" if r.criterion != "magnitude" else r.method
            if r.pattern == pattern and (r.criterion, r.method, label) not in labels:
                labels.append((r.criterion, r.method, label))
        for criterion, method, label in labels:
            xs = [s for s in sparsities if (pattern, s, criterion, method) in agg]
            ys = [agg[(pattern, s, criterion, method)] for s in xs]
            if xs:
                ax.plot(xs, ys, marker="o", label=label)
        ax.set_yscale("log")
        ax.set_xlabel("sparsity")
        ax.set_ylabel("test perplexity")
        ax.set_title(f"{pattern} pruning")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"ppl_vs_sparsity_{pattern.replace(':', 'of')}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    traj_rows = [r for r in report.rows if r.trajectory_path and Path(r.trajectory_path).exists()]
    if traj_rows:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for r in traj_rows:
            iters, ppls = [], []
            with open(r.trajectory_path, newline="") as f:
                for rec in csv.DictReader(f):
                    iters.append(int(rec["iter"]))
                    ppls.append(float(rec["val_ppl"]))
            ax.plot(iters, ppls, alpha=0.7, label=f"{r.method} s={r.sparsity:g} seed{r.seed}")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("validation perplexity")
        if len(traj_rows) <= 12:
            ax.legend(fontsize=6)
        fig.tight_layout()
        path = out_dir / "trajectories.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
