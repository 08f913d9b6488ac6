"""Transition matrices and accuracy tables built from judge verdicts."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .judge import STATE_ORDER, WRONG_STATES, ResponseState, Verdict

_INDEX = {s: i for i, s in enumerate(STATE_ORDER)}


class AlignmentError(ValueError):
    """Baseline and contrast verdicts do not cover the same samples."""

    def __init__(self, message, ids=()):
        super().__init__(f"{message}: {sorted(ids)}" if ids else message)
        self.ids = sorted(ids)


class EmptyInputError(ValueError):
    pass


@dataclass(eq=False)
class TransitionMatrix:
    """Percentages of samples moving from a baseline state (row) to a contrast state (column).

    ``counts`` holds the raw sample counts behind ``m``; ``rows`` names the
    baseline states present (all five for the full view, the four wrong
    states for the errors-only view).
    """

    counts: np.ndarray
    view: str = "full"
    rows: tuple[ResponseState, ...] = STATE_ORDER
    cols: tuple[ResponseState, ...] = field(default=STATE_ORDER)

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())

    @property
    def m(self) -> np.ndarray:
        return 100.0 * self.counts / self.n_samples

    def cell(self, baseline: ResponseState, contrast: ResponseState) -> float:
        return float(self.m[self.rows.index(baseline), self.cols.index(contrast)])

    def row_marginals(self) -> dict[ResponseState, float]:
        return dict(zip(self.rows, self.m.sum(axis=1)))

    def col_marginals(self) -> dict[ResponseState, float]:
        return dict(zip(self.cols, self.m.sum(axis=0)))

    def __eq__(self, other):
        return (
            isinstance(other, TransitionMatrix)
            and self.view == other.view
            and self.rows == other.rows
            and self.cols == other.cols
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.m, other.m)
        )


def build_matrix(pairs) -> TransitionMatrix:
    """Cell (i, j) = 100/N * #samples with baseline state i and contrast state j."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("no verdict pairs")
    bad = [
        (b.sample_id if b is not None else c.sample_id)
        for b, c in pairs
        if b is None or c is None or b.sample_id != c.sample_id
    ]
    if bad:
        raise AlignmentError("misaligned or missing verdicts", bad)
    counts = np.zeros((5, 5), dtype=np.int64)
    idx_b = [_INDEX[b.state] for b, _ in pairs]
    idx_c = [_INDEX[c.state] for _, c in pairs]
    np.add.at(counts, (idx_b, idx_c), 1)
    return TransitionMatrix(counts)


def align(baseline, contrast) -> list[tuple[Verdict, Verdict]]:
    """Pair two verdict collections by sample id (baseline order)."""
    b = {v.sample_id: v for v in baseline}
    c = {v.sample_id: v for v in contrast}
    diff = set(b) ^ set(c)
    if diff:
        raise AlignmentError("sample sets differ", diff)
    return [(b[k], c[k]) for k in b]


def errors_only_view(tm: TransitionMatrix) -> TransitionMatrix:
    """Drop baseline-correct samples and renormalise over baseline-wrong ones."""
    if tm.view != "full":
        raise ValueError("errors_only_view expects a full-view matrix")
    counts = tm.counts[[_INDEX[s] for s in WRONG_STATES]].copy()
    if counts.sum() == 0:
        raise EmptyInputError("no baseline-wrong samples")
    return TransitionMatrix(counts, view="errors_only", rows=WRONG_STATES)


def average_matrices(mats) -> TransitionMatrix:
    """Sample-weighted average: pool the underlying counts."""
    mats = list(mats)
    if not mats:
        raise EmptyInputError("nothing to average")
    first = mats[0]
    if any(m.view != first.view or m.rows != first.rows for m in mats):
        raise ValueError("cannot average matrices of different views")
    return TransitionMatrix(sum(m.counts for m in mats), view=first.view, rows=first.rows)


def accuracy_identity_gap(tm: TransitionMatrix, baseline_acc: float, contrast_acc: float) -> float:
    """|contrast - (baseline + inflow to CORRECT - outflow from CORRECT)| in percentage points."""
    if tm.view != "full":
        raise ValueError("needs the full view")
    c = _INDEX[ResponseState.CORRECT]
    m = tm.m
    inflow = m[:, c].sum() - m[c, c]
    outflow = m[c, :].sum() - m[c, c]
    return abs(contrast_acc - (baseline_acc + inflow - outflow))


# --------------------------------------------------------------------------
# accuracy tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AccuracyCell:
    correct: int
    judged: int
    unjudged: int = 0

    @property
    def accuracy(self) -> float | None:
        return None if self.judged == 0 else 100.0 * self.correct / self.judged

    def display(self) -> str:
        acc = self.accuracy
        if acc is None:
            return "n/a"
        s = f"{acc:.1f}"
        if self.unjudged:
            s += f" ({self.unjudged} unjudged)"
        return s


@dataclass
class AccuracyTable:
    """Accuracy per (method, task) plus an unweighted average over tasks per method."""

    cells: dict[tuple[str, str], AccuracyCell]
    methods: list[str]
    tasks: list[str]

    def accuracy(self, method: str, task: str) -> float | None:
        cell = self.cells.get((method, task))
        return None if cell is None else cell.accuracy

    def average(self, method: str) -> float | None:
        accs = [self.accuracy(method, t) for t in self.tasks]
        accs = [a for a in accs if a is not None]
        return sum(accs) / len(accs) if accs else None

    def best(self, column: str) -> set[str]:
        """Methods with the top score in ``column`` (a task name or ``"Avg"``)."""
        scores = {
            m: (self.average(m) if column == "Avg" else self.accuracy(m, column)) for m in self.methods
        }
        scores = {m: s for m, s in scores.items() if s is not None}
        if not scores:
            return set()
        top = max(scores.values())
        return {m for m, s in scores.items() if s == top}


def accuracy_table(records) -> AccuracyTable:
    """Build from ``(method, task, verdict_or_None)`` triples; ``None`` means unjudged."""
    correct = defaultdict(int)
    judged = defaultdict(int)
    unjudged = defaultdict(int)
    methods, tasks = [], []
    for method, task, verdict in records:
        if method not in methods:
            methods.append(method)
        if task not in tasks:
            tasks.append(task)
        key = (method, task)
        if verdict is None:
            unjudged[key] += 1
        else:
            judged[key] += 1
            correct[key] += int(verdict.correct)
    cells = {k: AccuracyCell(correct[k], judged[k], unjudged[k]) for k in set(judged) | set(unjudged)}
    return AccuracyTable(cells, methods, tasks)


# --------------------------------------------------------------------------
# emitters
# --------------------------------------------------------------------------

MATRIX_CORNER = "baseline\\contrast"


def matrix_to_csv(tm: TransitionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow([MATRIX_CORNER, *[s.value for s in tm.cols], "count"])
    m = tm.m
    for i, s in enumerate(tm.rows):
        w.writerow([s.value, *[repr(float(x)) for x in m[i]], int(tm.counts[i].sum())])
    return buf.getvalue()


def matrix_from_csv(text: str) -> TransitionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[0] != MATRIX_CORNER or header[-1] != "count":
        raise ValueError("not a transition-matrix CSV")
    cols = tuple(ResponseState(h) for h in header[1:-1])
    row_states = tuple(ResponseState(r[0]) for r in body)
    pct = np.array([[float(x) for x in r[1:-1]] for r in body])
    row_counts = np.array([int(r[-1]) for r in body])
    n = int(row_counts.sum())
    counts = np.rint(pct * n / 100.0).astype(np.int64)
    if not np.array_equal(counts.sum(axis=1), row_counts):
        raise ValueError("percentages inconsistent with row counts")
    view = "full" if row_states == STATE_ORDER else "errors_only"
    tm = TransitionMatrix(counts, view=view, rows=row_states, cols=cols)
    if not np.array_equal(tm.m, pct):
        raise ValueError("percentages do not reproduce exactly")
    return tm


def accuracy_to_csv(table: AccuracyTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["method", "task", "correct", "judged", "unjudged", "accuracy", "display", "best"])
    for method in table.methods:
        for task in table.tasks:
            cell = table.cells.get((method, task))
            if cell is None:
                w.writerow([method, task, "", "", "", "", "n/a", ""])
                continue
            acc = cell.accuracy
            w.writerow([
                method, task, cell.correct, cell.judged, cell.unjudged,
                "" if acc is None else repr(acc), cell.display(), int(method in table.best(task)),
            ])
        avg = table.average(method)
        w.writerow([
            method, "Avg", "", "", "", "" if avg is None else repr(avg),
            "n/a" if avg is None else f"{avg:.1f}", int(method in table.best("Avg")),
        ])
    return buf.getvalue()


def heatmap_svg(tm: TransitionMatrix, title: str = "") -> str:
    """Annotated heatmap as an SVG document (text kept as text, no embedded date)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = tm.m
    with matplotlib.rc_context({"svg.fonttype": "none", "svg.hashsalt": "audiocd"}):
        fig, ax = plt.subplots(figsize=(1.3 * len(tm.cols) + 1.5, 1.1 * len(tm.rows) + 1.2))
        ax.imshow(m, cmap="Blues", vmin=0.0, vmax=max(float(m.max()), 1e-9))
        ax.set_xticks(range(len(tm.cols)), [s.value for s in tm.cols], rotation=30, ha="right")
        ax.set_yticks(range(len(tm.rows)), [s.value for s in tm.rows])
        ax.set_xlabel("contrastive decoding")
        ax.set_ylabel("greedy baseline")
        if title:
            ax.set_title(title)
        vmax = m.max()
        for i in range(len(tm.rows)):
            for j in range(len(tm.cols)):
                colour = "white" if m[i, j] > 0.6 * vmax else "black"
                ax.text(j, i, f"{m[i, j]:.1f}", ha="center", va="center", color=colour,
                        gid=f"cell-{i}-{j}", fontsize=9)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def emit_matrix(tm: TransitionMatrix, out_dir, run_id: str) -> list[Path]:
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{run_id}_transition_{tm.view}.csv"
    svg_path = out_dir / f"{run_id}_transition_{tm.view}.svg"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(matrix_to_csv(tm), encoding="utf-8", newline="")
        svg_path.write_text(heatmap_svg(tm, f"{run_id} ({tm.view}, n={tm.n_samples})"), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing report to {out_dir}: {exc}") from exc
    return [csv_path, svg_path]


def emit_accuracy(table: AccuracyTable, out_dir, run_id: str) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / f"{run_id}_accuracy.csv"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(accuracy_to_csv(table), encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return path
