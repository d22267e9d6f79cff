"""SRCC / PLCC metrics and per-source evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ArgumentError, MissingIdError, ParseError
from .model import atomic_write_text


def _pair(preds, gts):
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.ndim != 1 or p.shape != g.shape:
        raise ArgumentError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size < 2:
        raise ArgumentError("need at least two samples")
    if np.ptp(g) == 0 or np.ptp(p) == 0:
        raise ArgumentError("degenerate input: constant predictions or ground truth")
    return p, g


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    r = float(a @ b / math.sqrt((a @ a) * (b @ b)))
    return min(1.0, max(-1.0, r))


def plcc(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return _pearson(p, g)


def srcc(preds, gts) -> float:
    """Spearman correlation: Pearson of average-tie ranks."""
    p, g = _pair(preds, gts)
    return _pearson(rankdata(p, method="average"), rankdata(g, method="average"))


@dataclass
class GroupRow:
    source_tag: str
    n: int
    srcc: float | None
    plcc: float | None
    mae: float
    flag: str = ""


@dataclass
class Report:
    rows: list[GroupRow]
    average: GroupRow
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "average": asdict(self.average), "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source_tag", "n", "srcc", "plcc", "mae", "flag"])
        for r in [*self.rows, self.average]:
            w.writerow([r.source_tag, r.n, _cell(r.srcc), _cell(r.plcc), f"{r.mae:.6f}", r.flag])
        return buf.getvalue()

    def to_table(self) -> str:
        header = ("source_tag", "n", "SRCC", "PLCC", "MAE", "flag")
        body = [(r.source_tag, str(r.n), _cell(r.srcc, 3), _cell(r.plcc, 3), f"{r.mae:.3f}", r.flag)
                for r in [*self.rows, self.average]]
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _cell(v, digits=6):
    return "nan" if v is None else f"{v:.{digits}f}"


def evaluate(predictions, manifest) -> Report:
    """Per-``source_tag`` SRCC, PLCC and MAE plus an unweighted average row.

    ``predictions`` is an iterable of ``(id, score)``. Groups whose scores or
    MOS values are constant are kept as flagged rows with no correlation.
    """
    by_id = {it.id: it for it in manifest}
    preds = list(predictions)
    missing = [pid for pid, _ in preds if pid not in by_id]
    if missing:
        raise MissingIdError(missing)
    groups: dict[str, tuple[list, list]] = {}
    for pid, score in preds:
        tag = by_id[pid].source_tag
        groups.setdefault(tag, ([], []))
        groups[tag][0].append(float(score))
        groups[tag][1].append(by_id[pid].mos)
    rows = []
    for tag in sorted(groups):
        p, g = groups[tag]
        mae = float(np.mean(np.abs(np.subtract(p, g))))
        try:
            rows.append(GroupRow(tag, len(p), srcc(p, g), plcc(p, g), mae))
        except ArgumentError as exc:
            rows.append(GroupRow(tag, len(p), None, None, mae, flag=f"degenerate: {exc}"))
    ok = [r for r in rows if r.srcc is not None]
    avg = GroupRow(
        "average", sum(r.n for r in rows),
        float(np.mean([r.srcc for r in ok])) if ok else None,
        float(np.mean([r.plcc for r in ok])) if ok else None,
        float(np.mean([r.mae for r in rows])) if rows else 0.0,
        "" if len(ok) == len(rows) else f"{len(rows) - len(ok)} degenerate group(s) excluded",
    )
    return Report(rows=rows, average=avg)


def read_predictions(path):
    """Parse a predictions CSV (header ``id,score[,x,y,w,h][,trace]``) into row dicts."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("predictions file is empty", line=1) from None
    header = [h.strip() for h in header]
    allowed = [["id", "score"], ["id", "score", "x", "y", "w", "h"], ["id", "score", "trace"],
               ["id", "score", "x", "y", "w", "h", "trace"]]
    if header not in allowed:
        raise ParseError(f"unexpected header {','.join(header)}", line=1)
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(rec)}", line=lineno)
        row = dict(zip(header, (c.strip() for c in rec)))
        try:
            row["score"] = float(row["score"])
        except ValueError:
            raise ParseError(f"score {row['score']!r} is not a number", line=lineno, field="score") from None
        if not math.isfinite(row["score"]):
            raise ParseError("score is not finite", line=lineno, field="score")
        if "x" in row:
            box = [row.pop(k) for k in ("x", "y", "w", "h")]
            if all(b == "" for b in box):
                row["box"] = None
            else:
                try:
                    row["box"] = tuple(int(b) for b in box)
                except ValueError:
                    raise ParseError("box coordinates must be integers", line=lineno, field="x,y,w,h") from None
        else:
            row["box"] = None
        row["trace"] = row.get("trace") or None
        row["line"] = lineno
        rows.append(row)
    return rows


def write_predictions(path, pairs) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "score"])
    for pid, score in pairs:
        w.writerow([pid, repr(float(score))])
    atomic_write_text(path, buf.getvalue())
