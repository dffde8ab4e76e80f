"""Box geometry and optimal linear assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box as normalized center/size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w >= 0 and self.h >= 0):
            raise ValueError(f"box has negative size: w={self.w}, h={self.h}")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_tlwh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x + w / 2, y + h / 2, w, h)

    def tlwh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.w, self.h)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def iou_matrix(rows: list[Box], cols: list[Box]) -> np.ndarray:
    out = np.zeros((len(rows), len(cols)))
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            out[i, j] = iou(a, b)
    return out


@dataclass
class AssignmentResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_rows: list[int] = field(default_factory=list)
    unmatched_columns: list[int] = field(default_factory=list)
    total_cost: float = 0.0


_INF = (math.inf, 0.0, 0)


def linear_assignment(cost, maximize: bool = False, forbidden=None) -> AssignmentResult:
    """Optimal assignment over the allowed entries of ``cost``.

    Matches as many rows as the allowed entries permit, then minimizes (or
    maximizes) the summed cost; among equally good matchings the one whose
    row-sorted pair list is lexicographically smallest wins. ``forbidden`` is
    a boolean mask of entries that may not be matched.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    m, n = cost.shape
    if m == 0 or n == 0:
        return AssignmentResult([], list(range(m)), list(range(n)), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite; mark exclusions with `forbidden`")
    allowed = np.ones((m, n), dtype=bool) if forbidden is None else ~np.asarray(forbidden, dtype=bool)
    if allowed.shape != cost.shape:
        raise ValueError("forbidden mask shape does not match cost")
    work = -cost if maximize else cost

    # lexicographic (unmatched rows, cost, tie rank); tie rank reads the row
    # assignment vector (column, or n when unmatched) as a base-(n+1) number
    base = n + 1
    weights = [base ** (m - 1 - r) for r in range(m)]
    width = n + m
    table: list[list[tuple | None]] = []
    for r in range(m):
        row: list[tuple | None] = [None] * width
        for c in range(n):
            if allowed[r, c]:
                row[c] = (0, float(work[r, c]), (c - n) * weights[r])
        row[n + r] = (1, 0.0, 0)
        table.append(row)

    col_of_row = _hungarian(table, m, width)
    pairs = [(r, c) for r, c in enumerate(col_of_row) if c < n]
    matched_cols = {c for _, c in pairs}
    total = 0.0
    for r, c in pairs:
        total += float(cost[r, c])
    return AssignmentResult(
        pairs=pairs,
        unmatched_rows=[r for r, c in enumerate(col_of_row) if c >= n],
        unmatched_columns=[c for c in range(n) if c not in matched_cols],
        total_cost=total,
    )


def _sub3(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _add3(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _hungarian(table, rows: int, cols: int) -> list[int]:
    """Shortest-augmenting-path Hungarian over lexicographic cost triples.

    ``table[r][c]`` is a cost triple or None (not allowed); every row must
    have an allowed column. Returns the column matched to each row.
    """
    zero = (0, 0.0, 0)
    u = [zero] * (rows + 1)
    v = [zero] * (cols + 1)
    owner = [0] * (cols + 1)  # 1-based row matched to column j
    way = [0] * (cols + 1)
    for i in range(1, rows + 1):
        owner[0] = i
        j0 = 0
        minv = [_INF] * (cols + 1)
        used = [False] * (cols + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = table[i0 - 1]
            ui = u[i0]
            delta = _INF
            j1 = -1
            for j in range(1, cols + 1):
                if used[j]:
                    continue
                entry = row[j - 1]
                if entry is not None:
                    vj = v[j]
                    cur = (entry[0] - ui[0] - vj[0], entry[1] - ui[1] - vj[1], entry[2] - ui[2] - vj[2])
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            if j1 < 0:
                raise RuntimeError("assignment infeasible")
            for j in range(cols + 1):
                if used[j]:
                    u[owner[j]] = _add3(u[owner[j]], delta)
                    v[j] = _sub3(v[j], delta)
                elif minv[j] is not _INF:
                    minv[j] = _sub3(minv[j], delta)
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = [0] * rows
    for j in range(1, cols + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row
