"""Results-matrix store and aggregation algebra.

Matrices stay at full precision internally; two-decimal half-away-from-zero
rounding is applied only when rendering for display. Matrices persist as CSV
with a header row of column ids and a first column of condition ids.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

SUITES = ("robocasa_dev", "robocasa_test", "molmospaces")


@dataclass(frozen=True)
class ResultsMatrix:
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", tuple(tuple(r) for r in self.values))
        if not self.rows or not self.columns:
            raise ValueError("matrix needs at least one row and one column")
        if len(set(self.rows)) != len(self.rows):
            raise ValueError("duplicate row ids")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column ids")
        if len(self.values) != len(self.rows):
            raise ValueError(
                f"expected {len(self.rows)} value rows, got {len(self.values)}"
            )
        for row_id, row in zip(self.rows, self.values):
            if len(row) != len(self.columns):
                raise ValueError(
                    f"row {row_id!r} has {len(row)} cells, expected {len(self.columns)}"
                )
            for col_id, v in zip(self.columns, row):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"cell ({row_id!r}, {col_id!r}) = {v} outside [0,1]")
        suite = self.metadata.get("suite")
        if suite is not None and suite not in SUITES:
            raise ValueError(f"unknown suite {suite!r}")

    def _row_index(self, row_id: str) -> int:
        try:
            return self.rows.index(row_id)
        except ValueError:
            raise ValueError(f"unknown row id {row_id!r}") from None

    def _col_index(self, col_id: str) -> int:
        try:
            return self.columns.index(col_id)
        except ValueError:
            raise ValueError(f"unknown column id {col_id!r}") from None

    def cell(self, row_id: str, col_id: str) -> float:
        return self.values[self._row_index(row_id)][self._col_index(col_id)]

    def row_values(self, row_id: str) -> tuple[float, ...]:
        return self.values[self._row_index(row_id)]

    def column_values(self, col_id: str) -> tuple[float, ...]:
        j = self._col_index(col_id)
        return tuple(row[j] for row in self.values)

    def with_row(self, row_id: str, values: Sequence[float]) -> "ResultsMatrix":
        return ResultsMatrix(
            rows=self.rows + (row_id,),
            columns=self.columns,
            values=self.values + (tuple(values),),
            metadata=self.metadata,
        )


def oracle_row(m: ResultsMatrix, over: Iterable[str]) -> tuple[float, ...]:
    """Cell-wise maximum over the listed condition rows."""
    row_ids = list(over)
    if not row_ids:
        raise ValueError("oracle_row needs at least one condition row")
    selected = [m.row_values(r) for r in row_ids]
    return tuple(max(cells) for cells in zip(*selected))


def macro_avg(row: Sequence[float]) -> float:
    if not row:
        raise ValueError("macro_avg of an empty row")
    return statistics.fmean(row)


def with_avg_column(m: ResultsMatrix, name: str = "Avg") -> ResultsMatrix:
    """Append a per-row arithmetic-mean column at full precision."""
    if name in m.columns:
        raise ValueError(f"column {name!r} already present")
    values = tuple(row + (macro_avg(row),) for row in m.values)
    return ResultsMatrix(
        rows=m.rows, columns=m.columns + (name,), values=values, metadata=m.metadata
    )


@dataclass(frozen=True)
class FamilyRule:
    kind: str  # "mean" or "select"
    members: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.kind not in ("mean", "select"):
            raise ValueError(f"unknown family rule kind {self.kind!r}")
        if not self.members:
            raise ValueError("family rule needs at least one member")
        if self.kind == "select" and len(self.members) != 1:
            raise ValueError("select rule takes exactly one member")


def summarize_families(
    detail: ResultsMatrix,
    spec: Mapping[str, FamilyRule],
    include_avg: bool = True,
) -> ResultsMatrix:
    """Collapse benchmark columns into family columns; the trailing Avg
    column is the mean of the family summaries at full precision."""
    if not spec:
        raise ValueError("family spec is empty")
    for family, rule in spec.items():
        for member in rule.members:
            if member not in detail.columns:
                raise ValueError(f"family {family!r} member {member!r} not in matrix")
    columns = tuple(spec) + (("Avg",) if include_avg else ())
    values = []
    for row_id in detail.rows:
        summaries = []
        for rule in spec.values():
            member_cells = [detail.cell(row_id, m) for m in rule.members]
            if rule.kind == "mean":
                summaries.append(statistics.fmean(member_cells))
            else:
                summaries.append(member_cells[0])
        if include_avg:
            summaries.append(statistics.fmean(summaries))
        values.append(tuple(summaries))
    return ResultsMatrix(
        rows=detail.rows, columns=columns, values=tuple(values), metadata=detail.metadata
    )


# Table-1-style MolmoSpaces summary: Pick and P+P average Std and Hard,
# NextTo selects In-Distribution, Color is a single benchmark.
MOLMOSPACES_FAMILIES: dict[str, FamilyRule] = {
    "Pick": FamilyRule("mean", ("pick_std", "pick_hard")),
    "P+P": FamilyRule("mean", ("pp_std", "pp_hard")),
    "NextTo": FamilyRule("select", ("nextto_id",)),
    "Color": FamilyRule("select", ("color",)),
}


def load_family_spec(path) -> dict[str, FamilyRule]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or not doc:
        raise ValueError("family spec must be a non-empty JSON object")
    spec = {}
    for family, rule in doc.items():
        if not isinstance(rule, dict) or set(rule) != {"rule", "members"}:
            raise ValueError(
                f'family {family!r} must have exactly the keys "rule" and "members"'
            )
        spec[family] = FamilyRule(kind=rule["rule"], members=tuple(rule["members"]))
    return spec


def round_display(x: float) -> float:
    """Two decimals, half away from zero.

    The %.12g snap strips float representation noise (e.g. a mean stored as
    0.5349999999999999) before the decimal quantization, so ties round the
    way the exact arithmetic would.
    """
    d = Decimal(f"{x:.12g}")
    q = abs(d).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(-q if d < 0 else q)


def write_matrix_csv(m: ResultsMatrix, path, display: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["condition", *m.columns])
        for row_id, row in zip(m.rows, m.values):
            if display:
                cells = [f"{round_display(v):.2f}" for v in row]
            else:
                cells = [repr(v) for v in row]
            writer.writerow([row_id, *cells])


def read_matrix_csv(path, metadata: Mapping[str, object] | None = None) -> ResultsMatrix:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty matrix file") from None
        if not header or header[0] != "condition":
            raise ValueError(f'{path}: first header field must be "condition"')
        columns = tuple(header[1:])
        rows, values = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(columns) + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {len(columns) + 1} fields, got {len(record)}"
                )
            rows.append(record[0])
            try:
                values.append(tuple(float(x) for x in record[1:]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return ResultsMatrix(
        rows=tuple(rows), columns=columns, values=tuple(values), metadata=metadata or {}
    )


def lcap_reference(target_probs: Sequence[float], mask: Sequence[int]) -> float:
    """Mean negative log-likelihood over masked-in positions:
    -(sum m_i * ln p_i) / (sum m_i)."""
    if len(target_probs) != len(mask):
        raise ValueError(
            f"length mismatch: {len(target_probs)} probs, {len(mask)} mask entries"
        )
    total = 0.0
    count = 0
    for i, (p, m) in enumerate(zip(target_probs, mask)):
        if m not in (0, 1):
            raise ValueError(f"mask[{i}] = {m!r} is not 0 or 1")
        if not 0.0 < p <= 1.0:
            raise ValueError(f"target_probs[{i}] = {p} outside (0, 1]")
        if m:
            total += math.log(p)
            count += 1
    if count == 0:
        raise ValueError("mask selects no positions; the loss is undefined")
    return -total / count


def combined_loss(l_fm: float, l_cap: float, lm_weight: float = 0.1) -> float:
    return l_fm + lm_weight * l_cap
