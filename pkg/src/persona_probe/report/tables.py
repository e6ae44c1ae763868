"""Tabular artifacts: tab-separated values, a JSON sidecar and a markdown render.

Cells keep full precision in the TSV and sidecar; rounding happens only in
the markdown view.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .. import metrics
from ..metrics import HUMAN_IPSATIVE_FLOOR, SignificanceRow, StabilityReport

VARIANT_ORDER = ("system/2nd", "system/3rd", "user/2nd", "user/3rd")
NA = "n/a"
MISSING = "-"


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[Any]]
    # (row, column) -> flag name, e.g. "max" or "below_human".
    flags: dict[tuple[int, int], str] = field(default_factory=dict)
    precision: int = 3
    notes: list[str] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def cell(self, row: int, column: str) -> Any:
        return self.rows[row][self.columns.index(column)]

    def column(self, column: str) -> list[Any]:
        j = self.columns.index(column)
        return [r[j] for r in self.rows]

    # -- serialization ----------------------------------------------------

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(_full(v) for v in row))
        return "\n".join(lines) + "\n"

    def sidecar(self) -> dict:
        return {
            "name": self.name,
            "schema": [{"name": c, "type": _kind(self.column(c))} for c in self.columns],
            "rows": [[_json_value(v) for v in row] for row in self.rows],
            "flags": [{"row": r, "column": self.columns[c], "flag": f} for (r, c), f in sorted(self.flags.items())],
            "notes": self.notes,
            "provenance": self.provenance,
        }

    def to_markdown(self) -> str:
        head = "| " + " | ".join(self.columns) + " |"
        sep = "|" + "|".join("---" for _ in self.columns) + "|"
        body = []
        for i, row in enumerate(self.rows):
            cells = []
            for j, v in enumerate(row):
                text = _display(v, self.precision)
                flag = self.flags.get((i, j))
                if flag == "max":
                    text = f"**{text}**"
                elif flag:
                    text = f"{text}*"
                cells.append(text)
            body.append("| " + " | ".join(cells) + " |")
        out = [f"### {self.name}", "", head, sep, *body]
        if self.notes:
            out += [""] + self.notes
        return "\n".join(out) + "\n"

    def write(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [directory / f"{self.name}.tsv", directory / f"{self.name}.json", directory / f"{self.name}.md"]
        paths[0].write_text(self.to_tsv(), encoding="utf-8")
        paths[1].write_text(json.dumps(self.sidecar(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        paths[2].write_text(self.to_markdown(), encoding="utf-8")
        return paths


def _full(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_value(v: Any) -> Any:
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _display(v: Any, precision: int) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        if not math.isfinite(v):
            return repr(v)
        return f"{v:.{precision}f}"
    return str(v)


def _kind(values: Sequence[Any]) -> str:
    kinds = {type(v).__name__ for v in values if v is not None}
    if kinds <= {"float", "int"} and kinds:
        return "number"
    if kinds == {"bool"}:
        return "boolean"
    if kinds <= {"float", "int", "str"} and "str" in kinds and kinds != {"str"}:
        return "number_or_marker"
    return "string"


def short_label(label: str) -> str:
    """``format/code_py`` -> ``code_py``; ``wiki/heavy-metal`` -> ``heavy metal``."""
    kind, _, key = label.partition("/")
    if not key:
        return label
    return key.replace("-", " ") if kind == "wiki" else key


# -- controllability -------------------------------------------------------


@dataclass(frozen=True)
class ControllabilityEntry:
    model: str
    questionnaire: str
    variant: str
    value: float | None  # None: variant unsupported by the model


def emit_controllability_table(entries: Sequence[ControllabilityEntry], name: str = "controllability") -> Table:
    """Rows are models, columns questionnaire x variant; best cell per questionnaire flagged.

    Unsupported variants show ``n/a``; variants that were not run show ``-``.
    """
    models = list(dict.fromkeys(e.model for e in entries))
    quests = list(dict.fromkeys(e.questionnaire for e in entries))
    columns = ["model"] + [f"{q}:{v}" for q in quests for v in VARIANT_ORDER]
    lookup = {(e.model, e.questionnaire, e.variant): e for e in entries}
    rows = []
    for m in models:
        row: list[Any] = [m]
        for q in quests:
            for v in VARIANT_ORDER:
                e = lookup.get((m, q, v))
                row.append(MISSING if e is None else (NA if e.value is None else float(e.value)))
        rows.append(row)
    flags = {}
    for q in quests:
        cols = [columns.index(f"{q}:{v}") for v in VARIANT_ORDER]
        best = max((r[c] for r in rows for c in cols if isinstance(r[c], float)), default=None)
        if best is None:
            continue
        for i, r in enumerate(rows):
            for c in cols:
                if isinstance(r[c], float) and r[c] == best:
                    flags[(i, c)] = "max"
    return Table(name, columns, rows, flags, precision=3)


# -- stability -------------------------------------------------------------


def _pair_label(a: str, b: str) -> str:
    return f"{short_label(a)} - {short_label(b)}"


def emit_stability_tables(
    report: StabilityReport,
    dimensions: Sequence[str],
    baselines: Mapping[str, Mapping[str, Mapping[str, float | None]]] | None = None,
    prefix: str = "",
    model: str = "",
) -> dict[str, Table]:
    """Mean-level, rank-order, ipsative and summary tables for one tensor.

    Human-baseline rows come first where the constants provide them.
    Ipsative rows whose mean is below the smallest human mean are flagged.
    """
    baselines = baselines or {}
    out: dict[str, Table] = {}

    # Mean-level: one row per condition pair, one column per dimension.
    cols = ["change", *dimensions]
    rows: list[list[Any]] = []
    for study, vals in baselines.get("mean_level", {}).items():
        if any(d in vals for d in dimensions):
            rows.append([f"human: {study}", *[vals.get(d) for d in dimensions]])
    pairs = list(dict.fromkeys((a, b) for a, b, _ in report.mean_level.pairs))
    for a, b in pairs:
        rows.append([_pair_label(a, b), *[report.mean_level.pairs[(a, b, d)] for d in dimensions]])
    t = Table(prefix + "mean_level", cols, rows, precision=2)
    t.notes.append(f"Mean |d| over {report.mean_level.count} values: {report.mean_level.mean_abs_d:.2f}")
    out["mean_level"] = t

    # Rank-order: both directions, their mean, per dimension plus the mean column.
    ro = report.rank_order
    cols = ["order", *dimensions, "mean"]
    rows = []
    for study, vals in baselines.get("rank_order", {}).items():
        if any(d in vals for d in dimensions):
            rows.append([f"human: {study}", *[vals.get(d) for d in dimensions], vals.get("mean")])
    rows.append(["condition order change due to permutation change",
                 *[ro.condition_order[d] for d in dimensions], ro.condition_order_mean])
    rows.append(["permutation order change due to condition change",
                 *[ro.permutation_order[d] for d in dimensions], ro.permutation_order_mean])
    rows.append(["mean", *[ro.per_dimension_mean[d] for d in dimensions], ro.grand_mean])
    t = Table(prefix + "rank_order", cols, rows, precision=2)
    t.notes.append(f"Correlation: {ro.method}; zero-variance pairs dropped: {ro.dropped_pairs}")
    out["rank_order"] = t

    # Ipsative: summary per condition pair.
    cols = ["change", "mean", "median", "std", "min", "max", "n", "dropped", "bigger_than_human"]
    rows, flags = [], {}
    for study, vals in baselines.get("ipsative", {}).items():
        rows.append([f"human: {study}", *[vals.get(k) for k in ("mean", "median", "std", "min", "max")],
                     None, None, None])
    for s in report.ipsative:
        below = bool(s.below_human)
        rows.append([_pair_label(s.condition_a, s.condition_b), s.mean, s.median, s.std, s.min, s.max,
                     s.n, s.dropped, below])
        if below:
            flags[(len(rows) - 1, 1)] = "below_human"
    which = report.ipsative[0].which if report.ipsative else "raw"
    t = Table(prefix + "ipsative", cols, rows, flags, precision=2)
    t.notes.append(f"Scores: {which}. Flagged rows have mean r < {HUMAN_IPSATIVE_FLOOR}.")
    out["ipsative"] = t

    # Summary in the shape of the model-comparison table.
    cols = ["model", "mean_level_abs_d", "rank_order_r", "ipsative_r", "permutation_variance"]
    rows = [[model, report.mean_level.mean_abs_d, report.rank_order.grand_mean, report.ipsative_mean,
             report.permutation_variance]]
    out["summary"] = Table(prefix + "stability_summary", cols, rows, precision=3)
    return out


# -- significance ----------------------------------------------------------


def emit_significance_summary(rows: Sequence[SignificanceRow], alpha: float = 0.05,
                              name: str = "significance") -> dict[str, Table]:
    """Per-dimension ANOVA grid plus the pairwise post-hoc table."""
    if not rows:
        raise ValueError("no significance rows")
    threshold = rows[0].threshold
    cols = ["dimension", "F", "df_between", "df_within", "p", "threshold", "significant",
            "degenerate", "significant_pairs"]
    grid, flags = [], {}
    for r in rows:
        n_sig = sum(1 for c in r.tukey if c.significant)
        grid.append([r.dimension, float(r.anova.statistic), float(r.anova.df[0]), float(r.anova.df[1]),
                     float(r.anova.p_value), float(threshold), bool(r.significant), bool(r.anova.degenerate),
                     n_sig])
        if not r.significant:
            flags[(len(grid) - 1, 0)] = "not_significant"
    t = Table(name, cols, grid, flags, precision=4)
    t.notes.append(f"Corrected threshold: alpha {alpha} / {len(rows)} dimensions = {threshold:.4g}")
    t.notes.append("Dimensions marked * show no significant effect.")
    cols = ["dimension", "group_a", "group_b", "mean_difference", "q", "p", "significant"]
    pairs = []
    for r in rows:
        for c in r.tukey:
            pairs.append([r.dimension, short_label(c.group_a), short_label(c.group_b),
                          float(c.mean_difference), float(c.q_statistic), float(c.p_value), bool(c.significant)])
    return {"grid": t, "post_hoc": Table(name + "_post_hoc", cols, pairs, precision=4)}


def permutation_variance_table(values: Mapping[tuple[str, str, str], float],
                               name: str = "permutation_variance", scale: float = 1000.0) -> Table:
    """(model, questionnaire, variant) -> variance, laid out like the controllability table."""
    entries = [ControllabilityEntry(m, q, v, None if x is None else x * scale) for (m, q, v), x in values.items()]
    t = emit_controllability_table(entries, name)
    t.flags = {}
    t.precision = 2
    t.notes.append(f"Values are variance x {scale:g}.")
    return t


def human_baselines(path: str | Path | None = None):
    return metrics.load_human_baselines(path)
