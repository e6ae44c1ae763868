"""Report assembly for finished experiments."""

from __future__ import annotations

import collections
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .. import __version__, metrics
from ..perspective import FIXTURE_VERSION, PerspectiveKind
from ..runner import Experiment, variant_stem
from ..tensor import ScoreTensor
from .charts import ChartSpec, bar_data, emit_charts, render_grouped_bars
from .tables import (
    ControllabilityEntry,
    Table,
    emit_controllability_table,
    emit_significance_summary,
    emit_stability_tables,
    permutation_variance_table,
)

__all__ = [
    "ReportBundle",
    "Table",
    "ChartSpec",
    "ControllabilityEntry",
    "build_report",
    "bar_data",
    "emit_charts",
    "render_grouped_bars",
    "emit_controllability_table",
    "emit_significance_summary",
    "emit_stability_tables",
    "permutation_variance_table",
]


@dataclass
class ReportBundle:
    tables: dict[str, Table] = field(default_factory=dict)
    charts: dict[str, bytes] = field(default_factory=dict)
    annex: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def write(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        written = []
        for t in self.tables.values():
            t.provenance = {**self.provenance, **t.provenance}
            written += t.write(directory / "tables")
        for name, data in self.charts.items():
            path = directory / "charts" / f"{name}.svg"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
            written.append(path)
        annex = directory / "annex.json"
        annex.parent.mkdir(parents=True, exist_ok=True)
        annex.write_text(json.dumps({"provenance": self.provenance, **self.annex}, indent=1, sort_keys=True) + "\n",
                         encoding="utf-8")
        written.append(annex)
        return written


def _quality(exp: Experiment) -> dict[str, Any]:
    status = collections.Counter()
    methods = collections.Counter()
    ties = 0
    refusals = []
    for t in exp.tasks:
        rec = exp.ledger.latest.get(t.task_id)
        st = rec["status"] if rec else "PENDING"
        status[st] += 1
        if rec and st == "DONE":
            methods[rec["method"]] += 1
            ties += bool(rec.get("tie"))
        elif rec and st == "REFUSED":
            refusals.append({"task": t.task_id, "error": rec.get("error")})
    return {"status": dict(sorted(status.items())), "methods": dict(sorted(methods.items())),
            "ties": ties, "refusals": refusals}


def build_report(
    experiments: Sequence[Experiment],
    tables: bool = True,
    charts: bool = True,
    baselines: str | Path | bool | None = None,
    alpha: float = 0.05,
    double_correction: bool = True,
) -> ReportBundle:
    """Tables, charts and the data-quality annex for one or more experiments.

    ``baselines`` is a CSV path, True for the shipped human baselines, or
    None to leave them out.
    """
    bundle = ReportBundle()
    bundle.provenance = {
        "package_version": __version__,
        "fixture_version": FIXTURE_VERSION,
        "experiments": {e.config.id: e.ledger.digest for e in experiments},
    }
    if baselines is None or baselines is False:
        human = None
    else:
        human = metrics.load_human_baselines(None if baselines is True else baselines)
    entries, variances = [], {}
    for exp in experiments:
        tensors = exp.assemble()
        q = exp.q
        annex: dict[str, Any] = {"data_quality": _quality(exp), "variants": {}}
        targeted = any(p.kind is PerspectiveKind.VALUE_TARGETED for p in exp.config.perspective_specs(q))
        for v in exp.config.unsupported_variants():
            entries.append(ControllabilityEntry(exp.model_id, q.id, v, None))
            variances[(exp.model_id, q.id, v)] = None
        for variant, tensor in tensors.items():
            stem = variant_stem(variant)
            info: dict[str, Any] = {"excluded": tensor.meta.get("excluded", [])}
            if len(tensor.permutations) >= 2:
                variances[(exp.model_id, q.id, variant)] = metrics.permutation_variance(tensor)
            if targeted and len(tensor.contexts) == 1:
                rep = metrics.controllability(tensor, tensor.meta["targets"])
                entries.append(ControllabilityEntry(exp.model_id, q.id, variant, rep.global_value))
                info["controllability"] = {"global": rep.global_value, "per_perspective": rep.per_perspective}
            if tables:
                _analyses(bundle, exp, tensor, f"{exp.config.id}.{stem}.", human, alpha, double_correction, info)
            if charts:
                bundle.charts[f"{exp.config.id}.{stem}"] = render_grouped_bars(
                    tensor, ChartSpec(title=f"{exp.model_id} {q.id} {variant}"))
            annex["variants"][variant] = info
        bundle.annex[exp.config.id] = annex
    if tables and entries:
        bundle.tables["controllability"] = emit_controllability_table(entries)
    if tables and variances:
        bundle.tables["permutation_variance"] = permutation_variance_table(variances)
    return bundle


def _analyses(bundle: ReportBundle, exp: Experiment, tensor: ScoreTensor, prefix: str, human,
              alpha: float, double_correction: bool, info: dict) -> None:
    if len(tensor.contexts) >= 2:
        axis, fixed_labels = "context", list(tensor.perspectives)
    elif len(tensor.perspectives) >= 2:
        axis, fixed_labels = "perspective", list(tensor.contexts)
    else:
        return
    enough = len(tensor.permutations) >= 2
    for fixed in fixed_labels:
        tag = prefix + (f"{fixed.replace('/', '-')}." if len(fixed_labels) > 1 else "")
        entry: dict[str, Any] = {}
        if enough:
            grid = metrics.significance_grid(tensor, axis, fixed, alpha, double_correction=double_correction)
            for key, t in emit_significance_summary(grid, alpha, tag + "significance").items():
                bundle.tables[t.name] = t
            entry["degenerate_dimensions"] = [r.dimension for r in grid if r.anova.degenerate]
            if len(tensor.dimensions) >= 3:
                st = metrics.stability_report(tensor, axis, fixed)
                for t in emit_stability_tables(st, tensor.dimensions, human, tag, exp.model_id).values():
                    bundle.tables[t.name] = t
                entry["rank_order_dropped_pairs"] = st.rank_order.dropped_pairs
                entry["ipsative_dropped"] = {f"{s.condition_a}|{s.condition_b}": s.dropped for s in st.ipsative}
        info.setdefault("analyses", {})[f"{axis}@{fixed}"] = entry
