"""The (context, perspective, permutation, dimension) score tensor."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

AXES = ("context", "perspective", "permutation", "dimension")
COLUMNS = ("context", "perspective", "permutation", "dimension", "raw", "normalized")


class TensorError(ValueError):
    pass


@dataclass
class ScoreTensor:
    """Scores on four labelled axes.

    ``raw`` and ``normalized`` have shape (contexts, perspectives,
    permutations, dimensions).  An excluded administration (refusal or
    failure) is stored as NaN across all its dimensions.
    """

    contexts: tuple[str, ...]
    perspectives: tuple[str, ...]
    permutations: tuple[int, ...]
    dimensions: tuple[str, ...]
    raw: np.ndarray
    normalized: np.ndarray
    questionnaire_id: str = ""
    model_id: str = ""
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.contexts = tuple(self.contexts)
        self.perspectives = tuple(self.perspectives)
        self.permutations = tuple(int(p) for p in self.permutations)
        self.dimensions = tuple(self.dimensions)
        shape = (len(self.contexts), len(self.perspectives), len(self.permutations), len(self.dimensions))
        self.raw = np.asarray(self.raw, dtype=float)
        self.normalized = np.asarray(self.normalized, dtype=float)
        for name in ("raw", "normalized"):
            if getattr(self, name).shape != shape:
                raise TensorError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("contexts", "perspectives", "permutations", "dimensions"):
            labels = getattr(self, name)
            if len(set(labels)) != len(labels):
                raise TensorError(f"duplicate {name} labels")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.raw.shape  # type: ignore[return-value]

    def values(self, which: str = "normalized") -> np.ndarray:
        if which not in ("raw", "normalized"):
            raise TensorError(f"which must be 'raw' or 'normalized', got {which!r}")
        return self.raw if which == "raw" else self.normalized

    def context_index(self, label: str) -> int:
        try:
            return self.contexts.index(label)
        except ValueError:
            raise TensorError(f"unknown context {label!r}") from None

    def perspective_index(self, label: str) -> int:
        try:
            return self.perspectives.index(label)
        except ValueError:
            raise TensorError(f"unknown perspective {label!r}") from None

    def conditions(self, axis: str = "context", fixed: str | None = None,
                   which: str = "raw") -> tuple[tuple[str, ...], np.ndarray]:
        """Slice to (conditions, permutations, dimensions) along one varying axis.

        ``axis`` names the axis that varies; the other one is held at
        ``fixed`` (which may be omitted when it has a single label).
        """
        v = self.values(which)
        if axis == "context":
            others = self.perspectives
            if fixed is None:
                if len(others) != 1:
                    raise TensorError("several perspectives present; pass the one to hold fixed")
                j = 0
            else:
                j = self.perspective_index(fixed)
            return self.contexts, v[:, j]
        if axis == "perspective":
            others = self.contexts
            if fixed is None:
                if len(others) != 1:
                    raise TensorError("several contexts present; pass the one to hold fixed")
                i = 0
            else:
                i = self.context_index(fixed)
            return self.perspectives, v[i]
        raise TensorError(f"axis must be 'context' or 'perspective', got {axis!r}")

    # -- serialization ----------------------------------------------------

    def to_rows(self) -> list[tuple]:
        rows = []
        for i, c in enumerate(self.contexts):
            for j, p in enumerate(self.perspectives):
                for k, r in enumerate(self.permutations):
                    for m, d in enumerate(self.dimensions):
                        rows.append((c, p, r, d, float(self.raw[i, j, k, m]), float(self.normalized[i, j, k, m])))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(COLUMNS)
        for row in self.to_rows():
            w.writerow([*row[:4], repr(row[4]), repr(row[5])])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "questionnaire_id": self.questionnaire_id,
            "model_id": self.model_id,
            "axes": {
                "context": list(self.contexts),
                "perspective": list(self.perspectives),
                "permutation": list(self.permutations),
                "dimension": list(self.dimensions),
            },
            "meta": self.meta,
            # NaN is not valid JSON; excluded cells become null.
            "records": [
                dict(zip(COLUMNS, [*row[:4], _num(row[4]), _num(row[5])])) for row in self.to_rows()
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, directory: str | Path, stem: str = "tensor") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tsv, js = directory / f"{stem}.tsv", directory / f"{stem}.json"
        tsv.write_text(self.to_csv())
        js.write_text(self.to_json())
        return tsv, js

    @classmethod
    def from_json(cls, text: str) -> "ScoreTensor":
        doc = json.loads(text)
        ax = doc["axes"]
        shape = tuple(len(ax[a]) for a in AXES)
        raw, norm = np.full(shape, np.nan), np.full(shape, np.nan)
        pos = [{lab: n for n, lab in enumerate(ax[a])} for a in AXES]
        for rec in doc["records"]:
            idx = tuple(pos[n][rec[a]] for n, a in enumerate(AXES))
            raw[idx] = np.nan if rec["raw"] is None else rec["raw"]
            norm[idx] = np.nan if rec["normalized"] is None else rec["normalized"]
        return cls(ax["context"], ax["perspective"], ax["permutation"], ax["dimension"], raw, norm,
                   doc.get("questionnaire_id", ""), doc.get("model_id", ""), doc.get("meta", {}))

    @classmethod
    def load(cls, path: str | Path) -> "ScoreTensor":
        return cls.from_json(Path(path).read_text())


def _num(x: float) -> float | None:
    return None if np.isnan(x) else x


def from_profiles(
    profiles: Mapping[tuple[str, str, int], Mapping[str, float]],
    normalized: Mapping[tuple[str, str, int], Mapping[str, float]],
    contexts: Sequence[str],
    perspectives: Sequence[str],
    permutations: Sequence[int],
    dimensions: Sequence[str],
    **kw: Any,
) -> ScoreTensor:
    """Build a tensor from per-(context, perspective, permutation) score maps.

    Missing keys become NaN rows.
    """
    shape = (len(contexts), len(perspectives), len(permutations), len(dimensions))
    raw, norm = np.full(shape, np.nan), np.full(shape, np.nan)
    for i, c in enumerate(contexts):
        for j, p in enumerate(perspectives):
            for k, r in enumerate(permutations):
                key = (c, p, r)
                if key in profiles:
                    raw[i, j, k] = [profiles[key][d] for d in dimensions]
                    norm[i, j, k] = [normalized[key][d] for d in dimensions]
    return ScoreTensor(contexts, perspectives, permutations, dimensions, raw, norm, **kw)
