"""Questionnaire definitions, loading and scoring.

A questionnaire definition is a YAML document (``*.def``) with the fields
``id``, ``name``, ``scoring``, ``instructions``, ``scale``, ``dimensions`` and
``items``; PVQ definitions additionally carry ``categories``.  The shipped
instruments are available through :func:`load_builtin`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

__all__ = [
    "QuestionnaireError",
    "ScoringRule",
    "LikertScale",
    "Item",
    "Dimension",
    "Category",
    "Questionnaire",
    "AnswerSheet",
    "ScoreProfile",
    "load_questionnaire",
    "load_builtin",
    "builtin_ids",
    "score",
    "score_mean_per_dimension",
    "score_vsm",
]

VSM_SLOTS = ("q1", "q2", "q3", "q4")

# Known instruments must have these dimension counts.
EXPECTED_DIMENSIONS = {"pvq": 10, "vsm": 6, "ipip": 5}
EXPECTED_PVQ_CATEGORIES = 4


class QuestionnaireError(ValueError):
    """Raised for invalid definitions or answer sheets."""


class ScoringRule(str, enum.Enum):
    MEAN_PER_DIMENSION = "mean_per_dimension"
    VSM_FORMULA = "vsm_formula"


@dataclass(frozen=True)
class LikertScale:
    labels: tuple[str, ...]
    numeric_values: tuple[int, ...]
    # Presentation order of option indices for the identity permutation.
    display_order: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.labels) < 2:
            raise QuestionnaireError("a Likert scale needs at least 2 options")
        if len(self.labels) != len(self.numeric_values):
            raise QuestionnaireError(
                f"scale has {len(self.labels)} labels but {len(self.numeric_values)} values"
            )
        if any(b <= a for a, b in zip(self.numeric_values, self.numeric_values[1:])):
            raise QuestionnaireError("scale values must be strictly increasing")
        if not self.display_order:
            object.__setattr__(self, "display_order", tuple(range(len(self.labels))))
        elif sorted(self.display_order) != list(range(len(self.labels))):
            raise QuestionnaireError("display_order must be a permutation of option indices")

    @property
    def points(self) -> int:
        return len(self.labels)

    @property
    def min_value(self) -> int:
        return self.numeric_values[0]

    @property
    def max_value(self) -> int:
        return self.numeric_values[-1]

    def reflect(self, value: float) -> float:
        return self.min_value + self.max_value - value


@dataclass(frozen=True)
class Item:
    id: str
    text: str
    dimension_id: str
    keying: int = 1
    vsm_slot: str | None = None
    # Per-item overrides of the questionnaire defaults.
    scale: LikertScale | None = None
    instructions: str | None = None


@dataclass(frozen=True)
class Dimension:
    id: str
    name: str
    category_id: str | None = None
    vsm_constants: Mapping[str, float] | None = None


@dataclass(frozen=True)
class Category:
    id: str
    name: str


@dataclass(frozen=True)
class Questionnaire:
    id: str
    name: str
    scale: LikertScale
    items: tuple[Item, ...]
    dimensions: tuple[Dimension, ...]
    scoring_rule: ScoringRule
    instructions: str
    categories: tuple[Category, ...] = ()

    @property
    def dimension_ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self.dimensions)

    def dimension(self, dimension_id: str) -> Dimension:
        for d in self.dimensions:
            if d.id == dimension_id:
                return d
        raise KeyError(dimension_id)

    def category(self, category_id: str) -> Category:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise KeyError(category_id)

    def item(self, item_id: str) -> Item:
        for it in self.items:
            if it.id == item_id:
                return it
        raise KeyError(item_id)

    def items_of(self, dimension_id: str) -> tuple[Item, ...]:
        return tuple(it for it in self.items if it.dimension_id == dimension_id)

    def members(self, category_id: str) -> tuple[str, ...]:
        return tuple(d.id for d in self.dimensions if d.category_id == category_id)

    def scale_of(self, item: Item) -> LikertScale:
        return item.scale or self.scale

    def instructions_of(self, item: Item) -> str:
        return self.instructions if item.instructions is None else item.instructions

    def normalize(self, dimension_id: str, raw: float) -> float:
        lo, hi = self.raw_range(dimension_id)
        return (raw - lo) / (hi - lo)

    def raw_range(self, dimension_id: str) -> tuple[float, float]:
        """Analytic (min, max) of the raw score of one dimension."""
        if self.scoring_rule is ScoringRule.VSM_FORMULA:
            c = self.dimension(dimension_id).vsm_constants
            span = self.scale.max_value - self.scale.min_value
            half = (abs(c["A"]) + abs(c["B"])) * span
            return c.get("C", 0.0) - half, c.get("C", 0.0) + half
        return float(self.scale.min_value), float(self.scale.max_value)


@dataclass(frozen=True)
class AnswerSheet:
    questionnaire_id: str
    entries: Mapping[str, int]
    permutation_index: int = 0


@dataclass(frozen=True)
class ScoreProfile:
    dimension_scores: dict[str, float]
    normalized_scores: dict[str, float]
    permutation_index: int = 0


# -- loading ---------------------------------------------------------------


def _scale(doc: Any, where: str) -> LikertScale:
    if not isinstance(doc, Mapping) or "labels" not in doc:
        raise QuestionnaireError(f"{where}: scale needs 'labels'")
    labels = tuple(str(x) for x in doc["labels"])
    values = tuple(int(v) for v in doc.get("values", range(1, len(labels) + 1)))
    order = tuple(int(i) for i in doc.get("display_order", ()))
    return LikertScale(labels, values, order)


def _require(doc: Mapping, key: str, where: str) -> Any:
    if key not in doc:
        raise QuestionnaireError(f"{where}: missing required field '{key}'")
    return doc[key]


def _from_document(doc: Any) -> Questionnaire:
    if not isinstance(doc, Mapping):
        raise QuestionnaireError("questionnaire definition must be a mapping")
    qid = str(_require(doc, "id", "definition"))
    try:
        rule = ScoringRule(_require(doc, "scoring", qid))
    except ValueError as exc:
        raise QuestionnaireError(f"{qid}: unknown scoring rule {doc['scoring']!r}") from exc
    scale = _scale(_require(doc, "scale", qid), qid)

    categories = tuple(
        Category(str(c["id"]), str(c.get("name", c["id"]))) for c in doc.get("categories", ())
    )
    category_ids = {c.id for c in categories}

    dimensions = []
    for raw in _require(doc, "dimensions", qid):
        did = str(_require(raw, "id", f"{qid} dimension"))
        cat = raw.get("category")
        if cat is not None and categories and cat not in category_ids:
            raise QuestionnaireError(f"{qid}: dimension '{did}' references unknown category '{cat}'")
        consts = raw.get("constants")
        if rule is ScoringRule.VSM_FORMULA:
            if not consts or "A" not in consts or "B" not in consts:
                raise QuestionnaireError(f"{qid}: VSM dimension '{did}' needs constants A and B")
            consts = {"A": float(consts["A"]), "B": float(consts["B"]), "C": float(consts.get("C", 0))}
        elif consts:
            raise QuestionnaireError(f"{qid}: constants only allowed for VSM dimensions ('{did}')")
        dimensions.append(Dimension(did, str(raw.get("name", did)), cat, consts))
    dim_ids = [d.id for d in dimensions]
    if len(set(dim_ids)) != len(dim_ids):
        raise QuestionnaireError(f"{qid}: duplicate dimension ids")

    items = []
    seen: set[str] = set()
    for raw in _require(doc, "items", qid):
        iid = str(_require(raw, "id", f"{qid} item"))
        if iid in seen:
            raise QuestionnaireError(f"{qid}: duplicate item id '{iid}'")
        seen.add(iid)
        dim = str(_require(raw, "dimension", f"{qid} item {iid}"))
        if dim not in dim_ids:
            raise QuestionnaireError(f"{qid}: item '{iid}' references unknown dimension '{dim}'")
        keying = int(raw.get("keying", 1))
        if keying not in (1, -1):
            raise QuestionnaireError(f"{qid}: item '{iid}' keying must be +1 or -1")
        slot = raw.get("slot")
        if rule is ScoringRule.VSM_FORMULA:
            if slot not in VSM_SLOTS:
                raise QuestionnaireError(f"{qid}: VSM item '{iid}' needs a slot in {VSM_SLOTS}")
        elif slot is not None:
            raise QuestionnaireError(f"{qid}: slot only allowed for VSM items ('{iid}')")
        item_scale = _scale(raw["scale"], f"{qid} item {iid}") if "scale" in raw else None
        if item_scale is not None and item_scale.points != scale.points:
            raise QuestionnaireError(f"{qid}: item '{iid}' scale must have {scale.points} options")
        instr = raw.get("instructions")
        items.append(
            Item(iid, str(_require(raw, "text", f"{qid} item {iid}")), dim, keying, slot,
                 item_scale, None if instr is None else str(instr))
        )

    q = Questionnaire(
        id=qid,
        name=str(doc.get("name", qid)),
        scale=scale,
        items=tuple(items),
        dimensions=tuple(dimensions),
        scoring_rule=rule,
        instructions=str(doc.get("instructions", "")),
        categories=categories,
    )
    _validate(q)
    return q


def _validate(q: Questionnaire) -> None:
    for d in q.dimensions:
        members = q.items_of(d.id)
        if not members:
            raise QuestionnaireError(f"{q.id}: dimension '{d.id}' has no items")
        if q.scoring_rule is ScoringRule.VSM_FORMULA:
            if len(members) != 4:
                raise QuestionnaireError(
                    f"VSM dimension requires exactly 4 items ('{d.id}' has {len(members)})"
                )
            slots = sorted(it.vsm_slot for it in members)
            if slots != list(VSM_SLOTS):
                raise QuestionnaireError(
                    f"{q.id}: dimension '{d.id}' must use slots q1..q4 once each, got {slots}"
                )
    expected = EXPECTED_DIMENSIONS.get(q.id)
    if expected is None and q.scoring_rule is ScoringRule.VSM_FORMULA:
        expected = EXPECTED_DIMENSIONS["vsm"]
    if expected is not None and len(q.dimensions) != expected:
        raise QuestionnaireError(
            f"{q.id}: expected {expected} dimensions, found {len(q.dimensions)}"
        )
    if q.id == "pvq" and len(q.categories) != EXPECTED_PVQ_CATEGORIES:
        raise QuestionnaireError(f"pvq: expected 4 categories, found {len(q.categories)}")
    if q.categories:
        for c in q.categories:
            if not q.members(c.id):
                raise QuestionnaireError(f"{q.id}: category '{c.id}' has no dimensions")


def load_questionnaire(source: str | Path | Mapping) -> Questionnaire:
    """Load a questionnaire from a path, a YAML string or a parsed mapping."""
    if isinstance(source, Mapping):
        doc = source
    elif isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                      and Path(source).exists()):
        doc = yaml.safe_load(Path(source).read_text(encoding="utf-8"))
    else:
        doc = yaml.safe_load(source)
    return _from_document(doc)


def _data_dir() -> Path:
    return Path(str(resources.files("persona_probe") / "data"))


def builtin_ids() -> tuple[str, ...]:
    return tuple(sorted(p.stem for p in (_data_dir() / "questionnaires").glob("*.def")))


_BUILTIN_CACHE: dict[str, Questionnaire] = {}


def load_builtin(qid: str) -> Questionnaire:
    """Return one of the shipped instruments (``pvq``, ``vsm``, ``ipip``)."""
    if qid not in _BUILTIN_CACHE:
        path = _data_dir() / "questionnaires" / f"{qid}.def"
        if not path.exists():
            raise QuestionnaireError(f"unknown questionnaire '{qid}'; available: {builtin_ids()}")
        _BUILTIN_CACHE[qid] = load_questionnaire(path)
    return _BUILTIN_CACHE[qid]


# -- scoring ---------------------------------------------------------------


def _check_sheet(sheet: AnswerSheet, q: Questionnaire) -> None:
    if sheet.questionnaire_id != q.id:
        raise QuestionnaireError(
            f"answer sheet is for '{sheet.questionnaire_id}', not '{q.id}'"
        )
    missing = [it.id for it in q.items if it.id not in sheet.entries]
    if missing:
        raise QuestionnaireError(f"incomplete answer sheet; missing {missing[:5]}"
                                 + (" ..." if len(missing) > 5 else ""))
    extra = set(sheet.entries) - {it.id for it in q.items}
    if extra:
        raise QuestionnaireError(f"answer sheet has unknown items {sorted(extra)[:5]}")
    for it in q.items:
        if sheet.entries[it.id] not in q.scale_of(it).numeric_values:
            raise QuestionnaireError(
                f"value {sheet.entries[it.id]!r} for item '{it.id}' is outside the scale"
            )


def score_mean_per_dimension(sheet: AnswerSheet, q: Questionnaire) -> ScoreProfile:
    """Mean item value per dimension, reverse-keyed items reflected first."""
    if q.scoring_rule is not ScoringRule.MEAN_PER_DIMENSION:
        raise QuestionnaireError(f"{q.id} is not scored by per-dimension means")
    _check_sheet(sheet, q)
    raw: dict[str, float] = {}
    for d in q.dimensions:
        values = []
        for it in q.items_of(d.id):
            v = sheet.entries[it.id]
            values.append(v if it.keying == 1 else q.scale_of(it).reflect(v))
        raw[d.id] = sum(values) / len(values)
    return ScoreProfile(raw, {k: q.normalize(k, v) for k, v in raw.items()}, sheet.permutation_index)


def score_vsm(sheet: AnswerSheet, q: Questionnaire) -> ScoreProfile:
    """Hofstede index per dimension: A*(q1 - q2) + B*(q3 - q4) + C."""
    if q.scoring_rule is not ScoringRule.VSM_FORMULA:
        raise QuestionnaireError(f"{q.id} is not a VSM questionnaire")
    _check_sheet(sheet, q)
    raw: dict[str, float] = {}
    for d in q.dimensions:
        c = d.vsm_constants
        if not c:
            raise QuestionnaireError(f"dimension '{d.id}' has no VSM constants")
        qv = {it.vsm_slot: sheet.entries[it.id] for it in q.items_of(d.id)}
        raw[d.id] = c["A"] * (qv["q1"] - qv["q2"]) + c["B"] * (qv["q3"] - qv["q4"]) + c["C"]
    return ScoreProfile(raw, {k: q.normalize(k, v) for k, v in raw.items()}, sheet.permutation_index)


def score(sheet: AnswerSheet, q: Questionnaire) -> ScoreProfile:
    if q.scoring_rule is ScoringRule.VSM_FORMULA:
        return score_vsm(sheet, q)
    return score_mean_per_dimension(sheet, q)
