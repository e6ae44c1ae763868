"""Experiment configs, grid expansion, resumable execution and tensor assembly.

A run lives under ``<root>/<experiment-id>/``.  The ledger directory holds
``config.json`` (the normalized config and its digest), ``records.jsonl`` (one
line per finished attempt, appended in task order) and ``index.json`` (a
status snapshot rebuilt from the records).
"""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Protocol, Sequence

import yaml

from . import perspective as P
from .client import (
    CacheStore,
    ChatClient,
    ClientError,
    EndpointProfile,
    Refusal,
    ScriptedRespondent,
    SelectionResult,
    TransportError,
    UnsupportedError,
    run_with_cache,
)
from .questionnaire import AnswerSheet, Questionnaire, builtin_ids, load_builtin, load_questionnaire, score
from .tensor import ScoreTensor

log = logging.getLogger(__name__)

PENDING, DONE, FAILED, REFUSED = "PENDING", "DONE", "FAILED", "REFUSED"
ALL_VARIANTS = ("system/2nd", "system/3rd", "user/2nd", "user/3rd")
NO_VARIANT = "none"


class ConfigError(ValueError):
    pass


class LedgerError(RuntimeError):
    pass


class RunAborted(RuntimeError):
    pass


# -- config ----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    id: str
    questionnaire: str
    perspectives: Any = "default"
    contexts: list[str] = field(default_factory=lambda: ["none"])
    permutations: int = 50
    seed: int = 0
    induction_variants: list[str] = field(default_factory=lambda: ["system/2nd"])
    intensity: str = "extreme"
    endpoint: dict | None = None
    respondent: dict | None = None
    templates: dict | None = None
    fixture_dirs: list[str] = field(default_factory=list)
    retry_budget: int = 2
    workers: int = 4
    max_consecutive_failures: int = 25

    def __post_init__(self) -> None:
        if not self.id or "/" in self.id:
            raise ConfigError("id must be a non-empty name without '/'")
        if self.permutations < 1:
            raise ConfigError("permutations must be >= 1")
        if isinstance(self.contexts, str):
            self.contexts = [self.contexts]
        if not self.contexts:
            self.contexts = ["none"]
        if self.induction_variants == "all":
            self.induction_variants = list(ALL_VARIANTS)
        bad = [v for v in self.induction_variants if v not in ALL_VARIANTS]
        if bad:
            raise ConfigError(f"unknown induction variants {bad}; known: {list(ALL_VARIANTS)}")
        if len(set(self.contexts)) != len(self.contexts):
            raise ConfigError("duplicate contexts")
        if (self.endpoint is None) == (self.respondent is None):
            raise ConfigError("configure exactly one of 'endpoint' or 'respondent'")
        if self.endpoint is not None:
            EndpointProfile.from_mapping(self.endpoint)
        try:
            P.Intensity(self.intensity)
        except ValueError:
            raise ConfigError(f"unknown intensity {self.intensity!r}") from None
        if self.perspectives == "none" and self.contexts == ["none"] and self.permutations < 1:
            raise ConfigError("empty grid")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        for key in ("id", "questionnaire"):
            if key not in doc:
                raise ConfigError(f"missing required field '{key}'")
        return cls(**dict(doc))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_mapping(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        # The worker count changes scheduling only, never results.
        cfg = {k: v for k, v in self.to_dict().items() if k != "workers"}
        doc = {"config": cfg, "fixture_version": P.FIXTURE_VERSION}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    # -- resolution -------------------------------------------------------

    def load_questionnaire(self) -> Questionnaire:
        if self.questionnaire in builtin_ids():
            return load_builtin(self.questionnaire)
        path = Path(self.questionnaire)
        if not path.exists():
            raise ConfigError(f"unknown questionnaire {self.questionnaire!r}; built-in: {builtin_ids()}")
        return load_questionnaire(path)

    def perspective_specs(self, q: Questionnaire) -> list[P.PerspectiveSpec]:
        spec = self.perspectives
        intensity = P.Intensity(self.intensity)
        if spec == "default":
            return P.default_perspectives(q, intensity)
        if spec in ("none", None):
            return [P.NO_PERSPECTIVE]
        if isinstance(spec, str) and spec.startswith("free_text:"):
            return P.free_text_perspectives(spec.split(":", 1)[1])
        if not isinstance(spec, list):
            raise ConfigError(f"cannot interpret perspectives {spec!r}")
        out = []
        for entry in spec:
            if entry == "none":
                out.append(P.NO_PERSPECTIVE)
            elif "text" in entry:
                out.append(P.PerspectiveSpec(P.PerspectiveKind.FREE_TEXT, free_text=entry["text"],
                                             label=entry.get("label", "")))
            else:
                targets = entry["targets"]
                if isinstance(targets, Mapping):
                    targets = list(targets.items())
                targets = tuple((str(d), str(direction)) for d, direction in targets)
                for d, _ in targets:
                    if d not in q.dimension_ids:
                        raise ConfigError(f"unknown target dimension {d!r}")
                out.append(P.PerspectiveSpec(P.PerspectiveKind.VALUE_TARGETED, targets,
                                             P.Intensity(entry.get("intensity", self.intensity)),
                                             label=entry.get("label", "")))
        labels = [p.label for p in out]
        if len(set(labels)) != len(labels):
            raise ConfigError("duplicate perspective labels")
        return out

    def context_specs(self) -> list[P.ContextSpec]:
        try:
            return [P.load_context_fixture(name, [Path(d) for d in self.fixture_dirs]) for name in self.contexts]
        except P.PromptError as exc:
            raise ConfigError(str(exc)) from None

    def induction_templates(self) -> dict[P.Person, str] | None:
        if not self.templates:
            return None
        merged = dict(P.INDUCTION_TEMPLATES)
        for key, text in self.templates.items():
            merged[P.Person(key)] = text
        return merged

    def supports_system_role(self) -> bool:
        src = self.endpoint if self.endpoint is not None else self.respondent
        return bool(src.get("supports_system_role", True))

    def variants(self) -> list[str]:
        """Variants actually run; system-channel variants need a system role."""
        if self.perspectives in ("none", None):
            return [NO_VARIANT]
        if self.supports_system_role():
            return list(self.induction_variants)
        return [v for v in self.induction_variants if not v.startswith("system")]

    def unsupported_variants(self) -> list[str]:
        return [v for v in self.induction_variants if v not in self.variants() and self.variants() != [NO_VARIANT]]


def variant_spec(p: P.PerspectiveSpec, variant: str) -> P.PerspectiveSpec:
    if variant == NO_VARIANT:
        return p
    channel, person = variant.split("/")
    return p.variant(P.Channel(channel), P.Person(person))


# -- grid ------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    index: int
    context: str
    perspective: str
    variant: str
    permutation: int
    item_id: str

    @property
    def task_id(self) -> str:
        return f"{self.context}|{self.perspective}|{self.variant}|r{self.permutation:03d}|{self.item_id}"

    @property
    def cell(self) -> tuple[str, str, str, int]:
        return self.context, self.perspective, self.variant, self.permutation


def expand_grid(config: ExperimentConfig) -> list[Task]:
    """Tasks ordered context, perspective, variant, permutation, item."""
    q = config.load_questionnaire()
    persps = config.perspective_specs(q)
    contexts = config.context_specs()
    tasks = []
    for ctx in contexts:
        for p in persps:
            for variant in config.variants():
                for r in range(config.permutations):
                    for item in q.items:
                        tasks.append(Task(len(tasks), ctx.label, p.label, variant, r, item.id))
    return tasks


# -- respondents -----------------------------------------------------------


class Respondent(Protocol):
    def select(self, bundle: P.PromptBundle) -> SelectionResult: ...


def scripted_from_config(doc: Mapping[str, Any], q: Questionnaire) -> ScriptedRespondent:
    policy = doc.get("policy", "first")
    kw = {k: v for k, v in doc.items() if k not in ("policy", "supports_system_role")}
    if policy == "first":
        r = ScriptedRespondent.first()
    elif policy == "random":
        r = ScriptedRespondent.random(int(kw.get("seed", 0)))
    elif policy == "target_maximal":
        r = ScriptedRespondent.target_maximal(q)
    elif policy == "option":
        r = ScriptedRespondent.option(q, int(kw["value"]))
    elif policy == "latent_shift":
        r = ScriptedRespondent.latent_shift(q, **kw)
    else:
        raise ConfigError(f"unknown scripted policy {policy!r}")
    return ScriptedRespondent(r.policy, r.description, bool(doc.get("supports_system_role", True)))


class CachedEndpoint:
    def __init__(self, client: ChatClient, store: CacheStore):
        self.client, self.store = client, store

    def select(self, bundle: P.PromptBundle) -> SelectionResult:
        return run_with_cache(bundle, self.client, self.store)


# -- ledger ----------------------------------------------------------------


class RunLedger:
    """Append-only record log with a config-digest tamper check."""

    def __init__(self, directory: str | Path, config: ExperimentConfig):
        self.directory = Path(directory)
        self.config = config
        self.digest = config.digest()
        self.records_path = self.directory / "records.jsonl"
        self.config_path = self.directory / "config.json"
        self.index_path = self.directory / "index.json"
        self.latest: dict[str, dict] = {}
        self.attempts: collections.Counter = collections.Counter()
        self.directory.mkdir(parents=True, exist_ok=True)
        if self.config_path.exists():
            stored = json.loads(self.config_path.read_text(encoding="utf-8"))
            try:
                intact = ExperimentConfig.from_mapping(stored["config"]).digest() == stored["digest"]
            except (KeyError, ConfigError):
                intact = False
            if not intact:
                raise LedgerError(f"{self.config_path} was modified after the run started")
            if stored["digest"] != self.digest:
                raise LedgerError(
                    f"config digest mismatch for '{config.id}': ledger has {stored['digest'][:12]}, "
                    f"config is {self.digest[:12]}; use a new experiment id instead of mixing results"
                )
        else:
            body = {"digest": self.digest, "fixture_version": P.FIXTURE_VERSION, "config": config.to_dict()}
            self.config_path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        self._load()

    @classmethod
    def open_existing(cls, directory: str | Path) -> "RunLedger":
        path = Path(directory) / "config.json"
        if not path.exists():
            raise LedgerError(f"no ledger at {directory}")
        stored = json.loads(path.read_text(encoding="utf-8"))
        return cls(directory, ExperimentConfig.from_mapping(stored["config"]))

    def _load(self) -> None:
        if not self.records_path.exists():
            return
        data = self.records_path.read_bytes()
        if data and not data.endswith(b"\n"):
            # A write interrupted mid-line; drop the fragment.
            keep = data[: data.rfind(b"\n") + 1]
            log.warning("truncating partial ledger line in %s", self.records_path)
            with open(self.records_path, "wb") as fh:
                fh.write(keep)
            data = keep
        for line in data.decode("utf-8").splitlines():
            rec = json.loads(line)
            prev = self.latest.get(rec["task"])
            if prev is not None and prev["status"] == DONE:
                raise LedgerError(f"ledger has a record after DONE for {rec['task']}")
            self.latest[rec["task"]] = rec
            self.attempts[rec["task"]] += 1

    def status(self, task_id: str) -> str:
        rec = self.latest.get(task_id)
        return rec["status"] if rec else PENDING

    def append(self, rec: dict) -> None:
        if self.status(rec["task"]) == DONE:
            raise LedgerError(f"task {rec['task']} is already DONE")
        line = json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n"
        with open(self.records_path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        self.latest[rec["task"]] = rec
        self.attempts[rec["task"]] += 1

    def counts(self, tasks: Sequence[Task]) -> dict[str, int]:
        c = collections.Counter(self.status(t.task_id) for t in tasks)
        return {s: c.get(s, 0) for s in (PENDING, DONE, FAILED, REFUSED)}

    def write_index(self, tasks: Sequence[Task]) -> None:
        body = {
            "experiment_id": self.config.id,
            "digest": self.digest,
            "counts": self.counts(tasks),
            "status": {t.task_id: self.status(t.task_id) for t in tasks},
        }
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.index_path)


# -- execution -------------------------------------------------------------


class Experiment:
    """One configured experiment rooted at ``<root>/<id>``."""

    def __init__(self, config: ExperimentConfig, root: str | Path = "results",
                 respondent: Respondent | None = None, transport: Any = None):
        self.config = config
        self.root = Path(root) / config.id
        self.q = config.load_questionnaire()
        self.ledger = RunLedger(self.root / "ledger", config)
        self.tasks = expand_grid(config)
        self._persps = {p.label: p for p in config.perspective_specs(self.q)}
        self._contexts = {c.label: c for c in config.context_specs()}
        self._perms = P.permute_options(self.q, config.seed, config.permutations)
        self._templates = config.induction_templates()
        self._respondent = respondent
        self._transport = transport

    @classmethod
    def resume(cls, experiment_id: str, root: str | Path = "results", **kw: Any) -> "Experiment":
        ledger = RunLedger.open_existing(Path(root) / experiment_id / "ledger")
        return cls(ledger.config, root, **kw)

    def respondent(self) -> Respondent:
        if self._respondent is None:
            if self.config.respondent is not None:
                self._respondent = scripted_from_config(self.config.respondent, self.q)
            else:
                endpoint = EndpointProfile.from_mapping(self.config.endpoint)
                payloads = self.root / "payloads"
                payloads.mkdir(parents=True, exist_ok=True)

                def sink(raw: bytes) -> None:
                    name = hashlib.sha256(raw).hexdigest()
                    path = payloads / f"{name}.bin"
                    if not path.exists():
                        path.write_bytes(raw)

                client = ChatClient(endpoint, self._transport, sink=sink)
                self._respondent = CachedEndpoint(client, CacheStore(self.root / "cache"))
        return self._respondent

    @property
    def model_id(self) -> str:
        if self.config.endpoint is not None:
            return str(self.config.endpoint.get("model_name", self.config.endpoint.get("id", "")))
        return f"scripted:{self.config.respondent.get('policy', 'first')}"

    def bundle(self, task: Task) -> P.PromptBundle:
        p = variant_spec(self._persps[task.perspective], task.variant)
        return P.build_prompt(
            self.q, self.q.item(task.item_id), p, self._contexts[task.context],
            self._perms[task.permutation], self._templates,
            meta={"permutation": task.permutation, "variant": task.variant, "task_id": task.task_id},
        )

    def _runnable(self) -> list[Task]:
        out = []
        for t in self.tasks:
            st = self.ledger.status(t.task_id)
            if st == PENDING or (st == FAILED and self.ledger.attempts[t.task_id] <= self.config.retry_budget):
                out.append(t)
        return out

    def _attempt(self, task: Task) -> dict:
        item = self.q.item(task.item_id)
        rec: dict[str, Any] = {"task": task.task_id, "index": task.index}
        try:
            res = self.respondent().select(self.bundle(task))
        except Refusal as exc:
            rec.update(status=REFUSED, error=str(exc),
                       method=exc.method.value if exc.method else None,
                       payload_sha256=hashlib.sha256(exc.raw_payload).hexdigest())
            return rec
        except (TransportError, UnsupportedError, ClientError) as exc:
            rec.update(status=FAILED, error=f"{type(exc).__name__}: {exc}")
            return rec
        scale = self.q.scale_of(item)
        rec.update(
            status=DONE,
            label=res.presented_label,
            option=res.original_option_index,
            value=scale.numeric_values[res.original_option_index],
            method=res.method.value,
            tie=res.tie,
            payload_sha256=hashlib.sha256(res.raw_payload).hexdigest(),
        )
        return rec

    def execute(self, limit: int | None = None) -> dict[str, int]:
        """Run every runnable task (at most ``limit``); returns status counts.

        Results are appended strictly in task order whatever the worker
        count, so the ledger is reproducible.
        """
        todo = self._runnable()
        if limit is not None:
            todo = todo[:limit]
        workers = max(1, int(self.config.workers))
        window = workers * 4
        consecutive = 0
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending: collections.deque = collections.deque()
            it: Iterator[Task] = iter(todo)
            for t in it:
                pending.append(pool.submit(self._attempt, t))
                if len(pending) >= window:
                    break
            while pending:
                rec = pending.popleft().result()
                self.ledger.append(rec)
                consecutive = consecutive + 1 if rec["status"] == FAILED else 0
                if consecutive >= self.config.max_consecutive_failures:
                    for f in pending:
                        f.cancel()
                    self.ledger.write_index(self.tasks)
                    raise RunAborted(
                        f"{consecutive} consecutive failures (last: {rec.get('error')}); ledger left resumable"
                    )
                nxt = next(it, None)
                if nxt is not None:
                    pending.append(pool.submit(self._attempt, nxt))
        self.ledger.write_index(self.tasks)
        return self.ledger.counts(self.tasks)

    def status(self) -> dict[str, int]:
        return self.ledger.counts(self.tasks)

    # -- assembly ---------------------------------------------------------

    def assemble(self, exclude: bool = True) -> dict[str, ScoreTensor]:
        return assemble_tensors(self.ledger, self.q, self.tasks, exclude, self.model_id,
                                self.config.perspective_specs(self.q))

    def save_tensors(self, exclude: bool = True) -> dict[str, ScoreTensor]:
        tensors = self.assemble(exclude)
        for variant, t in tensors.items():
            t.save(self.root / "tensors", variant_stem(variant))
        return tensors


def variant_stem(variant: str) -> str:
    return variant.replace("/", "-")


def assemble_tensors(
    ledger: RunLedger,
    q: Questionnaire,
    tasks: Sequence[Task] | None = None,
    exclude: bool = True,
    model_id: str = "",
    perspectives: Sequence[P.PerspectiveSpec] | None = None,
) -> dict[str, ScoreTensor]:
    """Score every complete administration; one tensor per induction variant.

    Cells with a REFUSED or FAILED item become NaN rows (listed in
    ``meta['excluded']``) when ``exclude`` is set and raise otherwise.
    PENDING items always raise.
    """
    import numpy as np

    if tasks is None:
        tasks = expand_grid(ledger.config)
    cells: dict[tuple, dict[str, dict]] = collections.defaultdict(dict)
    for t in tasks:
        cells[t.cell][t.item_id] = ledger.latest.get(t.task_id) or {"status": PENDING}
    contexts = list(dict.fromkeys(t.context for t in tasks))
    persps = list(dict.fromkeys(t.perspective for t in tasks))
    variants = list(dict.fromkeys(t.variant for t in tasks))
    perms = list(dict.fromkeys(t.permutation for t in tasks))
    dims = q.dimension_ids
    if perspectives is None:
        perspectives = ledger.config.perspective_specs(q)
    targets = {p.label: sorted(d for d, direction in p.targets if direction == "high") for p in perspectives}
    out = {}
    for variant in variants:
        shape = (len(contexts), len(persps), len(perms), len(dims))
        raw, norm = np.full(shape, np.nan), np.full(shape, np.nan)
        excluded = []
        for i, c in enumerate(contexts):
            for j, p in enumerate(persps):
                for k, r in enumerate(perms):
                    recs = cells[(c, p, variant, r)]
                    states = {rec["status"] for rec in recs.values()}
                    if PENDING in states:
                        raise LedgerError(f"cell {c}|{p}|{variant}|r{r:03d} has pending items")
                    if states != {DONE}:
                        bad = sorted(item for item, rec in recs.items() if rec["status"] != DONE)
                        if not exclude:
                            raise LedgerError(f"cell {c}|{p}|{variant}|r{r:03d} has non-DONE items {bad}")
                        excluded.append({"context": c, "perspective": p, "permutation": r, "items": bad,
                                         "statuses": sorted(states - {DONE})})
                        continue
                    sheet = AnswerSheet(q.id, {item: rec["value"] for item, rec in recs.items()}, r)
                    prof = score(sheet, q)
                    raw[i, j, k] = [prof.dimension_scores[d] for d in dims]
                    norm[i, j, k] = [prof.normalized_scores[d] for d in dims]
        meta = {
            "variant": variant,
            "experiment_id": ledger.config.id,
            "config_digest": ledger.digest,
            "fixture_version": P.FIXTURE_VERSION,
            "targets": {p: targets.get(p, []) for p in persps},
            "excluded": excluded,
        }
        out[variant] = ScoreTensor(contexts, persps, perms, dims, raw, norm, q.id, model_id, meta)
    return out
