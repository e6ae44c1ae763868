"""Prompt construction: perspective inductions, contexts, formats and permutations.

Every questionnaire item is administered in isolation.  A :class:`PromptBundle`
holds the full message list for one item under one perspective, one context and
one answer-order permutation, together with the bookkeeping needed to map the
model's chosen letter back onto the original option.
"""

from __future__ import annotations

import dataclasses
import enum
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .questionnaire import Item, Questionnaire

FIXTURE_VERSION = "1"
# Permutations are drawn with numpy's PCG64 bit generator seeded by the integer seed.
PERMUTATION_RNG = "numpy.PCG64"


class PromptError(ValueError):
    pass


class PerspectiveKind(str, enum.Enum):
    NONE = "none"
    VALUE_TARGETED = "value_targeted"
    FREE_TEXT = "free_text"


class Intensity(str, enum.Enum):
    SLIGHT = "slight"
    HIGH = "high"
    EXTREME = "extreme"

    @property
    def phrase(self) -> str:
        return {"slight": "slightly more", "high": "more", "extreme": "extremely more"}[self.value]


class Channel(str, enum.Enum):
    SYSTEM_MSG = "system"
    USER_MSG = "user"


class Person(str, enum.Enum):
    SECOND = "2nd"
    THIRD = "3rd"


class ContextKind(str, enum.Enum):
    NONE = "none"
    CONVERSATION = "conversation"
    TEXT_FORMAT = "format"
    PREPENDED_PARAGRAPH = "wiki"


class TextFormat(str, enum.Enum):
    CHAT = "chat"
    PY_CODE = "code_py"
    CPP_CODE = "code_cpp"
    TOML_CONF = "conf_toml"
    LATEX = "latex"


# The third-person wording beyond "The following are answers from a person"
# is reconstructed; both strings can be overridden per call.
INDUCTION_TEMPLATES = {
    Person.SECOND: "You are a person attributing {intensity} importance to {targets}.",
    Person.THIRD: "The following are answers from a person attributing {intensity} importance to {targets}.",
}

SIMULATED_HUMAN_PROMPT = "You are simulating a human using a chatbot."

FREE_TEXT_SETS = {
    "lotr": {
        name: f"You are {name} from The Lord of the Rings"
        for name in ("Sauron", "Gandalf", "Aragorn", "Pippin", "Frodo")
    },
    "music_experts": {
        genre: f"You are an AI expert in {genre} music."
        for genre in ("Classical", "Heavy Metal", "Hip-Hop", "Jazz", "Reggae", "Gospel")
    },
}


@dataclass(frozen=True)
class PerspectiveSpec:
    kind: PerspectiveKind = PerspectiveKind.NONE
    targets: tuple[tuple[str, str], ...] = ()
    intensity: Intensity = Intensity.EXTREME
    channel: Channel = Channel.SYSTEM_MSG
    person: Person = Person.SECOND
    free_text: str | None = None
    label: str = ""

    def __post_init__(self) -> None:
        if self.kind is PerspectiveKind.VALUE_TARGETED:
            if not self.targets:
                raise PromptError("a value-targeted perspective needs at least one target")
            for _, direction in self.targets:
                if direction not in ("high", "low"):
                    raise PromptError(f"target direction must be 'high' or 'low', got {direction!r}")
        if self.kind is PerspectiveKind.FREE_TEXT and not (self.free_text or "").strip():
            raise PromptError("a free-text perspective needs non-empty text")
        if not self.label:
            object.__setattr__(self, "label", self._default_label())

    def _default_label(self) -> str:
        if self.kind is PerspectiveKind.NONE:
            return "none"
        if self.kind is PerspectiveKind.FREE_TEXT:
            return self.free_text.strip()[:40]
        return "+".join(d if direction == "high" else f"{d}-low" for d, direction in self.targets)

    @property
    def target_ids(self) -> frozenset[str]:
        return frozenset(d for d, _ in self.targets)

    def variant(self, channel: Channel, person: Person) -> "PerspectiveSpec":
        return dataclasses.replace(self, channel=channel, person=person)


NO_PERSPECTIVE = PerspectiveSpec()


@dataclass(frozen=True)
class ContextSpec:
    kind: ContextKind = ContextKind.NONE
    label: str = "none"
    conversation: tuple[tuple[str, str], ...] | None = None
    format_id: TextFormat | None = None
    paragraph: str | None = None

    def __post_init__(self) -> None:
        present = {
            "conversation": self.conversation is not None,
            "format_id": self.format_id is not None,
            "paragraph": self.paragraph is not None,
        }
        required = {
            ContextKind.NONE: set(),
            ContextKind.CONVERSATION: {"conversation"},
            ContextKind.TEXT_FORMAT: {"format_id"},
            ContextKind.PREPENDED_PARAGRAPH: {"paragraph"},
        }[self.kind]
        if {k for k, v in present.items() if v} != required:
            raise PromptError(f"context of kind {self.kind.value} requires exactly {sorted(required)}")
        if self.conversation is not None:
            for i, (role, _) in enumerate(self.conversation):
                if role not in ("user", "assistant", "system") or (role == "system" and i):
                    raise PromptError(f"invalid conversation role {role!r} at message {i}")

    @property
    def text_format(self) -> TextFormat:
        return self.format_id or TextFormat.CHAT


NO_CONTEXT = ContextSpec()


@dataclass(frozen=True)
class AnswerExtractionSpec:
    mode: str
    cue: str
    valid_tokens: tuple[str, ...]


@dataclass(frozen=True)
class PromptBundle:
    messages: tuple[tuple[str, str], ...]
    candidate_answers: tuple[tuple[str, int], ...]
    extraction: AnswerExtractionSpec
    # Administration metadata (item, dimension, permutation ...); not sent upstream.
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def option_for(self, presented_label: str) -> int:
        for label, idx in self.candidate_answers:
            if label == presented_label:
                return idx
        raise KeyError(presented_label)

    def label_for(self, option_index: int) -> str:
        for label, idx in self.candidate_answers:
            if idx == option_index:
                return label
        raise KeyError(option_index)


# -- inductions ------------------------------------------------------------


def _join_terms(terms: Sequence[str]) -> str:
    if len(terms) == 1:
        return terms[0]
    return ", ".join(terms[:-1]) + " and " + terms[-1]


def _target_phrase(p: PerspectiveSpec, q: Questionnaire) -> str:
    groups: dict[str, list[str]] = {}
    for dim, direction in p.targets:
        try:
            name = q.dimension(dim).name
        except KeyError:
            raise PromptError(f"unknown dimension '{dim}' for questionnaire '{q.id}'") from None
        groups.setdefault(direction, []).append(name.lower())
    # A target set covering exactly one higher-order category also names it.
    for c in q.categories:
        members = set(q.members(c.id))
        for direction in groups:
            ids = {d for d, dr in p.targets if dr == direction}
            if ids == members:
                groups[direction].append(c.name.lower())
    return " and ".join(f"{direction} {_join_terms(names)}" for direction, names in groups.items())


def render_induction(
    p: PerspectiveSpec, q: Questionnaire, templates: Mapping[Person, str] | None = None
) -> tuple[str, str]:
    """Return ``(role, text)`` of the perspective-inducing message."""
    if p.kind is PerspectiveKind.NONE:
        raise PromptError("no induction for the NONE perspective")
    role = "system" if p.channel is Channel.SYSTEM_MSG else "user"
    if p.kind is PerspectiveKind.FREE_TEXT:
        return role, p.free_text
    template = (templates or INDUCTION_TEMPLATES)[p.person]
    text = template.format(intensity=p.intensity.phrase, targets=_target_phrase(p, q))
    return role, text


def default_perspectives(
    q: Questionnaire, intensity: Intensity = Intensity.EXTREME
) -> list[PerspectiveSpec]:
    """The set of alternative perspectives used for controllability.

    PVQ uses its higher-order categories, other questionnaires one perspective
    per dimension.
    """
    if q.categories:
        return [
            PerspectiveSpec(
                PerspectiveKind.VALUE_TARGETED,
                tuple((d, "high") for d in q.members(c.id)),
                intensity,
                label=c.id,
            )
            for c in q.categories
        ]
    return [
        PerspectiveSpec(PerspectiveKind.VALUE_TARGETED, ((d.id, "high"),), intensity, label=d.id)
        for d in q.dimensions
    ]


def free_text_perspectives(set_name: str) -> list[PerspectiveSpec]:
    try:
        texts = FREE_TEXT_SETS[set_name]
    except KeyError:
        raise PromptError(f"unknown free-text set '{set_name}'; available: {sorted(FREE_TEXT_SETS)}") from None
    return [
        PerspectiveSpec(PerspectiveKind.FREE_TEXT, free_text=text, label=name.lower().replace(" ", "-"))
        for name, text in texts.items()
    ]


# -- permutations ----------------------------------------------------------


def permute_options(
    q: Questionnaire, seed: int, count: int, identity_first: bool = False
) -> list[tuple[int, ...]]:
    """Draw ``count`` answer-order permutations.

    A permutation lists, per presented position, the index into the scale's
    display order.  Given the same seed the result is identical across runs
    and machines.
    """
    if count < 1:
        raise PromptError("count must be >= 1")
    n = q.scale.points
    rng = np.random.Generator(np.random.PCG64(seed))
    perms = [tuple(int(i) for i in rng.permutation(n)) for _ in range(count)]
    if identity_first:
        perms[0] = tuple(range(n))
    return perms


# -- formats ---------------------------------------------------------------


def _letters(n: int) -> tuple[str, ...]:
    if n > 26:
        raise PromptError("at most 26 options are supported")
    return tuple(string.ascii_uppercase[:n])


def _comment(block: str) -> str:
    return "\n".join(f"# {line}" if line else "" for line in block.split("\n"))


def wrap_format(
    question_block: str, options: Sequence[tuple[str, str]], fmt: TextFormat | str
) -> tuple[str, AnswerExtractionSpec]:
    """Render a question and its lettered options in one of the textual formats.

    ``options`` holds ``(letter, option text)`` pairs in presentation order.
    """
    try:
        fmt = TextFormat(fmt)
    except ValueError:
        raise PromptError(f"unknown format {fmt!r}; known: {[f.value for f in TextFormat]}") from None
    letters = tuple(letter for letter, _ in options)
    if fmt is TextFormat.CHAT:
        lines = [question_block] + [f"{k}. {t}" for k, t in options]
        text, cue = "\n".join(lines) + "\nAnswer:", "Answer:"
    elif fmt is TextFormat.PY_CODE:
        text = (
            'query = """\n' + question_block + '\n"""\n\n'
            "# Define the answers dictionary\nanswers_dict = {\n"
            + "".join(f'\t"{k}.": "{t}",\n' for k, t in options)
            + '}\n\n# Choose the answer\nanswer = answers_dict["'
        )
        cue = 'answers_dict["'
    elif fmt is TextFormat.CPP_CODE:
        text = (
            "#include <iostream>\n#include <string>\n#include <map>\nint main() {\n"
            '\tstd::string query = R"(\n' + question_block + '\n)";\n\n'
            "\t// Define the answers dictionary\n"
            "\tstd::map<std::string, std::string> answers_dict = {\n"
            + "".join(f'\t\t{{"{k}.", "{t}"}},\n' for k, t in options)
            + '\t};\n\n\t// Choose the answer\n\tstd::string answer = answers_dict["'
        )
        cue = 'answers_dict["'
    elif fmt is TextFormat.TOML_CONF:
        text = (
            "[questionnaire]\n" + _comment(question_block) + "\n"
            + "".join(f"# {k}. {t}\n" for k, t in options)
            + "answer = "
        )
        cue = "answer = "
    else:
        text = (
            "\\documentclass{article}\n\\usepackage{enumitem}\n\n\\begin{document}\n\n"
            + question_block + "\n\\begin{enumerate}[label=\\Alph*.]\n"
            + "".join(f"\t\\item {t}\n" for _, t in options)
            + "\\end{enumerate}\nAnswer:"
        )
        cue = "Answer:"
    return text, AnswerExtractionSpec("LETTER_AFTER_CUE", cue, letters)


def question_block(q: Questionnaire, item: Item) -> str:
    instructions = q.instructions_of(item)
    return f"{instructions}\n\n{item.text}" if instructions else item.text


def build_prompt(
    q: Questionnaire,
    item: Item,
    persp: PerspectiveSpec,
    ctx: ContextSpec,
    perm: Sequence[int],
    templates: Mapping[Person, str] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> PromptBundle:
    """Assemble the messages for one item.

    Order: system induction (if any), context conversation, then one user
    message holding the user-channel induction, the prepended paragraph, and
    the formatted question with its permuted options.
    """
    scale = q.scale_of(item)
    if sorted(perm) != list(range(scale.points)):
        raise PromptError(f"permutation {tuple(perm)} is not a bijection on {scale.points} options")
    order = [scale.display_order[p] for p in perm]
    letters = _letters(scale.points)
    candidates = tuple(zip(letters, order))

    messages: list[tuple[str, str]] = []
    user_parts: list[str] = []
    if persp.kind is not PerspectiveKind.NONE:
        role, text = render_induction(persp, q, templates)
        if role == "system":
            if ctx.conversation and ctx.conversation[0][0] == "system":
                raise PromptError(
                    f"context '{ctx.label}' already defines a system message; "
                    "cannot add a system-channel induction"
                )
            messages.append(("system", text))
        else:
            user_parts.append(text)
    if ctx.conversation:
        messages.extend(ctx.conversation)
    if ctx.paragraph is not None:
        user_parts.append(ctx.paragraph)
    body, extraction = wrap_format(
        question_block(q, item),
        [(k, scale.labels[i]) for k, i in candidates],
        ctx.text_format,
    )
    user_parts.append(body)
    messages.append(("user", "\n\n".join(user_parts)))

    info = {
        "questionnaire_id": q.id,
        "item_id": item.id,
        "dimension_id": item.dimension_id,
        "context": ctx.label,
        "perspective": persp.label,
        "targets": tuple(persp.targets),
        "channel": persp.channel.value,
        "person": persp.person.value,
        "option_texts": {k: scale.labels[i] for k, i in candidates},
    }
    info.update(meta or {})
    return PromptBundle(tuple(messages), candidates, extraction, info)


# -- context fixtures ------------------------------------------------------

_ROLE_TAGS = {"USER : ": "user", "ASSISTANT : ": "assistant", "SYSTEM : ": "system"}


def parse_messages(text: str) -> tuple[tuple[str, str], ...]:
    """Parse the role-tagged ``.msgs`` format (``USER : ...`` / ``ASSISTANT : ...``)."""
    messages: list[list[str]] = []
    for line in text.split("\n"):
        for tag, role in _ROLE_TAGS.items():
            if line.startswith(tag):
                messages.append([role, line[len(tag):]])
                break
        else:
            if not messages:
                if line.strip():
                    raise PromptError("message file must start with a role tag")
                continue
            messages[-1][1] += "\n" + line
    if messages:
        messages[-1][1] = messages[-1][1].rstrip("\n")
    return tuple((role, body) for role, body in messages)


def format_messages(messages: Iterable[tuple[str, str]]) -> str:
    tags = {role: tag for tag, role in _ROLE_TAGS.items()}
    return "".join(f"{tags[role]}{text}\n" for role, text in messages)


def _fixture_root() -> Path:
    return Path(str(resources.files("persona_probe") / "data" / "contexts"))


def available_fixtures(extra_dirs: Sequence[Path] = ()) -> list[str]:
    names = ["none"] + [f"format/{f.value}" for f in TextFormat]
    for root in [_fixture_root(), *map(Path, extra_dirs)]:
        names += [f"conversation/{p.stem}" for p in sorted((root / "conversations").glob("*.msgs"))]
        names += [f"wiki/{p.stem}" for p in sorted((root / "wiki").glob("*.txt"))]
    return sorted(set(names))


def load_context_fixture(name: str, extra_dirs: Sequence[Path] = ()) -> ContextSpec:
    """Load a named context, e.g. ``conversation/chess``, ``wiki/jazz`` or ``format/code_py``."""
    if name == "none":
        return NO_CONTEXT
    kind, _, key = name.partition("/")
    if kind == "format":
        try:
            return ContextSpec(ContextKind.TEXT_FORMAT, name, format_id=TextFormat(key))
        except ValueError:
            pass
    roots = [*map(Path, extra_dirs), _fixture_root()]
    if kind == "conversation":
        for root in roots:
            path = root / "conversations" / f"{key}.msgs"
            if path.exists():
                msgs = parse_messages(path.read_text(encoding="utf-8"))
                return ContextSpec(ContextKind.CONVERSATION, name, conversation=msgs)
    if kind == "wiki":
        for root in roots:
            path = root / "wiki" / f"{key}.txt"
            if path.exists():
                return ContextSpec(ContextKind.PREPENDED_PARAGRAPH, name,
                                   paragraph=path.read_text(encoding="utf-8"))
    raise PromptError(f"unknown context fixture '{name}'; available: {', '.join(available_fixtures(extra_dirs))}")


class SimulationError(RuntimeError):
    def __init__(self, message: str, transcript: Sequence[tuple[str, str]]):
        super().__init__(message)
        self.transcript = tuple(transcript)


def simulate_conversation(
    topic_seed_message: str,
    chatbot: Callable[[list[dict]], str],
    simulant: Callable[[list[dict]], str],
    exchanges: int = 5,
    save_to: Path | None = None,
    label: str | None = None,
) -> ContextSpec:
    """Let a chatbot talk with a simulated human for ``exchanges`` extra messages.

    ``chatbot`` and ``simulant`` take OpenAI-style message lists and return the
    reply text.  The simulant sees the transcript with roles swapped, under
    the simulated-human system prompt.  With ``save_to`` the transcript is
    written as ``<save_to>/conversations/<label>.msgs``.
    """
    if exchanges < 1:
        raise PromptError("at least one exchange required")
    transcript: list[tuple[str, str]] = [("user", topic_seed_message)]
    try:
        for _ in range(exchanges):
            if transcript[-1][0] == "user":
                reply = chatbot([{"role": r, "content": t} for r, t in transcript])
                transcript.append(("assistant", reply))
            else:
                swapped = [{"role": "system", "content": SIMULATED_HUMAN_PROMPT}] + [
                    {"role": "assistant" if r == "user" else "user", "content": t} for r, t in transcript
                ]
                transcript.append(("user", simulant(swapped)))
    except Exception as exc:
        raise SimulationError(f"conversation simulation failed: {exc}", transcript) from exc
    name = label or "simulated"
    if save_to is not None:
        path = Path(save_to) / "conversations" / f"{name}.msgs"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_messages(transcript), encoding="utf-8")
    return ContextSpec(ContextKind.CONVERSATION, f"conversation/{name}", conversation=tuple(transcript))
