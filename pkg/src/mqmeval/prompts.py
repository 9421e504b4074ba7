"""Prompt assembly for the three evaluation stages.

Templates are plain text files with ``[system]`` / ``[user]`` section headers
and ``{Slot}`` placeholders.  Rendering is pure: the same inputs always give
the same messages, and an unresolved slot is an error rather than a silent
blank.  The bundled templates cover the five pipeline calls (per-subtype
evaluation, correction, verification, and the two discussion turns).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .gateway import ChatMessage
from .typology import CoreCategory, Subtype

__all__ = [
    "PromptError",
    "ChatTemplate",
    "PromptLibrary",
    "DemoExample",
    "load_demos",
    "format_demos",
    "DiscussionTranscript",
    "format_transcript",
    "language_name",
    "render_subtype_eval",
    "render_correction",
    "render_verification",
    "render_tier1_turn",
    "render_tier2_turn",
]

TEMPLATE_NAMES = ("subtype_eval", "correction", "verification", "tier1_turn", "tier2_turn")

_SLOT_RE = re.compile(r"\{([A-Za-z][A-Za-z0-9 ]*)\}")
_SECTION_RE = re.compile(r"^\[(system|user|assistant)\]\s*$")

_LANGUAGE_NAMES = {
    "ar": "Arabic",
    "cs": "Czech",
    "de": "German",
    "en": "English",
    "es": "Spanish",
    "fr": "French",
    "he": "Hebrew",
    "it": "Italian",
    "ja": "Japanese",
    "ko": "Korean",
    "nl": "Dutch",
    "pl": "Polish",
    "pt": "Portuguese",
    "ru": "Russian",
    "th": "Thai",
    "tr": "Turkish",
    "uk": "Ukrainian",
    "zh": "Chinese",
}


class PromptError(ValueError):
    """Raised for malformed templates, missing slots, or bad render inputs."""


def language_name(code: str) -> str:
    return _LANGUAGE_NAMES.get(code.strip().lower(), code.strip())


def _split_pair(lang_pair: str) -> tuple[str, str]:
    parts = re.split(r"[-_>to ]+", lang_pair.strip(), maxsplit=1)
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise PromptError(f"cannot parse language pair {lang_pair!r}; expected e.g. 'zh-en'")
    return parts[0], parts[1]


@dataclass(frozen=True)
class ChatTemplate:
    name: str
    sections: tuple[tuple[str, str], ...]

    def slots(self) -> set[str]:
        found: set[str] = set()
        for _, text in self.sections:
            found.update(m.group(1) for m in _SLOT_RE.finditer(text))
        return found


def _parse_template(name: str, text: str) -> ChatTemplate:
    sections: list[tuple[str, list[str]]] = []
    for line in text.split("\n"):
        m = _SECTION_RE.match(line)
        if m:
            sections.append((m.group(1), []))
        elif sections:
            sections[-1][1].append(line)
        elif line.strip():
            raise PromptError(f"template {name!r}: content before first [role] header")
    if not sections:
        raise PromptError(f"template {name!r}: no [role] sections found")
    compiled = tuple((role, "\n".join(lines).strip()) for role, lines in sections)
    for role, body in compiled:
        if not body:
            raise PromptError(f"template {name!r}: empty [{role}] section")
    return ChatTemplate(name=name, sections=compiled)


class PromptLibrary:
    """A named set of chat templates, rendered with explicit slot values."""

    _bundled: "PromptLibrary | None" = None

    def __init__(self, templates: Mapping[str, ChatTemplate]):
        missing = [n for n in TEMPLATE_NAMES if n not in templates]
        if missing:
            raise PromptError(f"prompt library is missing templates: {missing}")
        self._templates = dict(templates)

    @classmethod
    def bundled(cls) -> "PromptLibrary":
        if cls._bundled is None:
            base = resources.files("mqmeval.data").joinpath("templates")
            templates = {
                name: _parse_template(name, base.joinpath(f"{name}.txt").read_text("utf-8"))
                for name in TEMPLATE_NAMES
            }
            cls._bundled = cls(templates)
        return cls._bundled

    @classmethod
    def load(cls, directory: str | Path) -> "PromptLibrary":
        base = Path(directory)
        templates = {}
        for name in TEMPLATE_NAMES:
            path = base / f"{name}.txt"
            if not path.exists():
                raise PromptError(f"prompt library at {base} is missing {path.name}")
            templates[name] = _parse_template(name, path.read_text(encoding="utf-8"))
        return cls(templates)

    def template(self, name: str) -> ChatTemplate:
        try:
            return self._templates[name]
        except KeyError:
            raise PromptError(f"unknown template {name!r}") from None

    def render(self, name: str, slots: Mapping[str, str]) -> list[ChatMessage]:
        template = self.template(name)
        messages = []
        for role, body in template.sections:
            def fill(m: re.Match) -> str:
                slot = m.group(1)
                if slot not in slots:
                    raise PromptError(f"template {name!r}: unresolved slot {{{slot}}}")
                return str(slots[slot])

            messages.append(ChatMessage(role=role, content=_SLOT_RE.sub(fill, body)))
        return messages


@dataclass(frozen=True)
class DemoExample:
    source: str
    translation: str
    expected_findings_block: str


def load_demos(path: str | Path, typology=None) -> tuple[DemoExample, ...]:
    """Load demonstration examples; with a typology, check each block parses."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise PromptError(f"demos file {path} must be a list")
    demos = []
    for i, row in enumerate(doc):
        try:
            demo = DemoExample(
                source=str(row["source"]),
                translation=str(row["translation"]),
                expected_findings_block=str(row["expected_findings_block"]).strip(),
            )
        except (TypeError, KeyError):
            raise PromptError(
                f"demos[{i}]: need source, translation, expected_findings_block"
            ) from None
        demos.append(demo)
    if typology is not None:
        from .orchestrator import FindingParseError, parse_findings

        for i, demo in enumerate(demos):
            try:
                parse_findings(demo.expected_findings_block, typology)
            except FindingParseError as exc:
                raise PromptError(f"demos[{i}]: block does not parse: {exc}") from exc
    return tuple(demos)


def bundled_demos() -> tuple[DemoExample, ...]:
    with resources.as_file(resources.files("mqmeval.data").joinpath("demos.yaml")) as p:
        return load_demos(p)


def format_demos(demos: Sequence[DemoExample]) -> str:
    """Render demos as a prompt block; empty input renders as nothing."""
    if not demos:
        return ""
    parts = ["Here are demonstration examples of this evaluation:"]
    for i, demo in enumerate(demos, 1):
        parts.append(
            f"Example {i}:\n"
            f"Source: {demo.source}\n"
            f"Translation: {demo.translation}\n"
            f"Evaluation:\n{demo.expected_findings_block}"
        )
    return "\n\n".join(parts) + "\n\nNow evaluate the following translation.\n\n"


_SPEAKERS = ("tier1", "tier2")
_SPEAKER_LABELS = {"tier1": "Category expert", "tier2": "Subtype evaluator"}


@dataclass
class DiscussionTranscript:
    """Alternating discussion turns, tier-1 expert first, bounded length."""

    max_turns: int = 4
    turns: list[tuple[str, str]] = field(default_factory=list)

    def append(self, speaker: str, text: str) -> None:
        if speaker not in _SPEAKERS:
            raise PromptError(f"unknown speaker {speaker!r}")
        expected = _SPEAKERS[len(self.turns) % 2]
        if speaker != expected:
            raise PromptError(
                f"turn {len(self.turns) + 1} must come from {expected!r}, got {speaker!r}"
            )
        if len(self.turns) >= self.max_turns:
            raise PromptError(f"transcript already has {self.max_turns} turns")
        self.turns.append((speaker, text))

    def __len__(self) -> int:
        return len(self.turns)


def format_transcript(transcript: DiscussionTranscript | None) -> str:
    if transcript is None or not transcript.turns:
        return "(none)"
    return "\n\n".join(
        f"[{_SPEAKER_LABELS[speaker]}] {text}" for speaker, text in transcript.turns
    )


def _error_definition(subtype: Subtype) -> str:
    return f"{subtype.name}: {subtype.description}"


def render_subtype_eval(
    source: str,
    translation: str,
    subtype: Subtype,
    severity_definition: str,
    lang_pair: str,
    demos: Sequence[DemoExample] = (),
    library: PromptLibrary | None = None,
) -> list[ChatMessage]:
    lib = library or PromptLibrary.bundled()
    src, tgt = _split_pair(lang_pair)
    slots = {
        "Source": source,
        "Translation": translation,
        "Error Definition": _error_definition(subtype),
        "Severity Definition": severity_definition,
        "Demonstrations": format_demos(demos),
        "Language Pair": f"{language_name(src)} to {language_name(tgt)}",
        "Source Language": language_name(src),
        "Target Language": language_name(tgt),
    }
    return lib.render("subtype_eval", slots)


def render_correction(
    source: str,
    translation: str,
    subtype: Subtype,
    findings_block: str,
    lang_pair: str,
    library: PromptLibrary | None = None,
) -> list[ChatMessage]:
    if not findings_block.strip():
        raise PromptError("correction prompt requires at least one finding")
    lib = library or PromptLibrary.bundled()
    src, tgt = _split_pair(lang_pair)
    slots = {
        "Source": source,
        "Translation": translation,
        "Error Definition": _error_definition(subtype),
        "Error Information": findings_block.strip(),
        "Source Language": language_name(src),
        "Target Language": language_name(tgt),
    }
    return lib.render("correction", slots)


def render_verification(
    original_translation: str,
    corrected_translation: str,
    findings_block: str,
    library: PromptLibrary | None = None,
) -> list[ChatMessage]:
    if not corrected_translation.strip():
        raise PromptError("verification prompt requires a non-empty corrected translation")
    if not findings_block.strip():
        raise PromptError("verification prompt requires the findings under review")
    lib = library or PromptLibrary.bundled()
    slots = {
        "Original Translation": original_translation,
        "Corrected Translation": corrected_translation,
        "Error Information": findings_block.strip(),
    }
    return lib.render("verification", slots)


def render_tier1_turn(
    source: str,
    translation: str,
    core: CoreCategory,
    core_subtypes: Sequence[Subtype],
    previous_error_information: str,
    transcript: DiscussionTranscript | None = None,
    library: PromptLibrary | None = None,
) -> list[ChatMessage]:
    if not previous_error_information.strip():
        raise PromptError("tier-1 turn requires the escalated error information")
    lib = library or PromptLibrary.bundled()
    definitions = "\n".join(f"- {_error_definition(s)}" for s in core_subtypes)
    slots = {
        "Source": source,
        "Translation": translation,
        "Core Name": core.name,
        "Core Description": core.description,
        "Core Error Definitions": definitions or "- (none)",
        "Previous Error Information": previous_error_information.strip(),
        "Previous Chat History": format_transcript(transcript),
    }
    return lib.render("tier1_turn", slots)


def render_tier2_turn(
    source: str,
    translation: str,
    subtype: Subtype,
    previous_error_information: str,
    transcript: DiscussionTranscript,
    library: PromptLibrary | None = None,
) -> list[ChatMessage]:
    if not transcript.turns or transcript.turns[-1][0] != "tier1":
        raise PromptError("tier-2 turn requires a preceding tier-1 statement")
    lib = library or PromptLibrary.bundled()
    slots = {
        "Source": source,
        "Translation": translation,
        "Subtype Name": subtype.name,
        "Previous Error Information": previous_error_information.strip(),
        "Previous Chat History": format_transcript(transcript),
    }
    return lib.render("tier2_turn", slots)
