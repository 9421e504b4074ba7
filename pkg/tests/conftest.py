"""Shared fixtures and scripted backends for the test suite."""

from __future__ import annotations

import random
from pathlib import Path

import pytest

from mqmeval.corpus import Segment
from mqmeval.gateway import (
    ChatResponse,
    Gateway,
    MockBackend,
    _synthesize_tokens,
    fingerprint,
)
from mqmeval.orchestrator import (
    VERDICT_CORRECTED,
    VERDICT_NO_DIFFERENCE,
    PipelineContext,
)
from mqmeval.prompts import PromptLibrary
from mqmeval.typology import default_typology, parse_typology

REPO_ROOT = Path(__file__).resolve().parents[1]
GOLDEN_DIR = REPO_ROOT / "data" / "golden"

# Stage markers: stable sentences from the bundled templates, used to tell
# which stage a prompt belongs to without inspecting pipeline internals.
SE_MARKER = "Please check if there are errors in the translation"
CORRECTION_MARKER = "please correct the errors in the translation"
VERIFICATION_MARKER = "has been corrected"
TIER1_MARKER = "You need to determine whether an error exists"
TIER2_MARKER = "whether you agree with his viewpoint"


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN_DIR


@pytest.fixture(scope="session")
def typology():
    return default_typology()


MINI_TYPOLOGY_YAML = """
severity_definition: >-
  Major errors change the meaning or block understanding; minor errors are
  noticeable but leave the message intact; neutral notes carry no penalty.
cores:
  - id: meaning
    name: Meaning
    description: The translation must carry the source meaning.
  - id: wording
    name: Wording
    description: The translation must read well in the target language.
subtypes:
  - id: twist
    core_id: meaning
    name: Twist
    description: Target text states something other than the source.
  - id: gap
    core_id: meaning
    name: Gap
    description: Source content is left out of the target text.
  - id: clunk
    core_id: wording
    name: Clunk
    description: Target phrasing is hard to read although meaning survives.
weights:
  - {subtype_id: "*", severity: Major, weight: 5}
  - {subtype_id: "*", severity: Minor, weight: 1}
  - {subtype_id: clunk, severity: Minor, weight: "0.1"}
  - {subtype_id: "*", severity: Neutral, weight: 0}
"""


@pytest.fixture(scope="session")
def mini_typology():
    return parse_typology(MINI_TYPOLOGY_YAML)


def make_segment(
    system: str = "sysT",
    seg_id: str = "1",
    source: str = "source sentence",
    translation: str = "target sentence",
    domain: str = "test",
    doc_id: str = "doc-1",
    reference: str | None = None,
) -> Segment:
    return Segment(
        system=system,
        domain=domain,
        doc_id=doc_id,
        seg_id=seg_id,
        source=source,
        translation=translation,
        reference=reference,
    )


def make_ctx(
    entries: list[dict],
    typology,
    threshold: float = float("-inf"),
    lang_pair: str = "zh-en",
    max_turns: int = 4,
    cache_dir=None,
) -> PipelineContext:
    """Pipeline context talking to a scripted mock backend, no demos."""
    gateway = Gateway(MockBackend(entries), cache_dir=cache_dir)
    return PipelineContext(
        typology=typology,
        gateway=gateway,
        library=PromptLibrary.bundled(),
        model="test-model",
        lang_pair=lang_pair,
        demos=(),
        threshold=threshold,
        max_turns=max_turns,
    )


def backend_ctx(
    backend,
    typology,
    threshold: float = float("-inf"),
    lang_pair: str = "zh-en",
    max_turns: int = 4,
) -> PipelineContext:
    gateway = Gateway(backend, cache_dir=None)
    return PipelineContext(
        typology=typology,
        gateway=gateway,
        library=PromptLibrary.bundled(),
        model="test-model",
        lang_pair=lang_pair,
        demos=(),
        threshold=threshold,
        max_turns=max_turns,
    )


class RandomScriptBackend:
    """Backend that answers stage prompts with randomized replies.

    Each reply is drawn from a generator seeded by (seed, request
    fingerprint), so runs are reproducible regardless of thread
    interleaving. A slice of replies deliberately breaks the reply
    contracts to exercise reprompt and fallback paths.
    """

    name = "random-script"

    def __init__(self, seed: object, subtype_names, malform_rate: float = 0.2):
        self.seed = seed
        self.subtype_names = tuple(subtype_names)
        self.malform_rate = malform_rate

    def _rng(self, request) -> random.Random:
        return random.Random(f"{self.seed}:{fingerprint(request)}")

    def send(self, request) -> ChatResponse:
        prompt = request.prompt_text()
        rng = self._rng(request)
        if TIER2_MARKER in prompt:
            text = self._tier2(rng)
        elif TIER1_MARKER in prompt:
            text = self._tier1(rng)
        elif VERIFICATION_MARKER in prompt:
            text = self._verification(rng)
        elif CORRECTION_MARKER in prompt:
            text = self._correction(rng)
        else:
            text = self._subtype_eval(rng)
        token_logprobs = None
        if text and rng.random() > 0.25:
            lps = [-rng.random() * 4 for _ in range(rng.randint(1, 4))]
            token_logprobs = _synthesize_tokens(text, lps)
        return ChatResponse(text=text, token_logprobs=token_logprobs, backend="mock")

    def _malformed(self, rng: random.Random) -> bool:
        return rng.random() < self.malform_rate

    def _subtype_eval(self, rng: random.Random) -> str:
        if self._malformed(rng):
            return "Hard to say anything definite here."
        if rng.random() < 0.35:
            return "No error found."
        lines = []
        for i in range(rng.randint(1, 3)):
            severity = rng.choice(("Major", "Minor", "Neutral"))
            name = rng.choice(self.subtype_names)
            lines.append(f"{severity}-{name}-'span {i} {rng.randint(0, 99)}'")
            if rng.random() < 0.5:
                lines.append("Explanation: scripted reasoning text.")
        return "\n".join(lines)

    def _correction(self, rng: random.Random) -> str:
        if self._malformed(rng):
            return ""
        return f"corrected target sentence {rng.randint(0, 9999)}"

    def _verification(self, rng: random.Random) -> str:
        if self._malformed(rng):
            return "The two texts differ in several respects."
        lines = [
            rng.choice((VERDICT_CORRECTED, VERDICT_NO_DIFFERENCE))
            for _ in range(rng.randint(1, 3))
        ]
        return " ".join(lines)

    def _tier1(self, rng: random.Random) -> str:
        if self._malformed(rng):
            return "Opinions on this differ."
        exists = rng.choice(("Yes", "No"))
        if rng.random() < 0.2:
            return f"Error Exist: {exists}."
        severity = rng.choice(("Major", "Minor", "Neutral"))
        return f"Error Exist: {exists}. Error Severity: {severity}."

    def _tier2(self, rng: random.Random) -> str:
        if self._malformed(rng):
            return "Well, it depends."
        if rng.random() < 0.5:
            return "I agree with the assessment."
        return "I disagree; the original reading stands."
