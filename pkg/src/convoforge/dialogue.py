"""Turn-by-turn dialogue generation and stage-direction parsing."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .gateway import ChatRequest
from .personas import DialogueSpec, Persona
from .prompts import load_template
from .util import ConvoforgeError, derive_seed

log = logging.getLogger(__name__)

SPEAKERS = ("doctor", "patient")
END_MARKER = "<END>"
DEFAULT_MAX_TURNS = 60
TRANSCRIPT_SCHEMA = 1

_OPEN = {"(": ")", "[": "]"}
_CLOSE = {")": "(", "]": "["}


class DialogueError(ConvoforgeError):
    pass


@dataclass(frozen=True)
class StageDirection:
    text: str
    offset: int  # position of the opening delimiter in the raw turn text


def _scan(text: str) -> tuple[list[tuple[int, int]], bool]:
    """Top-level delimiter spans that qualify as stage directions, plus a flag for stray delimiters.

    A direction is an opening delimiter, non-empty text with no delimiters,
    and the matching closing delimiter. Anything else stays literal speech.
    """
    spans: list[tuple[int, int]] = []
    stray = False
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in _CLOSE:
            stray = True
            i += 1
            continue
        if ch not in _OPEN:
            i += 1
            continue
        depth, j = 0, i
        while j < n:
            c = text[j]
            if c in _OPEN:
                depth += 1
            elif c in _CLOSE:
                depth -= 1
                if depth == 0:
                    break
            j += 1
        if j >= n:
            # never closed: the opener is literal, keep scanning after it
            stray = True
            i += 1
            continue
        inner = text[i + 1 : j]
        if text[j] == _OPEN[ch] and inner.strip() and not any(c in inner for c in "()[]"):
            spans.append((i, j + 1))
        else:
            stray = True
        i = j + 1
    return spans, stray


_SPACE_BEFORE_PUNCT = re.compile(r"\s+([.,!?;:])")


def parse_stage_directions(text: str) -> tuple[str, list[StageDirection]]:
    """Split raw turn text into clean speech and its stage directions."""
    spans, stray = _scan(text)
    if stray:
        log.warning("unbalanced or nested delimiters kept as literal speech: %r", text[:80])
    directions = [StageDirection(" ".join(text[a + 1 : b - 1].split()), a) for a, b in spans]
    pieces, pos = [], 0
    for a, b in spans:
        pieces.append(text[pos:a])
        pieces.append(" ")
        pos = b
    pieces.append(text[pos:])
    clean = " ".join("".join(pieces).split())
    clean = _SPACE_BEFORE_PUNCT.sub(r"\1", clean)
    return clean, directions


@dataclass(frozen=True)
class Turn:
    index: int
    speaker: str
    text: str
    stage_directions: tuple[StageDirection, ...] = ()
    clean_text: str = ""
    closing: bool = field(default=False, compare=False)

    @classmethod
    def from_text(cls, index: int, speaker: str, text: str, closing: bool = False) -> "Turn":
        clean, dirs = parse_stage_directions(text)
        return cls(index, speaker, text, tuple(dirs), clean, closing)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "speaker": self.speaker,
            "text": self.text,
            "clean_text": self.clean_text,
            "stage_directions": [{"text": d.text, "offset": d.offset} for d in self.stage_directions],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Turn":
        dirs = tuple(StageDirection(x["text"], int(x["offset"])) for x in d.get("stage_directions", []))
        clean = d.get("clean_text")
        if clean is None:
            clean, _ = parse_stage_directions(d["text"])
        return cls(int(d["index"]), d["speaker"], d["text"], dirs, clean)


@dataclass(frozen=True)
class DialogueTranscript:
    dialogue_id: str
    turns: tuple[Turn, ...]
    termination: str  # "end_marker" | "turn_cap"
    template_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.termination not in ("end_marker", "turn_cap"):
            raise DialogueError(f"unknown termination reason {self.termination!r}")
        for i, t in enumerate(self.turns):
            if t.index != i:
                raise DialogueError(f"turn indices must be dense: position {i} has index {t.index}")
            expected = SPEAKERS[i % 2]
            if t.speaker != expected:
                raise DialogueError(f"turn {i} should be spoken by the {expected}, got {t.speaker}")
            for d in t.stage_directions:
                if not 0 <= d.offset < len(t.text):
                    raise DialogueError(f"stage direction offset {d.offset} outside turn {i}")

    def to_dict(self) -> dict:
        return {
            "schema_version": TRANSCRIPT_SCHEMA,
            "dialogue_id": self.dialogue_id,
            "termination": self.termination,
            "template_ids": list(self.template_ids),
            "turns": [t.to_dict() for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DialogueTranscript":
        return cls(
            d["dialogue_id"],
            tuple(Turn.from_dict(t) for t in d["turns"]),
            d["termination"],
            tuple(d.get("template_ids", ())),
        )

    def word_count(self) -> int:
        return sum(len(t.clean_text.split()) for t in self.turns)


# ---------------------------------------------------------------------------
# Generation


@dataclass(frozen=True)
class TurnPrompt:
    persona: Persona
    history: tuple[Turn, ...]
    template_id: str | None = None

    @property
    def role(self) -> str:
        return self.persona.role

    def resolved_template(self) -> str:
        return self.template_id or f"turn_{self.role}.v1"


def format_history(turns: Sequence[Turn]) -> str:
    if not turns:
        return "(the conversation has not started yet; you speak first)"
    return "\n".join(f"[{t.index}] {t.speaker.upper()}: {' '.join(t.text.split())}" for t in turns)


def build_turn_request(prompt: TurnPrompt, *, end_marker: str = END_MARKER, temperature: float = 0.8,
                       seed: int | None = None, dialogue_id: str | None = None,
                       template_dir: str | None = None, attempt: int = 0) -> ChatRequest:
    expected = SPEAKERS[len(prompt.history) % 2]
    if prompt.role != expected:
        raise DialogueError(f"history of {len(prompt.history)} turns implies the {expected} speaks next")
    tpl = load_template(prompt.resolved_template(), template_dir)
    system, user = tpl.render(persona=prompt.persona.describe(), history=format_history(prompt.history),
                              end_marker=end_marker)
    return ChatRequest.simple(
        system, user, temperature=temperature, max_tokens=512, seed=seed,
        metadata={"task": "turn", "role": prompt.role, "turn_index": len(prompt.history),
                  "dialogue_id": dialogue_id, "attempt": attempt},
    )


# a speaker label at a line start or right after sentence-final punctuation
_LABEL = re.compile(
    r"(?:^|\n|(?<=[.!?\"'])\s+)\s*(?:\*\*)?\s*(doctor|patient|physician|dr\.?\s+[a-z]+|pt)\s*(?:\*\*)?\s*:",
    re.IGNORECASE,
)
_LEADING_LABEL = re.compile(r"^\s*(?:\*\*)?\s*(?:doctor|patient|physician|dr\.?\s+[a-z]+)\s*(?:\*\*)?\s*:\s*",
                            re.IGNORECASE)


def clean_reply(reply: str, end_marker: str = END_MARKER) -> tuple[str, bool]:
    """Strip labels, truncate at a second speaker, and detect the end marker."""
    text = reply.strip()
    ended = end_marker in text
    if ended:
        text = text.split(end_marker, 1)[0].strip()
    text = _LEADING_LABEL.sub("", text, count=1)
    m = _LABEL.search(text)
    if m:
        log.warning("reply contained more than one turn; truncated at %r", m.group(0).strip())
        text = text[: m.start()].strip()
    return " ".join(text.split()), ended


def generate_turn(prompt: TurnPrompt, gateway, *, end_marker: str = END_MARKER, retries: int = 2,
                  temperature: float = 0.8, seed: int | None = None, dialogue_id: str | None = None,
                  template_dir: str | None = None) -> Turn | None:
    """One turn for the active speaker, or ``None`` when the model ends the dialogue.

    A reply carrying text plus the end marker yields that turn with
    ``closing=True``.
    """
    index = len(prompt.history)
    for attempt in range(retries + 1):
        req = build_turn_request(prompt, end_marker=end_marker, temperature=temperature, seed=seed,
                                 dialogue_id=dialogue_id, template_dir=template_dir, attempt=attempt)
        text, ended = clean_reply(gateway.chat(req), end_marker)
        if text:
            return Turn.from_text(index, prompt.role, text, closing=ended)
        if ended:
            return None
        log.warning("empty reply for turn %d (attempt %d)", index, attempt + 1)
    raise DialogueError(f"empty reply for turn {index} after {retries + 1} attempts")


def run_dialogue(spec: DialogueSpec, personas: Mapping[str, Persona], gateway, *,
                 max_turns: int = DEFAULT_MAX_TURNS, end_marker: str = END_MARKER,
                 temperature: float = 0.8, template_dir: str | None = None,
                 templates: Mapping[str, str] | None = None) -> DialogueTranscript:
    """Alternate doctor/patient turns until the end marker or the turn cap."""
    try:
        doctor = personas[spec.doctor_id]
        patient = personas[spec.patient_id]
    except KeyError as exc:
        raise DialogueError(f"{spec.id}: unknown persona {exc}") from None
    for p in (doctor, patient):
        if p.split != spec.split:
            raise DialogueError(f"{spec.id}: persona {p.id} is not in split {spec.split}")
    templates = dict(templates or {})
    cast = {"doctor": doctor, "patient": patient}
    turns: list[Turn] = []
    termination = "turn_cap"
    while len(turns) < max_turns:
        speaker = SPEAKERS[len(turns) % 2]
        prompt = TurnPrompt(cast[speaker], tuple(turns), templates.get(speaker))
        try:
            turn = generate_turn(prompt, gateway, end_marker=end_marker, temperature=temperature,
                                 seed=derive_seed(spec.seed, len(turns)), dialogue_id=spec.id,
                                 template_dir=template_dir)
        except ConvoforgeError as exc:
            raise DialogueError(f"{spec.id} turn {len(turns)}: {exc}") from exc
        if turn is None:
            termination = "end_marker"
            break
        turns.append(turn)
        if turn.closing:
            termination = "end_marker"
            break
    used = tuple(sorted({TurnPrompt(cast[s], (), templates.get(s)).resolved_template() for s in SPEAKERS}))
    return DialogueTranscript(spec.id, tuple(turns), termination, used)


_LINE = re.compile(r"^\s*(?:\*\*)?\s*(doctor|patient)\s*(?:\*\*)?\s*:\s*(.*)$", re.IGNORECASE)


def parse_transcript_text(dialogue_id: str, text: str) -> DialogueTranscript:
    """Parse ``DOCTOR: ...`` / ``PATIENT: ...`` lines; consecutive same-speaker lines are merged."""
    turns: list[tuple[str, str]] = []
    for line in text.splitlines():
        m = _LINE.match(line)
        if m:
            speaker, body = m.group(1).lower(), m.group(2).strip()
            if turns and turns[-1][0] == speaker:
                turns[-1] = (speaker, turns[-1][1] + " " + body)
            else:
                turns.append((speaker, body))
        elif turns and line.strip():
            turns[-1] = (turns[-1][0], turns[-1][1] + " " + line.strip())
    if turns and turns[0][0] != "doctor":
        turns = turns[1:]
    return DialogueTranscript(
        dialogue_id, tuple(Turn.from_text(i, s, t) for i, (s, t) in enumerate(turns)), "end_marker",
    )


def run_dialogue_single_shot(spec: DialogueSpec, personas: Mapping[str, Persona], gateway, *,
                             max_turns: int = DEFAULT_MAX_TURNS, temperature: float = 0.8,
                             template_dir: str | None = None) -> DialogueTranscript:
    """Whole-dialogue generation in one call (comparison mode only)."""
    tpl = load_template("dialogue_single_shot.v1", template_dir)
    system, user = tpl.render(doctor=personas[spec.doctor_id].describe(),
                              patient=personas[spec.patient_id].describe())
    req = ChatRequest.simple(system, user, temperature=temperature, max_tokens=8192, seed=spec.seed,
                             metadata={"task": "dialogue", "dialogue_id": spec.id})
    parsed = parse_transcript_text(spec.id, gateway.chat(req))
    turns = parsed.turns[:max_turns]
    termination = "turn_cap" if len(parsed.turns) > max_turns else "end_marker"
    return DialogueTranscript(spec.id, turns, termination, ("dialogue_single_shot.v1",))
