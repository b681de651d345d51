"""Reference SOAP notes: quote-anchored fact extraction, grounding checks, note generation."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .dialogue import DialogueTranscript, format_history
from .gateway import ChatRequest
from .metrics import normalize
from .prompts import load_template
from .util import ConvoforgeError, extract_json

log = logging.getLogger(__name__)

FACT_CATEGORIES = ("history", "symptom", "exam", "plan", "admin", "other")
SOAP_SECTIONS = ("hpi", "ros", "objective", "assessment", "plan")
SECTION_TITLES = {
    "hpi": "History of Present Illness",
    "ros": "Review of Systems",
    "objective": "Objective",
    "assessment": "Assessment",
    "plan": "Plan",
}
NOT_ADDRESSED = "Not addressed."
NOTES_SCHEMA = 1


class NoteError(ConvoforgeError):
    pass


class SchemaError(NoteError):
    """Model output that does not fit the expected structure (retryable)."""


class GroundingError(NoteError):
    def __init__(self, message: str, report: "GroundingReport"):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# Fact tables


@dataclass(frozen=True)
class Fact:
    id: str
    statement: str
    quote: str
    turn: int
    category: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class FactTable:
    dialogue_id: str
    facts: tuple[Fact, ...]

    def __len__(self) -> int:
        return len(self.facts)

    def to_dict(self) -> dict:
        return {"schema_version": NOTES_SCHEMA, "dialogue_id": self.dialogue_id,
                "facts": [f.to_dict() for f in self.facts]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FactTable":
        return parse_fact_table(d, d["dialogue_id"])


def parse_fact_table(obj: Any, dialogue_id: str) -> FactTable:
    """Validate the structure of a fact table; raise :class:`SchemaError` on any defect."""
    if not isinstance(obj, Mapping) or not isinstance(obj.get("facts"), list):
        raise SchemaError("expected an object with a 'facts' list")
    facts = []
    seen = set()
    for k, raw in enumerate(obj["facts"]):
        if not isinstance(raw, Mapping):
            raise SchemaError(f"fact {k} is not an object")
        fid = str(raw.get("id") or f"f{k + 1}")
        if fid in seen:
            raise SchemaError(f"duplicate fact id {fid!r}")
        seen.add(fid)
        statement, quote = raw.get("statement"), raw.get("quote")
        if not isinstance(statement, str) or not statement.strip():
            raise SchemaError(f"fact {fid} has no statement")
        if not isinstance(quote, str) or not quote.strip():
            raise SchemaError(f"fact {fid} has no supporting quote")
        turn = raw.get("turn")
        if isinstance(turn, bool) or not isinstance(turn, int):
            if isinstance(turn, str) and turn.strip().isdigit():
                turn = int(turn)
            else:
                raise SchemaError(f"fact {fid} has a non-integer turn index {turn!r}")
        category = str(raw.get("category", "other")).strip().lower()
        if category not in FACT_CATEGORIES:
            raise SchemaError(f"fact {fid} has unknown category {category!r}")
        facts.append(Fact(fid, statement.strip(), quote.strip(), turn, category))
    return FactTable(dialogue_id, tuple(facts))


GROUNDED, QUOTE_MISSING, BAD_TURN = "grounded", "quote_missing", "bad_turn"


def quote_in_turn(quote: str, transcript: DialogueTranscript, turn: int) -> str:
    """Grounding status of ``quote`` against turn ``turn``.

    Both sides are normalized and space-padded, so a quote must match whole
    words of either the raw turn text or its stage-direction-free version.
    """
    if not 0 <= turn < len(transcript.turns):
        return BAD_TURN
    q = normalize(quote)
    if not q:
        return QUOTE_MISSING
    t = transcript.turns[turn]
    needle = f" {q} "
    for hay in (t.text, t.clean_text):
        if needle in f" {normalize(hay)} ":
            return GROUNDED
    return QUOTE_MISSING


@dataclass(frozen=True)
class GroundingReport:
    statuses: tuple[tuple[str, str], ...]  # (fact id, status)

    @property
    def ok(self) -> bool:
        return all(s == GROUNDED for _, s in self.statuses)

    def failures(self) -> list[tuple[str, str]]:
        return [(fid, s) for fid, s in self.statuses if s != GROUNDED]

    def to_dict(self) -> dict:
        return {fid: s for fid, s in self.statuses}


def validate_grounding(table: FactTable, transcript: DialogueTranscript) -> GroundingReport:
    return GroundingReport(tuple((f.id, quote_in_turn(f.quote, transcript, f.turn)) for f in table.facts))


def numbered_transcript(transcript: DialogueTranscript) -> str:
    return format_history(transcript.turns)


def _ask(gateway, request: ChatRequest, parse, retries: int, what: str):
    last = None
    for attempt in range(retries + 1):
        reply = gateway.chat(request if attempt == 0 else _with_attempt(request, attempt))
        try:
            return parse(reply)
        except (SchemaError, ValueError) as exc:
            last = exc
            log.warning("%s: unusable reply (attempt %d): %s", what, attempt + 1, exc)
    raise NoteError(f"{what}: no usable reply after {retries + 1} attempts ({last})")


def _with_attempt(request: ChatRequest, attempt: int) -> ChatRequest:
    meta = dict(request.metadata, attempt=attempt)
    return ChatRequest(request.messages, request.temperature, request.max_tokens, request.seed, meta)


def _json_reply(reply: str) -> Any:
    try:
        return extract_json(reply)
    except ValueError as exc:
        raise SchemaError(f"reply is not JSON: {exc}") from None


def extract_facts(transcript: DialogueTranscript, gateway, *, retries: int = 2, policy: str = "reject",
                  template_dir: str | None = None, seed: int | None = None) -> FactTable:
    """Fact table for ``transcript``; ungrounded facts reject the table or are dropped (``policy='drop'``)."""
    if not transcript.turns:
        raise NoteError(f"{transcript.dialogue_id}: cannot extract facts from an empty transcript")
    if policy not in ("reject", "drop"):
        raise NoteError(f"unknown grounding policy {policy!r}")
    tpl = load_template("facts_extract.v1", template_dir)
    system, user = tpl.render(transcript=numbered_transcript(transcript))
    req = ChatRequest.simple(system, user, temperature=0.0, max_tokens=4096, seed=seed,
                             metadata={"task": "facts", "dialogue_id": transcript.dialogue_id})
    table = _ask(gateway, req, lambda r: parse_fact_table(_json_reply(r), transcript.dialogue_id), retries,
                 f"{transcript.dialogue_id} fact extraction")
    report = validate_grounding(table, transcript)
    if report.ok:
        return table
    bad = report.failures()
    if policy == "reject":
        raise GroundingError(f"{transcript.dialogue_id}: {len(bad)} ungrounded fact(s): {bad}", report)
    log.warning("%s: dropping %d ungrounded fact(s): %s", transcript.dialogue_id, len(bad), bad)
    bad_ids = {fid for fid, _ in bad}
    return FactTable(table.dialogue_id, tuple(f for f in table.facts if f.id not in bad_ids))


# ---------------------------------------------------------------------------
# SOAP notes


def _key(statement: str) -> str:
    return normalize(statement)


@dataclass(frozen=True)
class SoapNote:
    hpi: tuple[str, ...] = ()
    ros: tuple[str, ...] = ()
    objective: tuple[str, ...] = ()
    assessment: tuple[str, ...] = ()
    plan: tuple[str, ...] = ()
    dialogue_id: str | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in SOAP_SECTIONS:
            items = tuple(s.strip() for s in getattr(self, name) if s and s.strip()
                          and _key(s) != _key(NOT_ADDRESSED))
            object.__setattr__(self, name, items)
        shared = {_key(s) for s in self.hpi} & {_key(s) for s in self.ros}
        if shared:
            raise SchemaError(f"HPI and ROS share statements: {sorted(shared)}")

    def sections(self) -> dict[str, tuple[str, ...]]:
        return {name: getattr(self, name) for name in SOAP_SECTIONS}

    def statements(self) -> list[tuple[str, str]]:
        return [(name, s) for name, items in self.sections().items() for s in items]

    @property
    def is_empty(self) -> bool:
        return not self.statements()

    @property
    def word_count(self) -> int:
        """Words in the note's statements (headings and markers excluded)."""
        return sum(len(s.split()) for _, s in self.statements())

    def to_text(self) -> str:
        lines = ["SUBJECTIVE"]
        for name in SOAP_SECTIONS:
            if name == "objective":
                lines.append("")
            title = SECTION_TITLES[name]
            lines.append(title if name in ("hpi", "ros") else title.upper())
            items = getattr(self, name)
            if items:
                lines.extend(f"- {s}" for s in items)
            else:
                lines.append(NOT_ADDRESSED)
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"schema_version": NOTES_SCHEMA, "dialogue_id": self.dialogue_id}
        d.update({name: list(items) for name, items in self.sections().items()})
        d["word_count"] = self.word_count
        return d

    def sections_json(self) -> str:
        return json.dumps({name: list(items) for name, items in self.sections().items()}, indent=1)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], dialogue_id: str | None = None) -> "SoapNote":
        missing = [s for s in SOAP_SECTIONS if s not in d]
        if missing:
            raise SchemaError(f"note lacks section(s): {', '.join(missing)}")
        values = {}
        for name in SOAP_SECTIONS:
            v = d[name]
            if isinstance(v, str):
                v = [v]
            if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
                raise SchemaError(f"note section {name!r} must be a list of strings")
            values[name] = tuple(v)
        return cls(**values, dialogue_id=dialogue_id or d.get("dialogue_id"))


_HEADINGS = [
    ("hpi", r"hpi|history of (?:the )?present(?:ing)? illness"),
    ("ros", r"ros|review of systems"),
    ("objective", r"o|objective|physical exam(?:ination)?|exam"),
    ("assessment", r"a|assessment|impression"),
    ("plan", r"p|plan"),
    ("subjective", r"s|subjective"),
]
# a heading is alone on its line or followed by a colon
_HEADING_RE = re.compile(
    r"^\s*(?:#+\s*)?(?:\*\*)?\s*(?:" + "|".join(f"(?P<{k}>{p})" for k, p in _HEADINGS) + r")\s*(?:\*\*)?\s*"
    r"(?:$|:(?:\*\*)?\s*(?P<rest>.*)$)",
    re.IGNORECASE,
)
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")


def parse_soap_text(text: str, dialogue_id: str | None = None) -> SoapNote:
    """Parse a headed plain-text note (``HPI:``, ``Review of Systems``, ``PLAN`` ...)."""
    found: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        m = _HEADING_RE.match(line)
        if m:
            name = next(k for k, _ in _HEADINGS if m.group(k))
            rest = (m.group("rest") or "").strip()
            if name == "subjective":
                current = None
                continue
            current = name
            found.setdefault(current, [])
            if rest:
                found[current].append(rest)
            continue
        if current is None or not line.strip():
            continue
        found[current].append(_BULLET.sub("", line).strip())
    missing = [s for s in SOAP_SECTIONS if s not in found]
    if missing:
        raise SchemaError(f"note lacks section(s): {', '.join(missing)}")
    return SoapNote(**{k: tuple(v) for k, v in found.items()}, dialogue_id=dialogue_id)


def parse_note_reply(reply: str, dialogue_id: str | None = None) -> SoapNote:
    try:
        obj = extract_json(reply)
    except ValueError:
        return parse_soap_text(reply, dialogue_id)
    if not isinstance(obj, Mapping):
        raise SchemaError("note reply is not a JSON object")
    return SoapNote.from_dict(obj, dialogue_id)


def facts_for_prompt(table: FactTable) -> str:
    """Fact table as shown to the note writer; administrative facts are withheld."""
    rows = [{"id": f.id, "category": f.category, "statement": f.statement, "quote": f.quote}
            for f in table.facts if f.category != "admin"]
    return json.dumps(rows, indent=1, ensure_ascii=False)


def build_note_request(table: FactTable, *, template_dir: str | None = None, seed: int | None = None,
                       ) -> ChatRequest:
    tpl = load_template("note_generate.v1", template_dir)
    system, user = tpl.render(facts=facts_for_prompt(table))
    return ChatRequest.simple(system, user, temperature=0.0, max_tokens=2048, seed=seed,
                              metadata={"task": "note", "dialogue_id": table.dialogue_id})


def generate_note(table: FactTable, gateway, *, retries: int = 2, template_dir: str | None = None,
                  seed: int | None = None) -> SoapNote:
    """SOAP note written from the fact table alone; the transcript never enters the prompt."""
    req = build_note_request(table, template_dir=template_dir, seed=seed)
    return _ask(gateway, req, lambda r: parse_note_reply(r, table.dialogue_id), retries,
                f"{table.dialogue_id} note generation")

