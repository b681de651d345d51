"""Reference-free note judging: atomic claims, evidence-checked verdicts, dimension scores, aggregates."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .dialogue import DialogueTranscript
from .gateway import ChatRequest
from .notes import (GROUNDED, SOAP_SECTIONS, NoteError, SchemaError, SoapNote, _ask, _json_reply,
                    numbered_transcript, quote_in_turn)
from .prompts import load_template

log = logging.getLogger(__name__)

LABELS = ("supported", "unsupported", "contradicted")
SCALED = ("faithfulness", "structure", "coverage", "conciseness")
COUNTS = ("over_medicalization", "under_medicalization", "over_specificity",
          "missed_relevant_facts", "critical_omissions", "duplicated_content")
RATES = ("unsupported_claim_rate", "contradiction_rate")
DIMENSIONS = SCALED + COUNTS + RATES
JUDGE_SCHEMA = 1


class JudgeError(NoteError):
    pass


@dataclass(frozen=True)
class Claim:
    id: str
    statement: str
    section: str


@dataclass(frozen=True)
class ClaimSet:
    note_id: str
    claims: tuple[Claim, ...]
    empty_note: bool = False

    def __len__(self) -> int:
        return len(self.claims)


def parse_claims(obj: Any, note_id: str) -> ClaimSet:
    if not isinstance(obj, Mapping) or not isinstance(obj.get("claims"), list):
        raise SchemaError("expected an object with a 'claims' list")
    claims, seen = [], set()
    for k, raw in enumerate(obj["claims"]):
        if not isinstance(raw, Mapping):
            raise SchemaError(f"claim {k} is not an object")
        cid = raw.get("id")
        if not isinstance(cid, str) or not cid:
            raise SchemaError(f"claim {k} has no id")
        if cid in seen:
            raise SchemaError(f"duplicate claim id {cid!r}")
        seen.add(cid)
        statement = raw.get("statement")
        if not isinstance(statement, str) or not statement.strip():
            raise SchemaError(f"claim {cid} has no statement")
        section = str(raw.get("section", "")).strip().lower()
        if section not in SOAP_SECTIONS:
            raise SchemaError(f"claim {cid} has unknown section {section!r}")
        claims.append(Claim(cid, statement.strip(), section))
    return ClaimSet(note_id, tuple(claims))


def extract_claims(note: SoapNote, gateway, *, note_id: str | None = None, retries: int = 2,
                   template_dir: str | None = None) -> ClaimSet:
    note_id = note_id or note.dialogue_id or "note"
    if note.is_empty:
        log.warning("%s: note has no statements; empty claim set", note_id)
        return ClaimSet(note_id, (), empty_note=True)
    system, user = load_template("claims_extract.v1", template_dir).render(note=note.sections_json())
    req = ChatRequest.simple(system, user, temperature=0.0, max_tokens=4096,
                             metadata={"task": "claims", "dialogue_id": note_id})
    return _ask(gateway, req, lambda r: parse_claims(_json_reply(r), note_id), retries,
                f"{note_id} claim extraction")


@dataclass(frozen=True)
class ClaimVerdict:
    claim_id: str
    label: str
    quote: str | None = None
    turn: int | None = None
    downgraded: bool = False  # evidence failed the local check

    def __post_init__(self):
        if self.label not in LABELS:
            raise SchemaError(f"unknown verdict label {self.label!r}")
        has_evidence = self.quote is not None and self.turn is not None
        if (self.label == "unsupported") == has_evidence:
            raise SchemaError(f"verdict for {self.claim_id}: evidence must accompany exactly "
                              "the supported and contradicted labels")

    def to_dict(self) -> dict:
        return {"claim_id": self.claim_id, "label": self.label, "quote": self.quote, "turn": self.turn,
                "downgraded": self.downgraded}


def _parse_verdicts(obj: Any, claims: ClaimSet) -> dict[str, dict]:
    if not isinstance(obj, Mapping) or not isinstance(obj.get("verdicts"), list):
        raise SchemaError("expected an object with a 'verdicts' list")
    raw: dict[str, dict] = {}
    for v in obj["verdicts"]:
        if isinstance(v, Mapping) and isinstance(v.get("id"), str):
            raw[v["id"]] = dict(v)
    missing = [c.id for c in claims.claims if c.id not in raw]
    if missing:
        raise SchemaError(f"no verdict for claim(s) {', '.join(missing)}")
    for cid in (c.id for c in claims.claims):
        label = str(raw[cid].get("label", "")).strip().lower()
        if label not in LABELS:
            raise SchemaError(f"claim {cid}: unknown label {label!r}")
        raw[cid]["label"] = label
    return raw


def check_verdict(claim_id: str, raw: Mapping[str, Any], transcript: DialogueTranscript) -> ClaimVerdict:
    """Verdict with locally verified evidence; failed evidence turns it into ``unsupported``."""
    label = raw["label"]
    if label == "unsupported":
        return ClaimVerdict(claim_id, label)
    quote, turn = raw.get("quote"), raw.get("turn")
    if isinstance(turn, str) and turn.strip().isdigit():
        turn = int(turn)
    ok = (isinstance(quote, str) and isinstance(turn, int) and not isinstance(turn, bool)
          and quote_in_turn(quote, transcript, turn) == GROUNDED)
    if not ok:
        log.warning("claim %s: %s verdict with unverifiable evidence (turn %r, quote %r); downgraded",
                    claim_id, label, turn, quote)
        return ClaimVerdict(claim_id, "unsupported", downgraded=True)
    return ClaimVerdict(claim_id, label, quote, turn)


def label_claims(claims: ClaimSet, transcript: DialogueTranscript, gateway, *, retries: int = 2,
                 template_dir: str | None = None) -> list[ClaimVerdict]:
    if not claims.claims:
        raise JudgeError(f"{claims.note_id}: no claims to label")
    payload = json.dumps([{"id": c.id, "statement": c.statement} for c in claims.claims], indent=1)
    system, user = load_template("claims_label.v1", template_dir).render(
        transcript=numbered_transcript(transcript), claims=payload)
    req = ChatRequest.simple(system, user, temperature=0.0, max_tokens=4096,
                             metadata={"task": "labels", "dialogue_id": claims.note_id})
    try:
        raw = _ask(gateway, req, lambda r: _parse_verdicts(_json_reply(r), claims), retries,
                   f"{claims.note_id} claim labeling")
    except NoteError as exc:
        raise JudgeError(str(exc)) from exc
    return [check_verdict(c.id, raw[c.id], transcript) for c in claims.claims]


def claim_rates(verdicts: Sequence[ClaimVerdict]) -> dict[str, float]:
    n = len(verdicts)
    if n == 0:
        return {"unsupported_claim_rate": 0.0, "contradiction_rate": 0.0}
    return {
        "unsupported_claim_rate": sum(v.label == "unsupported" for v in verdicts) / n,
        "contradiction_rate": sum(v.label == "contradicted" for v in verdicts) / n,
    }


@dataclass
class JudgeReport:
    note_id: str
    scores: dict[str, int]
    counts: dict[str, int]
    rates: dict[str, float]
    claims: list[Claim] = field(default_factory=list)
    verdicts: list[ClaimVerdict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for k in SCALED:
            if not 1 <= self.scores[k] <= 5:
                raise JudgeError(f"{k} score {self.scores[k]} outside 1..5")
        for k in COUNTS:
            if self.counts[k] < 0:
                raise JudgeError(f"{k} count is negative")

    def value(self, dim: str) -> float:
        for table in (self.scores, self.counts, self.rates):
            if dim in table:
                return float(table[dim])
        raise KeyError(dim)

    def to_dict(self) -> dict:
        return {
            "schema_version": JUDGE_SCHEMA,
            "note_id": self.note_id,
            "scores": dict(self.scores),
            "counts": dict(self.counts),
            "rates": dict(self.rates),
            "flags": list(self.flags),
            "provenance": dict(self.provenance),
            "claims": [c.__dict__ for c in self.claims],
            "verdicts": [v.to_dict() for v in self.verdicts],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JudgeReport":
        return cls(
            d["note_id"], dict(d["scores"]), dict(d["counts"]), dict(d["rates"]),
            [Claim(**c) for c in d.get("claims", [])],
            [ClaimVerdict(v["claim_id"], v["label"], v.get("quote"), v.get("turn"), v.get("downgraded", False))
             for v in d.get("verdicts", [])],
            list(d.get("flags", [])), dict(d.get("provenance", {})),
        )


def verdict_summary(claims: ClaimSet, verdicts: Sequence[ClaimVerdict]) -> str:
    by_id = {c.id: c for c in claims.claims}
    lines = [f"{label}: {sum(v.label == label for v in verdicts)}" for label in LABELS]
    for v in verdicts:
        if v.label != "supported":
            lines.append(f"- {v.label} [{v.claim_id}] {by_id[v.claim_id].statement}")
    return "\n".join(lines)


def _int_field(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SchemaError(f"{name} is not a number: {value!r}")
    return int(round(value))


def _parse_scores(obj: Any) -> tuple[dict[str, int], dict[str, int], list[str]]:
    if not isinstance(obj, Mapping):
        raise SchemaError("expected a JSON object")
    scores_raw, counts_raw = obj.get("scores"), obj.get("counts")
    if not isinstance(scores_raw, Mapping) or not isinstance(counts_raw, Mapping):
        raise SchemaError("expected 'scores' and 'counts' objects")
    flags = []
    scores, counts = {}, {}
    for k in SCALED:
        if k not in scores_raw:
            raise SchemaError(f"missing score {k!r}")
        v = _int_field(scores_raw[k], k)
        if not 1 <= v <= 5:
            log.warning("%s score %s out of range; clamped", k, v)
            flags.append(f"clamped:{k}")
            v = min(max(v, 1), 5)
        scores[k] = v
    for k in COUNTS:
        if k not in counts_raw:
            raise SchemaError(f"missing count {k!r}")
        v = _int_field(counts_raw[k], k)
        if v < 0:
            log.warning("%s count %s negative; clamped to 0", k, v)
            flags.append(f"clamped:{k}")
            v = 0
        counts[k] = v
    return scores, counts, flags


def score_dimensions(claims: ClaimSet, verdicts: Sequence[ClaimVerdict], note: SoapNote,
                     transcript: DialogueTranscript, gateway, *, retries: int = 2,
                     template_dir: str | None = None) -> JudgeReport:
    """Scores and counts come from the model; the two rates are recounted from the verdicts."""
    if len(verdicts) != len(claims.claims):
        raise JudgeError(f"{claims.note_id}: {len(verdicts)} verdicts for {len(claims.claims)} claims")
    system, user = load_template("judge_scores.v1", template_dir).render(
        transcript=numbered_transcript(transcript), note=note.sections_json(),
        verdicts=verdict_summary(claims, verdicts))
    req = ChatRequest.simple(system, user, temperature=0.0, max_tokens=1024,
                             metadata={"task": "scores", "dialogue_id": claims.note_id})
    try:
        scores, counts, flags = _ask(gateway, req, lambda r: _parse_scores(_json_reply(r)), retries,
                                     f"{claims.note_id} scoring")
    except NoteError as exc:
        raise JudgeError(str(exc)) from exc
    if not claims.claims:
        flags.append("no_claims")
    if claims.empty_note:
        flags.append("empty_note")
    if any(v.downgraded for v in verdicts):
        flags.append("evidence_downgrades")
    provenance = {k: "model" for k in SCALED + COUNTS}
    provenance.update({k: "local" for k in RATES})
    return JudgeReport(claims.note_id, scores, counts, claim_rates(verdicts), list(claims.claims),
                       list(verdicts), flags, provenance)


def judge_note(note: SoapNote, transcript: DialogueTranscript, gateway, *, note_id: str | None = None,
               retries: int = 2, template_dir: str | None = None) -> JudgeReport:
    claims = extract_claims(note, gateway, note_id=note_id or transcript.dialogue_id, retries=retries,
                            template_dir=template_dir)
    verdicts = label_claims(claims, transcript, gateway, retries=retries,
                            template_dir=template_dir) if claims.claims else []
    return score_dimensions(claims, verdicts, note, transcript, gateway, retries=retries,
                            template_dir=template_dir)


# ---------------------------------------------------------------------------
# Aggregation


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int
    flag: str | None = None

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def summarize(values: Sequence[float], *, bootstrap: int = 0, seed: int = 0) -> Aggregate:
    """Mean, sample std and a 95% interval (normal approximation, or percentile bootstrap)."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise JudgeError("cannot aggregate zero values")
    mean = float(x.mean())
    if x.size == 1:
        return Aggregate(mean, 0.0, mean, mean, 1, "n=1")
    std = float(x.std(ddof=1))
    if bootstrap:
        rng = np.random.default_rng(seed)
        means = x[rng.integers(0, x.size, size=(bootstrap, x.size))].mean(axis=1)
        lo, hi = np.percentile(means, [2.5, 97.5])
        return Aggregate(mean, std, float(lo), float(hi), int(x.size), "bootstrap")
    half = 1.96 * std / math.sqrt(x.size)
    return Aggregate(mean, std, mean - half, mean + half, int(x.size))


def aggregate(reports: Sequence[JudgeReport], *, bootstrap: int = 0, seed: int = 0) -> dict[str, Aggregate]:
    if not reports:
        raise JudgeError("no judge reports to aggregate")
    # sorted so the bootstrap resampling does not depend on report order
    ordered = sorted(reports, key=lambda r: r.note_id)
    return {dim: summarize(sorted(r.value(dim) for r in ordered), bootstrap=bootstrap, seed=seed)
            for dim in DIMENSIONS}


_TABLE_COLUMNS = [("faithfulness", "Faith."), ("coverage", "Cov."), ("structure", "Struct."),
                  ("conciseness", "Conc."), ("unsupported_claim_rate", "Unsup."),
                  ("contradiction_rate", "Contra.")]


def comparison_table(systems: Mapping[str, Mapping[str, Aggregate]]) -> str:
    """Plain-text comparison of systems, mean with CI half-width per column."""
    head = ["System"] + [h for _, h in _TABLE_COLUMNS]
    rows = [head]
    for name, agg in systems.items():
        rows.append([name] + [f"{agg[d].mean:.2f} ±{agg[d].half_width:.2f}" for d, _ in _TABLE_COLUMNS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def comparison_csv(systems: Mapping[str, Mapping[str, Aggregate]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "dimension", "mean", "std", "ci_low", "ci_high", "n"])
    for name, agg in systems.items():
        for dim in DIMENSIONS:
            a = agg[dim]
            w.writerow([name, dim, f"{a.mean:.6f}", f"{a.std:.6f}", f"{a.ci_low:.6f}", f"{a.ci_high:.6f}", a.n])
    return buf.getvalue()
