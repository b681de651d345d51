"""Deterministic offline chat backend.

``MockLLM`` answers every prompt the pipeline sends (dialogue turns, fact
tables, notes, claims, verdicts, scores, event mapping) with plausible,
well-formed output. Replies are a pure function of the request: routing uses
``request.metadata["task"]`` and the content is parsed back out of the prompt.
"""

from __future__ import annotations

import json
import math
import random
import re
from pathlib import Path
from typing import Any, Mapping, Sequence

from .dialogue import END_MARKER, SPEAKERS, parse_stage_directions
from .gateway import ChatRequest, GatewayError
from .metrics import normalize
from .util import derive_seed, extract_json

_HISTORY_LINE = re.compile(r"^\[(\d+)\] (DOCTOR|PATIENT): (.*)$", re.MULTILINE)
_PERSONA_LINE = re.compile(r"^- ([a-z ]+): (.+)$", re.MULTILINE)
_QUOTED = re.compile(r'"([^"]+)"')

_QUESTIONS = [
    ("worse", "Does anything make it better or worse?"),
    ("fever", "Have you had any fever or chills?"),
    ("meds", "Are you taking any medications right now?"),
    ("allergy", "Do you have any allergies to medications?"),
    ("family", "Does anyone in your family have heart disease or diabetes?"),
    ("habits", "Do you smoke or drink alcohol?"),
    ("sleep", "How have you been sleeping?"),
    ("appetite", "Any nausea or changes in your appetite?"),
    ("breath", "Have you noticed any shortness of breath?"),
    ("work", "Is this affecting your work at all?"),
]

_ANSWERS = {
    "worse": ["Resting helps a little, but it gets worse in the evening.",
              "It gets worse when I'm busy at work, and lying down helps."],
    "fever": ["No fever, no chills.", "I felt a bit warm two nights ago but I didn't check."],
    "meds": ["Just a multivitamin, and ibuprofen now and then.", "No, I'm not taking anything regularly."],
    "allergy": ["I'm allergic to penicillin, I get a rash.", "No allergies that I know of."],
    "family": ["My father has diabetes.", "My mother had high blood pressure, nothing else I know of."],
    "habits": ["I don't smoke, and I drink maybe a glass of wine on weekends.",
               "I quit smoking five years ago. I don't really drink."],
    "sleep": ["Not great, I wake up a few times every night.", "I sleep okay, about seven hours."],
    "appetite": ["No nausea, my appetite is fine.", "I haven't been very hungry this week."],
    "breath": ["No, my breathing has been fine.", "Only when I climb the stairs at home."],
    "work": ["It's hard to focus at work as an {occupation}.", "A little, I had to leave early twice."],
}

_DIRECTIONS = {
    "doctor": ["typing", "paper rustling", "clicks pen", "chair creaks", "clears throat", "mouse click",
               "writes", "page turn"],
    "patient": ["coughs", "sighs", "sniffles", "shifts in chair", "clears throat", "zipper", "phone buzzes",
                "laughs"],
}


def _persona(text: str) -> dict[str, str]:
    return {k.strip(): v.strip() for k, v in _PERSONA_LINE.findall(text)}


def _history(text: str) -> list[tuple[int, str, str]]:
    return [(int(i), who.lower(), body) for i, who, body in _HISTORY_LINE.findall(text)]


def _fenced_json(text: str) -> Any:
    return extract_json(text[text.index("```"):]) if "```" in text else extract_json(text)


def _dialogue_length(key: str) -> int:
    # even turn count so the doctor closes, 20-36 turns
    return 2 * (10 + derive_seed("mock-length", key) % 9)


def _with_direction(text: str, role: str, rng: random.Random, rate: float) -> str:
    if rng.random() >= rate:
        return text
    d = rng.choice(_DIRECTIONS[role])
    if rng.random() < 0.5:
        return f"({d}) {text}"
    words = text.split()
    cut = rng.randint(1, max(1, len(words) - 1))
    return " ".join(words[:cut] + [f"({d})"] + words[cut:])


def _doctor_turn(k: int, length: int, doctor: Mapping[str, str], rng: random.Random) -> str:
    j, last_j = k // 2, (length - 2) // 2
    surname = doctor.get("name", "Doctor Smith").split()[-1]
    if j == 0:
        return f"Hello, I'm Dr. {surname}. Nice to meet you. What brings you in today?"
    if j == 1:
        return "I see. How long has that been going on?"
    if j == last_j:
        return "Alright, take care. The front desk will help you schedule the follow-up visit."
    if j == last_j - 1:
        return ("I'd like to get some blood work and see you back in two weeks. "
                "In the meantime, try ibuprofen with food for the discomfort.")
    if j == last_j - 2:
        bp = f"{rng.randint(112, 138)} over {rng.randint(70, 88)}"
        return f"Let me take a quick look. Your blood pressure is {bp}, and your lungs sound clear."
    order = list(range(len(_QUESTIONS)))
    random.Random(derive_seed("mock-questions", surname)).shuffle(order)
    return _QUESTIONS[order[(j - 2) % len(order)]][1]


def _patient_turn(k: int, last_doctor: str, patient: Mapping[str, str], rng: random.Random) -> str:
    complaint = patient.get("reason for visit", "some pain")
    if k == 1:
        text = f"Hi, doctor. I've been having {complaint}, and it's been bothering me."
    elif "How long" in last_doctor:
        text = f"About {rng.randint(2, 9)} {rng.choice(['days', 'weeks'])} now."
    elif "quick look" in last_doctor:
        text = "Okay, sure."
    elif "blood work" in last_doctor:
        text = "That sounds good. I can do the blood work this week."
    elif "take care" in last_doctor:
        text = "Thank you, doctor. See you in two weeks."
    else:
        key = next((key for key, q in _QUESTIONS if q == last_doctor), None)
        text = rng.choice(_ANSWERS[key]) if key else "I'm not sure, to be honest."
        text = text.format(occupation=patient.get("occupation", "employee"))
    forgetful = patient.get("forgetfulness", "")
    if ("very" in forgetful or "moderately" in forgetful) and k > 1 and rng.random() < 0.3:
        text = "Hmm, let me think. " + text
    if "very hurried" in patient.get("hurriedness", "") and rng.random() < 0.2:
        text += " Sorry, I'm in a bit of a rush today."
    return text


def _category(speaker: str, text: str, prev_doctor: str) -> str:
    low = text.lower()
    if speaker == "doctor":
        if "blood pressure" in low or "lungs" in low:
            return "exam"
        if "blood work" in low or "ibuprofen" in low:
            return "plan"
        if "front desk" in low or "schedule" in low:
            return "admin"
        return "other"
    if any(w in prev_doctor.lower() for w in ("medication", "allerg", "family", "smoke")):
        return "history"
    if "blood work" in prev_doctor or "take care" in prev_doctor:
        return "admin"
    if "quick look" in prev_doctor:
        return "other"
    return "symptom"


_NEGATION = re.compile(r"\b(no|not|don't|haven't|didn't|nothing)\b", re.IGNORECASE)


class MockLLM:
    """Offline chat backend; ``script`` optionally fixes the dialogue turns.

    ``script`` is either a list of turn texts shared by every dialogue (indexed
    by turn number) or a mapping from dialogue id to such a list. Once a script
    runs out the end marker is returned.
    """

    def __init__(self, script: Sequence[str] | Mapping[str, Sequence[str]] | None = None,
                 direction_rate: float = 0.3):
        self.script = script
        self.direction_rate = direction_rate

    @classmethod
    def from_script_file(cls, path: str | Path) -> "MockLLM":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        turns = doc.get("turns") if isinstance(doc, dict) else doc
        if not isinstance(turns, (list, dict)):
            raise GatewayError(f"script {path} needs a 'turns' list or mapping")
        return cls(turns, float(doc.get("direction_rate", 0.3)) if isinstance(doc, dict) else 0.3)

    def chat(self, request: ChatRequest) -> str:
        task = request.metadata.get("task")
        handler = getattr(self, f"_task_{task}", None)
        if handler is None:
            raise GatewayError(f"mock backend cannot answer task {task!r}")
        return handler(request)

    # -- dialogue -------------------------------------------------------

    def _scripted(self, dialogue_id: str | None, index: int) -> str | None:
        if self.script is None:
            return None
        turns = self.script.get(dialogue_id, []) if isinstance(self.script, Mapping) else self.script
        return turns[index] if index < len(turns) else END_MARKER

    def _turn_text(self, key: str, index: int, role: str, own: Mapping[str, str],
                   history: Sequence[tuple[int, str, str]]) -> str:
        length = _dialogue_length(key)
        if index >= length:
            return END_MARKER
        rng = random.Random(derive_seed("mock-turn", key, index))
        if role == "doctor":
            text = _doctor_turn(index, length, own, rng)
        else:
            last = next((parse_stage_directions(b)[0] for _, who, b in reversed(history) if who == "doctor"), "")
            text = _patient_turn(index, last, own, rng)
        return _with_direction(text, role, rng, self.direction_rate)

    def _task_turn(self, request: ChatRequest) -> str:
        meta = request.metadata
        index = int(meta.get("turn_index", 0))
        scripted = self._scripted(meta.get("dialogue_id"), index)
        if scripted is not None:
            return scripted
        prompt = request.prompt
        persona_block = prompt.split("Conversation so far:")[0]
        key = meta.get("dialogue_id") or persona_block
        return self._turn_text(key, index, meta.get("role", SPEAKERS[index % 2]), _persona(persona_block),
                               _history(prompt))

    def _task_dialogue(self, request: ChatRequest) -> str:
        prompt = request.prompt
        doc_block, _, pat_block = prompt.partition("Patient persona:")
        personas = {"doctor": _persona(doc_block), "patient": _persona(pat_block)}
        key = request.metadata.get("dialogue_id") or prompt
        lines, history = [], []
        for index in range(10_000):
            role = SPEAKERS[index % 2]
            scripted = self._scripted(request.metadata.get("dialogue_id"), index)
            text = scripted if scripted is not None else self._turn_text(key, index, role, personas[role], history)
            if text == END_MARKER:
                break
            history.append((index, role, text))
            lines.append(f"{role.upper()}: {text}")
        return "\n".join(lines)

    # -- notes ----------------------------------------------------------

    def _task_facts(self, request: ChatRequest) -> str:
        facts = []
        prev_doctor = ""
        for index, speaker, raw in _history(request.prompt):
            clean, _ = parse_stage_directions(raw)
            if not clean:
                continue
            # the longest sentence carries the content; greetings and fillers are short
            sentence = max(re.split(r"(?<=[.!?])\s+", clean), key=len)
            quote = " ".join(sentence.split()[:12])
            category = _category(speaker, clean, prev_doctor)
            if speaker == "doctor":
                prev_doctor = clean
            if category == "other":
                continue
            if speaker == "doctor":
                statement = f'Doctor states "{quote}".'
            elif index == 1:
                statement = f'Chief complaint, in the patient\'s words: "{quote}".'
            else:
                statement = f'Patient reports "{quote}".'
            facts.append({"id": f"f{len(facts) + 1}", "statement": statement, "quote": quote,
                          "turn": index, "category": category})
        return json.dumps({"facts": facts})

    def _task_note(self, request: ChatRequest) -> str:
        facts = _fenced_json(request.prompt)
        note: dict[str, list[str]] = {s: [] for s in ("hpi", "ros", "objective", "assessment", "plan")}
        for f in facts:
            cat, statement = f["category"], f["statement"]
            if cat == "symptom" and _NEGATION.search(f["quote"]):
                note["ros"].append(statement)
            elif cat in ("symptom", "history"):
                note["hpi"].append(statement)
            elif cat == "exam":
                note["objective"].append(statement)
            elif cat == "plan":
                note["plan"].append(statement)
        if note["hpi"]:
            first = _QUOTED.search(note["hpi"][0])
            if first:
                note["assessment"].append(f'Presenting concern as described: "{first.group(1)}".')
        return json.dumps(note)

    # -- judge ----------------------------------------------------------

    def _task_claims(self, request: ChatRequest) -> str:
        note = _fenced_json(request.prompt)
        claims = []
        for section in ("hpi", "ros", "objective", "assessment", "plan"):
            for statement in note.get(section, []):
                claims.append({"id": f"c{len(claims) + 1}", "statement": statement, "section": section})
        return json.dumps({"claims": claims})

    def _task_labels(self, request: ChatRequest) -> str:
        transcript_part, _, claims_part = request.prompt.partition("Claims:")
        turns = [(i, f" {normalize(parse_stage_directions(raw)[0])} ") for i, _, raw in _history(transcript_part)]
        verdicts = []
        for claim in _fenced_json(claims_part):
            m = _QUOTED.search(claim["statement"])
            hit = None
            if m:
                needle = f" {normalize(m.group(1))} "
                hit = next((i for i, text in turns if needle.strip() and needle in text), None)
            if hit is None:
                verdicts.append({"id": claim["id"], "label": "unsupported"})
            else:
                verdicts.append({"id": claim["id"], "label": "supported", "quote": m.group(1), "turn": hit})
        return json.dumps({"verdicts": verdicts})

    def _task_scores(self, request: ChatRequest) -> str:
        prompt = request.prompt
        counts = {label: int(n) for label, n in re.findall(r"^(supported|unsupported|contradicted): (\d+)$",
                                                            prompt, re.MULTILINE)}
        total = sum(counts.values())
        bad = counts.get("unsupported", 0) + counts.get("contradicted", 0)
        faith = 5 if bad == 0 else max(1, 5 - math.ceil(4 * bad / max(total, 1)))
        note_part = prompt.split("Note:")[-1].split("Claim check summary:")[0]
        try:
            note = _fenced_json(note_part)
            empty = sum(1 for v in note.values() if not v)
        except ValueError:
            empty = 0
        scores = {"faithfulness": faith, "structure": 5 if empty == 0 else 4,
                  "coverage": max(1, 5 - empty), "conciseness": 4}
        tallies = {"over_medicalization": 0, "under_medicalization": 0, "over_specificity": 0,
                   "missed_relevant_facts": empty, "critical_omissions": 0, "duplicated_content": 0}
        return json.dumps({"scores": scores, "counts": tallies})

    # -- scene ----------------------------------------------------------

    def _task_events(self, request: ChatRequest) -> str:
        system = request.messages[0].content
        labels = system.rsplit(":", 1)[-1].split(",")
        m = re.search(r"Stage direction: \((.*)\)", request.prompt)
        words = set(normalize(m.group(1)).split()) if m else set()
        for label in (x.strip() for x in labels):
            if words & set(label.split("_")):
                return label
        return "none"
