"""Scene composition: voice casting, turn-taking gaps, event placement and the timeline file."""

from __future__ import annotations

import io
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import SAMPLE_RATE
from .acoustics import AudioBuffer, read_wav
from .dialogue import DialogueTranscript, Turn, parse_stage_directions
from .events import EventCatalog
from .gateway import AlignmentResult, ChatRequest
from .personas import Persona
from .util import ConvoforgeError, derive_seed

log = logging.getLogger(__name__)

TIME_TOL = 2e-6  # seconds; covers the 6-digit rounding of onset, duration and total in timeline files


class CastingError(ConvoforgeError):
    pass


class CompositionError(ConvoforgeError):
    pass


# ---------------------------------------------------------------------------
# Voice bank and casting


@dataclass(frozen=True)
class VoiceEntry:
    id: str
    gender: str
    split: str | None = None  # None: free to be assigned to any split
    path: str | None = None  # None: synthesized reference

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def synthetic_reference(entry: VoiceEntry, sample_rate: int = SAMPLE_RATE, duration: float = 1.0) -> AudioBuffer:
    """Stand-in reference clip: a vowel-like harmonic tone whose pitch depends on gender and id."""
    base = 210.0 if entry.gender == "female" else 115.0
    f0 = base * (0.85 + 0.3 * (derive_seed("voice", entry.id) % 1000) / 1000)
    t = np.arange(int(duration * sample_rate)) / sample_rate
    x = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, 6))
    x *= np.hanning(t.size)
    return AudioBuffer(0.5 * x / np.max(np.abs(x)), sample_rate)


@dataclass
class VoiceBank:
    entries: list[VoiceEntry]
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise CastingError("voice bank has duplicate entry ids")

    def __len__(self) -> int:
        return len(self.entries)

    def reference(self, entry: VoiceEntry, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
        if entry.path is None:
            return synthetic_reference(entry, sample_rate)
        path = Path(entry.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return read_wav(path)

    @classmethod
    def load(cls, path: str | Path) -> "VoiceBank":
        """JSONL, one ``{"id", "gender", "split"?, "path"?}`` object per line."""
        path = Path(path)
        entries = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            d = json.loads(line)
            try:
                entries.append(VoiceEntry(d["id"], d["gender"], d.get("split"), d.get("path")))
            except KeyError as exc:
                raise CastingError(f"{path}:{n}: voice entry lacks {exc}") from None
        return cls(entries, path.parent)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.entries)


def voice_needs(personas: Iterable[Persona]) -> dict[tuple[str, str], int]:
    needs: dict[tuple[str, str], int] = {}
    for p in personas:
        needs[(p.split, p.gender)] = needs.get((p.split, p.gender), 0) + 1
    return needs


def synthetic_voice_bank(needs: Mapping[tuple[str, str], int], spare: int = 0) -> VoiceBank:
    """Bank with exactly enough split-reserved voices per (split, gender), plus ``spare`` each."""
    entries = []
    for (split, gender), n in sorted(needs.items()):
        for k in range(n + spare):
            entries.append(VoiceEntry(f"synth-{split}-{gender}-{k:03d}", gender, split))
    return VoiceBank(entries)


@dataclass(frozen=True)
class CastVoice:
    voice_id: str
    reference: AudioBuffer
    gender: str
    split: str


class VoiceAssignment(Mapping[str, CastVoice]):
    """Frozen persona id -> voice map."""

    def __init__(self, mapping: Mapping[str, CastVoice]):
        self._map = MappingProxyType(dict(mapping))

    def __getitem__(self, key: str) -> CastVoice:
        return self._map[key]

    def __iter__(self):
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def to_dict(self) -> dict:
        return {pid: {"voice_id": v.voice_id, "gender": v.gender, "split": v.split}
                for pid, v in sorted(self._map.items())}


def cast_voices(personas: Sequence[Persona], bank: VoiceBank, seed: int,
                sample_rate: int = SAMPLE_RATE) -> VoiceAssignment:
    """Gender-matched voices, never reused, drawn per split in a seeded random order.

    Bank entries tagged with a split only serve that split; untagged entries are
    shared, but any one voice ends up in at most one split.
    """
    used: set[str] = set()
    out: dict[str, CastVoice] = {}
    groups: dict[tuple[str, str], list[Persona]] = {}
    for p in personas:
        groups.setdefault((p.split, p.gender), []).append(p)
    # reserved voices first so the shared pool is only drawn on for real shortfalls
    for (split, gender) in sorted(groups):
        people = sorted(groups[(split, gender)], key=lambda p: p.id)
        reserved = [e for e in bank.entries if e.gender == gender and e.split == split and e.id not in used]
        shared = [e for e in bank.entries if e.gender == gender and e.split is None and e.id not in used]
        rng = random.Random(derive_seed("cast", seed, split, gender))
        rng.shuffle(reserved)
        rng.shuffle(shared)
        pool = reserved + shared
        if len(pool) < len(people):
            raise CastingError(
                f"split {split!r} needs {len(people)} {gender} voices but the bank has only {len(pool)} available")
        for person, entry in zip(people, pool):
            used.add(entry.id)
            out[person.id] = CastVoice(entry.id, bank.reference(entry, sample_rate), gender, split)
    return VoiceAssignment(out)


# ---------------------------------------------------------------------------
# Turn taking


@dataclass(frozen=True)
class TurnTakingPolicy:
    """Gap between the end of one turn and the start of the next (negative = overlap).

    kind ``constant`` uses ``gap``; ``explicit`` uses ``gaps[k-1]`` for turn k;
    ``stochastic`` draws a lognormal pause (median ``pause_median``) or, with
    probability ``overlap_prob``, a uniform overlap from ``overlap_range``.
    """

    kind: str = "stochastic"
    gap: float = 0.0
    gaps: tuple[float, ...] = ()
    pause_median: float = 0.4
    pause_sigma: float = 0.5
    overlap_prob: float = 0.15
    overlap_range: tuple[float, float] = (0.1, 0.7)
    max_overlap: float = 0.7
    max_pause: float = 3.0

    def __post_init__(self):
        if self.kind not in ("constant", "stochastic", "explicit"):
            raise CompositionError(f"unknown turn-taking policy {self.kind!r}")
        if self.max_overlap < 0 or self.max_pause < 0:
            raise CompositionError("max_overlap and max_pause must be non-negative")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise CompositionError("overlap_prob must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TurnTakingPolicy":
        d = dict(d)
        if "gaps" in d:
            d["gaps"] = tuple(float(g) for g in d["gaps"])
        if "overlap_range" in d:
            d["overlap_range"] = tuple(float(g) for g in d["overlap_range"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["gaps"] = list(self.gaps)
        d["overlap_range"] = list(self.overlap_range)
        return d

    def draw(self, k: int, rng: random.Random) -> float:
        if self.kind == "constant":
            return self.gap
        if self.kind == "explicit":
            if k - 1 >= len(self.gaps):
                raise CompositionError(f"explicit policy has no gap for turn {k}")
            return self.gaps[k - 1]
        if rng.random() < self.overlap_prob:
            return -rng.uniform(*self.overlap_range)
        return rng.lognormvariate(math.log(self.pause_median), self.pause_sigma)


@dataclass(frozen=True)
class TurnSlot:
    onset: float
    gap: float  # applied before this turn; 0 for the first


def plan_turn_taking(transcript: DialogueTranscript | int, durations: Sequence[float],
                     policy: TurnTakingPolicy, seed: int) -> list[TurnSlot]:
    n = transcript if isinstance(transcript, int) else len(transcript.turns)
    if len(durations) != n:
        raise CompositionError(f"need one duration per turn: {n} turns, {len(durations)} durations")
    rng = random.Random(derive_seed("turn-taking", seed))
    slots: list[TurnSlot] = []
    end = 0.0
    for k, dur in enumerate(durations):
        if dur < 0:
            raise CompositionError(f"turn {k} has negative duration")
        if k == 0:
            slots.append(TurnSlot(0.0, 0.0))
        else:
            # an overlap may never reach back past the previous turn's onset
            lo = -min(policy.max_overlap, durations[k - 1])
            g = min(max(policy.draw(k, rng), lo), policy.max_pause)
            slots.append(TurnSlot(end + g, g))
        end = slots[-1].onset + dur
    return slots


# ---------------------------------------------------------------------------
# Timeline


@dataclass(frozen=True)
class SpeechSegment:
    turn: int
    speaker: str
    onset: float
    duration: float
    gain: float
    source: str

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class EventPlacement:
    label: str
    onset: float
    duration: float
    gain: float
    source: str
    turn: int | None = None  # None for ambient filler

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class SceneTimeline:
    speech: list[SpeechSegment]
    events: list[EventPlacement]
    total_duration: float
    max_overlap: float = 0.7

    def items(self) -> list[SpeechSegment | EventPlacement]:
        return [*self.speech, *self.events]

    def validate(self) -> None:
        for item in self.items():
            if item.onset < -TIME_TOL or item.duration < 0:
                raise CompositionError(f"item has negative onset or duration: {item}")
            if item.end > self.total_duration + TIME_TOL:
                raise CompositionError(f"item ends after the scene ({self.total_duration:.6f} s): {item}")
        ordered = sorted(self.speech, key=lambda s: s.turn)
        for a, b in zip(ordered, ordered[1:]):
            if b.onset < a.onset - TIME_TOL:
                raise CompositionError(f"turn {b.turn} starts before turn {a.turn}")
            if a.end - b.onset > self.max_overlap + TIME_TOL:
                raise CompositionError(
                    f"turns {a.turn} and {b.turn} overlap by {a.end - b.onset:.3f} s (max {self.max_overlap} s)")

    def overlapping_pairs(self) -> list[tuple[int, int]]:
        ordered = sorted(self.speech, key=lambda s: s.turn)
        return [(a.turn, b.turn) for a, b in zip(ordered, ordered[1:]) if b.onset < a.end - TIME_TOL]

    def to_tsv(self) -> str:
        """Timeline file: tab-separated, seconds with 6 fractional digits."""
        buf = io.StringIO()
        buf.write(f"# total_duration={self.total_duration:.6f}\tmax_overlap={self.max_overlap:.6f}\n")
        buf.write("kind\tlabel\tturn\tonset\tduration\tgain\tsource\n")
        for s in sorted(self.speech, key=lambda s: s.turn):
            buf.write(f"speech\t{s.speaker}\t{s.turn}\t{s.onset:.6f}\t{s.duration:.6f}\t{s.gain:.6f}\t{s.source}\n")
        for e in sorted(self.events, key=lambda e: (e.onset, e.label, e.source)):
            turn = "-" if e.turn is None else str(e.turn)
            buf.write(f"event\t{e.label}\t{turn}\t{e.onset:.6f}\t{e.duration:.6f}\t{e.gain:.6f}\t{e.source}\n")
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "SceneTimeline":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# "):
            raise CompositionError("timeline file lacks its header line")
        header = dict(kv.split("=", 1) for kv in lines[0][2:].split("\t"))
        speech, events = [], []
        for n, line in enumerate(lines[2:], 3):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 7:
                raise CompositionError(f"timeline line {n}: expected 7 columns, got {len(cols)}")
            kind, label, turn, onset, dur, gain, source = cols
            if kind == "speech":
                speech.append(SpeechSegment(int(turn), label, float(onset), float(dur), float(gain), source))
            elif kind == "event":
                events.append(EventPlacement(label, float(onset), float(dur), float(gain), source,
                                             None if turn == "-" else int(turn)))
            else:
                raise CompositionError(f"timeline line {n}: unknown kind {kind!r}")
        return cls(speech, events, float(header["total_duration"]), float(header.get("max_overlap", 0.7)))


def speech_segments(transcript: DialogueTranscript, durations: Sequence[float], slots: Sequence[TurnSlot],
                    sources: Sequence[str] | None = None, gain: float = 1.0) -> list[SpeechSegment]:
    if sources is None:
        sources = [f"dry/turn_{t.index:03d}.wav" for t in transcript.turns]
    return [SpeechSegment(t.index, t.speaker, slot.onset, dur, gain, src)
            for t, dur, slot, src in zip(transcript.turns, durations, slots, sources)]


# ---------------------------------------------------------------------------
# Stage directions -> events


@dataclass(frozen=True)
class MappedTrigger:
    label: str
    turn: int
    offset: int
    direction: str


def llm_event_mapper(gateway, catalog: EventCatalog) -> Callable[[str], str | None]:
    """Fallback that asks a chat backend to pick a class label (or ``none``) for a direction."""
    labels = ", ".join(catalog.labels)

    def mapper(direction: str) -> str | None:
        request = ChatRequest.simple(
            "You map stage directions from a clinic conversation to sound event classes. "
            f"Answer with exactly one label from this list, or 'none' if no sound is implied: {labels}",
            f"Stage direction: ({direction})",
            temperature=0.0,
            metadata={"task": "events"},
        )
        answer = gateway.chat(request).strip().strip(".'\"`").lower()
        return answer if answer in catalog.classes else None

    return mapper


def map_triggers(turns: Iterable[Turn], catalog: EventCatalog,
                 fallback: Callable[[str], str | None] | None = None) -> list[MappedTrigger]:
    out = []
    for turn in turns:
        for d in turn.stage_directions:
            label = catalog.match(d.text)
            if label is None and fallback is not None:
                label = fallback(d.text)
            if label is None:
                log.warning("turn %d: no sound event for stage direction %r; dropped", turn.index, d.text)
                continue
            out.append(MappedTrigger(label, turn.index, d.offset, d.text))
    return out


def _pick_clip(catalog: EventCatalog, label: str, *key) -> str:
    pool = catalog.pool(label)
    return pool[derive_seed("clip-pick", *key) % len(pool)]


def heuristic_onset(segment: SpeechSegment, offset: int, text_length: int) -> float:
    frac = offset / text_length if text_length > 0 else 0.0
    t = segment.onset + frac * segment.duration
    return min(max(t, segment.onset), segment.end)


def aligned_onset(segment: SpeechSegment, turn: Turn, offset: int, alignment: AlignmentResult) -> float:
    """Onset of the first spoken word after the direction (segment end if none follows)."""
    before, _ = parse_stage_directions(turn.text[:offset])
    idx = len(before.split())
    if idx >= len(alignment.tokens):
        return segment.end
    t = segment.onset + alignment.tokens[idx].onset
    return min(max(t, segment.onset), segment.end)


def place_events(triggers: Sequence[MappedTrigger], segments: Sequence[SpeechSegment], catalog: EventCatalog,
                 transcript: DialogueTranscript, seed: int,
                 alignments: Mapping[int, AlignmentResult] | None = None,
                 sample_rate: int = SAMPLE_RATE) -> list[EventPlacement]:
    by_turn = {s.turn: s for s in segments}
    out = []
    for trig in triggers:
        seg = by_turn.get(trig.turn)
        if seg is None:
            raise CompositionError(f"trigger {trig.direction!r} refers to unscheduled turn {trig.turn}")
        turn = transcript.turns[trig.turn]
        if alignments is not None and trig.turn in alignments:
            onset = aligned_onset(seg, turn, trig.offset, alignments[trig.turn])
        else:
            onset = heuristic_onset(seg, trig.offset, len(turn.text))
        ref = _pick_clip(catalog, trig.label, seed, trig.turn, trig.offset)
        clip = catalog.clip(ref, sample_rate)
        out.append(EventPlacement(trig.label, onset, clip.duration, catalog.classes[trig.label].gain, ref, trig.turn))
    return out


def ambient_events(count: int, span: float, catalog: EventCatalog, seed: int,
                   sample_rate: int = SAMPLE_RATE) -> list[EventPlacement]:
    """``count`` background events from the ambient classes at uniform onsets within ``span``."""
    labels = catalog.ambient_labels() or catalog.labels
    rng = random.Random(derive_seed("ambient", seed))
    out = []
    for k in range(count):
        label = rng.choice(labels)
        ref = _pick_clip(catalog, label, seed, "ambient", k)
        dur = catalog.clip(ref, sample_rate).duration
        onset = rng.uniform(0.0, max(span - dur, 0.0))
        out.append(EventPlacement(label, onset, dur, catalog.classes[label].gain, ref, None))
    return out


def compose_timeline(segments: Sequence[SpeechSegment], placements: Sequence[EventPlacement],
                     catalog: EventCatalog | None = None, *, event_density: float | None = None,
                     seed: int = 0, max_overlap: float = 0.7, sample_rate: int = SAMPLE_RATE) -> SceneTimeline:
    """Merge speech and events into one validated timeline.

    With ``event_density`` set, ambient filler events top the scene up to a
    Poisson(density) draw, so the corpus mean approaches the density whenever
    triggered events are fewer than that.
    """
    events = list(placements)
    if event_density is not None and event_density > 0:
        if catalog is None:
            raise CompositionError("an event density needs an event catalog")
        target = int(np.random.default_rng(derive_seed("density", seed)).poisson(event_density))
        span = max((s.end for s in segments), default=0.0)
        events += ambient_events(max(0, target - len(events)), span, catalog, seed, sample_rate)
    items = [*segments, *events]
    total = max((i.end for i in items), default=0.0)
    tl = SceneTimeline(list(segments), events, total, max_overlap)
    tl.validate()
    return tl


@dataclass
class SceneConfig:
    policy: TurnTakingPolicy = field(default_factory=TurnTakingPolicy)
    event_density: float | None = 37.5
    speech_gain: float = 1.0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SceneConfig":
        return cls(
            policy=TurnTakingPolicy.from_dict(d.get("policy", {})),
            event_density=d.get("event_density", 37.5),
            speech_gain=float(d.get("speech_gain", 1.0)),
        )

    def to_dict(self) -> dict:
        return {"policy": self.policy.to_dict(), "event_density": self.event_density,
                "speech_gain": self.speech_gain}


def compose_scene(transcript: DialogueTranscript, durations: Sequence[float], catalog: EventCatalog,
                  config: SceneConfig, seed: int, *, fallback: Callable[[str], str | None] | None = None,
                  alignments: Mapping[int, AlignmentResult] | None = None,
                  sample_rate: int = SAMPLE_RATE) -> SceneTimeline:
    """Full composition for one dialogue, from utterance durations to a timeline."""
    slots = plan_turn_taking(transcript, durations, config.policy, seed)
    segments = speech_segments(transcript, durations, slots, gain=config.speech_gain)
    triggers = map_triggers(transcript.turns, catalog, fallback)
    placements = place_events(triggers, segments, catalog, transcript, seed, alignments, sample_rate)
    return compose_timeline(segments, placements, catalog, event_density=config.event_density, seed=seed,
                            max_overlap=config.policy.max_overlap, sample_rate=sample_rate)
