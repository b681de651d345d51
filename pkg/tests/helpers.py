"""Builders shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np

from convoforge.acoustics import AudioBuffer, RoomSpec
from convoforge.dialogue import DialogueTranscript, Turn
from convoforge.scene import SceneTimeline, SpeechSegment

FS = 16000


def make_transcript(lines, dialogue_id: str = "dev-00000") -> DialogueTranscript:
    """Alternating doctor/patient transcript from plain strings."""
    turns = [Turn.from_text(i, "doctor" if i % 2 == 0 else "patient", t) for i, t in enumerate(lines)]
    return DialogueTranscript(dialogue_id, tuple(turns), "end_marker")


def speechlike(duration: float, seed: int = 0, fs: int = FS) -> AudioBuffer:
    """Band-limited noise with a 4 Hz syllable envelope and short pauses."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    carrier = np.convolve(rng.standard_normal(n), np.hanning(9), mode="same")
    env = np.clip(np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 6.3)), 0, None) ** 0.5
    env *= (np.sin(2 * np.pi * 0.3 * t) > -0.8)
    x = carrier * env
    return AudioBuffer(0.5 * x / np.max(np.abs(x)), fs)


def identity_rir(fs: int = FS) -> AudioBuffer:
    return AudioBuffer(np.array([1.0]), fs)


def two_speaker_timeline(d_doc: float, d_pat: float, gap: float = 0.5) -> SceneTimeline:
    segs = (SpeechSegment(0, "doctor", 0.0, d_doc, 1.0, "doc.wav"),
            SpeechSegment(1, "patient", d_doc + gap, d_pat, 1.0, "pat.wav"))
    return SceneTimeline(segs, (), d_doc + gap + d_pat)


def random_room(rng: np.random.Generator, absorption: float | None = None, max_order: int | None = None) -> RoomSpec:
    dims = tuple(float(v) for v in rng.uniform([2.5, 2.0, 2.2], [8.0, 6.0, 3.5]))

    def inside():
        return tuple(float(rng.uniform(0.2, L - 0.2)) for L in dims)

    mic, src = inside(), inside()
    while np.linalg.norm(np.subtract(mic, src)) < 0.3:
        src = inside()
    return RoomSpec(dims, absorption if absorption is not None else float(rng.uniform(0.1, 0.9)),
                    max_order if max_order is not None else int(rng.integers(0, 6)), 343.0, (src,), mic)


def brute_force_images(room: RoomSpec, source_index: int = 0) -> set[tuple[float, float, float]]:
    """Image positions found by repeatedly mirroring across the six walls (breadth-first)."""
    frontier = {tuple(round(c, 9) for c in room.sources[source_index])}
    seen = set(frontier)
    for _ in range(room.max_order):
        nxt = set()
        for p in frontier:
            for axis, L in enumerate(room.dimensions):
                for wall in (0.0, L):
                    q = list(p)
                    q[axis] = round(2 * wall - q[axis], 9)
                    q = tuple(q)
                    if q not in seen:
                        nxt.add(q)
        seen |= nxt
        frontier = nxt
    return seen


def image_parity_count(max_order: int) -> int:
    """Number of shoebox images with total reflection order <= N, by counting per-axis orders."""
    axis_orders = [abs(2 * n - p) for n in range(-max_order - 1, max_order + 2) for p in (0, 1)]
    axis_orders = [k for k in axis_orders if k <= max_order]
    return sum(1 for a, b, c in itertools.product(axis_orders, repeat=3) if a + b + c <= max_order)


def unique_word_transcript(rng, n_turns: int, words_per_turn: int = 12, dialogue_id: str = "dev-00000"):
    """Transcript whose every word is unique to its turn, so any span identifies its turn."""
    lines = []
    for t in range(n_turns):
        words = [f"t{t}w{k}" for k in range(words_per_turn)]
        if rng.random() < 0.3:
            words[0] = words[0].capitalize()
        if rng.random() < 0.3:
            words[-1] += "."
        if rng.random() < 0.3:
            words.insert(int(rng.integers(0, len(words))), "(typing)")
        lines.append(" ".join(words))
    return make_transcript(lines, dialogue_id)


def corrupted_fact_table(rng, transcript, n_facts: int, corrupt_prob: float = 0.4):
    """Random fact table over ``transcript`` plus the set of fact ids that were corrupted.

    Corruptions: a quote word swapped for one absent from the turn, a citation moved
    to another turn, or a citation outside the transcript. Benign edits (case,
    punctuation, curly apostrophes) are applied to clean facts and must not be flagged.
    """
    from convoforge.notes import FactTable, Fact

    facts, corrupted = [], set()
    n_turns = len(transcript.turns)
    for i in range(n_facts):
        turn = int(rng.integers(0, n_turns))
        words = transcript.turns[turn].clean_text.split()
        a = int(rng.integers(0, len(words)))
        b = int(rng.integers(a + 1, len(words) + 1))
        span = words[a:b]
        cited = turn
        fid = f"f{i + 1}"
        if rng.random() < corrupt_prob:
            kind = rng.integers(0, 3)
            if kind == 0:
                span = list(span)
                span[int(rng.integers(0, len(span)))] = f"zz{int(rng.integers(0, 10**6))}"
            elif kind == 1 and n_turns > 1:
                cited = int((turn + rng.integers(1, n_turns)) % n_turns)
            else:
                cited = int(rng.choice([-1 - int(rng.integers(0, 3)), n_turns + int(rng.integers(0, 5))]))
            corrupted.add(fid)
        else:
            edit = rng.integers(0, 4)
            if edit == 1:
                span = [w.upper() for w in span]
            elif edit == 2:
                span = [w + "," for w in span]
            elif edit == 3:
                span = ["“" + span[0]] + span[1:]
        facts.append(Fact(fid, f"Statement {i}", " ".join(span), cited, "history"))
    return FactTable(transcript.dialogue_id, tuple(facts)), corrupted
