"""Deterministic text metrics: normalization, WER, ROUGE, concept F1, fog index, corpus statistics."""

from __future__ import annotations

import logging
import math
import re
import statistics
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .util import ConvoforgeError

log = logging.getLogger(__name__)


class MetricError(ConvoforgeError):
    pass


# ---------------------------------------------------------------------------
# Normalization

_ASCII_MAP = {
    # single quotes / apostrophes
    "‘": "'", "’": "'", "‚": "'", "‛": "'", "′": "'", "ʼ": "'",
    "`": "'", "´": "'",
    # double quotes
    "“": '"', "”": '"', "„": '"', "‟": '"', "″": '"', "«": '"', "»": '"',
    # dashes and minus
    "‐": "-", "‑": "-", "‒": "-", "–": "-", "—": "-", "―": "-", "−": "-",
    # ligatures NFKD leaves alone
    "æ": "ae", "Æ": "AE", "œ": "oe", "Œ": "OE", "ß": "ss",
    "ø": "o", "Ø": "O", "ł": "l", "Ł": "L",
    "…": "...",
}
_ASCII_TABLE = str.maketrans(_ASCII_MAP)

# standalone symbols spelled out as words
SYMBOL_WORDS = {
    "&": "and",
    "%": "percent",
    "+": "plus",
    "@": "at",
    "=": "equals",
    "#": "number",
    "$": "dollars",
}

_APOSTROPHE_KEEP = re.compile(r"(?<=[a-z0-9])'(?=[a-z0-9])")
_NON_WORD = re.compile(r"[^a-z0-9' ]+")


def ascii_fold(text: str) -> str:
    """Curly quotes to straight, unicode dashes to hyphen, ligatures and accents folded; ASCII out."""
    text = text.translate(_ASCII_TABLE)
    text = unicodedata.normalize("NFKD", text)
    text = text.translate(_ASCII_TABLE)
    return text.encode("ascii", "ignore").decode("ascii")


def transcript_norm(text: str) -> str:
    text = text.lower()
    tokens = []
    for tok in text.split():
        tokens.append(SYMBOL_WORDS.get(tok, tok))
    text = " ".join(tokens)
    # protect intra-word apostrophes, drop everything else that is not a word char
    text = _APOSTROPHE_KEEP.sub("\x00", text)
    text = text.replace("'", " ")
    text = text.replace("\x00", "'")
    text = _NON_WORD.sub(" ", text)
    return " ".join(text.split())


@dataclass(frozen=True)
class NormalizerChain:
    stages: tuple[Callable[[str], str], ...] = (ascii_fold, transcript_norm)

    def __call__(self, text: str) -> str:
        for stage in self.stages:
            text = stage(text)
        return text

    def tokens(self, text: str) -> list[str]:
        return self(text).split()


DEFAULT_CHAIN = NormalizerChain()


def normalize(text: str) -> str:
    return DEFAULT_CHAIN(text)


# ---------------------------------------------------------------------------
# WER


@dataclass(frozen=True)
class WerResult:
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int


def align_words(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """Levenshtein alignment counts (S, D, I); ties prefer match/substitution, then deletion."""
    n, m = len(ref), len(hyp)
    # each cell holds (cost, S, D, I)
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            c, s, d, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = (c, s, d, ins)
            else:
                best = (c + 1, s + 1, d, ins)
            c, s, d, ins = prev[j]
            if c + 1 < best[0]:
                best = (c + 1, s, d + 1, ins)
            c, s, d, ins = cur[j - 1]
            if c + 1 < best[0]:
                best = (c + 1, s, d, ins + 1)
            cur.append(best)
        prev = cur
    _, s, d, ins = prev[m]
    return s, d, ins


def wer(reference: str, hypothesis: str, chain: NormalizerChain = DEFAULT_CHAIN) -> WerResult:
    ref = chain.tokens(reference)
    hyp = chain.tokens(hypothesis)
    if not ref:
        raise MetricError("reference is empty after normalization")
    s, d, i = align_words(ref, hyp)
    return WerResult((s + d + i) / len(ref), s, d, i, len(ref))


# ---------------------------------------------------------------------------
# ROUGE


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float
    empty: bool = False


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


ROUGE_VARIANTS = ("R2", "R3", "RL")


def rouge_score(reference: str, hypothesis: str, variant: str = "R2",
                chain: NormalizerChain = DEFAULT_CHAIN) -> RougeScore:
    """ROUGE-N (clipped n-gram overlap) or ROUGE-L (token LCS) over normalized tokens, no stemming."""
    if variant not in ROUGE_VARIANTS:
        raise MetricError(f"unknown ROUGE variant {variant!r}")
    ref = chain.tokens(reference)
    hyp = chain.tokens(hypothesis)
    if variant == "RL":
        if not ref or not hyp:
            return RougeScore(0.0, 0.0, 0.0, empty=True)
        lcs = lcs_length(ref, hyp)
        p, r = lcs / len(hyp), lcs / len(ref)
        return RougeScore(p, r, _f1(p, r))
    n = int(variant[1])
    rc, hc = _ngrams(ref, n), _ngrams(hyp, n)
    if not rc or not hc:
        return RougeScore(0.0, 0.0, 0.0, empty=True)
    overlap = sum((rc & hc).values())
    p, r = overlap / sum(hc.values()), overlap / sum(rc.values())
    return RougeScore(p, r, _f1(p, r))


def rouge_f1(reference: str, hypothesis: str, variant: str = "R2",
             chain: NormalizerChain = DEFAULT_CHAIN) -> float:
    return rouge_score(reference, hypothesis, variant, chain).f1


# ---------------------------------------------------------------------------
# Medical concepts


@dataclass
class ConceptLexicon:
    """Canonical concept terms with surface variants, matched longest-first on normalized tokens."""

    entries: dict[str, list[str]] = field(default_factory=dict)
    source: str = "builtin"

    def __post_init__(self):
        self._index: dict[tuple[str, ...], str] = {}
        for canonical, variants in self.entries.items():
            for surface in [canonical, *variants]:
                key = tuple(normalize(surface).split())
                if not key:
                    continue
                owner = self._index.get(key)
                if owner is not None and owner != canonical:
                    raise MetricError(f"variant {surface!r} maps to both {owner!r} and {canonical!r}")
                self._index[key] = canonical
        self._max_len = max((len(k) for k in self._index), default=0)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def load(cls, path: str | Path) -> "ConceptLexicon":
        """Read a ``canonical<TAB>variant|variant`` file; ``#`` starts a comment line."""
        entries: dict[str, list[str]] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            canonical, _, rest = line.partition("\t")
            canonical = canonical.strip()
            if canonical in entries:
                raise MetricError(f"{path}:{lineno}: duplicate canonical term {canonical!r}")
            entries[canonical] = [v.strip() for v in rest.split("|") if v.strip()]
        return cls(entries, source=str(path))

    def canonical(self, term: str) -> str:
        key = tuple(normalize(term).split())
        return self._index.get(key, " ".join(key))

    def find(self, text: str) -> set[str]:
        tokens = normalize(text).split()
        found: set[str] = set()
        i = 0
        while i < len(tokens):
            for L in range(min(self._max_len, len(tokens) - i), 0, -1):
                hit = self._index.get(tuple(tokens[i : i + L]))
                if hit is not None:
                    found.add(hit)
                    i += L
                    break
            else:
                i += 1
        return found


def default_lexicon() -> ConceptLexicon:
    from importlib.resources import files

    return ConceptLexicon.load(files("convoforge.data").joinpath("concepts.tsv"))


@dataclass(frozen=True)
class ConceptScore:
    precision: float
    recall: float
    f1: float
    reference_concepts: frozenset[str]
    hypothesis_concepts: frozenset[str]
    vacuous: bool = False


Tagger = Callable[[str], Iterable[str]]


def extract_concepts(text: str, lexicon: ConceptLexicon | None, tagger: Tagger | None = None) -> set[str]:
    found = lexicon.find(text) if lexicon is not None else set()
    if tagger is not None:
        for term in tagger(text):
            found.add(lexicon.canonical(term) if lexicon is not None else normalize(term))
    found.discard("")
    return found


def concept_score(reference: str, hypothesis: str, lexicon: ConceptLexicon | None,
                  tagger: Tagger | None = None) -> ConceptScore:
    if (lexicon is None or len(lexicon) == 0) and tagger is None:
        raise MetricError("concept F1 needs a non-empty lexicon or a tagger")
    ref = extract_concepts(reference, lexicon, tagger)
    hyp = extract_concepts(hypothesis, lexicon, tagger)
    if not ref and not hyp:
        return ConceptScore(1.0, 1.0, 1.0, frozenset(), frozenset(), vacuous=True)
    common = len(ref & hyp)
    p = common / len(hyp) if hyp else 0.0
    r = common / len(ref) if ref else 0.0
    return ConceptScore(p, r, _f1(p, r), frozenset(ref), frozenset(hyp))


def concept_f1(reference: str, hypothesis: str, lexicon: ConceptLexicon | None,
               tagger: Tagger | None = None) -> float:
    return concept_score(reference, hypothesis, lexicon, tagger).f1


# ---------------------------------------------------------------------------
# Readability

_SENTENCE_END = re.compile(r"[.!?]+")
_WORD = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)*")
_VOWEL_GROUPS = re.compile(r"[aeiouy]+")

# frozen exceptions for the vowel-group heuristic
SYLLABLE_EXCEPTIONS = {
    "the": 1, "every": 3, "everyone": 3, "business": 2, "different": 3, "evening": 2,
    "family": 3, "medicine": 3, "area": 3, "idea": 3, "real": 1, "really": 2,
    "being": 2, "doing": 2, "going": 2, "seeing": 2, "quiet": 2, "diet": 2,
    "science": 2, "people": 2, "create": 2, "created": 3, "recreate": 3, "poem": 2,
    "naive": 2, "usual": 3, "usually": 4, "actually": 4, "queue": 1, "fire": 1,
    "hour": 1, "hours": 1, "our": 1, "anyone": 3, "someone": 2,
    "something": 2, "sometimes": 2, "somewhere": 2, "maybe": 2, "insurance": 3,
}


def count_syllables(word: str) -> int:
    w = word.lower().strip("'")
    if not w:
        return 0
    if w in SYLLABLE_EXCEPTIONS:
        return SYLLABLE_EXCEPTIONS[w]
    if w.endswith("'s"):
        w = w[:-2]
    count = len(_VOWEL_GROUPS.findall(w))
    # silent final e, but not consonant+le ("table") or "ee"
    if w.endswith("e") and not w.endswith(("le", "ee", "ye")) and count > 1:
        count -= 1
    elif w.endswith("le") and len(w) > 2 and w[-3] in "aeiouy" and count > 1:
        count -= 1
    if w.endswith("ed") and len(w) > 3 and w[-3] not in "td" and count > 1:
        count -= 1
    return max(1, count)


def is_complex(word: str) -> bool:
    """Three or more syllables, not counting a syllable added by -es, -ed or -ing."""
    if count_syllables(word) < 3:
        return False
    w = word.lower()
    for suffix in ("es", "ed", "ing"):
        if w.endswith(suffix) and len(w) > len(suffix) + 2:
            return count_syllables(w[: -len(suffix)]) >= 3
    return True


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_END.split(text) if _WORD.search(s)]


def fog_counts(text: str) -> tuple[int, int, int]:
    """(words, sentences, complex words)."""
    sentences = split_sentences(text)
    words = _WORD.findall(text)
    return len(words), len(sentences), sum(1 for w in words if is_complex(w))


def fog_from_counts(words: int, sentences: int, complex_words: int) -> float:
    if sentences == 0 or words == 0:
        raise MetricError("fog index needs at least one sentence")
    return 0.4 * (words / sentences + 100.0 * complex_words / words)


def gunning_fog(text: str) -> float:
    return fog_from_counts(*fog_counts(text))


# ---------------------------------------------------------------------------
# Corpus statistics


def word_count(text: str) -> int:
    return len(text.split())


@dataclass
class MeanStd:
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "MeanStd":
        values = list(values)
        if not values:
            return cls(float("nan"), float("nan"), 0)
        mean = statistics.fmean(values)
        std = statistics.pstdev(values) if len(values) > 1 else 0.0
        return cls(mean, std, len(values))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n}


@dataclass
class DialogueStats:
    dialogues: int
    turn_length: dict[str, MeanStd]
    fog: dict[str, float | None]
    turns: MeanStd
    duration: MeanStd
    events: MeanStd
    note_words: MeanStd
    total_words: int
    total_hours: float

    def to_dict(self) -> dict:
        return {
            "dialogues": self.dialogues,
            "turn_length": {k: v.to_dict() for k, v in self.turn_length.items()},
            "fog": dict(self.fog),
            "turns": self.turns.to_dict(),
            "duration": self.duration.to_dict(),
            "events": self.events.to_dict(),
            "note_words": self.note_words.to_dict(),
            "total_words": self.total_words,
            "total_hours": self.total_hours,
        }


def dialogue_stats(transcripts, timelines=(), notes=()) -> DialogueStats:
    """Per-speaker turn length and readability, plus per-dialogue turn, duration, event and note counts.

    Turn length counts words of the spoken text (stage directions removed).
    Fog is computed per speaker over all of that speaker's turns pooled.
    """
    lengths: dict[str, list[int]] = {"doctor": [], "patient": []}
    fog_acc: dict[str, list[int]] = {"doctor": [0, 0, 0], "patient": [0, 0, 0]}
    turns, total_words = [], 0
    for tr in transcripts:
        turns.append(len(tr.turns))
        for turn in tr.turns:
            text = turn.clean_text
            n = word_count(text)
            total_words += n
            lengths.setdefault(turn.speaker, []).append(n)
            acc = fog_acc.setdefault(turn.speaker, [0, 0, 0])
            for i, c in enumerate(fog_counts(text)):
                acc[i] += c
    fog = {}
    for speaker, (w, s, c) in fog_acc.items():
        fog[speaker] = fog_from_counts(w, s, c) if s and w else None
    durations = [tl.total_duration for tl in timelines]
    events = [len(tl.events) for tl in timelines]
    note_words = [note.word_count for note in notes]
    return DialogueStats(
        dialogues=len(turns),
        turn_length={k: MeanStd.of(v) for k, v in lengths.items()},
        fog=fog,
        turns=MeanStd.of(turns),
        duration=MeanStd.of(durations),
        events=MeanStd.of(events),
        note_words=MeanStd.of(note_words),
        total_words=total_words,
        total_hours=sum(durations) / 3600.0,
    )


def format_reference_metrics(rows: dict[str, dict[str, float]]) -> str:
    """Table with columns R-2, R-3, R-L, Open, #Wrd (F1 in percent)."""
    header = f"{'Model':<28}{'R-2':>7}{'R-3':>7}{'R-L':>7}{'Open':>7}{'#Wrd':>7}"
    lines = [header, "-" * len(header)]
    for name, r in rows.items():
        lines.append(
            f"{name:<28}{100 * r['R2']:>7.1f}{100 * r['R3']:>7.2f}{100 * r['RL']:>7.1f}"
            f"{100 * r['concept_f1']:>7.1f}{r['words']:>7.0f}"
        )
    return "\n".join(lines)


def mean_or_nan(values: Iterable[float]) -> float:
    values = list(values)
    return statistics.fmean(values) if values else math.nan
