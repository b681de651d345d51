"""Sound event catalog: class labels, trigger lexicon, and source clips.

Classes without recorded clips get procedurally synthesized ones, addressed
as ``synth:<label>:<k>``, so scenes can be rendered without any audio assets.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import SAMPLE_RATE
from .acoustics import AudioBuffer, read_wav
from .metrics import normalize
from .util import ConvoforgeError, derive_seed


class EventCatalogError(ConvoforgeError):
    pass


@dataclass(frozen=True)
class EventClass:
    label: str
    triggers: tuple[str, ...]
    recipe: Mapping[str, Any]
    gain: float = 0.4
    ambient: bool = False
    clips: tuple[str, ...] = ()


@dataclass
class EventCatalog:
    classes: dict[str, EventClass]
    clips_per_class: int = 3
    asset_dir: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self._lexicon: list[tuple[re.Pattern, int, int, str]] = []
        for order, cls in enumerate(self.classes.values()):
            for phrase in cls.triggers:
                norm = normalize(phrase)
                if norm:
                    pattern = re.compile(r"(?:^| )" + re.escape(norm))
                    self._lexicon.append((pattern, len(norm), order, cls.label))
        # longest phrase first, catalog order breaks ties
        self._lexicon.sort(key=lambda e: (-e[1], e[2]))

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> list[str]:
        return list(self.classes)

    def ambient_labels(self) -> list[str]:
        return [c.label for c in self.classes.values() if c.ambient]

    def match(self, direction: str) -> str | None:
        """Event class whose longest trigger phrase starts at a word boundary in the direction."""
        text = normalize(direction)
        for pattern, _, _, label in self._lexicon:
            if pattern.search(text):
                return label
        return None

    def pool(self, label: str) -> list[str]:
        cls = self.classes[label]
        if cls.clips:
            return list(cls.clips)
        return [f"synth:{label}:{k}" for k in range(self.clips_per_class)]

    def clip(self, ref: str, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
        key = (ref, sample_rate)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        if ref.startswith("synth:"):
            _, label, k = ref.split(":")
            if label not in self.classes:
                raise EventCatalogError(f"unknown event class in clip ref {ref!r}")
            buf = AudioBuffer(synth_clip(self.classes[label].recipe, sample_rate, derive_seed("clip", label, k)),
                              sample_rate)
        else:
            path = Path(ref)
            if not path.is_absolute() and self.asset_dir is not None:
                path = self.asset_dir / path
            buf = read_wav(path)
            if buf.sample_rate != sample_rate:
                raise EventCatalogError(f"clip {ref} is {buf.sample_rate} Hz, expected {sample_rate}")
        with self._lock:
            self._cache[key] = buf
        return buf


def load_event_catalog(path: str | Path | None = None) -> EventCatalog:
    if path is None:
        path = Path(str(files("convoforge.data").joinpath("events.yaml")))
    path = Path(path)
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    classes: dict[str, EventClass] = {}
    for raw in doc.get("classes") or []:
        label = raw["label"]
        if label in classes:
            raise EventCatalogError(f"duplicate event class {label!r}")
        cls = EventClass(
            label=label,
            triggers=tuple(raw.get("triggers") or ()),
            recipe=dict(raw.get("recipe") or {"kind": "noise"}),
            gain=float(raw.get("gain", 0.4)),
            ambient=bool(raw.get("ambient", False)),
            clips=tuple(raw.get("clips") or ()),
        )
        classes[label] = cls
    n_clips = int(doc.get("clips_per_class", 3))
    if n_clips < 1:
        raise EventCatalogError("every event class needs at least one source clip")
    asset_dir = doc.get("asset_dir")
    return EventCatalog(classes, n_clips, (path.parent / asset_dir) if asset_dir else path.parent)


# ---------------------------------------------------------------------------
# Procedural clips


def _bandpass(x: np.ndarray, fs: int, lo: float, hi: float) -> np.ndarray:
    if x.size == 0:
        return x
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size, 1.0 / fs)
    spec[(f < lo) | (f > min(hi, fs / 2))] = 0.0
    return np.fft.irfft(spec, x.size)


def _fades(x: np.ndarray, fs: int, fade: float = 0.005) -> np.ndarray:
    n = min(int(fade * fs), x.size // 2)
    if n > 0:
        ramp = np.linspace(0.0, 1.0, n)
        x[:n] *= ramp
        x[-n:] *= ramp[::-1]
    return x


def _hits(rng, fs, count, interval, band, decay, jitter=0.0):
    hit_len = int(max(decay * 6, 0.01) * fs)
    total = int((count - 1) * interval * fs) + hit_len + int(jitter * count * fs) + 1
    out = np.zeros(total)
    t = np.arange(hit_len) / fs
    for k in range(count):
        start = int((k * interval + rng.uniform(0, jitter)) * fs)
        burst = rng.standard_normal(hit_len) * np.exp(-t / decay) * rng.uniform(0.6, 1.0)
        out[start:start + hit_len] += burst
    return _bandpass(out, fs, *band)


def synth_clip(recipe: Mapping[str, Any], fs: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    kind = recipe.get("kind", "noise")
    band = tuple(recipe.get("band", (100, 6000)))
    if kind in ("knock", "click"):
        decay = recipe.get("decay", 0.03 if kind == "knock" else 0.004)
        x = _hits(rng, fs, int(recipe.get("count", 1)), float(recipe.get("interval", 0.1)), band,
                  float(decay), float(recipe.get("jitter", 0.0)))
    elif kind == "noise":
        dur = float(recipe.get("duration", 1.0)) * rng.uniform(0.8, 1.2)
        n = max(int(dur * fs), 16)
        t = np.arange(n) / fs
        env = {
            "swell": np.sin(np.pi * t / dur) ** 2,
            "flat": np.ones(n),
            "burst": np.exp(-t / (0.25 * dur)),
            "decay": np.exp(-t / (0.5 * dur)),
            "flutter": 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(8, 20) * t + rng.uniform(0, np.pi)),
        }[recipe.get("envelope", "flat")]
        x = _bandpass(rng.standard_normal(n), fs, *band) * env
    elif kind == "tone":
        freqs = list(recipe.get("freqs", [1000]))
        on, off = float(recipe.get("on", 0.2)), float(recipe.get("off", 0.1))
        vib = float(recipe.get("vibrato", 0.0))
        pieces = []
        for _ in range(int(recipe.get("repeats", 1))):
            for f0 in freqs:
                t = np.arange(int(on * fs)) / fs
                phase = 2 * np.pi * f0 * t + (vib / 6.0) * np.sin(2 * np.pi * 6.0 * t)
                pieces.append(_fades(np.sin(phase), fs))
                pieces.append(np.zeros(int(off * fs)))
        x = np.concatenate(pieces) if pieces else np.zeros(16)
    elif kind == "vocal":
        dur = float(recipe.get("duration", 0.3))
        f0 = float(recipe.get("f0", 150)) * rng.uniform(0.85, 1.15)
        mix = float(recipe.get("noise_mix", 0.5))
        pieces = []
        for _ in range(int(recipe.get("count", 1))):
            n = max(int(dur * rng.uniform(0.8, 1.2) * fs), 16)
            t = np.arange(n) / fs
            glide = f0 * (1.0 - 0.2 * t / max(t[-1], 1e-9))
            voiced = np.sign(np.sin(2 * np.pi * np.cumsum(glide) / fs))
            src = (1 - mix) * voiced + mix * rng.standard_normal(n)
            pieces.append(_bandpass(src, fs, *band) * np.hanning(n))
            pieces.append(np.zeros(int(0.08 * fs)))
        x = np.concatenate(pieces)
    else:
        raise EventCatalogError(f"unknown clip recipe kind {kind!r}")
    x = _fades(np.asarray(x, dtype=np.float64), fs)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (rng.uniform(0.7, 0.9) / peak)
    return x
