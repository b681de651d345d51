"""Room acoustics and signal augmentation.

Shoebox image-source impulse responses, scene rendering with SNR-calibrated
background noise and per-speaker gain, peak normalization, and an Opus
round-trip through libsndfile.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np
import soundfile as sf
from scipy.signal import fftconvolve

from . import SAMPLE_RATE
from .util import ConvoforgeError, derive_seed

if TYPE_CHECKING:
    from .scene import SceneTimeline

log = logging.getLogger(__name__)

MIN_DISTANCE = 0.01  # metres; image-mic distances are clamped to this
SINC_HALF_WIDTH = 40  # samples on each side of a fractional-delay tap


class AcousticsError(ConvoforgeError):
    pass


class CodecError(AcousticsError):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise AcousticsError(f"audio must be mono, got shape {x.shape}")
        if self.sample_rate <= 0:
            raise AcousticsError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise AcousticsError("audio contains NaN or Inf samples")
        object.__setattr__(self, "samples", x)

    @property
    def num_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if self.samples.size == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))

    def __eq__(self, other):
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


def read_wav(path) -> AudioBuffer:
    data, sr = sf.read(str(path), dtype="float64", always_2d=False)
    if data.ndim > 1:
        data = data.mean(axis=1)
    return AudioBuffer(data, sr)


def wav_bytes(buffer: AudioBuffer) -> bytes:
    """16-bit PCM mono WAV encoding (the published audio format)."""
    out = io.BytesIO()
    sf.write(out, np.clip(buffer.samples, -1.0, 1.0), buffer.sample_rate, format="WAV", subtype="PCM_16")
    return out.getvalue()


def wav_from_bytes(data: bytes) -> AudioBuffer:
    x, sr = sf.read(io.BytesIO(data), dtype="float64", always_2d=False)
    if x.ndim > 1:
        x = x.mean(axis=1)
    return AudioBuffer(x, sr)


# ---------------------------------------------------------------------------
# Room impulse responses


Point = tuple[float, float, float]


@dataclass(frozen=True)
class RoomSpec:
    dimensions: Point = (4.0, 2.0, 2.6)
    absorption: float = 0.35
    max_order: int = 12
    speed_of_sound: float = 343.0
    sources: tuple[Point, ...] = ((0.7, 1.0, 1.5), (2.7, 1.0, 1.8))
    microphone: Point = (1.5, 1.0, 0.9)

    def __post_init__(self):
        if any(d <= 0 for d in self.dimensions):
            raise AcousticsError(f"room dimensions must be positive: {self.dimensions}")
        if not 0.0 < self.absorption <= 1.0:
            raise AcousticsError(f"absorption must lie in (0, 1], got {self.absorption}")
        if self.max_order < 0:
            raise AcousticsError(f"max reflection order must be >= 0, got {self.max_order}")
        if self.speed_of_sound <= 0:
            raise AcousticsError("speed of sound must be positive")
        for name, p in [("microphone", self.microphone)] + [
            (f"source {i}", s) for i, s in enumerate(self.sources)
        ]:
            if not all(0.0 < c < L for c, L in zip(p, self.dimensions)):
                raise AcousticsError(f"{name} at {p} is not strictly inside room {self.dimensions}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RoomSpec":
        kw = dict(d)
        for key in ("dimensions", "microphone"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        if "sources" in kw:
            kw["sources"] = tuple(tuple(float(v) for v in s) for s in kw["sources"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "dimensions": list(self.dimensions),
            "absorption": self.absorption,
            "max_order": self.max_order,
            "speed_of_sound": self.speed_of_sound,
            "sources": [list(s) for s in self.sources],
            "microphone": list(self.microphone),
        }


def image_sources(room: RoomSpec, source_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Enumerate shoebox image sources up to ``room.max_order``.

    Returns ``(positions, orders)`` with positions of shape (M, 3). Along each
    axis an image is ``(1 - 2p) * s + 2 n L`` for p in {0, 1} and integer n,
    and it has undergone ``|2n - p|`` reflections on that axis.
    """
    N = room.max_order
    src = np.asarray(room.sources[source_index], dtype=np.float64)
    dims = np.asarray(room.dimensions, dtype=np.float64)
    n = np.arange(-N, N + 1)
    per_axis = []
    for ax in range(3):
        pos = np.concatenate([src[ax] + 2 * n * dims[ax], -src[ax] + 2 * n * dims[ax]])
        order = np.concatenate([np.abs(2 * n), np.abs(2 * n - 1)])
        keep = order <= N
        per_axis.append((pos[keep], order[keep]))
    (px, ox), (py, oy), (pz, oz) = per_axis
    X, Y, Z = np.meshgrid(px, py, pz, indexing="ij")
    OX, OY, OZ = np.meshgrid(ox, oy, oz, indexing="ij")
    orders = (OX + OY + OZ).ravel()
    keep = orders <= N
    positions = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)[keep]
    return positions, orders[keep]


def compute_rir(room: RoomSpec, source_index: int, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Image-source impulse response from one source to the microphone.

    Each image of reflection order k at distance d adds an impulse of
    amplitude (1 - absorption)^(k/2) / d at delay d / c, rendered with a
    Hann-windowed sinc for fractional delays (a single tap when the delay is a whole sample).
    """
    if not 0 <= source_index < len(room.sources):
        raise AcousticsError(f"no source {source_index} in room with {len(room.sources)} sources")
    positions, orders = image_sources(room, source_index)
    mic = np.asarray(room.microphone, dtype=np.float64)
    dist = np.linalg.norm(positions - mic, axis=1)
    if np.any(dist < MIN_DISTANCE):
        log.warning("image-mic distance below %.3f m clamped", MIN_DISTANCE)
        dist = np.maximum(dist, MIN_DISTANCE)
    reflection = (1.0 - room.absorption) ** (orders / 2.0)
    amp = reflection / dist
    live = amp > 0
    amp, dist = amp[live], dist[live]
    delay = dist / room.speed_of_sound * sample_rate

    W = SINC_HALF_WIDTH
    taps = np.arange(-W + 1, W + 1)
    # delays on the sample grid get a single tap instead of sinc residue at the other integers
    nearest = np.round(delay)
    on_grid = np.abs(delay - nearest) < 1e-9
    base = np.where(on_grid, nearest, np.floor(delay)).astype(np.int64)
    idx = base[:, None] + taps[None, :]
    x = idx - delay[:, None]
    kernel = np.sinc(x) * 0.5 * (1.0 + np.cos(np.pi * x / W))
    kernel = np.where(on_grid[:, None], (taps == 0)[None, :].astype(np.float64), kernel)
    vals = amp[:, None] * kernel
    length = int(idx.max()) + 1
    h = np.zeros(length)
    ok = idx >= 0
    # np.add.at accumulates in index order, so the result is deterministic
    np.add.at(h, idx[ok], vals[ok])
    return AudioBuffer(h, sample_rate)


def rir_energy(rir: AudioBuffer) -> float:
    return float(np.sum(rir.samples**2))


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentSpec:
    codec: str = "none"
    bitrate: int = 16_000
    speaker_gains: Mapping[str, float] = field(
        default_factory=lambda: {"doctor": 1.0, "patient": 0.25}
    )
    snr_db: float | None = 25.0

    def __post_init__(self):
        if self.codec not in ("none", "opus"):
            raise AcousticsError(f"unknown codec {self.codec!r}")
        if self.bitrate <= 0:
            raise AcousticsError("bitrate must be positive")
        for k, g in self.speaker_gains.items():
            if g <= 0:
                raise AcousticsError(f"gain for {k!r} must be positive, got {g}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugmentSpec":
        kw = dict(d)
        if "speaker_gains" in kw:
            kw["speaker_gains"] = {str(k): float(v) for k, v in kw["speaker_gains"].items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "codec": self.codec,
            "bitrate": self.bitrate,
            "speaker_gains": dict(self.speaker_gains),
            "snr_db": self.snr_db,
        }


def peak_normalize(buffer: AudioBuffer, target: float = 1.0) -> AudioBuffer:
    peak = float(np.max(np.abs(buffer.samples))) if buffer.num_samples else 0.0
    if target == 0:
        return AudioBuffer(np.zeros_like(buffer.samples), buffer.sample_rate)
    if peak == 0.0:
        raise AcousticsError("cannot peak-normalize an all-zero buffer")
    if math.isclose(peak, target, rel_tol=1e-12, abs_tol=0.0):
        return buffer
    return AudioBuffer(buffer.samples / peak * target, buffer.sample_rate)


def hvac_noise(duration: float, sample_rate: int = SAMPLE_RATE, seed: int = 0) -> AudioBuffer:
    """Synthetic HVAC-like background: pink noise with a 50-500 Hz emphasis."""
    n = max(1, int(round(duration * sample_rate)))
    rng = np.random.default_rng(derive_seed("hvac", seed))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    shape = np.zeros_like(f)
    nz = f > 0
    shape[nz] = 1.0 / np.sqrt(f[nz])
    shape[(f >= 50) & (f <= 500)] *= 4.0
    shape[f < 20] = 0.0
    x = np.fft.irfft(spec * shape, n)
    x /= np.max(np.abs(x)) or 1.0
    return AudioBuffer(0.5 * x, sample_rate)


@dataclass
class RenderStems:
    speech: np.ndarray
    events: np.ndarray
    noise: np.ndarray
    active: np.ndarray  # boolean mask of speech-active samples
    sample_rate: int

    def mix(self) -> AudioBuffer:
        return AudioBuffer(self.speech + self.events + self.noise, self.sample_rate)


def _place(out: np.ndarray, start: int, signal: np.ndarray) -> None:
    out[start : start + signal.size] += signal


def render_stems(
    timeline: "SceneTimeline",
    rirs: Mapping[str, AudioBuffer],
    dry: Mapping[str, AudioBuffer],
    noise: AudioBuffer | None,
    spec: AugmentSpec,
    event_rir: str | None = "doctor",
    event_rir_overrides: Mapping[str, str | None] | None = None,
) -> RenderStems:
    """Render a timeline into separate speech, event, and noise stems.

    ``rirs`` maps speaker name to impulse response, ``dry`` maps the
    timeline's source refs to dry buffers. Events go through ``rirs[event_rir]``
    unless overridden per class (``None`` mixes them dry).
    """
    overrides = dict(event_rir_overrides or {})
    buffers = list(dry.values()) + list(rirs.values()) + ([noise] if noise is not None else [])
    rates = {b.sample_rate for b in buffers}
    if len(rates) > 1:
        raise AcousticsError(f"sample-rate mismatch among inputs: {sorted(rates)}")
    fs = rates.pop() if rates else SAMPLE_RATE

    def wet(ref: str, rir_key: str | None) -> np.ndarray:
        if ref not in dry:
            raise AcousticsError(f"missing dry buffer for source {ref!r}")
        x = dry[ref].samples
        if rir_key is None:
            return x
        if rir_key not in rirs:
            raise AcousticsError(f"no impulse response for {rir_key!r}")
        return fftconvolve(x, rirs[rir_key].samples)

    placed_speech = []
    for seg in timeline.speech:
        g = seg.gain * spec.speaker_gains.get(seg.speaker, 1.0)
        start = int(round(seg.onset * fs))
        placed_speech.append((start, wet(seg.source, seg.speaker) * g, dry[seg.source].num_samples))
    placed_events = []
    for ev in timeline.events:
        key = overrides.get(ev.label, event_rir)
        start = int(round(ev.onset * fs))
        placed_events.append((start, wet(ev.source, key) * ev.gain))

    max_rir = max((r.num_samples for r in rirs.values()), default=1)
    n = int(round(timeline.total_duration * fs)) + max_rir - 1
    for start, sig, *_ in placed_speech + placed_events:
        n = max(n, start + sig.size)

    speech = np.zeros(n)
    events = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    for start, sig, dry_len in placed_speech:
        _place(speech, start, sig)
        active[start : start + dry_len] = True
    for start, sig in placed_events:
        _place(events, start, sig)

    noise_track = np.zeros(n)
    if noise is not None and spec.snr_db is not None and math.isfinite(spec.snr_db):
        p_speech = float(np.mean(speech[active] ** 2)) if active.any() else 0.0
        if p_speech == 0.0:
            raise AcousticsError("speech track is silent; cannot calibrate noise SNR")
        raw = np.resize(noise.samples, n)
        p_noise = float(np.mean(raw[active] ** 2))
        if p_noise == 0.0:
            raise AcousticsError("noise buffer is silent over the speech-active region")
        scale = math.sqrt(p_speech / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
        noise_track = raw * scale
    return RenderStems(speech, events, noise_track, active, fs)


def render_scene(
    timeline: "SceneTimeline",
    rirs: Mapping[str, AudioBuffer],
    dry: Mapping[str, AudioBuffer],
    noise: AudioBuffer | None,
    spec: AugmentSpec,
    **kwargs,
) -> AudioBuffer:
    return render_stems(timeline, rirs, dry, noise, spec, **kwargs).mix()


def measured_snr_db(mix: np.ndarray, speech: np.ndarray, active: np.ndarray) -> float:
    """Speech/noise power ratio re-measured from a rendered mix and its speech stem."""
    residual = mix - speech
    return 10.0 * math.log10(np.mean(speech[active] ** 2) / np.mean(residual[active] ** 2))


# ---------------------------------------------------------------------------
# Codec round trip

OPUS_RATES = (8000, 12000, 16000, 24000, 48000)
OPUS_FRAME = 0.020


def opus_available() -> bool:
    try:
        return "OPUS" in sf.available_subtypes("OGG")
    except Exception:  # pragma: no cover - depends on libsndfile build
        return False


@dataclass
class CodecResult:
    audio: AudioBuffer
    encoded_bytes: int
    raw_bytes: int  # 16-bit PCM size of the input

    @property
    def compression_ratio(self) -> float:
        return self.raw_bytes / self.encoded_bytes if self.encoded_bytes else 1.0


def _opus_level(bitrate: int) -> float:
    # libsndfile maps compression level linearly onto 6-256 kbps per channel
    if not 6000 <= bitrate <= 256_000:
        raise CodecError(f"Opus bitrate must lie in [6000, 256000] b/s, got {bitrate}")
    return 1.0 - (bitrate - 6000) / 250_000.0


def opus_encode(buffer: AudioBuffer, bitrate: int) -> bytes:
    if not opus_available():
        raise CodecError("libsndfile was built without Ogg/Opus support")
    if buffer.sample_rate not in OPUS_RATES:
        raise CodecError(f"Opus cannot encode at {buffer.sample_rate} Hz (supported: {OPUS_RATES})")
    out = io.BytesIO()
    try:
        sf.write(
            out, buffer.samples, buffer.sample_rate, format="OGG", subtype="OPUS",
            compression_level=_opus_level(bitrate),
        )
    except sf.LibsndfileError as exc:
        raise CodecError(f"Opus encode failed: {exc}") from exc
    return out.getvalue()


def opus_decode(data: bytes) -> AudioBuffer:
    try:
        x, sr = sf.read(io.BytesIO(data), dtype="float64", always_2d=False)
    except sf.LibsndfileError as exc:
        raise CodecError(f"Opus decode failed: {exc}") from exc
    return AudioBuffer(x, sr)


def codec_roundtrip(buffer: AudioBuffer, spec: AugmentSpec) -> CodecResult:
    raw = buffer.num_samples * 2
    if spec.codec == "none":
        return CodecResult(buffer, raw, raw)
    data = opus_encode(buffer, spec.bitrate)
    decoded = opus_decode(data)
    if decoded.sample_rate != buffer.sample_rate:
        raise CodecError(f"decoder returned {decoded.sample_rate} Hz, expected {buffer.sample_rate}")
    if abs(decoded.num_samples - buffer.num_samples) > OPUS_FRAME * buffer.sample_rate:
        raise CodecError(
            f"round trip changed length by more than one frame: {buffer.num_samples} -> {decoded.num_samples}"
        )
    return CodecResult(decoded, len(data), raw)
