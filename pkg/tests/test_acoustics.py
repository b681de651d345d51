from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convoforge.acoustics import (AcousticsError, AudioBuffer, AugmentSpec, CodecError, RoomSpec, codec_roundtrip,
                                  compute_rir, hvac_noise, image_sources, measured_snr_db, opus_available,
                                  peak_normalize, render_scene, render_stems, rir_energy, wav_bytes, wav_from_bytes)
from convoforge.scene import SceneTimeline, SpeechSegment
from helpers import (FS, brute_force_images, identity_rir, image_parity_count, random_room, speechlike,
                     two_speaker_timeline)

needs_opus = pytest.mark.skipif(not opus_available(), reason="libsndfile lacks Ogg/Opus support")


def test_default_room_geometry():
    room = RoomSpec()
    assert room.dimensions == (4.0, 2.0, 2.6)
    assert room.absorption == 0.35 and room.max_order == 12
    assert room.microphone == (1.5, 1.0, 0.9)
    assert room.sources == ((0.7, 1.0, 1.5), (2.7, 1.0, 1.8))


def test_room_validation():
    with pytest.raises(AcousticsError):
        RoomSpec(sources=((5.0, 1.0, 1.0),))
    with pytest.raises(AcousticsError):
        RoomSpec(absorption=0.0)
    with pytest.raises(AcousticsError):
        compute_rir(RoomSpec(), 5)
    assert RoomSpec.from_dict(RoomSpec().to_dict()) == RoomSpec()


def test_direct_path_peak_at_160_samples():
    # 3.43 m at 343 m/s is 10 ms, 160 samples at 16 kHz
    room = RoomSpec((8.0, 6.0, 3.0), 1.0, 0, 343.0, ((1.0, 3.0, 1.5),), (4.43, 3.0, 1.5))
    h = compute_rir(room, 0, FS).samples
    assert int(np.argmax(np.abs(h))) == 160
    assert h[160] == pytest.approx(1 / 3.43)


def test_full_absorption_gives_single_impulse():
    room = RoomSpec(absorption=1.0)
    full = compute_rir(room, 0).samples
    direct = compute_rir(RoomSpec(absorption=1.0, max_order=0), 0).samples
    assert np.array_equal(full, direct)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_image_count_matches_brute_force(order):
    room = RoomSpec(max_order=order)
    positions, orders = image_sources(room, 0)
    brute = brute_force_images(room)
    assert len(positions) == len(brute) == image_parity_count(order)
    assert {tuple(round(c, 9) for c in p) for p in positions} == brute
    assert orders.max() == order


def test_order_one_has_seven_images():
    assert len(image_sources(RoomSpec(max_order=1), 0)[0]) == 7


def test_energy_non_increasing_in_absorption():
    energies = [rir_energy(compute_rir(RoomSpec(absorption=a), 0)) for a in np.arange(1, 10) / 10]
    assert all(b <= a for a, b in zip(energies, energies[1:]))


def test_rir_deterministic():
    assert compute_rir(RoomSpec(), 1) == compute_rir(RoomSpec(), 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_direct_path_first_arrival(seed):
    room = random_room(np.random.default_rng(seed))
    h = compute_rir(room, 0).samples
    d = float(np.linalg.norm(np.subtract(room.sources[0], room.microphone)))
    expected = d / room.speed_of_sound * FS
    first = int(np.argmax(np.abs(h) >= 0.5 / d))
    peak = first + int(np.argmax(np.abs(h[first:first + 3])))
    assert abs(peak - expected) <= 1


def test_identity_render_places_input():
    x = np.sin(np.linspace(0, 40, FS))
    tl = SceneTimeline((SpeechSegment(0, "doctor", 0.5, 1.0, 1.0, "a.wav"),), (), 1.5)
    out = render_scene(tl, {"doctor": identity_rir()}, {"a.wav": AudioBuffer(x)}, None, AugmentSpec(
        speaker_gains={"doctor": 1.0}, snr_db=None))
    assert out.num_samples == int(1.5 * FS)
    assert np.array_equal(out.samples[8000:24000], x)
    assert not out.samples[:8000].any()


def test_patient_gain_quarter():
    a, b = speechlike(2.0, 1), speechlike(2.0, 2)
    b = AudioBuffer(b.samples * a.rms() / b.rms())
    stems = render_stems(two_speaker_timeline(2.0, 2.0), {"doctor": identity_rir(), "patient": identity_rir()},
                         {"doc.wav": a, "pat.wav": b}, None, AugmentSpec())
    doc = stems.speech[: 2 * FS]
    pat = stems.speech[int(2.5 * FS): int(4.5 * FS)]
    ratio = np.sqrt(np.mean(pat**2)) / np.sqrt(np.mean(doc**2))
    assert ratio == pytest.approx(0.25, rel=1e-9)


@pytest.mark.parametrize("snr", [10.0, 20.0, 30.0])
def test_snr_calibration(snr):
    room = RoomSpec()
    rirs = {"doctor": compute_rir(room, 0), "patient": compute_rir(room, 1)}
    tl = two_speaker_timeline(3.0, 2.0)
    dry = {"doc.wav": speechlike(3.0, 3), "pat.wav": speechlike(2.0, 4)}
    stems = render_stems(tl, rirs, dry, hvac_noise(8.0, seed=1), AugmentSpec(snr_db=snr))
    assert measured_snr_db(stems.mix().samples, stems.speech, stems.active) == pytest.approx(snr, abs=1e-9)


def test_silent_speech_with_snr_rejected():
    tl = two_speaker_timeline(1.0, 1.0)
    silent = AudioBuffer(np.zeros(FS))
    with pytest.raises(AcousticsError, match="silent"):
        render_stems(tl, {"doctor": identity_rir(), "patient": identity_rir()},
                     {"doc.wav": silent, "pat.wav": silent}, hvac_noise(3.0), AugmentSpec())


def test_sample_rate_mismatch_rejected():
    tl = two_speaker_timeline(1.0, 1.0)
    with pytest.raises(AcousticsError, match="mismatch"):
        render_stems(tl, {"doctor": identity_rir(), "patient": identity_rir()},
                     {"doc.wav": speechlike(1.0), "pat.wav": speechlike(1.0, fs=8000)}, None, AugmentSpec())


def test_render_is_deterministic():
    room = RoomSpec()
    rirs = {"doctor": compute_rir(room, 0), "patient": compute_rir(room, 1)}
    args = (two_speaker_timeline(1.0, 1.0), rirs, {"doc.wav": speechlike(1.0, 5), "pat.wav": speechlike(1.0, 6)},
            hvac_noise(3.0, seed=2), AugmentSpec())
    assert render_scene(*args) == render_scene(*args)


def test_peak_normalize_cases():
    x = AudioBuffer(np.array([0.1, -0.5, 0.25]))
    assert np.array_equal(peak_normalize(x, 1.0).samples, x.samples * 2)
    same = AudioBuffer(np.array([0.3, -1.0]))
    assert peak_normalize(same, 1.0) == same
    with pytest.raises(AcousticsError):
        peak_normalize(AudioBuffer(np.zeros(4)), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=64), st.floats(0.01, 1.0))
def test_peak_normalize_preserves_argmax(values, target):
    x = np.array(values)
    if not np.any(x):
        return
    y = peak_normalize(AudioBuffer(x), target).samples
    assert np.argmax(np.abs(y)) == np.argmax(np.abs(x))
    assert np.max(np.abs(y)) == pytest.approx(target)


def test_codec_none_is_passthrough():
    x = speechlike(1.0)
    res = codec_roundtrip(x, AugmentSpec(codec="none"))
    assert res.audio is x and res.compression_ratio == 1.0


@needs_opus
def test_opus_roundtrip_properties():
    x = speechlike(10.0, 7)
    res = codec_roundtrip(x, AugmentSpec(codec="opus", bitrate=16000))
    assert abs(res.audio.duration - x.duration) <= 0.020
    assert 8 < res.compression_ratio < 25
    assert res.raw_bytes == x.num_samples * 2


@needs_opus
def test_opus_rejects_unsupported_rate():
    with pytest.raises(CodecError):
        codec_roundtrip(speechlike(1.0, fs=22050), AugmentSpec(codec="opus"))


def test_augment_validation():
    with pytest.raises(AcousticsError):
        AugmentSpec(codec="mp3")
    with pytest.raises(AcousticsError):
        AugmentSpec(speaker_gains={"doctor": 0.0})
    assert AugmentSpec().speaker_gains == {"doctor": 1.0, "patient": 0.25}
    assert AugmentSpec.from_dict(AugmentSpec().to_dict()) == AugmentSpec()


def test_wav_roundtrip_is_16_bit():
    x = AudioBuffer(np.array([0.0, 0.5, -0.5, 0.25]))
    y = wav_from_bytes(wav_bytes(x))
    assert np.allclose(y.samples, x.samples, atol=1 / 32768)
    assert wav_bytes(y) == wav_bytes(x)


def test_hvac_noise_deterministic_and_bounded():
    a, b = hvac_noise(1.0, seed=3), hvac_noise(1.0, seed=3)
    assert a == b and np.max(np.abs(a.samples)) == pytest.approx(0.5)
    assert a != hvac_noise(1.0, seed=4)


def test_audio_buffer_validation():
    with pytest.raises(AcousticsError):
        AudioBuffer(np.zeros((2, 2)))
    with pytest.raises(AcousticsError):
        AudioBuffer(np.array([np.nan]))
