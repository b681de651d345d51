"""Corpus layout, manifest and the resumable per-dialogue stage runner.

Layout under the corpus root::

    manifest.jsonl   compacted snapshot (header, corpus-level records, one entry per dialogue)
    journal.jsonl    append-only log of every record change since the corpus was created
    personas.jsonl   specs.jsonl   casting.json   stats.json   stats.txt
    <split>/<dialogue id>/transcript.json, dry/turn_000.wav ..., timeline.tsv, wet.wav,
                           facts.json, note.json, judge.json, metrics.json

Every stage unit has a fingerprint over its parameters and the digests of its
inputs. A unit whose fingerprint and output digests match the manifest is
skipped, so rerunning a finished stage writes nothing.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from importlib.resources import files
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import yaml

from . import SAMPLE_RATE
from .acoustics import (AudioBuffer, AugmentSpec, RoomSpec, codec_roundtrip, compute_rir, hvac_noise,
                        opus_available, peak_normalize, render_scene, wav_bytes, wav_from_bytes)
from .dialogue import DEFAULT_MAX_TURNS, DialogueTranscript, run_dialogue, run_dialogue_single_shot
from .events import EventCatalog, load_event_catalog
from .gateway import TtsRequest, make_aligner, make_chat_backend, make_tts_backend, synthesize
from .judge import JudgeReport, aggregate, comparison_table, judge_note
from .metrics import MeanStd, fog_counts, fog_from_counts, word_count
from .notes import SoapNote, extract_facts, generate_note
from .personas import (SPLITS, AttributeCatalog, DialogueSpec, Persona, SplitPlan, check_disjoint, load_catalog,
                       sample_personas, split_specs)
from .scene import (SceneConfig, SceneTimeline, VoiceBank, cast_voices, compose_scene, llm_event_mapper,
                    synthetic_voice_bank, voice_needs)
from .util import (ConvoforgeError, canonical_json, derive_seed, dump_json, dump_jsonl, sha256_bytes,
                   sha256_file, write_if_changed)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
STAGES = ("personas", "dialogues", "synth", "scene", "render", "notes", "judge", "metrics", "stats")
CORPUS_STAGES = ("personas", "stats")
UPSTREAM = {
    "personas": (),
    "dialogues": ("personas",),
    "synth": ("dialogues",),
    "scene": ("synth",),
    "render": ("scene",),
    "notes": ("dialogues",),
    "judge": ("notes",),
    "metrics": ("scene", "notes"),
    "stats": ("metrics",),
}
# bump when a stage's output format or algorithm changes
STAGE_VERSIONS = {s: 1 for s in STAGES}
SILENT_TURN = 0.3  # seconds of silence for a turn with no speakable words


class ConfigError(ConvoforgeError):
    pass


class DependencyError(ConvoforgeError):
    pass


class CorruptionError(ConvoforgeError):
    pass


class AuditError(ConvoforgeError):
    pass


class LockError(ConvoforgeError):
    pass


class StageFailure(ConvoforgeError):
    def __init__(self, stage: str, failures: Mapping[str, str]):
        super().__init__(f"stage {stage}: {len(failures)} unit(s) failed: "
                         + "; ".join(f"{k}: {v}" for k, v in sorted(failures.items())[:5]))
        self.failures = dict(failures)


# ---------------------------------------------------------------------------
# Configuration


_TOP_KEYS = {"corpus", "seed", "plan", "assets", "backends", "dialogue", "scene", "room", "augment", "render",
             "notes", "workers", "sample_rate"}


@dataclass
class PipelineConfig:
    """Everything a corpus build depends on. Relative paths resolve against ``base_dir``."""

    corpus: Path = Path("corpus")
    seed: int = 0
    plan: SplitPlan = field(default_factory=SplitPlan.standard)
    catalog_path: Path | None = None
    events_path: Path | None = None
    voices_path: Path | None = None
    chat: str = "mock"
    tts: str = "mock"
    aligner: str | None = None
    chat_model: str = "gemma-3-27b-it"
    tts_model: str = "qwen3-tts-1.7b"
    aligner_model: str = "qwen3-forced-aligner"
    backend_concurrency: int = 8
    event_fallback: bool = False
    max_turns: int = DEFAULT_MAX_TURNS
    temperature: float = 0.8
    dialogue_mode: str = "turn"
    scene: SceneConfig = field(default_factory=SceneConfig)
    room: RoomSpec = field(default_factory=RoomSpec)
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec(codec="opus"))
    noise: str = "hvac"
    peak: float = 0.95
    grounding: str = "reject"
    retries: int = 2
    workers: int = 1
    sample_rate: int = SAMPLE_RATE

    def validate(self) -> None:
        if self.dialogue_mode not in ("turn", "single_shot"):
            raise ConfigError(f"dialogue.mode must be 'turn' or 'single_shot', got {self.dialogue_mode!r}")
        if self.noise not in ("hvac", "none"):
            raise ConfigError(f"render.noise must be 'hvac' or 'none', got {self.noise!r}")
        if self.grounding not in ("reject", "drop"):
            raise ConfigError(f"notes.grounding must be 'reject' or 'drop', got {self.grounding!r}")
        if not 0 < self.peak <= 1:
            raise ConfigError("render.peak must lie in (0, 1]")
        if self.workers < 1 or self.backend_concurrency < 1 or self.retries < 0 or self.max_turns < 1:
            raise ConfigError("workers, concurrency and max_turns must be positive; retries non-negative")
        if len(self.room.sources) < 2:
            raise ConfigError("the room needs a source position for the doctor and one for the patient")
        for split in self.plan.counts:
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r} in plan (expected one of {SPLITS})")
        for p in (self.catalog_path, self.events_path, self.voices_path):
            if p is not None and not p.exists():
                raise ConfigError(f"asset file not found: {p}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Path = Path(".")) -> "PipelineConfig":
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")

        def path(v):
            if v in (None, ""):
                return None
            p = Path(v)
            return p if p.is_absolute() else base_dir / p

        def section(name: str, allowed: set[str]) -> dict:
            sec = dict(d.get(name) or {})
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(bad))}")
            return sec

        assets = section("assets", {"catalog", "events", "voices"})
        backends = section("backends", {"chat", "tts", "aligner", "chat_model", "tts_model", "aligner_model",
                                        "concurrency", "event_fallback"})
        dialogue = section("dialogue", {"max_turns", "temperature", "mode"})
        render = section("render", {"noise", "peak"})
        notes = section("notes", {"grounding", "retries"})
        try:
            plan = d.get("plan")
            cfg = cls(
                corpus=path(d.get("corpus", "corpus")),
                seed=int(d.get("seed", 0)),
                plan=SplitPlan({k: (int(v[0]), int(v[1])) for k, v in plan.items()}, int(d.get("seed", 0)))
                if plan else SplitPlan.standard(int(d.get("seed", 0))),
                catalog_path=path(assets.get("catalog")),
                events_path=path(assets.get("events")),
                voices_path=path(assets.get("voices")),
                chat=str(backends.get("chat", "mock")),
                tts=str(backends.get("tts", "mock")),
                aligner=backends.get("aligner"),
                chat_model=str(backends.get("chat_model", "gemma-3-27b-it")),
                tts_model=str(backends.get("tts_model", "qwen3-tts-1.7b")),
                aligner_model=str(backends.get("aligner_model", "qwen3-forced-aligner")),
                backend_concurrency=int(backends.get("concurrency", 8)),
                event_fallback=bool(backends.get("event_fallback", False)),
                max_turns=int(dialogue.get("max_turns", DEFAULT_MAX_TURNS)),
                temperature=float(dialogue.get("temperature", 0.8)),
                dialogue_mode=str(dialogue.get("mode", "turn")),
                scene=SceneConfig.from_dict(d.get("scene") or {}),
                room=RoomSpec.from_dict(d.get("room") or {}),
                augment=AugmentSpec.from_dict({"codec": "opus", **(d.get("augment") or {})}),
                noise=str(render.get("noise", "hvac")),
                peak=float(render.get("peak", 0.95)),
                grounding=str(notes.get("grounding", "reject")),
                retries=int(notes.get("retries", 2)),
                workers=int(d.get("workers", 1)),
                sample_rate=int(d.get("sample_rate", SAMPLE_RATE)),
            )
        except ConfigError:
            raise
        except (ConvoforgeError, TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} is not a mapping")
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        def rel(p):
            return None if p is None else str(p)

        return {
            "corpus": str(self.corpus),
            "seed": self.seed,
            "plan": {k: list(v) for k, v in self.plan.counts.items()},
            "assets": {"catalog": rel(self.catalog_path), "events": rel(self.events_path),
                       "voices": rel(self.voices_path)},
            "backends": {"chat": self.chat, "tts": self.tts, "aligner": self.aligner,
                         "chat_model": self.chat_model, "tts_model": self.tts_model,
                         "aligner_model": self.aligner_model, "concurrency": self.backend_concurrency,
                         "event_fallback": self.event_fallback},
            "dialogue": {"max_turns": self.max_turns, "temperature": self.temperature, "mode": self.dialogue_mode},
            "scene": self.scene.to_dict(),
            "room": self.room.to_dict(),
            "augment": self.augment.to_dict(),
            "render": {"noise": self.noise, "peak": self.peak},
            "notes": {"grounding": self.grounding, "retries": self.retries},
            "workers": self.workers,
            "sample_rate": self.sample_rate,
        }


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class StageRecord:
    fingerprint: str
    outputs: dict[str, str]  # relative path -> sha256
    info: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"fingerprint": self.fingerprint, "outputs": dict(sorted(self.outputs.items())), "info": self.info}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StageRecord":
        return cls(d["fingerprint"], dict(d["outputs"]), dict(d.get("info", {})))


@dataclass
class ManifestEntry:
    id: str
    split: str
    doctor_id: str
    patient_id: str
    seed: int
    stages: dict[str, StageRecord] = field(default_factory=dict)

    @property
    def directory(self) -> str:
        return f"{self.split}/{self.id}"

    def path(self, name: str) -> str:
        return f"{self.directory}/{name}"

    def spec(self) -> DialogueSpec:
        return DialogueSpec(self.id, self.doctor_id, self.patient_id, self.split, self.seed)

    def flags(self) -> dict[str, bool]:
        return {s: s in self.stages for s in STAGES if s not in CORPUS_STAGES}

    def to_dict(self) -> dict:
        return {"kind": "entry", "id": self.id, "split": self.split, "doctor_id": self.doctor_id,
                "patient_id": self.patient_id, "seed": self.seed,
                "stages": {s: r.to_dict() for s, r in sorted(self.stages.items())}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ManifestEntry":
        return cls(d["id"], d["split"], d["doctor_id"], d["patient_id"], int(d["seed"]),
                   {s: StageRecord.from_dict(r) for s, r in d.get("stages", {}).items()})


class Manifest:
    """Snapshot plus journal. Only :class:`Corpus` (a single writer) mutates it."""

    def __init__(self):
        self.seq = 0
        self.corpus: dict[str, StageRecord] = {}
        self.entries: dict[str, ManifestEntry] = {}

    # the journal is the source of truth; the snapshot is a compaction of it
    def apply(self, op: Mapping[str, Any]) -> None:
        kind = op["op"]
        if kind == "entries":
            old = self.entries
            self.entries = {}
            for d in op["specs"]:
                prev = old.get(d["id"])
                entry = ManifestEntry(d["id"], d["split"], d["doctor_id"], d["patient_id"], int(d["seed"]))
                if prev is not None and prev.spec() == entry.spec():
                    entry.stages = prev.stages
                self.entries[entry.id] = entry
        elif kind == "record":
            rec = StageRecord.from_dict(op["record"])
            if op["key"] == "corpus":
                self.corpus[op["stage"]] = rec
            else:
                self.entries[op["key"]].stages[op["stage"]] = rec
        else:
            raise CorruptionError(f"unknown journal operation {kind!r}")
        self.seq = int(op["seq"])

    def snapshot_lines(self) -> list[dict]:
        lines: list[dict] = [{"kind": "header", "schema_version": MANIFEST_SCHEMA, "seq": self.seq}]
        lines += [{"kind": "corpus", "stage": s, "record": r.to_dict()} for s, r in sorted(self.corpus.items())]
        lines += [e.to_dict() for _, e in sorted(self.entries.items())]
        return lines

    @classmethod
    def from_snapshot(cls, lines: Sequence[Mapping[str, Any]]) -> "Manifest":
        m = cls()
        if not lines:
            return m
        header = lines[0]
        if header.get("kind") != "header":
            raise CorruptionError("manifest snapshot lacks its header line")
        if header.get("schema_version") != MANIFEST_SCHEMA:
            raise CorruptionError(f"manifest schema {header.get('schema_version')} is not {MANIFEST_SCHEMA}")
        m.seq = int(header["seq"])
        for line in lines[1:]:
            if line["kind"] == "corpus":
                m.corpus[line["stage"]] = StageRecord.from_dict(line["record"])
            elif line["kind"] == "entry":
                e = ManifestEntry.from_dict(line)
                m.entries[e.id] = e
        return m


# ---------------------------------------------------------------------------
# File access


class StageContext:
    """Reads corpus files on behalf of a stage, refusing undeclared inputs and recording every access."""

    def __init__(self, root: Path, declared: Iterable[str], digests: Mapping[str, str], audit: list):
        self.root = root
        self.declared = set(declared)
        self.digests = digests
        self.audit = audit

    def read_bytes(self, rel: str) -> bytes:
        if rel not in self.declared:
            raise AuditError(f"read of undeclared input {rel}")
        self.audit.append(rel)
        path = self.root / rel
        if not path.exists():
            raise DependencyError(f"input file {rel} is missing; rerun the stage that produces it")
        data = path.read_bytes()
        expected = self.digests.get(rel)
        if expected is not None and sha256_bytes(data) != expected:
            raise CorruptionError(f"input file {rel} does not match its manifest digest")
        return data

    def read_json(self, rel: str) -> Any:
        return json.loads(self.read_bytes(rel))

    def read_text(self, rel: str) -> str:
        return self.read_bytes(rel).decode("utf-8")

    def read_jsonl(self, rel: str) -> list[Any]:
        return [json.loads(line) for line in self.read_text(rel).splitlines() if line.strip()]

    def read_wav(self, rel: str) -> AudioBuffer:
        return wav_from_bytes(self.read_bytes(rel))


@dataclass
class Unit:
    stage: str
    key: str  # dialogue id or "corpus"
    inputs: list[str]  # corpus-relative files the unit may read
    params: dict[str, Any]
    entry: ManifestEntry | None = None

    def fingerprint(self, digests: Mapping[str, str]) -> str:
        payload = {"stage": self.stage, "version": STAGE_VERSIONS[self.stage], "params": self.params,
                   "inputs": {rel: digests.get(rel) for rel in sorted(self.inputs)}}
        return sha256_bytes(canonical_json(payload).encode("utf-8"))


@dataclass
class StageReport:
    stage: str
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    written: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return (f"{self.stage}: {len(self.ran)} ran, {len(self.skipped)} up to date, {len(self.failed)} failed, "
                f"{len(self.written)} file(s) written")


def parse_selection(ids: Sequence[str] | None) -> Callable[[str], bool] | None:
    """``--ids`` values: exact ids, comma lists, or inclusive ranges ``dev-00000..dev-00009``."""
    if not ids:
        return None
    exact: set[str] = set()
    ranges: list[tuple[str, str]] = []
    for chunk in ids:
        for item in chunk.split(","):
            item = item.strip()
            if not item:
                continue
            if ".." in item:
                lo, hi = item.split("..", 1)
                ranges.append((lo, hi))
            else:
                exact.add(item)
    return lambda i: i in exact or any(lo <= i <= hi and len(i) == len(lo) for lo, hi in ranges)


# ---------------------------------------------------------------------------
# The corpus


class Corpus:
    def __init__(self, config: PipelineConfig, root: str | Path | None = None, *, chat=None, tts=None,
                 aligner=None):
        self.config = config
        self.root = Path(root) if root is not None else config.corpus
        self._chat, self._tts, self._aligner = chat, tts, aligner
        self._lock_fh = None
        self.audit: list[tuple[str, str, str]] = []  # (stage, unit key, relative path)
        self.manifest = self._load_manifest()

    # -- locking --------------------------------------------------------

    def __enter__(self) -> "Corpus":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def acquire(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        fh = open(self.root / ".lock", "a")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise LockError(f"another convoforge process holds the lock on {self.root}") from None
        self._lock_fh = fh

    def release(self) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    # -- manifest persistence -------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"

    @property
    def journal_path(self) -> Path:
        return self.root / "journal.jsonl"

    def _load_manifest(self) -> Manifest:
        lines = []
        if self.manifest_path.exists():
            lines = [json.loads(x) for x in self.manifest_path.read_text(encoding="utf-8").splitlines() if x.strip()]
        m = Manifest.from_snapshot(lines)
        if self.journal_path.exists():
            for line in self.journal_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                try:
                    op = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("ignoring a torn journal line (interrupted write)")
                    continue
                if int(op["seq"]) > m.seq:
                    m.apply(op)
        return m

    def _journal(self, op: dict) -> None:
        op = {"seq": self.manifest.seq + 1, **op}
        self.manifest.apply(op)
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            fh.write(canonical_json(op) + "\n")

    def _compact(self) -> bool:
        return write_if_changed(self.manifest_path, dump_jsonl(self.manifest.snapshot_lines()))

    # -- shared resources -----------------------------------------------

    @cached_property
    def chat(self):
        if self._chat is None:
            kw = {} if self.config.chat.startswith(("mock", "replay")) else {
                "max_concurrency": self.config.backend_concurrency}
            self._chat = make_chat_backend(self.config.chat, self.config.chat_model, **kw)
        return self._chat

    @cached_property
    def tts(self):
        if self._tts is None:
            kw = {} if self.config.tts == "mock" else {"max_concurrency": self.config.backend_concurrency}
            self._tts = make_tts_backend(self.config.tts, self.config.tts_model, **kw)
        return self._tts

    @cached_property
    def aligner(self):
        if self._aligner is None and self.config.aligner not in (None, "", "none", "heuristic"):
            kw = {} if self.config.aligner == "mock" else {"max_concurrency": self.config.backend_concurrency}
            self._aligner = make_aligner(self.config.aligner, self.config.aligner_model, **kw)
        return self._aligner

    @cached_property
    def catalog(self) -> AttributeCatalog:
        return load_catalog(self.config.catalog_path)

    @cached_property
    def events(self) -> EventCatalog:
        return load_event_catalog(self.config.events_path)

    @cached_property
    def rirs(self) -> dict[str, AudioBuffer]:
        room = self.config.room
        return {"doctor": compute_rir(room, 0, self.config.sample_rate),
                "patient": compute_rir(room, 1, self.config.sample_rate)}

    def _asset_digest(self, path: Path | None, bundled: str) -> str:
        if path is None:
            path = Path(str(files("convoforge.data").joinpath(bundled)))
        return sha256_file(path)

    # -- stage planning -------------------------------------------------

    def select(self, split: str | None = None, ids: Sequence[str] | None = None) -> list[ManifestEntry]:
        match = parse_selection(ids)
        out = []
        for eid, e in sorted(self.manifest.entries.items()):
            if split is not None and e.split != split:
                continue
            if match is not None and not match(eid):
                continue
            out.append(e)
        return out

    def _digests(self) -> dict[str, str]:
        d: dict[str, str] = {}
        for rec in self.manifest.corpus.values():
            d.update(rec.outputs)
        for e in self.manifest.entries.values():
            for rec in e.stages.values():
                d.update(rec.outputs)
        return d

    def _units(self, stage: str, entries: Sequence[ManifestEntry]) -> list[Unit]:
        cfg = self.config
        if stage == "personas":
            return [Unit("personas", "corpus", [], {
                "plan": self.config.plan.to_dict(), "seed": cfg.seed,
                "catalog": self._asset_digest(cfg.catalog_path, "catalog.yaml"),
                "complaints": self._asset_digest(None, "complaints.txt") if cfg.catalog_path is None else None,
                "voices": sha256_file(cfg.voices_path) if cfg.voices_path else "synthetic",
                "sample_rate": cfg.sample_rate,
            })]
        if stage == "stats":
            inputs = ["personas.jsonl", "specs.jsonl"]
            for e in sorted(self.manifest.entries.values(), key=lambda e: e.id):
                for s, name in (("metrics", "metrics.json"), ("judge", "judge.json")):
                    if s in e.stages:
                        inputs.append(e.path(name))
            return [Unit("stats", "corpus", inputs, {"plan": cfg.plan.to_dict()})]
        units = []
        for e in entries:
            params: dict[str, Any] = {"spec": e.spec().to_dict()}
            tr = e.path("transcript.json")
            if stage == "dialogues":
                inputs = ["personas.jsonl"]
                params.update(chat=cfg.chat, model=cfg.chat_model, max_turns=cfg.max_turns,
                              temperature=cfg.temperature, mode=cfg.dialogue_mode)
            elif stage == "synth":
                inputs = [tr, "casting.json"]
                params.update(tts=cfg.tts, model=cfg.tts_model, sample_rate=cfg.sample_rate)
            elif stage == "scene":
                inputs = [tr, *self._dry_paths(e)]
                params.update(scene=cfg.scene.to_dict(), events=self._asset_digest(cfg.events_path, "events.yaml"),
                              aligner=cfg.aligner, fallback=cfg.chat if cfg.event_fallback else None,
                              sample_rate=cfg.sample_rate)
            elif stage == "render":
                inputs = [e.path("timeline.tsv"), *self._dry_paths(e)]
                params.update(room=cfg.room.to_dict(), augment=cfg.augment.to_dict(), noise=cfg.noise,
                              peak=cfg.peak, events=self._asset_digest(cfg.events_path, "events.yaml"),
                              sample_rate=cfg.sample_rate)
            elif stage == "notes":
                inputs = [tr]
                params.update(chat=cfg.chat, model=cfg.chat_model, grounding=cfg.grounding, retries=cfg.retries)
            elif stage == "judge":
                inputs = [tr, e.path("note.json")]
                params.update(chat=cfg.chat, model=cfg.chat_model, retries=cfg.retries)
            elif stage == "metrics":
                inputs = [tr, e.path("timeline.tsv"), e.path("note.json")]
            else:
                raise ConfigError(f"unknown stage {stage!r}")
            units.append(Unit(stage, e.id, inputs, params, e))
        return units

    def _dry_paths(self, e: ManifestEntry) -> list[str]:
        rec = e.stages.get("synth")
        return sorted(rec.outputs) if rec else []

    def _check_upstream(self, stage: str, entries: Sequence[ManifestEntry]) -> None:
        if stage == "personas":
            return
        if "personas" not in self.manifest.corpus:
            raise DependencyError(f"stage {stage} needs the personas stage; run `convoforge personas` first")
        if stage == "stats":
            if not self.manifest.entries:
                raise DependencyError("the corpus has no dialogues; nothing to summarize")
            if not any("metrics" in e.stages for e in self.manifest.entries.values()):
                raise DependencyError("stage stats needs metrics for at least one dialogue; run `convoforge metrics`")
            return
        for up in UPSTREAM[stage]:
            if up == "personas":
                continue
            missing = [e.id for e in entries if up not in e.stages]
            if missing:
                raise DependencyError(
                    f"stage {stage} needs stage {up} for {len(missing)} dialogue(s) (first: {missing[0]}); "
                    f"run `convoforge {up}` first")

    def _up_to_date(self, unit: Unit, record: StageRecord | None, fingerprint: str) -> bool:
        """True if the unit can be skipped; raises on outputs modified behind the manifest's back."""
        if record is None or record.fingerprint != fingerprint:
            return False
        complete = True
        for rel, digest in record.outputs.items():
            path = self.root / rel
            if not path.exists():
                complete = False
                continue
            if sha256_file(path) != digest:
                raise CorruptionError(f"{rel} does not match its manifest digest; run `convoforge verify` "
                                      f"and delete the file to regenerate it")
        return complete

    # -- running --------------------------------------------------------

    def run_stage(self, stage: str, *, split: str | None = None, ids: Sequence[str] | None = None,
                  workers: int | None = None) -> StageReport:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
        if stage == "render" and self.config.augment.codec == "opus" and not opus_available():
            raise DependencyError("the Opus codec is not available in this libsndfile build; "
                                  "set augment.codec to 'none'")
        entries = self.select(split, ids)
        self._check_upstream(stage, entries)
        digests = self._digests()
        report = StageReport(stage)
        todo: list[tuple[Unit, str]] = []
        for unit in self._units(stage, entries):
            fp = unit.fingerprint(digests)
            record = self.manifest.corpus.get(stage) if unit.entry is None else unit.entry.stages.get(stage)
            if self._up_to_date(unit, record, fp):
                report.skipped.append(unit.key)
            else:
                todo.append((unit, fp))
        if not todo:
            log.info("%s: everything up to date", stage)
            return report
        shared = self._shared_inputs(stage, digests)
        n_workers = max(1, workers or self.config.workers)

        def work(item):
            unit, fp = item
            audit: list[str] = []
            ctx = StageContext(self.root, unit.inputs + list(shared.get("declared", [])), digests, audit)
            try:
                outputs, info = getattr(self, f"_do_{stage}")(unit, ctx, shared)
                return unit, fp, outputs, info, audit, None
            except ConvoforgeError as exc:
                return unit, fp, None, None, audit, exc

        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            # results are consumed here, on the one thread that writes files and the manifest
            for unit, fp, outputs, info, audit, error in pool.map(work, todo):
                self.audit.extend((stage, unit.key, rel) for rel in audit)
                if error is not None:
                    log.error("%s %s failed: %s", stage, unit.key, error)
                    report.failed[unit.key] = str(error)
                    continue
                for rel, data in outputs.items():
                    if write_if_changed(self.root / rel, data):
                        report.written.append(rel)
                record = StageRecord(fp, {rel: sha256_bytes(data) for rel, data in outputs.items()}, info or {})
                prev = self.manifest.corpus.get(stage) if unit.entry is None else unit.entry.stages.get(stage)
                if prev is None or prev.to_dict() != record.to_dict():
                    self._journal({"op": "record", "stage": stage, "key": unit.key, "record": record.to_dict()})
                if stage == "personas":
                    specs = [json.loads(x) for x in outputs["specs.jsonl"].decode("utf-8").splitlines()]
                    current = [e.spec().to_dict() for _, e in sorted(self.manifest.entries.items())]
                    if sorted(specs, key=lambda s: s["id"]) != current:
                        self._journal({"op": "entries", "specs": specs})
                report.ran.append(unit.key)
        self._compact()
        log.info("%s", report.summary())
        if report.failed:
            raise StageFailure(stage, report.failed)
        return report

    def run_all(self, *, split: str | None = None, ids: Sequence[str] | None = None,
                workers: int | None = None) -> list[StageReport]:
        return [self.run_stage(s, split=split, ids=ids, workers=workers) for s in STAGES]

    def _shared_inputs(self, stage: str, digests: Mapping[str, str]) -> dict[str, Any]:
        """Corpus-level files a stage needs, parsed once and shared by all its units."""
        audit: list[str] = []
        if stage == "dialogues":
            ctx = StageContext(self.root, ["personas.jsonl"], digests, audit)
            personas = {d["id"]: Persona.from_dict(d) for d in ctx.read_jsonl("personas.jsonl")}
            shared: dict[str, Any] = {"personas": personas}
        elif stage == "synth":
            ctx = StageContext(self.root, ["casting.json"], digests, audit)
            casting = ctx.read_json("casting.json")
            bank = VoiceBank.load(self.config.voices_path) if self.config.voices_path else None
            shared = {"casting": casting, "bank": bank}
        else:
            shared = {}
        self.audit.extend((stage, "corpus", rel) for rel in audit)
        return shared

    # -- stage bodies: each returns ({relative path: bytes}, info) -------

    def _do_personas(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        cfg = self.config
        by_split = sample_personas(self.catalog, cfg.plan)
        people = [p for split in by_split.values() for p in split]
        specs = [s for split in split_specs(by_split, cfg.seed).values() for s in split]
        bank = VoiceBank.load(cfg.voices_path) if cfg.voices_path else synthetic_voice_bank(voice_needs(people))
        casting = cast_voices(people, bank, cfg.seed, cfg.sample_rate)
        outputs = {
            "personas.jsonl": dump_jsonl(p.to_dict() for p in people),
            "specs.jsonl": dump_jsonl(s.to_dict() for s in specs),
            "casting.json": dump_json({"schema_version": MANIFEST_SCHEMA, "voices": casting.to_dict(),
                                       "bank": [e.to_dict() for e in bank.entries if e.path is None]}),
        }
        return outputs, {"personas": len(people), "dialogues": len(specs)}

    def _do_dialogues(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        e, cfg = unit.entry, self.config
        ctx.audit.append("personas.jsonl")
        run = run_dialogue if cfg.dialogue_mode == "turn" else run_dialogue_single_shot
        kw = {"max_turns": cfg.max_turns, "temperature": cfg.temperature}
        transcript = run(e.spec(), shared["personas"], self.chat, **kw)
        if not transcript.turns:
            raise ConvoforgeError(f"{e.id}: the dialogue ended before any turn was produced")
        return {e.path("transcript.json"): dump_json(transcript.to_dict())}, {
            "turns": len(transcript.turns), "termination": transcript.termination}

    def _voice(self, shared, persona_id: str) -> AudioBuffer:
        from .scene import VoiceEntry, synthetic_reference

        v = shared["casting"]["voices"][persona_id]
        bank = shared["bank"]
        if bank is None:
            return synthetic_reference(VoiceEntry(v["voice_id"], v["gender"], v["split"]), self.config.sample_rate)
        entry = next(x for x in bank.entries if x.id == v["voice_id"])
        return bank.reference(entry, self.config.sample_rate)

    def _do_synth(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        e, cfg = unit.entry, self.config
        ctx.audit.append("casting.json")
        transcript = DialogueTranscript.from_dict(ctx.read_json(e.path("transcript.json")))
        voices = {"doctor": self._voice(shared, e.doctor_id), "patient": self._voice(shared, e.patient_id)}
        outputs = {}
        total = 0.0
        for turn in transcript.turns:
            if turn.clean_text.strip():
                req = TtsRequest(turn.clean_text, voices[turn.speaker], cfg.sample_rate,
                                 derive_seed(e.seed, "tts", turn.index))
                audio = synthesize(self.tts, req)
            else:
                audio = AudioBuffer(np.zeros(int(SILENT_TURN * cfg.sample_rate)), cfg.sample_rate)
            total += audio.duration
            outputs[e.path(f"dry/turn_{turn.index:03d}.wav")] = wav_bytes(audio)
        return outputs, {"speech_seconds": round(total, 6)}

    def _do_scene(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        e, cfg = unit.entry, self.config
        transcript = DialogueTranscript.from_dict(ctx.read_json(e.path("transcript.json")))
        dry = [ctx.read_wav(e.path(f"dry/turn_{t.index:03d}.wav")) for t in transcript.turns]
        alignments = None
        if self.aligner is not None:
            alignments = {t.index: self.aligner.align(t.clean_text, a)
                          for t, a in zip(transcript.turns, dry) if t.clean_text.strip()}
        fallback = llm_event_mapper(self.chat, self.events) if cfg.event_fallback else None
        timeline = compose_scene(transcript, [a.duration for a in dry], self.events, cfg.scene, e.seed,
                                 fallback=fallback, alignments=alignments, sample_rate=cfg.sample_rate)
        return {e.path("timeline.tsv"): timeline.to_tsv().encode("utf-8")}, {
            "events": len(timeline.events), "duration": round(timeline.total_duration, 6),
            "overlaps": len(timeline.overlapping_pairs())}

    def _do_render(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        e, cfg = unit.entry, self.config
        timeline = SceneTimeline.from_tsv(ctx.read_text(e.path("timeline.tsv")))
        dry = {s.source: ctx.read_wav(e.path(s.source)) for s in timeline.speech}
        for ev in timeline.events:
            dry[ev.source] = self.events.clip(ev.source, cfg.sample_rate)
        noise = None
        if cfg.noise == "hvac":
            noise = hvac_noise(timeline.total_duration + 1.0, cfg.sample_rate, derive_seed(e.seed, "noise"))
        mix = render_scene(timeline, self.rirs, dry, noise, cfg.augment)
        coded = codec_roundtrip(peak_normalize(mix, cfg.peak), cfg.augment)
        info = {"codec": cfg.augment.codec, "encoded_bytes": coded.encoded_bytes, "raw_bytes": coded.raw_bytes,
                "duration": round(coded.audio.duration, 6)}
        return {e.path("wet.wav"): wav_bytes(coded.audio)}, info

    def _do_notes(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        e, cfg = unit.entry, self.config
        transcript = DialogueTranscript.from_dict(ctx.read_json(e.path("transcript.json")))
        facts = extract_facts(transcript, self.chat, retries=cfg.retries, policy=cfg.grounding, seed=e.seed)
        note = generate_note(facts, self.chat, retries=cfg.retries, seed=e.seed)
        return {e.path("facts.json"): dump_json(facts.to_dict()), e.path("note.json"): dump_json(note.to_dict())}, {
            "facts": len(facts), "note_words": note.word_count}

    def _do_judge(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        e, cfg = unit.entry, self.config
        transcript = DialogueTranscript.from_dict(ctx.read_json(e.path("transcript.json")))
        note = SoapNote.from_dict(ctx.read_json(e.path("note.json")))
        report = judge_note(note, transcript, self.chat, note_id=e.id, retries=cfg.retries)
        return {e.path("judge.json"): dump_json(report.to_dict())}, {"claims": len(report.claims)}

    def _do_metrics(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        e = unit.entry
        transcript = DialogueTranscript.from_dict(ctx.read_json(e.path("transcript.json")))
        timeline = SceneTimeline.from_tsv(ctx.read_text(e.path("timeline.tsv")))
        note = SoapNote.from_dict(ctx.read_json(e.path("note.json")))
        row = dialogue_metrics(e, transcript, timeline, note)
        return {e.path("metrics.json"): dump_json(row)}, {}

    def _do_stats(self, unit: Unit, ctx: StageContext, shared) -> tuple[dict[str, bytes], dict]:
        personas = [Persona.from_dict(d) for d in ctx.read_jsonl("personas.jsonl")]
        specs = [DialogueSpec.from_dict(d) for d in ctx.read_jsonl("specs.jsonl")]
        rows, reports = [], []
        for rel in unit.inputs:
            if rel.endswith("metrics.json"):
                rows.append(ctx.read_json(rel))
            elif rel.endswith("judge.json"):
                reports.append(JudgeReport.from_dict(ctx.read_json(rel)))
        stats = corpus_stats(personas, specs, rows)
        text = format_stats(stats)
        if reports:
            agg = aggregate(reports)
            stats["judge"] = {dim: a.to_dict() for dim, a in agg.items()}
            text += "\nJudge scores (reference notes)\n" + comparison_table({"Reference": agg})
        return {"stats.json": dump_json(stats), "stats.txt": text.encode("utf-8")}, {
            "dialogues_with_metrics": len(rows)}

    # -- integrity ------------------------------------------------------

    def verify(self) -> "VerifyReport":
        rep = VerifyReport()
        for stage, rec in sorted(self.manifest.corpus.items()):
            self._verify_record(rep, f"corpus/{stage}", rec)
        for eid, e in sorted(self.manifest.entries.items()):
            for stage, rec in sorted(e.stages.items()):
                self._verify_record(rep, f"{eid}/{stage}", rec)
        personas_path = self.root / "personas.jsonl"
        if personas_path.exists():
            try:
                people = [Persona.from_dict(json.loads(x))
                          for x in personas_path.read_text(encoding="utf-8").splitlines() if x.strip()]
            except (ValueError, TypeError, ConvoforgeError) as exc:
                rep.fail("personas.jsonl", f"unreadable: {exc}")
                people = []
            shared = check_disjoint(people)
            for pid in shared:
                rep.fail("personas.jsonl", f"split disjointness: persona {pid} appears in more than one split")
            where = {p.id: p.split for p in people}
            for eid, e in sorted(self.manifest.entries.items()):
                for pid in (e.doctor_id, e.patient_id):
                    if pid in where and where[pid] != e.split:
                        rep.fail(eid, f"split disjointness: persona {pid} belongs to {where[pid]}, "
                                      f"dialogue is in {e.split}")
            rep.checked += 1
        casting_path = self.root / "casting.json"
        if casting_path.exists():
            try:
                voices = json.loads(casting_path.read_text(encoding="utf-8"))["voices"]
            except (ValueError, KeyError) as exc:
                rep.fail("casting.json", f"unreadable: {exc}")
                voices = {}
            splits_of: dict[str, set[str]] = {}
            for v in voices.values():
                splits_of.setdefault(v["voice_id"], set()).add(v["split"])
            for vid, s in sorted(splits_of.items()):
                if len(s) > 1:
                    rep.fail("casting.json", f"split disjointness: voice {vid} used in {sorted(s)}")
            used = [v["voice_id"] for v in voices.values()]
            if len(used) != len(set(used)):
                rep.fail("casting.json", "a voice is assigned to more than one persona")
        return rep

    def _verify_record(self, rep: "VerifyReport", owner: str, rec: StageRecord) -> None:
        for rel, digest in sorted(rec.outputs.items()):
            rep.checked += 1
            path = self.root / rel
            if not path.exists():
                rep.fail(rel, f"missing ({owner})")
            elif sha256_file(path) != digest:
                rep.fail(rel, f"digest mismatch ({owner})")


@dataclass
class VerifyReport:
    checked: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, what: str, message: str) -> None:
        self.failures.append((what, message))

    def format(self) -> str:
        lines = [f"checked {self.checked} item(s), {len(self.failures)} failure(s)"]
        lines += [f"FAIL {what}: {msg}" for what, msg in self.failures]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Statistics


def dialogue_metrics(entry: ManifestEntry, transcript: DialogueTranscript, timeline: SceneTimeline,
                     note: SoapNote) -> dict:
    turn_words: dict[str, list[int]] = {"doctor": [], "patient": []}
    fog: dict[str, list[int]] = {"doctor": [0, 0, 0], "patient": [0, 0, 0]}
    for t in transcript.turns:
        turn_words[t.speaker].append(word_count(t.clean_text))
        for i, c in enumerate(fog_counts(t.clean_text)):
            fog[t.speaker][i] += c
    return {
        "schema_version": MANIFEST_SCHEMA,
        "dialogue_id": entry.id,
        "split": entry.split,
        "turns": len(transcript.turns),
        "words": sum(sum(v) for v in turn_words.values()),
        "turn_words": turn_words,
        "fog_counts": fog,
        "duration": round(timeline.total_duration, 6),
        "events": len(timeline.events),
        "overlaps": len(timeline.overlapping_pairs()),
        "note_words": note.word_count,
    }


def _ms(values: Sequence[float]) -> dict:
    return MeanStd.of(values).to_dict()


def corpus_stats(personas: Sequence[Persona], specs: Sequence[DialogueSpec], rows: Sequence[Mapping]) -> dict:
    """Split-by-split statistics; dialogues without a metrics row are reported as gaps."""
    if not specs:
        raise ConvoforgeError("empty corpus: no dialogues to summarize")
    have = {r["dialogue_id"] for r in rows}
    splits = [s for s in SPLITS if any(sp.split == s for sp in specs)]
    out: dict[str, Any] = {"schema_version": MANIFEST_SCHEMA, "splits": {}, "gaps": sorted(
        sp.id for sp in specs if sp.id not in have)}
    groups = {s: [r for r in rows if r["split"] == s] for s in splits}
    groups["total"] = list(rows)
    for name, rs in groups.items():
        members = personas if name == "total" else [p for p in personas if p.split == name]
        sp = specs if name == "total" else [x for x in specs if x.split == name]
        fog = {}
        for role in ("doctor", "patient"):
            w, s, c = (sum(r["fog_counts"][role][i] for r in rs) for i in range(3))
            fog[role] = fog_from_counts(w, s, c) if w and s else None
        out["splits"][name] = {
            "doctors": sum(p.role == "doctor" for p in members),
            "patients": sum(p.role == "patient" for p in members),
            "dialogues": len(sp),
            "with_metrics": len(rs),
            "hours": sum(r["duration"] for r in rs) / 3600.0,
            "words": sum(r["words"] for r in rs),
            "turns": _ms([r["turns"] for r in rs]),
            "duration": _ms([r["duration"] for r in rs]),
            "events": _ms([r["events"] for r in rs]),
            "note_words": _ms([r["note_words"] for r in rs]),
            "turn_length": {role: _ms([n for r in rs for n in r["turn_words"][role]]) for role in ("doctor", "patient")},
            "fog": fog,
        }
    return out


def _human(n: float) -> str:
    if n >= 1e6:
        return f"{n / 1e6:.1f}M"
    if n >= 1e4:
        return f"{n / 1e3:.0f}K"
    return f"{n:,.0f}"


def format_stats(stats: Mapping[str, Any]) -> str:
    """Dataset table (per split and total) followed by per-role turn length and fog index."""
    cols = list(stats["splits"])
    s = stats["splits"]
    rows = [
        ("Personas (Doc/Pat)", [f"{s[c]['doctors']}/{s[c]['patients']}" for c in cols]),
        ("Dialogues", [f"{s[c]['dialogues']:,}" for c in cols]),
        ("Hours", [f"{s[c]['hours']:,.2f}" if s[c]["hours"] < 10 else f"{s[c]['hours']:,.0f}" for c in cols]),
        ("Words in dialogues", [_human(s[c]["words"]) for c in cols]),
        ("Turns/dialogue", [f"{s[c]['turns']['mean']:.1f}" for c in cols]),
        ("Duration/dialogue (s)", [f"{s[c]['duration']['mean']:.0f}" for c in cols]),
        ("Audio events/dialogue", [f"{s[c]['events']['mean']:.1f}" for c in cols]),
        ("Words per SOAP note", [f"{s[c]['note_words']['mean']:.1f}" for c in cols]),
    ]
    head = [""] + [c.capitalize() for c in cols]
    table = [head] + [[name, *vals] for name, vals in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(head))]
    lines = ["Dataset statistics"]
    for k, r in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i])
                               for i, cell in enumerate(r)).rstrip())
        if k == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    if stats.get("gaps"):
        lines.append(f"gaps: {len(stats['gaps'])} dialogue(s) without metrics (first: {stats['gaps'][0]})")
    tot = s["total"]
    lines += ["", "Dialogue statistics (all splits)",
              f"{'':<10}{'Turn length':>16}{'Fog index':>11}"]
    for role in ("doctor", "patient"):
        tl = tot["turn_length"][role]
        fog = tot["fog"][role]
        fog_txt = "n/a" if fog is None else f"{fog:.1f}"
        lines.append(f"{role.capitalize():<10}{tl['mean']:>9.1f} ± {tl['std']:<4.1f}{fog_txt:>11}")
    lines.append(f"Turns per dialogue: {tot['turns']['mean']:.1f} ± {tot['turns']['std']:.1f}")
    return "\n".join(lines) + "\n"


def export_stats(corpus: Corpus) -> str:
    path = corpus.root / "stats.txt"
    if "stats" not in corpus.manifest.corpus or not path.exists():
        raise DependencyError("no statistics yet; run `convoforge stats` first")
    return path.read_text(encoding="utf-8")


@contextmanager
def open_corpus(config: PipelineConfig, root: str | Path | None = None, **backends) -> Iterator[Corpus]:
    corpus = Corpus(config, root, **backends)
    corpus.acquire()
    try:
        yield corpus
    finally:
        corpus.release()


def default_config_text() -> str:
    return yaml.safe_dump(PipelineConfig().to_dict(), sort_keys=False)


def make_config(**overrides) -> PipelineConfig:
    """Config built from :meth:`PipelineConfig.from_dict` keys (used by tests and scripts)."""
    return PipelineConfig.from_dict(overrides, Path(os.getcwd()))
