from __future__ import annotations

import json
import shutil

import pytest

from convoforge.corpus import (STAGES, ConfigError, Corpus, CorruptionError, DependencyError, LockError,
                               PipelineConfig, StageFailure, corpus_stats, export_stats, format_stats, make_config,
                               open_corpus, parse_selection)
from convoforge.personas import SplitPlan, load_catalog, sample_personas, split_specs
from convoforge.util import ConvoforgeError

PLAN = {"dev": [2, 2]}
FAST = {"augment": {"codec": "none"}, "scene": {"event_density": 5.0}}


def _config(root, **extra):
    d = {"corpus": str(root), "seed": 3, "plan": PLAN, **FAST, **extra}
    return make_config(**d)


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "c"
    with Corpus(_config(root)) as c:
        c.run_all()
    return root


@pytest.fixture
def copy(built, tmp_path):
    dst = tmp_path / "c"
    shutil.copytree(built, dst)
    return dst


# -- configuration ----------------------------------------------------------

def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        make_config(colour="blue")
    with pytest.raises(ConfigError, match="in render"):
        make_config(render={"volume": 3})


@pytest.mark.parametrize("bad", [{"plan": {"holdout": [1, 1]}}, {"render": {"peak": 2}},
                                 {"notes": {"grounding": "maybe"}}, {"dialogue": {"mode": "x"}},
                                 {"assets": {"catalog": "/no/such/file.yaml"}}, {"seed": "abc"}])
def test_invalid_values_rejected(bad):
    with pytest.raises(ConfigError):
        make_config(**bad)


def test_config_roundtrip(tmp_path):
    import yaml

    cfg = _config(tmp_path / "c")
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert PipelineConfig.load(path).to_dict() == cfg.to_dict()
    path.write_text("- just a list")
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


def test_parse_selection():
    assert parse_selection(None) is None
    m = parse_selection(["dev-00001,dev-00003", "test-00002..test-00004"])
    assert [i for i in ["dev-00001", "dev-00002", "dev-00003", "test-00003", "test-00005", "test-000030"]
            if m(i)] == ["dev-00001", "dev-00003", "test-00003"]


# -- stage ordering and idempotence ----------------------------------------

def test_stage_before_upstream(tmp_path):
    with Corpus(_config(tmp_path / "c")) as c:
        with pytest.raises(DependencyError, match="personas"):
            c.run_stage("dialogues")
        c.run_stage("personas")
        with pytest.raises(DependencyError, match="scene"):
            c.run_stage("render")
        with pytest.raises(DependencyError, match="metrics"):
            c.run_stage("stats")
        with pytest.raises(ConfigError):
            c.run_stage("paint")


def test_full_build_flags(built):
    c = Corpus(_config(built))
    assert len(c.manifest.entries) == 4
    for e in c.manifest.entries.values():
        assert all(e.flags()[s] for s in STAGES if s not in ("personas", "stats"))
        for name in ("transcript.json", "timeline.tsv", "wet.wav", "note.json", "facts.json", "judge.json",
                     "metrics.json"):
            assert (built / e.path(name)).exists()
    assert set(c.manifest.corpus) == {"personas", "stats"}
    assert c.verify().ok


def test_rerun_is_noop(copy):
    before = {p: p.read_bytes() for p in copy.rglob("*") if p.is_file()}
    with Corpus(_config(copy)) as c:
        reports = c.run_all()
    assert all(not r.ran and not r.written for r in reports)
    after = {p: p.read_bytes() for p in copy.rglob("*") if p.is_file()}
    assert after == before


def test_deleted_output_is_restored(copy):
    c = Corpus(_config(copy))
    e = sorted(c.manifest.entries.values(), key=lambda e: e.id)[1]
    target = copy / e.path("timeline.tsv")
    original = target.read_bytes()
    target.unlink()
    with c:
        reports = {r.stage: r for r in c.run_all()}
    assert target.read_bytes() == original
    assert reports["scene"].ran == [e.id] and reports["render"].ran == []


def test_modified_output_raises(copy):
    c = Corpus(_config(copy))
    e = next(iter(c.manifest.entries.values()))
    (copy / e.path("note.json")).write_text("{}")
    with c, pytest.raises(CorruptionError):
        c.run_stage("notes")


def test_config_change_reruns_downstream_only(copy):
    with Corpus(_config(copy, render={"peak": 0.5})) as c:
        reports = {r.stage: r for r in c.run_all()}
    assert len(reports["render"].ran) == 4
    assert not reports["dialogues"].ran and not reports["metrics"].ran


def test_selection_limits_work(copy):
    with Corpus(_config(copy, render={"peak": 0.5})) as c:
        rep = c.run_stage("render", ids=["dev-00000..dev-00001"])
    assert rep.ran == ["dev-00000", "dev-00001"]


def test_journal_replay_survives_torn_line(copy):
    c = Corpus(_config(copy))
    snapshot = c.manifest.snapshot_lines()
    (copy / "manifest.jsonl").unlink()
    with open(copy / "journal.jsonl", "a") as fh:
        fh.write('{"seq": 99999, "op": "rec')
    assert Corpus(_config(copy)).manifest.snapshot_lines() == snapshot


def test_stage_failure_reports_unit(tmp_path):
    from convoforge.gateway import ScriptedChat

    cfg = _config(tmp_path / "c", plan={"dev": [1, 1]})
    with Corpus(cfg, chat=ScriptedChat([])) as c:
        c.run_stage("personas")
        with pytest.raises(StageFailure) as info:
            c.run_stage("dialogues")
    assert list(info.value.failures) == ["dev-00000"]


def test_undeclared_read_is_an_audit_error(built):
    from convoforge.corpus import AuditError, StageContext

    ctx = StageContext(built, ["personas.jsonl"], {}, [])
    with pytest.raises(AuditError):
        ctx.read_bytes("casting.json")


def test_reads_are_audited(copy):
    with Corpus(_config(copy, render={"peak": 0.5})) as c:
        c.run_stage("render")
        reads = {rel for stage, _, rel in c.audit if stage == "render"}
    assert any(r.endswith("timeline.tsv") for r in reads) and any("/dry/" in r for r in reads)


# -- locking ----------------------------------------------------------------

def test_lock_conflict(tmp_path):
    cfg = _config(tmp_path / "c")
    with open_corpus(cfg):
        with pytest.raises(LockError):
            Corpus(cfg).acquire()
    with open_corpus(cfg):
        pass


# -- verify -----------------------------------------------------------------

def test_truncated_audio_is_one_failure(copy):
    c = Corpus(_config(copy))
    e = sorted(c.manifest.entries)[0]
    wav = copy / c.manifest.entries[e].path("wet.wav")
    wav.write_bytes(wav.read_bytes()[: wav.stat().st_size // 2])
    rep = c.verify()
    assert len(rep.failures) == 1 and rep.failures[0][0].endswith(f"{e}/wet.wav")
    assert "digest mismatch" in rep.format()


def test_shared_persona_is_disjointness_failure(copy):
    path = copy / "personas.jsonl"
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    moved = dict(rows[0], split="test")
    path.write_text("\n".join(json.dumps(r) for r in rows + [moved]) + "\n")
    rep = Corpus(_config(copy)).verify()
    assert any("disjointness" in m and rows[0]["id"] in m for _, m in rep.failures)


# -- statistics -------------------------------------------------------------

def test_stats_table(built):
    text = export_stats(Corpus(_config(built)))
    for row in ("Personas (Doc/Pat)", "Dialogues", "Hours", "Words in dialogues", "Turns/dialogue",
                "Duration/dialogue (s)", "Audio events/dialogue", "Words per SOAP note", "Judge scores"):
        assert row in text
    stats = json.loads((built / "stats.json").read_text())
    assert stats["splits"]["dev"]["dialogues"] == 4 and stats["gaps"] == []


def test_stats_on_full_plan_lists_gaps():
    plan = SplitPlan.standard(0)
    people = sample_personas(load_catalog(), plan)
    specs = [s for v in split_specs(people, 0).values() for s in v]
    flat = [p for v in people.values() for p in v]
    row = {"dialogue_id": specs[0].id, "split": specs[0].split, "turns": 2, "words": 16, "duration": 10.0,
           "events": 3, "overlaps": 0, "note_words": 100,
           "turn_words": {"doctor": [10], "patient": [6]},
           "fog_counts": {"doctor": [10, 1, 0], "patient": [6, 1, 0]}}
    stats = corpus_stats(flat, specs, [row])
    s = stats["splits"]
    assert (s["train"]["dialogues"], s["dev"]["dialogues"], s["test"]["dialogues"]) == (7200, 400, 1200)
    for split, (d, p) in plan.counts.items():
        assert (s[split]["doctors"], s[split]["patients"]) == (d, p)
        assert s[split]["dialogues"] == d * p
    assert s["total"]["dialogues"] == 8800 and len(stats["gaps"]) == 8799
    text = format_stats(stats)
    assert "8,800" in text and "gaps: 8799" in text
    assert s["total"]["turn_length"]["doctor"]["mean"] == 10 and s["total"]["turn_length"]["patient"]["mean"] == 6


def test_empty_corpus_is_an_error(tmp_path):
    with pytest.raises(ConvoforgeError):
        corpus_stats([], [], [])
    with pytest.raises(DependencyError):
        export_stats(Corpus(_config(tmp_path / "c")))
