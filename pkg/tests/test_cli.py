from __future__ import annotations

import json
import shutil

import pytest
import yaml

from convoforge.cli import build_parser, main
from convoforge.dialogue import DialogueTranscript
from convoforge.notes import SoapNote


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = {"corpus": "corpus", "seed": 1, "plan": {"test": [1, 2]}, "augment": {"codec": "none"}}
    path = base / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["all", "--config", str(path)]) == 0
    return path


def test_parser_lists_every_command():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert {"personas", "dialogues", "synth", "scene", "render", "notes", "judge", "metrics", "stats", "all",
            "verify", "evaluate", "init"} <= set(sub)


def test_init_prints_loadable_config(capsys, tmp_path):
    assert main(["init"]) == 0
    path = tmp_path / "c.yaml"
    path.write_text(capsys.readouterr().out)
    assert main(["verify", "--config", str(path), "--corpus", str(tmp_path / "empty")]) == 0


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("bogus: 1\n")
    assert main(["personas", "--config", str(path)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_upstream_exit_code(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("plan: {dev: [1, 1]}\n")
    assert main(["synth", "--config", str(path)]) == 2
    assert "personas" in capsys.readouterr().err


def test_stage_failure_exit_code(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("plan: {dev: [1, 1]}\n")
    assert main(["personas", "--config", str(path)]) == 0
    assert main(["dialogues", "--config", str(path), "--backend", "http://127.0.0.1:9"]) == 1


def test_all_then_verify(cfg_path, capsys):
    assert main(["all", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "stats: 0 ran, 1 up to date" in out and "Dataset statistics" in out
    assert main(["verify", "--config", str(cfg_path)]) == 0
    assert "0 failure(s)" in capsys.readouterr().out


def test_verify_failure_exit_code(cfg_path, tmp_path, capsys):
    root = tmp_path / "corpus"
    shutil.copytree(cfg_path.parent / "corpus", root)
    (root / "test" / "test-00000" / "note.json").write_text("{}")
    assert main(["verify", "--config", str(cfg_path), "--corpus", str(root)]) == 1
    assert "FAIL test/test-00000/note.json" in capsys.readouterr().out


def test_evaluate(cfg_path, tmp_path, capsys):
    root = cfg_path.parent / "corpus"
    notes, asr = tmp_path / "notes", tmp_path / "asr"
    notes.mkdir()
    asr.mkdir()
    ids = sorted(p.name for p in (root / "test").iterdir())
    for i, eid in enumerate(ids):
        note = SoapNote.from_dict(json.loads((root / "test" / eid / "note.json").read_text()))
        if i == 0:
            (notes / f"{eid}.txt").write_text(note.to_text())
        else:
            (notes / f"{eid}.json").write_text(json.dumps(note.to_dict()))
        tr = DialogueTranscript.from_dict(json.loads((root / "test" / eid / "transcript.json").read_text()))
        (asr / f"{eid}.txt").write_text(" ".join(t.clean_text for t in tr.turns))
    assert main(["evaluate", "--config", str(cfg_path), "--notes", f"copy={notes}", "--asr", str(asr),
                 "--judge"]) == 0
    out = capsys.readouterr().out
    row = next(line for line in out.splitlines() if line.startswith("copy"))
    assert row.split()[1:4] == ["100.0", "100.00", "100.0"]
    assert "WER over 2 dialogue(s): 0.00%" in out
    assert "Unsup." in out


def test_evaluate_missing_files(cfg_path, tmp_path, capsys):
    assert main(["evaluate", "--config", str(cfg_path), "--notes", f"none={tmp_path}"]) == 1
    assert "missing" in capsys.readouterr().err
    assert main(["evaluate", "--config", str(cfg_path), "--notes", "nodir"]) == 2
    assert main(["evaluate", "--config", str(cfg_path), "--split", "dev"]) == 2
