from __future__ import annotations

import pytest

from convoforge.dialogue import (END_MARKER, DialogueError, DialogueTranscript, Turn, TurnPrompt, clean_reply,
                                 format_history, generate_turn, parse_stage_directions, parse_transcript_text,
                                 run_dialogue, run_dialogue_single_shot)
from convoforge.gateway import ScriptedChat
from convoforge.mock_llm import MockLLM
from convoforge.personas import SplitPlan, load_catalog, sample_personas, split_specs
from convoforge.prompts import TemplateError, load_template, parse_template


@pytest.fixture(scope="module")
def cast():
    people = sample_personas(load_catalog(), SplitPlan({"dev": (1, 1)}, seed=3))
    spec = split_specs(people, 3)["dev"][0]
    return spec, {p.id: p for p in people["dev"]}


def test_single_direction():
    clean, dirs = parse_stage_directions("Come in. (door knocks)")
    assert clean == "Come in."
    assert [(d.text, d.offset) for d in dirs] == [("door knocks", 9)]


def test_no_directions():
    assert parse_stage_directions("No directions here.") == ("No directions here.", [])


def test_two_directions_offsets_index_raw_text():
    text = "(sighs) I see. (typing)"
    clean, dirs = parse_stage_directions(text)
    assert clean == "I see."
    assert [d.offset for d in dirs] == [0, text.index("(typing)")] == [0, 15]
    assert all(text[d.offset] == "(" for d in dirs)


def test_square_brackets_are_directions():
    clean, dirs = parse_stage_directions("Hold on [phone rings] sorry.")
    assert clean == "Hold on sorry." and dirs[0].text == "phone rings"


@pytest.mark.parametrize("text", ["I was (sort of tired", "It hurts) here", "Odd (nested (thing)) here", "Empty () here"])
def test_malformed_delimiters_stay_literal(text, caplog):
    clean, dirs = parse_stage_directions(text)
    assert dirs == []
    assert clean == " ".join(text.split())
    assert "literal" in caplog.text


def test_clean_reply_strips_labels_and_truncates():
    assert clean_reply("Doctor: Hello there.") == ("Hello there.", False)
    text, ended = clean_reply("Fine thanks. PATIENT: And you?")
    assert text == "Fine thanks." and not ended
    assert clean_reply(f"Goodbye. {END_MARKER}") == ("Goodbye.", True)
    assert clean_reply(END_MARKER) == ("", True)


def test_generate_turn_passthrough_and_end(cast):
    spec, personas = cast
    doctor = personas[spec.doctor_id]
    turn = generate_turn(TurnPrompt(doctor, ()), ScriptedChat(["Hello, what brings you in?"]))
    assert turn.speaker == "doctor" and turn.text == "Hello, what brings you in?"
    assert generate_turn(TurnPrompt(doctor, ()), ScriptedChat([END_MARKER])) is None


def test_generate_turn_retries_empty_reply(cast):
    spec, personas = cast
    backend = ScriptedChat(["", "  ", "Hi."])
    assert generate_turn(TurnPrompt(personas[spec.doctor_id], ()), backend).text == "Hi."
    assert [r.metadata["attempt"] for r in backend.calls] == [0, 1, 2]
    with pytest.raises(DialogueError):
        generate_turn(TurnPrompt(personas[spec.doctor_id], ()), ScriptedChat(["", "", ""]))


def test_wrong_speaker_order_rejected(cast):
    spec, personas = cast
    with pytest.raises(DialogueError):
        generate_turn(TurnPrompt(personas[spec.patient_id], ()), ScriptedChat(["Hi"]))


def test_turn_cap(cast):
    spec, personas = cast
    backend = ScriptedChat([f"Line number {i}." for i in range(2000)])
    tr = run_dialogue(spec, personas, backend, max_turns=60)
    assert len(tr.turns) == 60 and tr.termination == "turn_cap"
    assert [t.speaker for t in tr.turns[:3]] == ["doctor", "patient", "doctor"]


def test_end_marker_at_turn_four(cast):
    spec, personas = cast
    tr = run_dialogue(spec, personas, ScriptedChat(["a.", "b.", "c.", "d.", END_MARKER]))
    assert len(tr.turns) == 4 and tr.termination == "end_marker"


def test_closing_turn_with_marker_is_kept(cast):
    spec, personas = cast
    tr = run_dialogue(spec, personas, ScriptedChat(["Hi.", f"Bye. {END_MARKER}"]))
    assert len(tr.turns) == 2 and tr.turns[-1].closing and tr.termination == "end_marker"


def test_scripted_28_turns(cast):
    spec, personas = cast
    tr = run_dialogue(spec, personas, MockLLM([f"Turn {i}." for i in range(28)]))
    assert len(tr.turns) == 28 and tr.termination == "end_marker"


def test_rerun_is_identical(cast):
    spec, personas = cast
    assert run_dialogue(spec, personas, MockLLM()) == run_dialogue(spec, personas, MockLLM())


def test_builtin_mock_dialogue_has_directions(cast):
    spec, personas = cast
    tr = run_dialogue(spec, personas, MockLLM())
    assert 20 <= len(tr.turns) <= 36
    assert tr.termination == "end_marker"


def test_history_prompt_lists_prior_turns(cast):
    spec, personas = cast
    backend = ScriptedChat(["Hello.", "Hi doctor.", END_MARKER])
    run_dialogue(spec, personas, backend)
    last = backend.calls[-1]
    assert "[0] DOCTOR: Hello." in last.prompt and "[1] PATIENT: Hi doctor." in last.prompt
    assert personas[spec.doctor_id].name in last.prompt


def test_unknown_persona(cast):
    spec, _ = cast
    with pytest.raises(DialogueError, match="unknown persona"):
        run_dialogue(spec, {}, ScriptedChat([]))


def test_transcript_roundtrip(transcript):
    assert DialogueTranscript.from_dict(transcript.to_dict()) == transcript
    assert transcript.word_count() == sum(len(t.clean_text.split()) for t in transcript.turns)


def test_transcript_rejects_bad_order():
    with pytest.raises(DialogueError):
        DialogueTranscript("x", (Turn.from_text(0, "patient", "Hi"),), "end_marker")


def test_format_history_empty():
    assert "not started" in format_history(())


def test_parse_transcript_text_merges_lines():
    tr = parse_transcript_text("d", "DOCTOR: Hello.\nHow are you?\nPATIENT: Fine.\nPATIENT: Thanks.")
    assert [t.text for t in tr.turns] == ["Hello. How are you?", "Fine. Thanks."]


def test_single_shot_mode(cast):
    spec, personas = cast
    tr = run_dialogue_single_shot(spec, personas, MockLLM(), max_turns=6)
    assert len(tr.turns) == 6 and tr.termination == "turn_cap"


def test_templates():
    system, user = load_template("turn_doctor.v1").render(persona="- age: 40", history="(none)", end_marker="<END>")
    assert "- age: 40" in system + user and "<END>" in system + user
    with pytest.raises(TemplateError):
        load_template("nonexistent.v9")
    with pytest.raises(TemplateError):
        parse_template("x", "no sections")
    with pytest.raises(TemplateError, match="needs a value"):
        load_template("turn_doctor.v1").render(persona="x")
