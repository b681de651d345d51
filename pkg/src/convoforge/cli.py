"""Command line entry point: ``convoforge <stage> --config corpus.yaml``.

Exit codes: 0 success, 1 a stage or verification failed, 2 configuration,
dependency, lock or environment problems.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .corpus import (STAGES, ConfigError, Corpus, CorruptionError, DependencyError, LockError, PipelineConfig,
                     StageFailure, default_config_text)
from .dialogue import DialogueTranscript
from .judge import aggregate, comparison_table, judge_note, JudgeReport
from .metrics import concept_f1, default_lexicon, format_reference_metrics, mean_or_nan, rouge_f1, wer
from .notes import SoapNote, parse_soap_text
from .util import ConvoforgeError

log = logging.getLogger("convoforge")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="pipeline YAML file")
    p.add_argument("--corpus", help="corpus directory (overrides the config)")
    p.add_argument("--backend", help="chat backend: mock, mock:<script.json>, replay:<dir> or an http(s) URL")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convoforge", description="Synthetic doctor-patient corpus builder")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
        _add_common(p)
        p.add_argument("--split", help="only dialogues of this split")
        p.add_argument("--ids", action="append", help="dialogue ids: a,b or first..last (repeatable)")
        p.add_argument("--workers", type=int, help="parallel units")
    p = sub.add_parser("verify", help="check every recorded output against its digest")
    _add_common(p)
    p = sub.add_parser("evaluate", help="score hypothesis notes or transcripts against the corpus")
    _add_common(p)
    p.add_argument("--notes", action="append", default=[], metavar="NAME=DIR",
                   help="directory of <dialogue id>.json or .txt notes from a system (repeatable)")
    p.add_argument("--asr", metavar="DIR", help="directory of <dialogue id>.txt ASR transcripts")
    p.add_argument("--judge", action="store_true", help="also run the note judge on each system")
    p.add_argument("--split", default="test")
    p = sub.add_parser("init", help="print a default configuration")
    return parser


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "corpus", None):
        cfg.corpus = Path(args.corpus)
    if getattr(args, "backend", None):
        cfg.chat = args.backend
    return cfg


def _note_text(note: SoapNote) -> str:
    return "\n".join(s for _, s in note.statements())


def _load_hyp_note(directory: Path, dialogue_id: str) -> SoapNote | None:
    js, txt = directory / f"{dialogue_id}.json", directory / f"{dialogue_id}.txt"
    if js.exists():
        return SoapNote.from_dict(json.loads(js.read_text(encoding="utf-8")), dialogue_id)
    if txt.exists():
        return parse_soap_text(txt.read_text(encoding="utf-8"), dialogue_id)
    return None


def evaluate(corpus: Corpus, args) -> int:
    entries = [e for e in corpus.select(args.split) if "notes" in e.stages]
    if not entries:
        raise DependencyError(f"no reference notes in split {args.split!r}; run `convoforge notes` first")
    refs = {e.id: SoapNote.from_dict(json.loads((corpus.root / e.path("note.json")).read_text())) for e in entries}
    lexicon = default_lexicon()
    rows, judged = {}, {}
    missing = 0
    for spec in args.notes:
        name, _, directory = spec.partition("=")
        if not directory:
            raise ConfigError(f"--notes expects NAME=DIR, got {spec!r}")
        scores = {k: [] for k in ("R2", "R3", "RL", "concept_f1", "words")}
        reports: list[JudgeReport] = []
        for eid, ref in refs.items():
            hyp = _load_hyp_note(Path(directory), eid)
            if hyp is None:
                missing += 1
                log.warning("%s: no note for %s", name, eid)
                continue
            r, h = _note_text(ref), _note_text(hyp)
            for v in ("R2", "R3", "RL"):
                scores[v].append(rouge_f1(r, h, v))
            scores["concept_f1"].append(concept_f1(r, h, lexicon))
            scores["words"].append(hyp.word_count)
            if args.judge:
                e = next(x for x in entries if x.id == eid)
                tr = DialogueTranscript.from_dict(json.loads((corpus.root / e.path("transcript.json")).read_text()))
                reports.append(judge_note(hyp, tr, corpus.chat, note_id=eid))
        rows[name] = {k: mean_or_nan(v) for k, v in scores.items()}
        if reports:
            judged[name] = aggregate(reports)
    if rows:
        print(format_reference_metrics(rows))
    if judged:
        print()
        print(comparison_table(judged))
    if args.asr:
        errs = []
        for e in entries:
            path = Path(args.asr) / f"{e.id}.txt"
            if not path.exists():
                missing += 1
                continue
            tr = DialogueTranscript.from_dict(json.loads((corpus.root / e.path("transcript.json")).read_text()))
            ref = " ".join(t.clean_text for t in tr.turns)
            errs.append(wer(ref, path.read_text(encoding="utf-8")).wer)
        print(f"WER over {len(errs)} dialogue(s): {100 * mean_or_nan(errs):.2f}%")
    if missing:
        print(f"{missing} hypothesis file(s) missing", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init":
        print(default_config_text(), end="")
        return EXIT_OK
    try:
        cfg = load_config(args)
        with Corpus(cfg) as corpus:
            if args.command == "verify":
                report = corpus.verify()
                print(report.format(), end="")
                return EXIT_OK if report.ok else EXIT_FAILED
            if args.command == "evaluate":
                return evaluate(corpus, args)
            stages = STAGES if args.command == "all" else (args.command,)
            for stage in stages:
                rep = corpus.run_stage(stage, split=args.split, ids=args.ids, workers=args.workers)
                print(rep.summary())
            if "stats" in stages:
                print((corpus.root / "stats.txt").read_text(encoding="utf-8"), end="")
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigError, DependencyError, LockError, CorruptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvoforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
