"""Canonical persistence of sessions and rosters, and ingestion of external corpora.

A session file is JSON lines: one header record followed by one record per
turn. Keys are sorted and every line is newline-terminated, so writing the
same log twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import yaml

from .model import (
    CharacterProfile,
    Intention,
    Role,
    Scenario,
    SessionConfig,
    SessionLog,
    Skill,
    TurnEvent,
    TurnKind,
    normalize_name,
    validate_session,
)


class StoreError(RuntimeError):
    pass


class MalformedLineError(StoreError):
    def __init__(self, path: Path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


class MissingHeaderError(StoreError):
    pass


class SessionInvariantError(StoreError):
    def __init__(self, where: str, violations: Sequence[str]):
        super().__init__(f"{where}: " + "; ".join(violations))
        self.violations = tuple(violations)


class IngestError(StoreError):
    pass


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# sessions
# --------------------------------------------------------------------------


def turn_record(event: TurnEvent, gold: Optional[Sequence[Intention]]) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "type": "turn",
        "session_id": event.session_id,
        "turn_index": event.turn_index,
        "actor": event.actor,
        "kind": event.kind.value,
    }
    if event.action_text is not None:
        rec["action_text"] = event.action_text
    if event.speech_text is not None:
        rec["speech_text"] = event.speech_text
    if event.malformed:
        rec["malformed"] = True
    if gold is not None:
        rec["gold"] = [g.to_dict() for g in gold]
    return rec


def session_lines(log: SessionLog) -> list[str]:
    header = {
        "type": "header",
        "session_id": log.session_id,
        "source": log.source,
        "config": log.config.to_dict(),
        "roster": [p.to_dict() for p in log.roster],
    }
    lines = [dumps(header)]
    for i, t in enumerate(log.turns):
        gold = log.gold_intentions[i] if log.gold_intentions is not None else None
        lines.append(dumps(turn_record(t, gold)))
    return lines


def serialize_session(log: SessionLog) -> str:
    return "".join(line + "\n" for line in session_lines(log))


def write_session(log: SessionLog, directory: Path | str, filename: Optional[str] = None) -> Path:
    result = validate_session(log)
    if not result.ok:
        raise SessionInvariantError(log.session_id, result.violations)
    path = Path(directory) / (filename or f"{log.session_id}.jsonl")
    atomic_write(path, serialize_session(log))
    return path


def parse_session(lines: Iterable[str], where: Path | str = "<memory>") -> SessionLog:
    where = Path(where)
    header: Optional[dict] = None
    turns: list[TurnEvent] = []
    golds: list[Optional[tuple[Intention, ...]]] = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            if header is None:
                if rec.get("type") != "header":
                    raise MissingHeaderError(f"{where}: first record is not a header")
                header = rec
                continue
            if rec.get("type") != "turn":
                raise ValueError(f"unexpected record type {rec.get('type')!r}")
            kind = TurnKind(rec["kind"])
            turns.append(TurnEvent(
                session_id=rec["session_id"],
                turn_index=int(rec["turn_index"]),
                actor=rec["actor"],
                kind=kind,
                action_text=rec.get("action_text"),
                speech_text=rec.get("speech_text"),
                malformed=bool(rec.get("malformed", False)),
            ))
            golds.append(tuple(Intention.from_dict(g) for g in rec["gold"]) if "gold" in rec else None)
        except StoreError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedLineError(where, lineno, str(exc)) from exc
    if header is None:
        raise MissingHeaderError(f"{where}: missing header record")
    try:
        config = SessionConfig.from_dict(header["config"])
        roster = tuple(CharacterProfile.from_dict(p) for p in header["roster"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedLineError(where, 1, f"bad header: {exc}") from exc

    labeled = [g is not None for g in golds]
    if any(labeled) and not all(labeled):
        raise SessionInvariantError(str(where), ["gold labels present on some turns only"])
    gold_intentions = tuple(golds) if golds and all(labeled) else None  # type: ignore[arg-type]
    if not golds and config.scenario is Scenario.INTENTION_EXPRESSION:
        gold_intentions = ()
    log = SessionLog(
        session_id=header.get("session_id") or (turns[0].session_id if turns else where.stem),
        config=config,
        roster=roster,
        turns=tuple(turns),
        gold_intentions=gold_intentions,
        source=header.get("source", "generated"),
    )
    result = validate_session(log)
    if not result.ok:
        raise SessionInvariantError(str(where), result.violations)
    return log


def read_session(path: Path | str) -> SessionLog:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_session(fh, path)


def session_files(paths: Path | str | Iterable[Path | str]) -> list[Path]:
    """Expand directories to their ``*.jsonl`` files, sorted by name."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    out: list[Path] = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.jsonl")) if p.is_dir() else [p])
    return out


def read_sessions(paths: Path | str | Iterable[Path | str]) -> list[SessionLog]:
    return [read_session(p) for p in session_files(paths)]


# --------------------------------------------------------------------------
# rosters
# --------------------------------------------------------------------------


def write_profiles(profiles: Sequence[CharacterProfile], path: Path | str) -> Path:
    path = Path(path)
    atomic_write(path, "".join(dumps(p.to_dict()) + "\n" for p in profiles))
    return path


def read_profiles(path: Path | str) -> list[CharacterProfile]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(CharacterProfile.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise MalformedLineError(Path(path), lineno, str(exc)) from exc
    return out


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

DEFAULT_ALIASES: dict[str, str] = {
    "sneak": "Stealth",
    "hide": "Stealth",
    "sleight-of-hand": "Sleight of Hand",
    "animal-handling": "Animal Handling",
    "perceive": "Perception",
    "persuade": "Persuasion",
    "intimidate": "Intimidation",
    "investigate": "Investigation",
    "deceive": "Deception",
    "init": "Initiative",
}


def load_aliases(path: Optional[Path | str]) -> dict[str, str]:
    """Read a user alias table (JSON or YAML mapping of label -> skill name)."""
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise IngestError(f"{path}: alias table must be a mapping")
    return {str(k): str(v) for k, v in data.items()}


def map_skill(label: str, aliases: dict[str, str]) -> Skill:
    try:
        return Skill.parse(label)
    except ValueError:
        pass
    table = {normalize_name(k).casefold(): v for k, v in {**DEFAULT_ALIASES, **aliases}.items()}
    target = table.get(normalize_name(label).casefold())
    if target is None:
        raise ValueError(f"unmappable skill label {label!r}")
    return Skill.parse(target)


@dataclass
class IngestReport:
    adapter: str
    files: int = 0
    sessions: int = 0
    labels: int = 0
    dropped: list[dict[str, Any]] = field(default_factory=list)
    unlabeled_sessions: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "adapter": self.adapter,
            "files": self.files,
            "sessions": self.sessions,
            "labels": self.labels,
            "dropped": self.dropped,
            "unlabeled_sessions": self.unlabeled_sessions,
        }


@dataclass
class IngestResult:
    logs: list[SessionLog]
    report: IngestReport


Adapter = Callable[[Path, dict[str, str], bool, IngestReport], list[SessionLog]]
ADAPTERS: dict[str, Adapter] = {}


def register_adapter(name: str) -> Callable[[Adapter], Adapter]:
    def deco(fn: Adapter) -> Adapter:
        ADAPTERS[name] = fn
        return fn

    return deco


def ingest_real_corpus(
    path: Path | str,
    adapter_name: str,
    aliases: Optional[dict[str, str]] = None,
    strict: bool = True,
) -> IngestResult:
    """Convert an external corpus to canonical sessions.

    With ``strict`` an unmappable label raises :class:`IngestError`; otherwise
    it is dropped and listed in the report. Labels are never dropped silently.
    """
    try:
        adapter = ADAPTERS[adapter_name]
    except KeyError:
        raise IngestError(f"unknown adapter {adapter_name!r}; known: {', '.join(sorted(ADAPTERS))}") from None
    report = IngestReport(adapter_name)
    logs = adapter(Path(path), aliases or {}, strict, report)
    report.sessions = len(logs)
    report.unlabeled_sessions = [lg.session_id for lg in logs if lg.gold_intentions is None]
    report.labels = sum(len(g) for lg in logs if lg.gold_intentions for g in lg.gold_intentions)
    return IngestResult(logs, report)


@register_adapter("canonical")
def _ingest_canonical(path: Path, aliases: dict[str, str], strict: bool, report: IngestReport) -> list[SessionLog]:
    files = session_files([path])
    report.files = len(files)
    return [read_session(f) for f in files]


_SPEAKER = re.compile(r"^\s*([^:]{1,80}?)\s*:\s*(.*)$")
_ACTION = re.compile(r"\*([^*]+)\*")
_LABEL = re.compile(r"^\s*(?P<name>[^=]+?)\s*=\s*(?P<skill>[^@]+?)\s*@\s*t?(?P<turn>\d+)\s*$")


def _split_utterance(text: str) -> tuple[TurnKind, Optional[str], Optional[str]]:
    text = text.strip()
    if text.upper() == "PASS" or not text:
        return TurnKind.PASS, None, None
    actions = [a.strip() for a in _ACTION.findall(text) if a.strip()]
    speech = _ACTION.sub(" ", text)
    speech = re.sub(r"\s+", " ", speech).strip() or None
    action = " ".join(actions) or None
    if action and speech:
        return TurnKind.BOTH, action, speech
    if action:
        return TurnKind.ACTION, action, None
    return TurnKind.SPEECH, None, speech


@register_adapter("transcript")
def _ingest_transcript(path: Path, aliases: dict[str, str], strict: bool, report: IngestReport) -> list[SessionLog]:
    """Speaker-prefixed transcripts with an optional ``.labels`` sidecar.

    ``<stem>.txt`` holds one turn per ``Speaker: text`` line; ``*...*`` marks an
    action, the rest is speech, ``PASS`` is a pass, and unprefixed lines
    continue the previous turn's speech. ``<stem>.labels`` holds lines of the
    form ``Name=Skill@tN`` (N is the zero-based turn index).
    """
    files = sorted(path.glob("*.txt")) if path.is_dir() else [path]
    report.files = len(files)
    logs = []
    for f in files:
        session_id = f.stem
        raw_turns: list[list[str]] = []
        for line in f.read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            m = _SPEAKER.match(line)
            if m:
                raw_turns.append([normalize_name(m.group(1)), m.group(2)])
            elif raw_turns:
                raw_turns[-1][1] += " " + line.strip()
            else:
                raise IngestError(f"{f}: text before the first speaker line")
        if not raw_turns:
            raise IngestError(f"{f}: no turns")
        speakers: list[str] = []
        turns = []
        for i, (speaker, text) in enumerate(raw_turns):
            if speaker not in speakers:
                speakers.append(speaker)
            kind, action, speech = _split_utterance(text)
            turns.append(TurnEvent(session_id, i, speaker, kind, action, speech))

        golds: Optional[list[list[Intention]]] = None
        sidecar = f.with_suffix(".labels")
        if sidecar.exists():
            golds = [[] for _ in turns]
            for lineno, line in enumerate(sidecar.read_text(encoding="utf-8").splitlines(), 1):
                line = line.split("#", 1)[0]
                for item in filter(str.strip, re.split(r"[,;]", line)):
                    problem = None
                    m = _LABEL.match(item)
                    if not m:
                        problem = f"cannot parse label {item.strip()!r}"
                    else:
                        name, turn = normalize_name(m.group("name")), int(m.group("turn"))
                        try:
                            skill = map_skill(m.group("skill"), aliases)
                        except ValueError as exc:
                            problem = str(exc)
                        else:
                            if name not in speakers:
                                problem = f"label character {name!r} not in transcript"
                            elif turn >= len(turns):
                                problem = f"label turn {turn} out of range"
                    if problem:
                        if strict:
                            raise IngestError(f"{sidecar}:{lineno}: {problem}")
                        report.dropped.append({"file": str(sidecar), "line": lineno, "label": item.strip(), "reason": problem})
                        continue
                    golds[turn].append(Intention(name, skill))

        roster = tuple(CharacterProfile(name, None, "", "", "", "", "", Role.PLAYER) for name in speakers)
        config = SessionConfig(
            Scenario.INTENTION_EXPRESSION, player_count=len(speakers), turn_count=len(turns),
            seed=0, backend_spec="ingested:transcript",
        )
        log = SessionLog(
            session_id, config, roster, tuple(turns),
            tuple(tuple(g) for g in golds) if golds is not None else None,
            source="ingested:transcript",
        )
        result = validate_session(log)
        if not result.ok:
            raise IngestError(f"{f}: " + "; ".join(result.violations))
        logs.append(log)
    return logs
