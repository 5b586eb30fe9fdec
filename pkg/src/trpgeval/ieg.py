"""Intention expressiveness gap.

A virtual DM reads an interaction transcript and names the skill checks
the latest turn calls for, as ``character: skill`` tuples. Two DMs, one
tuned on real logs and one on generated logs, are scored on the same real
evaluation set; G = 100 * |f_r - f_g| / (f_r + f_g) compares their
F-scores. ``f_c`` scores character names only, ``f_o`` whole tuples.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Optional, Sequence

from . import prompts
from .gateway import EVAL_SAMPLING, Backend, ChatMessage, GatewayError, assistant, system, user
from .model import Intention, SessionLog, Skill, normalize_name
from .orchestrator import render_transcript
from .store import atomic_write, dumps

NONE_TOKEN = "NONE"
REAL_TRAIN, REAL_TOTAL = 661, 838


class IegError(RuntimeError):
    pass


class ExportError(IegError):
    pass


class UndefinedGapError(IegError, ValueError):
    pass


# --------------------------------------------------------------------------
# examples and the fine-tune format
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DmExample:
    context: tuple[ChatMessage, ...]
    gold: tuple[Intention, ...]
    example_id: int = 0

    def __post_init__(self) -> None:
        if not self.context:
            raise ValueError("context must be non-empty")


def dm_instruction() -> str:
    return prompts.harness("dm_instruction", skills=", ".join(s.value for s in Skill))


def serialize_tuples(gold: Iterable[Intention]) -> str:
    lines = [f"{g.character}: {g.skill.value}" for g in gold]
    return "\n".join(lines) if lines else NONE_TOKEN


def parse_intention_lines(raw: str) -> tuple[list[Intention], int]:
    """Parse ``name: skill`` lines; return the tuples and the count of dropped lines.

    Blank lines and ``NONE`` are not counted as dropped.
    """
    out: list[Intention] = []
    dropped = 0
    for line in raw.splitlines():
        line = line.strip().lstrip("-*•").strip()
        if not line or line.upper() == NONE_TOKEN:
            continue
        name, sep, skill = line.rpartition(":")
        name = normalize_name(name)
        if not sep or not name:
            dropped += 1
            continue
        try:
            out.append(Intention(name, Skill.parse(skill)))
        except ValueError:
            dropped += 1
    return out, dropped


def parse_intention_tuples(raw: str) -> list[Intention]:
    return parse_intention_lines(raw)[0]


def session_examples(log: SessionLog, start_id: int = 0) -> list[DmExample]:
    """One example per turn; the context holds the transcript up to and including it."""
    if log.gold_intentions is None:
        raise ExportError(f"session {log.session_id} carries no intention labels")
    instruction = system(dm_instruction())
    return [
        DmExample((instruction, user(render_transcript(log.turns[: i + 1]))), tuple(gold), start_id + i)
        for i, gold in enumerate(log.gold_intentions)
    ]


def example_record(example: DmExample) -> dict:
    messages = list(example.context) + [assistant(serialize_tuples(example.gold))]
    return {"messages": [m.to_dict() for m in messages]}


def export_finetune_dataset(logs: Sequence[SessionLog], out: Path | str) -> int:
    """Write chat-format fine-tuning records, one per turn; returns the count."""
    lines = []
    for log in logs:
        lines.extend(dumps(example_record(ex)) + "\n" for ex in session_examples(log))
    atomic_write(Path(out), "".join(lines))
    return len(lines)


def load_examples(path: Path | str) -> list[DmExample]:
    """Read a fine-tune style file back as examples; ids are zero-based line indices."""
    examples = []
    with Path(path).open(encoding="utf-8") as fh:
        for idx, line in enumerate(l for l in fh if l.strip()):
            try:
                msgs = [ChatMessage.from_dict(m) for m in json.loads(line)["messages"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise IegError(f"{path}: record {idx} is malformed: {exc}") from exc
            if len(msgs) < 2:
                raise IegError(f"{path}: record {idx} needs context and an answer")
            examples.append(DmExample(tuple(msgs[:-1]), tuple(parse_intention_tuples(msgs[-1].content)), idx))
    return examples


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FScorePair:
    f_c: float
    f_o: float

    def to_dict(self) -> dict:
        return {"c": self.f_c, "o": self.f_o}


def _f1(tp: int, n_pred: int, n_gold: int) -> Fraction:
    # 2PR/(P+R) reduces to 2TP/(|pred|+|gold|) whenever both totals are positive
    if n_pred == 0 or n_gold == 0:
        return Fraction(0)
    return Fraction(200 * tp, n_pred + n_gold)


def _overlap(pred: Iterable[Hashable], gold: Iterable[Hashable]) -> int:
    return sum((Counter(pred) & Counter(gold)).values())


def _score(predictions: Sequence[Sequence[Intention]], golds: Sequence[Sequence[Intention]], project: bool, macro: bool) -> float:
    def keys(items: Sequence[Intention]) -> list:
        return [i.key()[0] if project else i.key() for i in items]

    if macro:
        per = [
            _f1(_overlap(keys(p), keys(g)), len(p), len(g))
            for p, g in zip(predictions, golds) if p or g
        ]
        return float(sum(per, Fraction(0)) / len(per)) if per else 0.0
    tp = sum(_overlap(keys(p), keys(g)) for p, g in zip(predictions, golds))
    return float(_f1(tp, sum(map(len, predictions)), sum(map(len, golds))))


def f_scores(
    predictions: Sequence[Sequence[Intention]],
    golds: Sequence[Sequence[Intention]],
    macro: bool = False,
) -> FScorePair:
    """Micro-averaged F1 (percent) over tuples and over character names.

    With ``macro`` the per-example F1 is averaged instead, skipping examples
    where both prediction and gold are empty.
    """
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} gold examples")
    return FScorePair(
        f_c=_score(predictions, golds, project=True, macro=macro),
        f_o=_score(predictions, golds, project=False, macro=macro),
    )


def gap(f_r: float, f_g: float) -> float:
    if f_r < 0 or f_g < 0:
        raise ValueError("F-scores must be non-negative")
    if f_r + f_g == 0:
        raise UndefinedGapError("gap is undefined when both F-scores are 0")
    return 100.0 * abs(f_r - f_g) / (f_r + f_g)


@dataclass(frozen=True)
class GapReport:
    f_r: FScorePair
    f_g: FScorePair
    g_c: float
    g_o: float
    example_count: Optional[int] = None

    @classmethod
    def from_scores(cls, f_r: FScorePair, f_g: FScorePair, example_count: Optional[int] = None) -> "GapReport":
        return cls(f_r, f_g, gap(f_r.f_c, f_g.f_c), gap(f_r.f_o, f_g.f_o), example_count)

    def to_dict(self) -> dict:
        return {
            "f_r": self.f_r.to_dict(),
            "f_g": self.f_g.to_dict(),
            "g_c": self.g_c,
            "g_o": self.g_o,
            "example_count": self.example_count,
        }


# --------------------------------------------------------------------------
# virtual DM evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    example_id: int
    raw_reply: str
    parsed: tuple[Intention, ...]
    dropped_lines: int
    error: Optional[str] = None

    def to_dict(self) -> dict:
        rec = {
            "example_id": self.example_id,
            "raw_reply": self.raw_reply,
            "parsed": [p.to_dict() for p in self.parsed],
            "dropped_lines": self.dropped_lines,
        }
        if self.error is not None:
            rec["error"] = self.error
        return rec

    @classmethod
    def from_dict(cls, data: dict) -> "Prediction":
        return cls(
            int(data["example_id"]), data.get("raw_reply", ""),
            tuple(Intention.from_dict(p) for p in data.get("parsed", [])),
            int(data.get("dropped_lines", 0)), data.get("error"),
        )


@dataclass(frozen=True)
class DmEvaluation:
    predictions: tuple[Prediction, ...]
    scores: FScorePair


def predict(backend: Backend, example: DmExample) -> Prediction:
    try:
        reply = backend.complete(example.context, EVAL_SAMPLING)
    except GatewayError as exc:
        return Prediction(example.example_id, "", (), 0, f"{type(exc).__name__}: {exc}")
    parsed, dropped = parse_intention_lines(reply)
    return Prediction(example.example_id, reply, tuple(parsed), dropped)


def evaluate_virtual_dm(backend: Backend, eval_set: Sequence[DmExample], jobs: int = 1, macro: bool = False) -> DmEvaluation:
    """Query the DM on every example; failed calls score as empty predictions."""
    if not eval_set:
        raise ValueError("eval_set must be non-empty")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        preds = tuple(pool.map(lambda ex: predict(backend, ex), eval_set))
    scores = f_scores([p.parsed for p in preds], [ex.gold for ex in eval_set], macro)
    return DmEvaluation(preds, scores)


def write_predictions(predictions: Iterable[Prediction], out: Path | str) -> Path:
    out = Path(out)
    atomic_write(out, "".join(dumps(p.to_dict()) + "\n" for p in predictions))
    return out


def read_predictions(path: Path | str) -> list[Prediction]:
    with Path(path).open(encoding="utf-8") as fh:
        return [Prediction.from_dict(json.loads(line)) for line in fh if line.strip()]


def score_prediction_file(predictions: Sequence[Prediction], gold: Sequence[DmExample], macro: bool = False) -> FScorePair:
    by_id = {p.example_id: p for p in predictions}
    if set(by_id) != {ex.example_id for ex in gold}:
        raise ValueError("prediction ids do not match the gold example ids")
    return f_scores([by_id[ex.example_id].parsed for ex in gold], [ex.gold for ex in gold], macro)


# --------------------------------------------------------------------------
# real-log split
# --------------------------------------------------------------------------


def default_train_count(n: int) -> int:
    return round(n * REAL_TRAIN / REAL_TOTAL)


def split_real_logs(
    logs: Sequence[SessionLog],
    seed: int = 0,
    *,
    train_fraction: Optional[float] = None,
    train_count: Optional[int] = None,
    eval_count: Optional[int] = None,
) -> tuple[list[SessionLog], list[SessionLog]]:
    """Seeded split into (train, eval), each kept in corpus order.

    Without arguments the training share is 661 of every 838 logs. With only
    a training size, the evaluation part is the remainder.
    """
    n = len(logs)
    if train_fraction is not None and train_count is not None:
        raise ValueError("give train_fraction or train_count, not both")
    if train_fraction is not None:
        if not 0.0 <= train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in [0, 1]")
        train_count = round(n * train_fraction)
    if train_count is None:
        train_count = default_train_count(n)
    if eval_count is None:
        eval_count = n - train_count
    if train_count < 0 or eval_count < 0 or train_count + eval_count > n:
        raise ValueError(f"split {train_count}/{eval_count} exceeds a corpus of {n}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    train = sorted(order[:train_count])
    evals = sorted(order[train_count:train_count + eval_count])
    return [logs[i] for i in train], [logs[i] for i in evals]
