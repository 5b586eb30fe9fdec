"""Information exchange precision.

After an info-exchange session every player is asked what it learned. Both
its answer and the NPC's knowledge are summarized by the judge model into k
key points, the judge counts how many knowledge points the answer recovers
(s), and the agent scores p = s/k. The session-set score P is the mean of p
over all player records.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from . import prompts
from .chargen import compose_system_prompt
from .gateway import EVAL_SAMPLING, Backend, ChatMessage, Sampling, assistant, derive_seed, system, user
from .model import CharacterProfile, Role, Scenario, SessionLog, normalize_name
from .orchestrator import render_transcript
from .store import atomic_write, dumps

DEFAULT_K = 5


class IepError(RuntimeError):
    pass


class IepPreconditionError(IepError, ValueError):
    pass


class SummarizationShapeError(IepError):
    pass


class MatchParseError(IepError):
    pass


class IepDomainError(IepError, ValueError):
    pass


class PointSource(str, Enum):
    AGENT_RESPONSE = "AgentResponse"
    PREDEFINED_KNOWLEDGE = "PredefinedKnowledge"


@dataclass(frozen=True)
class KeyPointSet:
    points: tuple[str, ...]
    source: PointSource

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("a key point set needs at least one point")
        if any(not p.strip() for p in self.points):
            raise ValueError("key points must be non-empty")

    @property
    def k(self) -> int:
        return len(self.points)

    def numbered(self) -> str:
        return "\n".join(f"{i}. {p}" for i, p in enumerate(self.points, 1))


@dataclass(frozen=True)
class IepRecord:
    session_id: str
    agent: str
    s: int
    k: int

    def __post_init__(self) -> None:
        iep_precision(self.s, self.k)

    @property
    def p(self) -> Fraction:
        return Fraction(self.s, self.k)

    def to_dict(self) -> dict:
        return {"session_id": self.session_id, "agent": self.agent, "s": self.s, "k": self.k, "p": round(float(self.p), 6)}


def iep_precision(s: int, k: int) -> Fraction:
    if isinstance(s, bool) or isinstance(k, bool) or not isinstance(s, int) or not isinstance(k, int):
        raise IepDomainError("s and k must be integers")
    if k < 1:
        raise IepDomainError("k must be >= 1")
    if not 0 <= s <= k:
        raise IepDomainError(f"s={s} outside 0..{k}")
    return Fraction(s, k)


def aggregate_iep(records: Sequence[IepRecord]) -> Fraction:
    if not records:
        raise IepDomainError("cannot aggregate an empty record list")
    return sum((r.p for r in records), Fraction(0)) / len(records)


def iep_variance(records: Sequence[IepRecord]) -> Fraction:
    """Population variance of the per-record precision."""
    mean = aggregate_iep(records)
    return sum(((r.p - mean) ** 2 for r in records), Fraction(0)) / len(records)


# --------------------------------------------------------------------------
# judge calls
# --------------------------------------------------------------------------


def _seeded(*parts: object) -> Sampling:
    # distinct seeds keep concurrent requests on distinct digests
    return EVAL_SAMPLING.with_seed(derive_seed(*parts)) if parts else EVAL_SAMPLING


def query_gathered_info(
    backend: Backend,
    agent: CharacterProfile,
    log: SessionLog,
    sampling: Sampling = EVAL_SAMPLING,
) -> str:
    """Ask ``agent`` what it learned, given its persona and the full transcript."""
    names = {normalize_name(p.name) for p in log.roster}
    if normalize_name(agent.name) not in names:
        raise IepPreconditionError(f"{agent.name!r} is not in the roster of {log.session_id}")
    if agent.role is not Role.PLAYER:
        raise IepPreconditionError(f"{agent.name!r} is not a player")
    transcript = render_transcript(log.turns) or "(nothing has happened yet)"
    body = prompts.harness("gathered_info_user", transcript=transcript, question=prompts.harness("gathered_info_question"))
    return backend.complete([system(compose_system_prompt(agent)), user(body)], sampling)


_NUMBERED = re.compile(r"^\s*\(?(\d+)[.):]\s*(.*)$")
_BULLET = re.compile(r"^\s*[-*•]\s+(.*)$")


def parse_key_points(reply: str) -> list[str]:
    """Numbered lines, else bulleted lines, else every non-empty line.

    Unnumbered lines following a numbered one continue that point.
    """
    lines = [ln for ln in reply.splitlines() if ln.strip()]
    numbered: list[str] = []
    for ln in lines:
        m = _NUMBERED.match(ln)
        if m:
            numbered.append(m.group(2).strip())
        elif numbered:
            numbered[-1] = f"{numbered[-1]} {ln.strip()}".strip()
    points = numbered or [m.group(1) for m in map(_BULLET.match, lines) if m] or lines
    # list separators, not content
    points = [p.strip().rstrip(";,").strip() for p in points]
    return [p for p in points if p]


def summarize_key_points(
    backend: Backend,
    text: str,
    k: int,
    source: PointSource,
    sampling: Sampling = EVAL_SAMPLING,
) -> KeyPointSet:
    if k < 1:
        raise IepDomainError("k must be >= 1")
    messages: list[ChatMessage] = [user(prompts.harness("summarize", k=k, text=text))]
    reply = backend.complete(messages, sampling)
    points = parse_key_points(reply)
    if len(points) != k:
        messages += [assistant(reply), user(prompts.harness("summarize_retry", found=len(points), k=k))]
        points = parse_key_points(backend.complete(messages, sampling))
        if len(points) != k:
            raise SummarizationShapeError(f"expected {k} key points, got {len(points)} after re-prompting")
    return KeyPointSet(tuple(points), source)


_INT = re.compile(r"-?\d+")


def _parse_count(reply: str, k: int) -> Optional[int]:
    m = _INT.search(reply)
    if not m:
        return None
    n = int(m.group())
    return n if 0 <= n <= k else None


def count_overlaps(
    backend: Backend,
    agent_points: KeyPointSet,
    truth_points: KeyPointSet,
    sampling: Sampling = EVAL_SAMPLING,
) -> int:
    if agent_points.k != truth_points.k:
        raise IepPreconditionError("key point sets differ in length")
    k = truth_points.k
    messages: list[ChatMessage] = [user(prompts.harness(
        "compare", agent_points=agent_points.numbered(), truth_points=truth_points.numbered(), k=k,
    ))]
    reply = backend.complete(messages, sampling)
    s = _parse_count(reply, k)
    if s is None:
        messages += [assistant(reply), user(prompts.harness("compare_retry", k=k))]
        reply = backend.complete(messages, sampling)
        s = _parse_count(reply, k)
        if s is None:
            raise MatchParseError(f"judge reply is not an integer in 0..{k}: {reply!r}")
    return s


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def check_info_session(log: SessionLog) -> CharacterProfile:
    if log.config.scenario is not Scenario.INFO_EXCHANGE:
        raise IepPreconditionError(f"{log.session_id} is not an info-exchange session")
    npc = log.npc
    if npc is None or npc.knowledge is None:
        raise IepPreconditionError(f"{log.session_id} has no NPC carrying knowledge")
    return npc


def truth_key_points(backend: Backend, log: SessionLog, k: int = DEFAULT_K) -> KeyPointSet:
    npc = check_info_session(log)
    return summarize_key_points(
        backend, npc.knowledge.text, k, PointSource.PREDEFINED_KNOWLEDGE,
        _seeded(log.session_id, "truth"),
    )


def evaluate_agent(
    backend: Backend,
    log: SessionLog,
    agent: CharacterProfile,
    truth: KeyPointSet,
) -> IepRecord:
    answer = query_gathered_info(backend, agent, log, _seeded(log.session_id, agent.name, "query"))
    points = summarize_key_points(
        backend, answer, truth.k, PointSource.AGENT_RESPONSE,
        _seeded(log.session_id, agent.name, "summarize"),
    )
    s = count_overlaps(backend, points, truth, _seeded(log.session_id, agent.name, "compare"))
    return IepRecord(log.session_id, agent.name, s, truth.k)


@dataclass(frozen=True)
class IepReport:
    records: tuple[IepRecord, ...]

    @property
    def P(self) -> Fraction:
        return aggregate_iep(self.records)

    @property
    def variance(self) -> Fraction:
        return iep_variance(self.records)

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "P": float(self.P),
            "variance": float(self.variance),
            "count": len(self.records),
        }

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        atomic_write(path, dumps(self.to_dict()) + "\n")
        return path


def evaluate_sessions(backend: Backend, logs: Sequence[SessionLog], k: int = DEFAULT_K, jobs: int = 1) -> IepReport:
    """Score every player of every log; records keep log order, then roster order."""
    if not logs:
        raise IepPreconditionError("no sessions to evaluate")
    for log in logs:
        check_info_session(log)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        truths = list(pool.map(lambda lg: truth_key_points(backend, lg, k), logs))
        tasks = [(lg, agent, truth) for lg, truth in zip(logs, truths) for agent in lg.players]
        records = list(pool.map(lambda t: evaluate_agent(backend, *t), tasks))
    return IepReport(tuple(records))
