"""Session execution: roster construction, the round-robin turn loop, and batches."""

from __future__ import annotations

import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import prompts
from .chargen import assign_intention, compose_system_prompt, generate_knowledge, generate_profile, sample_attributes, with_intention
from .gateway import GENERATION_SAMPLING, Backend, ChatMessage, GatewayError, derive_seed, system, user
from .store import write_session
from .model import (
    CharacterProfile,
    Intention,
    KnowledgeCategory,
    Role,
    Scenario,
    SessionConfig,
    SessionLog,
    TurnEvent,
    TurnKind,
    normalize_name,
)

logger = logging.getLogger(__name__)

NAME_ATTEMPTS = 3


@dataclass(frozen=True)
class TurnDirective:
    kind: TurnKind
    action_text: Optional[str] = None
    speech_text: Optional[str] = None
    malformed: bool = False


class SessionError(RuntimeError):
    """A session aborted part-way; ``partial`` holds the turns completed so far."""

    def __init__(self, message: str, partial: Optional[SessionLog] = None):
        super().__init__(message)
        self.partial = partial

    @property
    def turns_completed(self) -> int:
        return len(self.partial.turns) if self.partial else 0


# --------------------------------------------------------------------------
# rendering and parsing
# --------------------------------------------------------------------------


def render_turn(event: TurnEvent) -> str:
    head = f"{event.actor} [{event.kind.value}]"
    if event.kind is TurnKind.ACTION:
        return f"{head}: {event.action_text}"
    if event.kind is TurnKind.SPEECH:
        return f"{head}: {event.speech_text}"
    if event.kind is TurnKind.BOTH:
        return f"{head}: {event.action_text} / {event.speech_text}"
    return head


def render_transcript(turns: Sequence[TurnEvent]) -> str:
    return "\n".join(render_turn(t) for t in turns)


def build_agent_context(so_far: SessionLog, agent: CharacterProfile, window: Optional[int] = None) -> list[ChatMessage]:
    if window is not None and window < 1:
        raise ValueError("window must be >= 1")
    others = [p.name for p in so_far.roster if normalize_name(p.name) != normalize_name(agent.name)]
    instruction = prompts.harness("format_instruction", others=_join_names(others))
    turns = so_far.turns if window is None else so_far.turns[-window:]
    turn_prompt = prompts.harness("turn_instruction")
    body = f"{render_transcript(turns)}\n\n{turn_prompt}" if turns else turn_prompt
    return [system(f"{compose_system_prompt(agent)}\n\n{instruction}"), user(body)]


def _join_names(names: Sequence[str]) -> str:
    if not names:
        return "no one else"
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


_PREFIX = re.compile(r"^[\s*_\-#>]*(action|say)[\s*_]*:[\s*_]*(.*?)[\s*_]*$", re.IGNORECASE)
_PASS = re.compile(r"^[\s*_\-#>.]*pass[\s*_.!]*$", re.IGNORECASE)


def parse_turn_output(raw: str) -> TurnDirective:
    """Parse ``ACTION:`` / ``SAY:`` lines and the bare ``PASS`` token.

    Output that follows none of these is kept as speech and flagged malformed.
    """
    action: Optional[str] = None
    speech: Optional[str] = None
    saw_prefix = saw_pass = False
    for line in raw.splitlines():
        m = _PREFIX.match(line)
        if m:
            saw_prefix = True
            label, text = m.group(1).lower(), m.group(2).strip()
            if label == "action" and action is None:
                action = text
            elif label == "say" and speech is None:
                speech = text
        elif _PASS.match(line):
            saw_pass = True
    action = action or None
    speech = speech or None
    if action and speech:
        return TurnDirective(TurnKind.BOTH, action, speech)
    if action:
        return TurnDirective(TurnKind.ACTION, action_text=action)
    if speech:
        return TurnDirective(TurnKind.SPEECH, speech_text=speech)
    if saw_pass:
        return TurnDirective(TurnKind.PASS)
    text = raw.strip()
    if saw_prefix or not text:
        return TurnDirective(TurnKind.PASS, malformed=True)
    return TurnDirective(TurnKind.SPEECH, speech_text=text, malformed=True)


# --------------------------------------------------------------------------
# rosters and sessions
# --------------------------------------------------------------------------


def build_roster(
    config: SessionConfig,
    backend: Backend,
    corrected: bool = False,
    players: Optional[Sequence[CharacterProfile]] = None,
) -> tuple[CharacterProfile, ...]:
    """Sample and generate a roster for ``config``.

    The seed stream is consumed in a fixed order: attributes for each player
    in index order, then the NPC; then the knowledge category and its
    generation seeds; then one intention per player. Given ``players`` are
    used as-is for the player slots instead of generated ones.
    """
    rng = random.Random(config.seed)
    info = config.scenario is Scenario.INFO_EXCHANGE
    all_attrs = [sample_attributes(rng) for _ in range(config.player_count + int(info))]
    given: list[CharacterProfile] = []
    if players is not None:
        if len(players) < config.player_count:
            raise ValueError(f"need {config.player_count} player profiles, got {len(players)}")
        given = [replace(p, role=Role.PLAYER, knowledge=None, intention=None) for p in players[: config.player_count]]
    knowledge = None
    if info:
        category = rng.choice(list(KnowledgeCategory))
        knowledge = generate_knowledge(backend, category, rng, corrected)

    roster: list[CharacterProfile] = list(given)
    taken = {normalize_name(p.name) for p in given}
    if len(taken) != len(given):
        raise ValueError("given player names must be unique")
    for idx, attrs in enumerate(all_attrs):
        if idx < len(given):
            continue
        npc = idx == config.player_count
        for attempt in range(NAME_ATTEMPTS):
            profile = generate_profile(
                backend, attrs, Role.NPC if npc else Role.PLAYER,
                seed=derive_seed(config.seed, "roster", idx, attempt),
                knowledge=knowledge if npc else None,
                corrected=corrected,
            )
            if normalize_name(profile.name) not in taken:
                break
            logger.info("name %r already in roster, regenerating", profile.name)
        else:
            raise SessionError(f"could not generate a unique name for roster slot {idx}")
        taken.add(normalize_name(profile.name))
        roster.append(profile)

    if config.scenario is Scenario.INTENTION_EXPRESSION:
        roster = [with_intention(p, assign_intention(rng, p.name)) for p in roster]
    return tuple(roster)


def check_roster(config: SessionConfig, roster: Sequence[CharacterProfile]) -> None:
    players = [p for p in roster if p.role is Role.PLAYER]
    npcs = [p for p in roster if p.role is Role.NPC]
    if len(players) != config.player_count:
        raise ValueError(f"expected {config.player_count} players, got {len(players)}")
    if config.scenario is Scenario.INFO_EXCHANGE:
        if len(npcs) != 1 or npcs[0].knowledge is None:
            raise ValueError("info-exchange sessions need exactly one NPC carrying knowledge")
    else:
        if npcs:
            raise ValueError("intention-expression sessions take players only")
        if any(p.intention is None for p in players):
            raise ValueError("every player needs an intention")
    names = [normalize_name(p.name) for p in roster]
    if len(set(names)) != len(names):
        raise ValueError("roster names must be unique")


def default_session_id(config: SessionConfig) -> str:
    return f"{config.seed:016x}"


def run_session(
    config: SessionConfig,
    roster: Sequence[CharacterProfile],
    backend: Backend,
    *,
    session_id: Optional[str] = None,
    window: Optional[int] = None,
) -> SessionLog:
    """Run ``config.turn_count`` turns, strict round-robin from roster index 0."""
    check_roster(config, roster)
    session_id = session_id or default_session_id(config)
    intention_mode = config.scenario is Scenario.INTENTION_EXPRESSION
    session = SessionLog(
        session_id, config, tuple(roster), (),
        gold_intentions=() if intention_mode else None,
    )
    turns: list[TurnEvent] = []
    golds: list[tuple[Intention, ...]] = []
    for i in range(config.turn_count):
        agent = roster[i % len(roster)]
        partial = replace(session, turns=tuple(turns), gold_intentions=tuple(golds) if intention_mode else None)
        messages = build_agent_context(partial, agent, window)
        sampling = GENERATION_SAMPLING.with_seed(derive_seed(config.seed, "turn", i))
        try:
            raw = backend.complete(messages, sampling)
        except GatewayError as exc:
            raise SessionError(f"session {session_id} aborted at turn {i}: {exc}", partial) from exc
        d = parse_turn_output(raw)
        turns.append(TurnEvent(session_id, i, agent.name, d.kind, d.action_text, d.speech_text, d.malformed))
        if intention_mode:
            gold = (agent.intention,) if agent.intention is not None and d.kind is not TurnKind.PASS else ()
            golds.append(gold)
    return replace(session, turns=tuple(turns), gold_intentions=tuple(golds) if intention_mode else None)


@dataclass
class BatchResult:
    logs: list[SessionLog] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)
    paths: list[Path] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def session_seed(batch_seed: int, index: int) -> int:
    return derive_seed(batch_seed, "session", index)


def run_batch(
    config: SessionConfig,
    session_count: int,
    backend: Backend,
    out_dir: Optional[Path | str] = None,
    *,
    jobs: int = 1,
    window: Optional[int] = None,
    corrected: bool = False,
    players: Optional[Sequence[CharacterProfile]] = None,
) -> BatchResult:
    """Run independent sessions, each seeded from ``hash(seed, index)``.

    Sessions may run concurrently; results and files are ordered by index.
    """
    if session_count < 1:
        raise ValueError("session_count must be >= 1")

    def one(index: int) -> SessionLog:
        sub = session_seed(config.seed, index)
        cfg = replace(config, seed=sub)
        roster = build_roster(cfg, backend, corrected, players)
        return run_session(cfg, roster, backend, session_id=f"{index:04d}-{sub:016x}", window=window)

    outcomes: list[SessionLog | Exception] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [pool.submit(one, i) for i in range(session_count)]
        for fut in futures:
            try:
                outcomes.append(fut.result())
            except (GatewayError, SessionError, ValueError, RuntimeError) as exc:
                outcomes.append(exc)

    result = BatchResult()
    for index, outcome in enumerate(outcomes):
        if isinstance(outcome, Exception):
            result.errors[index] = f"{type(outcome).__name__}: {outcome}"
            continue
        result.logs.append(outcome)
        if out_dir is not None:
            result.paths.append(write_session(outcome, out_dir))
    return result
