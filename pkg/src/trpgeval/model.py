"""Shared domain types and the DND rule tables.

Everything here is immutable value data. Validation functions report
violations as data instead of raising, so malformed records can still be
constructed, inspected and serialized.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional


class Race(str, Enum):
    DRAGONBORN = "Dragonborn"
    DWARF = "Dwarf"
    ELF = "Elf"
    GNOME = "Gnome"
    HALF_ELF = "Half-Elf"
    HALF_ORC = "Half-Orc"
    HALFLING = "Halfling"
    HUMAN = "Human"
    TIEFLING = "Tiefling"


SUBRACES: dict[Race, tuple[str, ...]] = {
    Race.DRAGONBORN: (
        "Black", "Blue", "Brass", "Bronze", "Copper",
        "Gold", "Green", "Red", "Silver", "White",
    ),
    Race.DWARF: ("Hill", "Mountain"),
    Race.ELF: ("High", "Wood", "Drow"),
    Race.GNOME: ("Forest", "Rock"),
    Race.HALF_ELF: (),
    Race.HALF_ORC: (),
    Race.HALFLING: ("Lightfoot", "Stout"),
    Race.HUMAN: (
        "Calishite", "Chondathan", "Damaran", "Illuskan", "Mulan",
        "Rashemi", "Shou", "Tethyrian", "Turami",
    ),
    Race.TIEFLING: (),
}


class CharacterClass(str, Enum):
    BARBARIAN = "Barbarian"
    BARD = "Bard"
    CLERIC = "Cleric"
    DRUID = "Druid"
    FIGHTER = "Fighter"
    MONK = "Monk"
    PALADIN = "Paladin"
    RANGER = "Ranger"
    ROGUE = "Rogue"
    SORCERER = "Sorcerer"
    WARLOCK = "Warlock"
    WIZARD = "Wizard"


class Alignment(str, Enum):
    LAWFUL_GOOD = "Lawful Good"
    NEUTRAL_GOOD = "Neutral Good"
    CHAOTIC_GOOD = "Chaotic Good"
    LAWFUL_NEUTRAL = "Lawful Neutral"
    TRUE_NEUTRAL = "True Neutral"
    CHAOTIC_NEUTRAL = "Chaotic Neutral"
    LAWFUL_EVIL = "Lawful Evil"
    NEUTRAL_EVIL = "Neutral Evil"
    CHAOTIC_EVIL = "Chaotic Evil"


class Background(str, Enum):
    ACOLYTE = "Acolyte"
    CHARLATAN = "Charlatan"
    CRIMINAL = "Criminal"
    ENTERTAINER = "Entertainer"
    FOLK_HERO = "Folk Hero"
    GLADIATOR = "Gladiator"
    GUILD_ARTISAN = "Guild Artisan"
    GUILD_MERCHANT = "Guild Merchant"
    HERMIT = "Hermit"
    KNIGHT = "Knight"
    NOBLE = "Noble"
    OUTLANDER = "Outlander"
    PIRATE = "Pirate"
    SAGE = "Sage"
    SAILOR = "Sailor"
    SOLDIER = "Soldier"
    SPY = "Spy"
    URCHIN = "Urchin"


class Ability(str, Enum):
    STRENGTH = "Strength"
    DEXTERITY = "Dexterity"
    CONSTITUTION = "Constitution"
    INTELLIGENCE = "Intelligence"
    WISDOM = "Wisdom"
    CHARISMA = "Charisma"


class Skill(str, Enum):
    """Skill-check labels usable as intentions (18 DND 5E skills plus Initiative)."""

    ATHLETICS = "Athletics"
    ACROBATICS = "Acrobatics"
    SLEIGHT_OF_HAND = "Sleight of Hand"
    STEALTH = "Stealth"
    ARCANA = "Arcana"
    HISTORY = "History"
    INVESTIGATION = "Investigation"
    NATURE = "Nature"
    RELIGION = "Religion"
    ANIMAL_HANDLING = "Animal Handling"
    INSIGHT = "Insight"
    MEDICINE = "Medicine"
    PERCEPTION = "Perception"
    SURVIVAL = "Survival"
    DECEPTION = "Deception"
    INTIMIDATION = "Intimidation"
    PERFORMANCE = "Performance"
    PERSUASION = "Persuasion"
    INITIATIVE = "Initiative"

    @property
    def ability(self) -> Ability:
        return SKILL_ABILITY[self]

    @classmethod
    def parse(cls, text: str) -> "Skill":
        """Case- and whitespace-insensitive lookup; raises ValueError on unknown names."""
        key = normalize_name(text).casefold()
        try:
            return _SKILL_BY_KEY[key]
        except KeyError:
            raise ValueError(f"unknown skill {text!r}") from None


SKILL_ABILITY: dict[Skill, Ability] = {
    Skill.ATHLETICS: Ability.STRENGTH,
    Skill.ACROBATICS: Ability.DEXTERITY,
    Skill.SLEIGHT_OF_HAND: Ability.DEXTERITY,
    Skill.STEALTH: Ability.DEXTERITY,
    Skill.ARCANA: Ability.INTELLIGENCE,
    Skill.HISTORY: Ability.INTELLIGENCE,
    Skill.INVESTIGATION: Ability.INTELLIGENCE,
    Skill.NATURE: Ability.INTELLIGENCE,
    Skill.RELIGION: Ability.INTELLIGENCE,
    Skill.ANIMAL_HANDLING: Ability.WISDOM,
    Skill.INSIGHT: Ability.WISDOM,
    Skill.MEDICINE: Ability.WISDOM,
    Skill.PERCEPTION: Ability.WISDOM,
    Skill.SURVIVAL: Ability.WISDOM,
    Skill.DECEPTION: Ability.CHARISMA,
    Skill.INTIMIDATION: Ability.CHARISMA,
    Skill.PERFORMANCE: Ability.CHARISMA,
    Skill.PERSUASION: Ability.CHARISMA,
    Skill.INITIATIVE: Ability.DEXTERITY,
}

_SKILL_BY_KEY = {s.value.casefold(): s for s in Skill}


class Role(str, Enum):
    PLAYER = "Player"
    NPC = "NPC"


class KnowledgeCategory(str, Enum):
    MAGIC_ITEM = "MagicItem"
    WEAPON = "Weapon"
    LANDMARK = "Landmark"
    MONSTER = "Monster"
    ADVENTURE_HOOK = "AdventureHook"


class TurnKind(str, Enum):
    ACTION = "Action"
    SPEECH = "Speech"
    BOTH = "Both"
    PASS = "Pass"


class Scenario(str, Enum):
    INFO_EXCHANGE = "InfoExchange"
    INTENTION_EXPRESSION = "IntentionExpression"


_WS = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Trim and collapse internal whitespace; matching is otherwise exact."""
    return _WS.sub(" ", name).strip()


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RaceSpec:
    race: Race
    subrace: Optional[str] = None

    def __str__(self) -> str:
        race = self.race.value if isinstance(self.race, Race) else str(self.race)
        return f"{race} ({self.subrace})" if self.subrace else race


@dataclass(frozen=True)
class CharacterAttributes:
    race: RaceSpec
    character_class: CharacterClass
    alignment: Alignment
    background: Background

    def to_dict(self) -> dict[str, Any]:
        return {
            "race": _value(self.race.race),
            "subrace": self.race.subrace,
            "class": _value(self.character_class),
            "alignment": _value(self.alignment),
            "background": _value(self.background),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CharacterAttributes":
        return cls(
            race=RaceSpec(_coerce(Race, data["race"]), data.get("subrace")),
            character_class=_coerce(CharacterClass, data["class"]),
            alignment=_coerce(Alignment, data["alignment"]),
            background=_coerce(Background, data["background"]),
        )


@dataclass(frozen=True)
class KnowledgeItem:
    category: KnowledgeCategory
    name: str
    description: str

    @property
    def text(self) -> str:
        return f"{self.name}. {self.description}"

    def to_dict(self) -> dict[str, Any]:
        return {"category": _value(self.category), "name": self.name, "description": self.description}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "KnowledgeItem":
        return cls(_coerce(KnowledgeCategory, data["category"]), data["name"], data["description"])


@dataclass(frozen=True)
class Intention:
    character: str
    skill: Skill

    def key(self) -> tuple[str, Skill]:
        return normalize_name(self.character), self.skill

    def to_dict(self) -> dict[str, Any]:
        return {"character": self.character, "skill": _value(self.skill)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Intention":
        return cls(data["character"], Skill.parse(data["skill"]))


PROFILE_TEXT_FIELDS = ("name", "personality", "ideals", "bonds", "flaws", "appearance")


@dataclass(frozen=True)
class CharacterProfile:
    name: str
    attributes: Optional[CharacterAttributes]
    personality: str
    ideals: str
    bonds: str
    flaws: str
    appearance: str
    role: Role = Role.PLAYER
    knowledge: Optional[KnowledgeItem] = None
    intention: Optional[Intention] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "role": _value(self.role),
            "attributes": self.attributes.to_dict() if self.attributes else None,
            "personality": self.personality,
            "ideals": self.ideals,
            "bonds": self.bonds,
            "flaws": self.flaws,
            "appearance": self.appearance,
            "knowledge": self.knowledge.to_dict() if self.knowledge else None,
            "intention": self.intention.to_dict() if self.intention else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CharacterProfile":
        attrs = data.get("attributes")
        knowledge = data.get("knowledge")
        intention = data.get("intention")
        return cls(
            name=data["name"],
            attributes=CharacterAttributes.from_dict(attrs) if attrs else None,
            personality=data.get("personality", ""),
            ideals=data.get("ideals", ""),
            bonds=data.get("bonds", ""),
            flaws=data.get("flaws", ""),
            appearance=data.get("appearance", ""),
            role=_coerce(Role, data.get("role", Role.PLAYER.value)),
            knowledge=KnowledgeItem.from_dict(knowledge) if knowledge else None,
            intention=Intention.from_dict(intention) if intention else None,
        )


@dataclass(frozen=True)
class TurnEvent:
    session_id: str
    turn_index: int
    actor: str
    kind: TurnKind
    action_text: Optional[str] = None
    speech_text: Optional[str] = None
    # set when the agent's output did not follow the ACTION:/SAY:/PASS grammar
    malformed: bool = False


@dataclass(frozen=True)
class SessionConfig:
    scenario: Scenario
    player_count: int = 3
    turn_count: int = 30
    seed: int = 0
    backend_spec: str = ""
    k_key_points: int = 5

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": _value(self.scenario),
            "player_count": self.player_count,
            "turn_count": self.turn_count,
            "seed": self.seed,
            "backend_spec": self.backend_spec,
            "k_key_points": self.k_key_points,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SessionConfig":
        return cls(
            scenario=_coerce(Scenario, data["scenario"]),
            player_count=int(data["player_count"]),
            turn_count=int(data["turn_count"]),
            seed=int(data["seed"]),
            backend_spec=data.get("backend_spec", ""),
            k_key_points=int(data.get("k_key_points", 5)),
        )


@dataclass(frozen=True)
class SessionLog:
    session_id: str
    config: SessionConfig
    roster: tuple[CharacterProfile, ...]
    turns: tuple[TurnEvent, ...]
    gold_intentions: Optional[tuple[tuple[Intention, ...], ...]] = None
    # "generated", or "ingested:<adapter>" for converted external corpora
    source: str = "generated"

    def profile(self, name: str) -> CharacterProfile:
        key = normalize_name(name)
        for p in self.roster:
            if normalize_name(p.name) == key:
                return p
        raise KeyError(name)

    @property
    def players(self) -> list[CharacterProfile]:
        return [p for p in self.roster if p.role is Role.PLAYER]

    @property
    def npc(self) -> Optional[CharacterProfile]:
        return next((p for p in self.roster if p.role is Role.NPC), None)


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def attribute_violations(attrs: CharacterAttributes) -> list[str]:
    out = []
    race = attrs.race.race
    if not isinstance(race, Race):
        out.append("race not in race table")
    elif attrs.race.subrace is None:
        if SUBRACES[race]:
            out.append("subrace missing for race with subraces")
    elif attrs.race.subrace not in SUBRACES[race]:
        out.append("subrace not in race table")
    if not isinstance(attrs.character_class, CharacterClass):
        out.append("class not in class table")
    if not isinstance(attrs.alignment, Alignment):
        out.append("alignment not in alignment table")
    if not isinstance(attrs.background, Background):
        out.append("background not in background table")
    return out


def validate_profile(profile: CharacterProfile) -> ValidationResult:
    out: list[str] = []
    for name in PROFILE_TEXT_FIELDS:
        value = getattr(profile, name)
        if not isinstance(value, str) or not value.strip():
            out.append(f"{name} empty")
    if profile.attributes is None:
        out.append("attributes missing")
    else:
        out.extend(attribute_violations(profile.attributes))
    if not isinstance(profile.role, Role):
        out.append("role invalid")
    if profile.knowledge is not None:
        k = profile.knowledge
        if profile.role is not Role.NPC:
            out.append("knowledge on non-NPC")
        if not isinstance(k.category, KnowledgeCategory):
            out.append("knowledge category invalid")
        if not k.name.strip():
            out.append("knowledge name empty")
        if not k.description.strip():
            out.append("knowledge description empty")
    if profile.intention is not None:
        i = profile.intention
        if profile.role is not Role.PLAYER:
            out.append("intention on non-player")
        if not isinstance(i.skill, Skill):
            out.append("intention skill not in taxonomy")
        if normalize_name(i.character) != normalize_name(profile.name):
            out.append("intention character does not match profile name")
    return ValidationResult(tuple(out))


def turn_event_violations(event: TurnEvent) -> list[str]:
    has_action = bool(event.action_text)
    has_speech = bool(event.speech_text)
    expected = {
        TurnKind.ACTION: (True, False),
        TurnKind.SPEECH: (False, True),
        TurnKind.BOTH: (True, True),
        TurnKind.PASS: (False, False),
    }.get(event.kind)
    if expected is None:
        return [f"turn {event.turn_index}: kind invalid"]
    if (has_action, has_speech) != expected:
        return [f"turn {event.turn_index}: text presence does not match kind {event.kind.value}"]
    return []


def validate_session(log: SessionLog) -> ValidationResult:
    """Check the session-level invariants (turn count, contiguity, roster membership)."""
    out: list[str] = []
    cfg = log.config
    if cfg.player_count < 1:
        out.append("player_count < 1")
    if cfg.turn_count < 1:
        out.append("turn_count < 1")
    if cfg.k_key_points < 1:
        out.append("k_key_points < 1")
    if len(log.turns) != cfg.turn_count:
        out.append(f"expected {cfg.turn_count} turns, found {len(log.turns)}")
    if [t.turn_index for t in log.turns] != list(range(len(log.turns))):
        out.append("turn indices not contiguous")

    names = [normalize_name(p.name) for p in log.roster]
    if len(set(names)) != len(names):
        out.append("roster names not unique")
    for p in log.roster:
        if log.source == "generated":
            out.extend(f"{p.name or '<unnamed>'}: {v}" for v in validate_profile(p).violations)
        elif not p.name.strip():
            out.append("name empty")

    known = set(names)
    for t in log.turns:
        if normalize_name(t.actor) not in known:
            out.append(f"turn {t.turn_index}: actor {t.actor!r} not in roster")
        if t.session_id != log.session_id:
            out.append(f"turn {t.turn_index}: session_id mismatch")
        out.extend(turn_event_violations(t))

    if log.gold_intentions is not None:
        if len(log.gold_intentions) != len(log.turns):
            out.append("gold_intentions length differs from turns")
        for idx, golds in enumerate(log.gold_intentions):
            for g in golds:
                if normalize_name(g.character) not in known:
                    out.append(f"turn {idx}: gold character {g.character!r} not in roster")
                if not isinstance(g.skill, Skill):
                    out.append(f"turn {idx}: gold skill not in taxonomy")
    return ValidationResult(tuple(out))


def race_specs() -> list[RaceSpec]:
    """Every race/subrace combination, in table order."""
    out = []
    for race in Race:
        subs = SUBRACES[race]
        if subs:
            out.extend(RaceSpec(race, s) for s in subs)
        else:
            out.append(RaceSpec(race))
    return out


def _value(x: Any) -> Any:
    return x.value if isinstance(x, Enum) else x


def _coerce(enum_cls: type[Enum], value: Any) -> Any:
    """Map a serialized value to its enum member, leaving unknown values as-is for validation."""
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        return value
