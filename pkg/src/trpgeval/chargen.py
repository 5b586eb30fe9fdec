"""Character, knowledge and intention generation.

Rule-table attributes are sampled from a ``random.Random`` stream; the free
text fields are produced by the backend from the fixed generation prompts.
The prompts keep their original wording (typos included) unless
``corrected=True`` is passed.
"""

from __future__ import annotations

import random
import re
from dataclasses import replace
from enum import Enum
from typing import Optional

from . import prompts
from .gateway import GENERATION_SAMPLING, Backend, Sampling, derive_seed, user
from .model import (
    SUBRACES,
    Alignment,
    Background,
    CharacterAttributes,
    CharacterClass,
    CharacterProfile,
    Intention,
    KnowledgeCategory,
    KnowledgeItem,
    Race,
    RaceSpec,
    Role,
    Skill,
    validate_profile,
)


class GenerationError(RuntimeError):
    def __init__(self, field: str, message: Optional[str] = None):
        super().__init__(message or f"empty completion for {field}")
        self.field = field


class KnowledgeParseError(GenerationError):
    pass


class ProfileField(str, Enum):
    NAME = "name"
    PERSONALITY = "personality"
    IDEALS = "ideals"
    BONDS = "bonds"
    FLAWS = "flaws"
    APPEARANCE = "appearance"


SKILL_POOL: tuple[Skill, ...] = tuple(Skill)


def sample_attributes(rng: random.Random) -> CharacterAttributes:
    """Draw race, subrace, class, alignment and background, in that order.

    Race is uniform over the nine races; the subrace is then uniform within
    the race's own table.
    """
    race = rng.choice(list(Race))
    subs = SUBRACES[race]
    subrace = rng.choice(subs) if subs else None
    return CharacterAttributes(
        race=RaceSpec(race, subrace),
        character_class=rng.choice(list(CharacterClass)),
        alignment=rng.choice(list(Alignment)),
        background=rng.choice(list(Background)),
    )


def attribute_sentence(attrs: CharacterAttributes, corrected: bool = False) -> str:
    variant = "corrected" if corrected else "verbatim"
    return prompts.render(
        prompts.load("profile_prompts")["attributes"][variant],
        race=attrs.race,
        character_class=attrs.character_class.value,
        alignment=attrs.alignment.value,
        background=attrs.background.value,
    )


def render_generation_prompt(kind: ProfileField | str, attrs: CharacterAttributes, corrected: bool = False) -> str:
    if not isinstance(kind, ProfileField):
        kind = ProfileField(kind.lower())
    table = prompts.load("profile_prompts")["corrected" if corrected else "verbatim"]
    return prompts.render(table[kind.value], attributes=attribute_sentence(attrs, corrected))


_NAME_PREFIX = re.compile(r"^(?:character\s+)?name\s*[:\-]\s*", re.IGNORECASE)
_QUOTES = "\"'`*_ "


def _clean_name(text: str) -> str:
    for line in text.splitlines():
        line = _NAME_PREFIX.sub("", line.strip()).strip(_QUOTES + ".")
        if line:
            return line
    return ""


def generate_profile(
    backend: Backend,
    attrs: CharacterAttributes,
    role: Role = Role.PLAYER,
    *,
    seed: Optional[int] = None,
    knowledge: Optional[KnowledgeItem] = None,
    corrected: bool = False,
) -> CharacterProfile:
    """Issue the six generation prompts in order and assemble a profile."""
    fields: dict[str, str] = {}
    for kind in ProfileField:
        sampling = _sampling(seed, "profile", kind.value)
        text = backend.complete([user(render_generation_prompt(kind, attrs, corrected))], sampling)
        text = _clean_name(text) if kind is ProfileField.NAME else text.strip()
        if not text:
            raise GenerationError(kind.value)
        fields[kind.value] = text
    profile = CharacterProfile(attributes=attrs, role=role, knowledge=knowledge, **fields)
    result = validate_profile(profile)
    if not result.ok:
        raise GenerationError("profile", "generated profile invalid: " + "; ".join(result.violations))
    return profile


def _sampling(seed: Optional[int], *parts: object) -> Sampling:
    if seed is None:
        return GENERATION_SAMPLING
    return GENERATION_SAMPLING.with_seed(derive_seed(seed, *parts))


def render_knowledge_prompt(category: KnowledgeCategory, description: str = "", corrected: bool = False) -> str:
    table = prompts.load("knowledge_prompts")["corrected" if corrected else "verbatim"]
    if category is KnowledgeCategory.ADVENTURE_HOOK:
        return prompts.render(table[category.value], description=description.strip().rstrip("."))
    return table[category.value]


_LABEL = re.compile(r"^\s*(?:magic\s+item|item|weapon|landmark|monster|hook)\s*:\s*", re.IGNORECASE)
_DESC_LABEL = re.compile(r"^\s*description\s*:\s*", re.IGNORECASE)


def _strip_wrapping(text: str) -> str:
    text = _LABEL.sub("", text.strip())
    text = text.strip().strip("{}").strip()
    return text.strip("\"'`*").strip()


def parse_knowledge(text: str, category: KnowledgeCategory) -> KnowledgeItem:
    """Split a completion into name (up to the first period) and description (the rest)."""
    body = _strip_wrapping(text)
    name, dot, rest = body.partition(".")
    name = name.strip().strip("\"'`*").strip()
    description = _DESC_LABEL.sub("", rest.strip()).strip()
    if not dot or not name or not description:
        raise KnowledgeParseError("knowledge", f"cannot split {category.value} completion into name and description")
    return KnowledgeItem(category, name, description)


def generate_knowledge(
    backend: Backend,
    category: KnowledgeCategory,
    rng: random.Random,
    corrected: bool = False,
) -> KnowledgeItem:
    """Generate one NPC knowledge item.

    Adventure hooks take two calls: a magic item is generated first and its
    name plus first sentence is written into the hook prompt. The item keeps
    that name; its description is the item's first sentence followed by the hook.
    """
    sampling = GENERATION_SAMPLING.with_seed(rng.getrandbits(63))
    if category is not KnowledgeCategory.ADVENTURE_HOOK:
        reply = backend.complete([user(render_knowledge_prompt(category, corrected=corrected))], sampling)
        return parse_knowledge(reply, category)

    item_prompt = render_knowledge_prompt(KnowledgeCategory.MAGIC_ITEM, corrected=corrected)
    item = parse_knowledge(backend.complete([user(item_prompt)], sampling), category)
    first = _first_sentence(item.description)
    brief = f"{item.name}. {first}"
    hook_sampling = GENERATION_SAMPLING.with_seed(rng.getrandbits(63))
    reply = backend.complete([user(render_knowledge_prompt(category, brief, corrected))], hook_sampling)
    hook = _strip_wrapping(reply)
    if not hook:
        raise KnowledgeParseError("knowledge", "empty adventure hook completion")
    return KnowledgeItem(category, item.name, f"{first}. {hook}")


def _first_sentence(text: str) -> str:
    head, dot, _ = text.partition(".")
    return head.strip() if dot else text.strip()


def assign_intention(rng: random.Random, character_name: str) -> Intention:
    if not character_name.strip():
        raise ValueError("character_name must be non-empty")
    return Intention(character_name, rng.choice(SKILL_POOL))


def intention_clause(intention: Intention) -> str:
    data = prompts.load("intention_clauses")
    return prompts.render(data["template"], goal=data["goals"][intention.skill.value], skill=intention.skill.value)


def compose_system_prompt(profile: CharacterProfile) -> str:
    attrs = profile.attributes
    role_word = "NPC" if profile.role is Role.NPC else "player"
    head = (
        f"You are {profile.name}, a {role_word} in a DND game, and you need to act following "
        "your own personality and should not cater to other characters' demands."
    )
    if attrs is not None:
        head += (
            f" Your race is {attrs.race}. Your class is {attrs.character_class.value}."
            f" Your alignment is {attrs.alignment.value}. Your background is `{attrs.background.value}'."
        )
    head += f" Your personality is `{profile.personality}'"
    parts = [
        head,
        f"Your ideals are `{profile.ideals}'",
        f"Your bonds are `{profile.bonds}'",
        f"Your flaws are `{profile.flaws}'",
        f"Your appearance is `{profile.appearance}'",
    ]
    if profile.knowledge is not None:
        parts.append(f"You know something about `{profile.knowledge.name}. {profile.knowledge.description}'")
    if profile.intention is not None:
        parts.append(intention_clause(profile.intention))
    return "\n\n".join(parts)


def with_intention(profile: CharacterProfile, intention: Intention) -> CharacterProfile:
    return replace(profile, intention=intention)
