import random
from collections import Counter

import pytest
from scipy.stats import chisquare

from conftest import GOLDEN
from trpgeval.chargen import (
    GenerationError,
    KnowledgeParseError,
    ProfileField,
    assign_intention,
    compose_system_prompt,
    generate_knowledge,
    generate_profile,
    parse_knowledge,
    render_generation_prompt,
    render_knowledge_prompt,
    sample_attributes,
)
from trpgeval.gateway import CallableBackend, ScriptedBackend
from trpgeval.model import (
    SUBRACES,
    Alignment,
    Background,
    CharacterAttributes,
    CharacterClass,
    Intention,
    KnowledgeCategory,
    KnowledgeItem,
    Race,
    RaceSpec,
    Role,
    Skill,
    attribute_violations,
    validate_profile,
)

LUNA = CharacterAttributes(RaceSpec(Race.HUMAN, "Illuskan"), CharacterClass.BARD, Alignment.LAWFUL_GOOD, Background.GLADIATOR)
LUNA_SEED = 316886
HOOK_BRIEF = "The Withered Gates. This intimidating structure of blackened stone and embedded bones stands at the entrance of the treacherous"


def golden(name):
    return (GOLDEN / name).read_text(encoding="utf-8")


def test_luna_seed_reproduces_the_running_example():
    assert sample_attributes(random.Random(LUNA_SEED)) == LUNA


@pytest.mark.parametrize("kind", list(ProfileField))
def test_generation_prompts_match_golden(kind):
    assert render_generation_prompt(kind, LUNA) == golden(f"luna_{kind.value}_prompt.txt")


def test_name_prompt_shape():
    text = render_generation_prompt("Name", LUNA)
    assert text.startswith("According following character informatoin, `Your race is Human (Illuskan).")
    assert text.endswith("Write a character name to play a DND game.")
    assert "He is quick to assume that someone is trying to cheat him." in render_generation_prompt(ProfileField.FLAWS, LUNA)


def test_corrected_prompts_fix_the_typos():
    text = render_generation_prompt(ProfileField.NAME, LUNA, corrected=True)
    assert "informatoin" not in text and "You class" not in text
    assert "bounds" not in render_generation_prompt(ProfileField.BONDS, LUNA, corrected=True)


@pytest.mark.parametrize("category", [c for c in KnowledgeCategory if c is not KnowledgeCategory.ADVENTURE_HOOK])
def test_knowledge_prompts_match_golden(category):
    assert render_knowledge_prompt(category) == golden(f"knowledge_{category.value}_prompt.txt")


def test_hook_prompt_matches_golden():
    rendered = render_knowledge_prompt(KnowledgeCategory.ADVENTURE_HOOK, HOOK_BRIEF)
    assert rendered == golden("knowledge_AdventureHook_prompt.txt")
    assert "Eye of the Bookwurm" in render_knowledge_prompt(KnowledgeCategory.MAGIC_ITEM)


def test_sampling_chi_square():
    rng = random.Random(2024)
    draws = [sample_attributes(rng) for _ in range(10_000)]
    assert all(attribute_violations(a) == [] for a in draws)
    for table, values in [
        (list(Race), [a.race.race for a in draws]),
        (list(CharacterClass), [a.character_class for a in draws]),
        (list(Alignment), [a.alignment for a in draws]),
        (list(Background), [a.background for a in draws]),
    ]:
        counts = Counter(values)
        assert chisquare([counts[v] for v in table]).pvalue > 0.001
    for race, subs in SUBRACES.items():
        if subs:
            counts = Counter(a.race.subrace for a in draws if a.race.race is race)
            assert chisquare([counts[s] for s in subs]).pvalue > 0.001


def test_intention_chi_square_and_pass_through():
    rng = random.Random(5)
    draws = [assign_intention(rng, "Valna") for _ in range(19_000)]
    assert {d.character for d in draws} == {"Valna"}
    counts = Counter(d.skill for d in draws)
    assert chisquare([counts[s] for s in Skill]).pvalue > 0.001
    with pytest.raises(ValueError):
        assign_intention(rng, "  ")


LUNA_TEXTS = {
    "name": "Luna Silverstone",
    "personality": "A charismatic and brave individual with a heart full of compassion.",
    "ideals": "Victory with Valor.",
    "bonds": "Born under the harsh skies of the Frozenfar.",
    "flaws": "Overly judgmental towards those who bend the rules.",
    "appearance": "Tall, scarred, and always carrying a lute.",
}


def luna_script(texts):
    seen = []

    def fn(messages, sampling):
        prompt = messages[-1].content
        for kind in ProfileField:
            if prompt == render_generation_prompt(kind, LUNA):
                seen.append(kind.value)
                return texts[kind.value]
        raise AssertionError(prompt)

    return fn, seen


def test_generate_profile_in_fixed_order():
    fn, seen = luna_script(LUNA_TEXTS)
    profile = generate_profile(CallableBackend(fn), LUNA, Role.NPC)
    assert seen == [k.value for k in ProfileField]
    assert profile.name == "Luna Silverstone"
    assert profile.personality == LUNA_TEXTS["personality"]
    assert profile.role is Role.NPC and profile.attributes == LUNA
    assert validate_profile(profile).ok


def test_generate_profile_is_deterministic():
    fn, _ = luna_script(LUNA_TEXTS)
    assert generate_profile(CallableBackend(fn), LUNA, seed=3) == generate_profile(CallableBackend(fn), LUNA, seed=3)


def test_empty_field_names_the_field():
    fn, _ = luna_script({**LUNA_TEXTS, "personality": "   "})
    with pytest.raises(GenerationError) as err:
        generate_profile(CallableBackend(fn), LUNA)
    assert err.value.field == "personality"


def test_name_cleanup():
    fn, _ = luna_script({**LUNA_TEXTS, "name": 'Name: "Luna Silverstone".\nShe is a bard.'})
    assert generate_profile(CallableBackend(fn), LUNA).name == "Luna Silverstone"


TROLL = (
    "monster: {Stonebound Mire Troll. Living in the thick of the marshes. "
    "Evil intentions hidden behind a facade of stone.}"
)


def test_generate_monster_knowledge():
    backend = CallableBackend(lambda m, s: TROLL)
    item = generate_knowledge(backend, KnowledgeCategory.MONSTER, random.Random(1))
    assert item == KnowledgeItem(
        KnowledgeCategory.MONSTER, "Stonebound Mire Troll",
        "Living in the thick of the marshes. Evil intentions hidden behind a facade of stone.",
    )


def test_parse_knowledge_handles_description_label():
    item = parse_knowledge("weapon: {Candleflame Bow. Description: A bow with a candle.}", KnowledgeCategory.WEAPON)
    assert (item.name, item.description) == ("Candleflame Bow", "A bow with a candle.")
    with pytest.raises(KnowledgeParseError):
        parse_knowledge("just some words without a period", KnowledgeCategory.WEAPON)


def test_adventure_hook_two_step(fake_backend):
    item = generate_knowledge(fake_backend, KnowledgeCategory.ADVENTURE_HOOK, random.Random(9))
    assert item.category is KnowledgeCategory.ADVENTURE_HOOK
    assert item.name == "Ring of Dusk"
    assert item.description.startswith("A plain iron ring that hums near running water. The ring was last seen")


def test_hook_prompt_carries_item_brief():
    prompts = []

    def fn(messages, sampling):
        prompts.append(messages[-1].content)
        return "item: {Ring of Dusk. A plain ring. It glows.}" if len(prompts) == 1 else "hook: Stolen last spring.}"

    generate_knowledge(CallableBackend(fn), KnowledgeCategory.ADVENTURE_HOOK, random.Random(0))
    assert prompts[1] == render_knowledge_prompt(KnowledgeCategory.ADVENTURE_HOOK, "Ring of Dusk. A plain ring")


def test_knowledge_generation_replays_from_script():
    rec = []
    backend = CallableBackend(lambda m, s: TROLL)
    original = backend._call

    def spy(digest, messages, sampling):
        rec.append(digest)
        return original(digest, messages, sampling)

    backend._call = spy
    generate_knowledge(backend, KnowledgeCategory.MONSTER, random.Random(4))
    scripted = ScriptedBackend.from_responses([(rec[0], TROLL)])
    assert generate_knowledge(scripted, KnowledgeCategory.MONSTER, random.Random(4)).name == "Stonebound Mire Troll"


def test_persona_prompt_for_luna():
    fn, _ = luna_script(LUNA_TEXTS)
    arena = KnowledgeItem(KnowledgeCategory.LANDMARK, "The Valorous Arena", "This ancient battleground was a platform for grand battles.")
    luna = generate_profile(CallableBackend(fn), LUNA, Role.NPC, knowledge=arena)
    text = compose_system_prompt(luna)
    assert text.startswith(
        "You are Luna Silverstone, a NPC in a DND game, and you need to act following your own personality "
        "and should not cater to other characters' demands. Your race is Human (Illuskan). Your class is Bard. "
        "Your alignment is Lawful Good. Your background is `Gladiator'."
    )
    assert "You know something about `The Valorous Arena." in text
    assert compose_system_prompt(luna) == text


def test_persona_prompt_optional_clauses():
    fn, _ = luna_script(LUNA_TEXTS)
    plain = generate_profile(CallableBackend(fn), LUNA)
    text = compose_system_prompt(plain)
    assert "You know something about" not in text
    assert "Your intention in this adventure" not in text
    from dataclasses import replace

    with_goal = replace(plain, intention=Intention(plain.name, Skill.INVESTIGATION))
    assert "(Investigation)" in compose_system_prompt(with_goal)
