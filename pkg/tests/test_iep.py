import json
import math
import random
import re
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from trpgeval.gateway import CallableBackend
from trpgeval.iep import (
    IepDomainError,
    IepPreconditionError,
    IepRecord,
    KeyPointSet,
    MatchParseError,
    PointSource,
    SummarizationShapeError,
    aggregate_iep,
    count_overlaps,
    evaluate_sessions,
    iep_precision,
    parse_key_points,
    query_gathered_info,
    summarize_key_points,
)
from trpgeval.model import Scenario, SessionConfig
from trpgeval.orchestrator import run_batch

CASES = json.loads((FIXTURES / "iep_cases.json").read_text(encoding="utf-8"))


def points(lines, source=PointSource.AGENT_RESPONSE):
    return KeyPointSet(tuple(parse_key_points("\n".join(lines))), source)


def replies(*texts):
    it = iter(texts)
    return CallableBackend(lambda m, s: next(it))


@pytest.mark.parametrize("case,expected", list(zip(CASES, [0.0, 0.4, 1.0])))
def test_worked_cases(case, expected):
    agent = points(case["agent"])
    truth = points(case["truth"], PointSource.PREDEFINED_KNOWLEDGE)
    judge = CallableBackend(lambda m, s, n=case["matched"]: f"Matched number: {n}")
    s = count_overlaps(judge, agent, truth)
    assert s == case["matched"]
    assert iep_precision(s, truth.k) == Fraction(s, 5)
    assert float(iep_precision(s, truth.k)) == expected


def faithful_judge(messages, sampling):
    text = messages[-1].content
    a = re.search(r"List A.*?:\n(.*?)\n\nList B", text, re.S).group(1).splitlines()
    b = re.search(r"List B.*?:\n(.*?)\n\nCount", text, re.S).group(1).splitlines()
    strip = lambda xs: {x.split(". ", 1)[1] for x in xs}  # noqa: E731
    return str(len(strip(a) & strip(b)))


def test_identical_lists_under_faithful_judge():
    truth = points(CASES[2]["truth"])
    assert count_overlaps(CallableBackend(faithful_judge), truth, truth) == 5


def test_summarize_case_three_knowledge():
    reply = "\n".join(CASES[2]["truth"])
    result = summarize_key_points(replies(reply), "Eliza's story...", 5, PointSource.PREDEFINED_KNOWLEDGE)
    assert result.k == 5 and result.source is PointSource.PREDEFINED_KNOWLEDGE
    assert "Eliza Montgomery is an NPC with a personal mission to defeat the Stonebound Mire Troll" in result.points


def test_summarize_reprompts_once():
    four = "1. a\n2. b\n3. c\n4. d"
    five = four + "\n5. e"
    assert summarize_key_points(replies(four, five), "text", 5, PointSource.AGENT_RESPONSE).points == tuple("abcde")
    with pytest.raises(SummarizationShapeError):
        summarize_key_points(replies(four, four), "text", 5, PointSource.AGENT_RESPONSE)


def test_summarize_single_point():
    assert summarize_key_points(replies("The gate is cursed."), "t", 1, PointSource.AGENT_RESPONSE).points == ("The gate is cursed.",)


def test_parse_key_points_variants():
    assert parse_key_points("1) one\n2) two\n  continued") == ["one", "two continued"]
    assert parse_key_points("- one\n- two") == ["one", "two"]


def test_count_parse_retry_and_failure():
    a = points(["1. x", "2. y"])
    assert count_overlaps(replies("several", "1"), a, a) == 1
    assert count_overlaps(replies("7", "2"), a, a) == 2
    with pytest.raises(MatchParseError):
        count_overlaps(replies("many", "lots"), a, a)
    with pytest.raises(IepPreconditionError):
        count_overlaps(replies("0"), a, points(["1. x"]))


@pytest.mark.parametrize("s,k", [(6, 5), (1, 0), (-1, 5)])
def test_precision_domain(s, k):
    with pytest.raises(IepDomainError):
        iep_precision(s, k)


def test_aggregate_examples():
    recs = [IepRecord("s", "a", s, 5) for s in (0, 2, 5)]
    assert aggregate_iep(recs) == Fraction(7, 15)
    assert f"{float(aggregate_iep(recs)):.4f}" == "0.4667"
    assert aggregate_iep([IepRecord("s", "a", 3, 3)] * 4) == 1
    with pytest.raises(IepDomainError):
        aggregate_iep([])


def test_aggregate_matches_streaming_oracle():
    rng = random.Random(0)
    recs = []
    for i in range(10_000):
        k = rng.randint(1, 10)
        recs.append(IepRecord("s", f"a{i}", rng.randint(0, k), k))
    total = 0.0
    comp = 0.0
    for r in recs:  # Kahan summation as an independent accumulator
        y = r.s / r.k - comp
        t = total + y
        comp = (t - total) - y
        total = t
    assert abs(float(aggregate_iep(recs)) - total / len(recs)) < 1e-12
    assert abs(float(aggregate_iep(recs)) - math.fsum(r.s / r.k for r in recs) / len(recs)) < 1e-12


record_st = st.integers(1, 10).flatmap(lambda k: st.builds(lambda s: IepRecord("s", "a", s, k), st.integers(0, k)))


@given(st.lists(record_st, min_size=1, max_size=30), st.randoms())
def test_aggregate_properties(recs, rnd):
    P = aggregate_iep(recs)
    assert min(r.p for r in recs) <= P <= max(r.p for r in recs)
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert aggregate_iep(shuffled) == P


@pytest.fixture
def info_log(fake_backend):
    cfg = SessionConfig(Scenario.INFO_EXCHANGE, player_count=3, turn_count=8, seed=21)
    return run_batch(cfg, 1, fake_backend).logs[0]


def test_query_uses_persona_and_transcript(info_log):
    seen = []

    def fn(messages, sampling):
        seen.append(messages)
        return "I learned of the Withered Gates."

    player = info_log.players[0]
    assert query_gathered_info(CallableBackend(fn), player, info_log) == "I learned of the Withered Gates."
    system, user = seen[0]
    assert system.content.startswith(f"You are {player.name}")
    assert user.content.endswith("What information did you gather from the previous interactions?")
    assert info_log.turns[0].actor in user.content


def test_query_with_empty_transcript(info_log):
    from dataclasses import replace

    empty = replace(info_log, turns=())
    backend = CallableBackend(lambda m, s: "nothing yet")
    assert query_gathered_info(backend, empty.players[0], empty) == "nothing yet"


def test_query_rejects_npc(info_log):
    with pytest.raises(IepPreconditionError):
        query_gathered_info(CallableBackend(lambda m, s: "x"), info_log.npc, info_log)


def test_pipeline_is_deterministic_and_matches_judge(fake, fake_backend, info_log):
    report = evaluate_sessions(fake_backend, [info_log], k=5)
    assert len(report.records) == 3
    assert [r.agent for r in report.records] == [p.name for p in info_log.players]
    assert report.P == sum(Fraction(s, k) for s, k in fake.overlaps) / len(fake.overlaps)
    again = evaluate_sessions(fake_backend, [info_log], k=5, jobs=4)
    assert again == report
    data = report.to_dict()
    assert set(data) == {"records", "P", "variance", "count"}
    assert set(data["records"][0]) == {"session_id", "agent", "s", "k", "p"}


def test_pipeline_rejects_intention_logs(fake_backend):
    cfg = SessionConfig(Scenario.INTENTION_EXPRESSION, player_count=2, turn_count=2, seed=1)
    log = run_batch(cfg, 1, fake_backend).logs[0]
    with pytest.raises(IepPreconditionError):
        evaluate_sessions(fake_backend, [log])
