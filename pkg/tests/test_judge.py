import itertools

import pytest
from hypothesis import given, strategies as st

from jsonsynth.errors import AmbiguousAnswer, MissingCategory, MissingFeedbackPrefix, UnparseableAnswer
from jsonsynth.judge import (
    CATEGORIES,
    NEGATIVE_CATEGORY,
    REWARD_OUTRO,
    JudgeAnswers,
    Rubric,
    ScorerConfig,
    blend,
    build_judge_prompt,
    build_reward_prompt,
    mechanical_feedback,
    parse_answers,
    parse_feedback,
    render_answers,
    score,
)
from jsonsynth.metrics import MetricVector
from jsonsynth.nle import describe, load_band_table
from jsonsynth.schema import Sample

from conftest import fixture_text

SAMPLE_ANSWERS = {
    "Task Alignment": True, "Semantic Fidelity": False, "Diversity & Novelty": True, "Fluency & Grammar": True,
    "Structure & JSON Validity": True, "Usefulness / Utility": True, "Bias / Safety": False,
}


def all_yes(value=True):
    return JudgeAnswers({c: value for c in CATEGORIES})


def test_judge_prompt_contains_rubric_verbatim(seed_entries):
    import json
    sample = Sample.from_text("s", json.dumps(seed_entries[0]))
    nle = describe(MetricVector(0.65, 0.29, 4.09, 0.97, 7.59), load_band_table())
    prompt = build_judge_prompt(sample, nle, Rubric())
    assert fixture_text("rubric_block.txt").rstrip("\n") in prompt
    assert prompt.rstrip().endswith("Category: YES/NO")
    positions = [prompt.index(f"{i}. ") for i in range(1, 8)]
    assert positions == sorted(positions)
    assert nle[0] in prompt


def test_judge_prompt_without_metrics():
    prompt = build_judge_prompt(Sample.from_text("s", "{}"), [])
    assert "Metric evaluation" not in prompt
    assert all(f"{i}. " in prompt for i in range(1, 8))


def test_parse_sample_answers():
    parsed = parse_answers(fixture_text("judge_answers.txt"))
    assert parsed.answers == SAMPLE_ANSWERS
    assert parsed.favorable_count == 6


def test_parse_variants():
    text = fixture_text("judge_answers.txt").replace("Task Alignment: YES", "task alignment: yes - fine")
    assert parse_answers(text).answers["Task Alignment"] is True
    assert parse_answers(text).notes["Task Alignment"] == "fine"
    numbered = "\n".join(f"{i}. **{c}:** {'YES' if v else 'NO'}"
                         for i, (c, v) in enumerate(SAMPLE_ANSWERS.items(), 1))
    assert parse_answers(numbered).answers == SAMPLE_ANSWERS
    split = fixture_text("judge_answers.txt").replace("Semantic Fidelity: NO", "Semantic Fidelity:\nNO")
    assert parse_answers(split).answers == SAMPLE_ANSWERS
    noted = fixture_text("judge_answers.txt").replace("Task Alignment: YES", "Task Alignment: YES, no issues")
    assert parse_answers(noted).answers["Task Alignment"] is True


def test_parse_errors():
    text = fixture_text("judge_answers.txt")
    with pytest.raises(MissingCategory) as err:
        parse_answers(text.replace("Fluency & Grammar: YES\n", ""))
    assert err.value.name == "Fluency & Grammar"
    with pytest.raises(AmbiguousAnswer):
        parse_answers(text.replace("Task Alignment: YES", "Task Alignment: YES/NO"))
    with pytest.raises(UnparseableAnswer):
        parse_answers(text.replace("Task Alignment: YES", "Task Alignment: maybe"))


@pytest.mark.parametrize("bits", list(itertools.product([False, True], repeat=7)))
def test_render_parse_round_trip(bits):
    answers = JudgeAnswers(dict(zip(CATEGORIES, bits)))
    assert parse_answers(render_answers(answers)).answers == answers.answers


def test_score_bounds():
    cfg = ScorerConfig()
    top = MetricVector(1.0, 1.0, 100.0, 1.0, 1.0)
    bottom = MetricVector(0.0, 0.0, 0.0, 0.0, 1000.0)
    good = JudgeAnswers({c: c != NEGATIVE_CATEGORY for c in CATEGORIES})
    bad = JudgeAnswers({c: c == NEGATIVE_CATEGORY for c in CATEGORIES})
    assert score(good, top, cfg).scalar == 1.0
    assert score(bad, bottom, cfg).scalar == 0.0


def test_score_sample_equal_weights():
    cfg = ScorerConfig(subreward_weights=(0.2,) * 5)
    answers = JudgeAnswers(SAMPLE_ANSWERS)
    assert answers.yes_fraction == pytest.approx(6 / 7)
    r = blend(answers.yes_fraction, (0.65, 0.29, 0.97, 0.8, 0.9), cfg)
    assert r == pytest.approx(0.5 * 6 / 7 + 0.5 * 0.722, abs=1e-12)
    assert r == pytest.approx(0.790, abs=1e-3)


def test_subreward_normalization():
    cfg = ScorerConfig()
    sig = score(all_yes(), MetricVector(0.65, 0.29, 3.25, 0.97, 27.5), cfg)
    assert sig.subrewards == pytest.approx((0.65, 0.29, 0.97, 0.5, 0.5))


unit = st.floats(0, 1)


@given(unit, unit, unit, unit, st.floats(0, 10), st.floats(1, 100), st.integers(0, 127))
def test_score_strictly_increasing_in_sim(sim, delta, dist, nov, ent, ppl, mask):
    cfg = ScorerConfig()
    answers = JudgeAnswers({c: bool(mask >> i & 1) for i, c in enumerate(CATEGORIES)})
    hi = min(1.0, sim + max(delta, 1e-6))
    if hi <= sim:
        return
    lo_r = score(answers, MetricVector(sim, dist, ent, nov, ppl), cfg).scalar
    hi_r = score(answers, MetricVector(hi, dist, ent, nov, ppl), cfg).scalar
    assert hi_r > lo_r


@given(unit, unit, unit, st.floats(0, 10), st.floats(1, 100), st.integers(0, 127))
def test_bias_yes_never_helps(sim, dist, nov, ent, ppl, mask):
    cfg = ScorerConfig()
    base = {c: bool(mask >> i & 1) for i, c in enumerate(CATEGORIES)}
    mv = MetricVector(sim, dist, ent, nov, ppl)
    no = score(JudgeAnswers({**base, NEGATIVE_CATEGORY: False}), mv, cfg).scalar
    yes = score(JudgeAnswers({**base, NEGATIVE_CATEGORY: True}), mv, cfg).scalar
    assert yes <= no
    assert 0.0 <= yes <= 1.0


@given(st.lists(unit, min_size=5, max_size=5), st.integers(0, 4), st.floats(0, 0.5), unit)
def test_blend_monotone_and_lipschitz(subs, i, bump, yes):
    cfg = ScorerConfig()
    raised = list(subs)
    raised[i] = min(1.0, raised[i] + bump)
    a, b = blend(yes, subs, cfg), blend(yes, raised, cfg)
    assert b >= a
    assert b - a <= (1 - cfg.judge_blend_alpha) * max(cfg.subreward_weights) * (raised[i] - subs[i]) + 1e-12


def test_scorer_config_validation():
    with pytest.raises(ValueError):
        ScorerConfig(subreward_weights=(0.5, 0.5, 0.5, 0, 0))
    with pytest.raises(ValueError):
        ScorerConfig(judge_blend_alpha=1.5)
    assert ScorerConfig.load() == ScorerConfig()


def test_reward_prompt_layout():
    nle = ["Highly novel: new content", "Very fluent: predictable"]
    text = build_reward_prompt("Prompt goes here", "", nle, JudgeAnswers(SAMPLE_ANSWERS))
    for heading in ("Prompt Used:", "Model's Expected Output Quality:", "Linguistic Evaluation Scores:",
                    "Task Alignment Evaluation:"):
        assert heading in text
    assert "Model's Expected Output Quality:\n\n" in text
    assert "Highly novel: new content; Very fluent: predictable" in text
    assert text.endswith(REWARD_OUTRO)
    assert text.splitlines()[-1].startswith('Start your sentence with "Feedback:"')


def test_parse_feedback():
    sentence = parse_feedback(fixture_text("feedback_reply.txt"))
    assert sentence.startswith("Feedback: The prompt effectively produces consistent")
    assert sentence.endswith("reduce repetitive or redundant outputs.")
    assert "\n" not in sentence
    assert parse_feedback("Some preamble\nfeedback: ok\n\nignored") == "Feedback: ok"
    with pytest.raises(MissingFeedbackPrefix):
        parse_feedback("The prompt was fine.")


def test_mechanical_feedback_names_failures():
    answers = JudgeAnswers(SAMPLE_ANSWERS)
    text = mechanical_feedback(answers)
    assert text.startswith("Feedback:")
    assert "6 of 7" in text
    assert parse_feedback(text) == text
