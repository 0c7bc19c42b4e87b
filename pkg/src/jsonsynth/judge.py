"""Rubric prompt construction, yes/no answer parsing, the reward scorer and
the one-sentence reward feedback round trip."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import AmbiguousAnswer, MissingCategory, MissingFeedbackPrefix, UnparseableAnswer
from .metrics import MetricVector
from .schema import Sample

SUBREWARD_NAMES = ("sim", "diversity", "novelty", "entropy_norm", "fluency")


@dataclass(frozen=True)
class RubricQuestion:
    category: str
    heading: str
    prompt_line: str


DEFAULT_QUESTIONS = (
    RubricQuestion("Task Alignment", "Task Alignment",
                   "Does the generated text fulfill the intended instruction or task?"),
    RubricQuestion("Semantic Fidelity", "Semantic Fidelity",
                   "Does the generated text convey the same meaning as the reference (if provided)?"),
    RubricQuestion("Diversity & Novelty", "Diversity & Novelty",
                   "Does this output present new information or phrasing not found in the reference corpus?"),
    RubricQuestion("Fluency & Grammar", "Fluency & Grammar",
                   "Is the text fluent and grammatically correct, as a human would write?"),
    RubricQuestion("Structure & JSON Validity", "Structure & JSON Validity",
                   "Is the structure of the generated JSON consistent and syntactically valid?"),
    RubricQuestion("Usefulness / Utility", "Usefulness / Utility",
                   "Is this output helpful and complete for the task it was generated for?"),
    RubricQuestion("Bias / Safety", "Bias / Safety (if applicable)",
                   "Does the text contain unsafe, biased, or inappropriate language?"),
)
CATEGORIES = tuple(q.category for q in DEFAULT_QUESTIONS)
# the one negatively phrased question: NO is the favorable answer
NEGATIVE_CATEGORY = "Bias / Safety"

RUBRIC_INTRO = (
    "You are an evaluation agent tasked with reviewing the generated JSON output.\n"
    "Answer each of the following questions with only YES or NO,\n"
    "followed by a brief note if needed for clarity:"
)
RUBRIC_OUTRO = "Return your answers in the format:\n\nCategory: YES/NO"


@dataclass(frozen=True)
class Rubric:
    questions: tuple[RubricQuestion, ...] = DEFAULT_QUESTIONS

    def __post_init__(self):
        if tuple(q.category for q in self.questions) != CATEGORIES:
            raise ValueError(f"rubric categories must be exactly {CATEGORIES} in order")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Rubric":
        """Override file: a JSON list of 7 question texts, in category order."""
        with open(path, encoding="utf-8") as fh:
            texts = json.load(fh)
        if len(texts) != len(DEFAULT_QUESTIONS):
            raise ValueError("rubric override must hold exactly 7 question texts")
        return cls(tuple(replace(q, prompt_line=t) for q, t in zip(DEFAULT_QUESTIONS, texts)))

    def block(self) -> str:
        parts = [RUBRIC_INTRO]
        for i, q in enumerate(self.questions, 1):
            parts.append(f"{i}. {q.heading}:\n{q.prompt_line}")
        parts.append(RUBRIC_OUTRO)
        return "\n\n".join(parts)


@dataclass(frozen=True)
class JudgeAnswers:
    answers: dict[str, bool]
    notes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in CATEGORIES if c not in self.answers]
        if missing:
            raise MissingCategory(missing[0])

    def favorable(self, category: str) -> bool:
        yes = self.answers[category]
        return not yes if category == NEGATIVE_CATEGORY else yes

    @property
    def favorable_count(self) -> int:
        return sum(self.favorable(c) for c in CATEGORIES)

    @property
    def yes_fraction(self) -> float:
        """Fraction of favorable answers (the name follows the rubric's YES-is-good majority)."""
        return self.favorable_count / len(CATEGORIES)

    @property
    def all_favorable(self) -> bool:
        return self.favorable_count == len(CATEGORIES)

    def as_dict(self) -> dict:
        return {c: self.answers[c] for c in CATEGORIES}


@dataclass(frozen=True)
class ScorerConfig:
    judge_blend_alpha: float = 0.5
    subreward_weights: tuple[float, ...] = (0.3, 0.2, 0.2, 0.1, 0.2)
    entropy_norm_ceiling: float = 6.5
    ppl_norm_floor: float = 5.0
    ppl_norm_ceiling: float = 50.0

    def __post_init__(self):
        if not 0.0 <= self.judge_blend_alpha <= 1.0:
            raise ValueError("judge_blend_alpha must lie in [0, 1]")
        w = tuple(float(x) for x in self.subreward_weights)
        object.__setattr__(self, "subreward_weights", w)
        if len(w) != 5 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("subreward_weights must be 5 non-negative reals summing to 1")
        if self.entropy_norm_ceiling <= 0:
            raise ValueError("entropy_norm_ceiling must be > 0")
        if self.ppl_norm_ceiling <= self.ppl_norm_floor:
            raise ValueError("ppl_norm_ceiling must exceed ppl_norm_floor")

    @classmethod
    def from_dict(cls, doc: dict) -> "ScorerConfig":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        if "subreward_weights" in known:
            known["subreward_weights"] = tuple(known["subreward_weights"])
        return cls(**known)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "ScorerConfig":
        if path is None:
            text = resources.files("jsonsynth").joinpath("data/scorer_config.json").read_text("utf-8")
            return cls.from_dict(json.loads(text))
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def as_dict(self) -> dict:
        return {
            "judge_blend_alpha": self.judge_blend_alpha,
            "subreward_weights": list(self.subreward_weights),
            "entropy_norm_ceiling": self.entropy_norm_ceiling,
            "ppl_norm_floor": self.ppl_norm_floor,
            "ppl_norm_ceiling": self.ppl_norm_ceiling,
        }


@dataclass(frozen=True)
class RewardSignal:
    scalar: float
    subrewards: tuple[float, ...]
    advantage: Optional[float] = None
    feedback_sentence: str = ""

    def as_dict(self) -> dict:
        return {
            "scalar": self.scalar,
            "subrewards": dict(zip(SUBREWARD_NAMES, self.subrewards)),
            "advantage": self.advantage,
            "feedback_sentence": self.feedback_sentence,
        }


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def subrewards(metric_vector: MetricVector, config: ScorerConfig) -> tuple[float, ...]:
    span = config.ppl_norm_ceiling - config.ppl_norm_floor
    return (
        _clamp01(metric_vector.sim),
        _clamp01(metric_vector.distinct_n),
        _clamp01(metric_vector.novelty),
        min(metric_vector.entropy / config.entropy_norm_ceiling, 1.0),
        _clamp01((config.ppl_norm_ceiling - metric_vector.perplexity) / span),
    )


def blend(yes_fraction: float, subs: Sequence[float], config: ScorerConfig) -> float:
    alpha = config.judge_blend_alpha
    weighted = sum(w * s for w, s in zip(config.subreward_weights, subs))
    return _clamp01(alpha * yes_fraction + (1 - alpha) * weighted)


def score(answers: JudgeAnswers, metric_vector: MetricVector, config: ScorerConfig) -> RewardSignal:
    subs = subrewards(metric_vector, config)
    return RewardSignal(scalar=blend(answers.yes_fraction, subs, config), subrewards=subs)


def build_judge_prompt(sample: Sample, nle_sentences: Sequence[str], rubric: Rubric = Rubric()) -> str:
    parts = [f"Generated JSON output:\n{sample.raw_text}"]
    if nle_sentences:
        parts.append("Metric evaluation:\n" + "\n".join(nle_sentences))
    parts.append(rubric.block())
    return "\n\n".join(parts)


def render_answers(answers: JudgeAnswers, rubric: Rubric = Rubric()) -> str:
    lines = []
    for q in rubric.questions:
        line = f"{q.heading}: {'YES' if answers.answers[q.category] else 'NO'}"
        note = answers.notes.get(q.category)
        if note:
            line += f" - {note}"
        lines.append(line)
    return "\n".join(lines)


def _category_key(text: str) -> str:
    text = re.sub(r"\([^)]*\)", "", text.lower())
    text = re.sub(r"^\s*\d+[.)]\s*", "", text.replace("*", "").replace("#", "").strip())
    return re.sub(r"[^a-z&]", "", text)


_CATEGORY_KEYS = {_category_key(c): c for c in CATEGORIES}
_ANSWER_RE = re.compile(r"^\W*(yes|no)\b(.*)$", re.I | re.S)
_AMBIGUOUS_RE = re.compile(r"^\s*(?:/|\||\bor\b|\band\b)?\s*(yes|no)\b", re.I)


def _parse_answer(category: str, rest: str) -> tuple[bool, str]:
    m = _ANSWER_RE.match(rest)
    if not m:
        raise UnparseableAnswer(f"no YES/NO answer for {category!r}: {rest.strip()[:60]!r}")
    token, tail = m.group(1).lower(), m.group(2)
    other = _AMBIGUOUS_RE.match(tail)
    if other and other.group(1).lower() != token:
        raise AmbiguousAnswer(f"both YES and NO given for {category!r}")
    note = tail.strip().lstrip("-–—:,.;").strip()
    return token == "yes", note


def parse_answers(judge_text: str) -> JudgeAnswers:
    answers: dict[str, bool] = {}
    notes: dict[str, str] = {}
    lines = judge_text.splitlines()
    for idx, line in enumerate(lines):
        if ":" not in line:
            continue
        head, rest = line.split(":", 1)
        category = _CATEGORY_KEYS.get(_category_key(head))
        if category is None or category in answers:
            continue
        if not rest.strip():
            # answer may sit on the following line
            rest = next((ln for ln in lines[idx + 1:] if ln.strip()), "")
        value, note = _parse_answer(category, rest)
        answers[category] = value
        if note:
            notes[category] = note
    for category in CATEGORIES:
        if category not in answers:
            raise MissingCategory(category)
    return JudgeAnswers(answers, notes)


REWARD_INTRO = ("Based on the following information, provide constructive reward/penalty feedback "
                "in one sentence that helps improve future prompt generation.")
REWARD_OUTRO = ("In one sentence, describe whether this prompt was effective and what should be "
                "changed or kept to improve future generations.\n"
                'Start your sentence with "Feedback:" and avoid vague terms like "good" or "bad".')


def build_reward_prompt(prompt_text: str, prediction_text: str, nle_sentences: Sequence[str],
                        answers: Optional[JudgeAnswers]) -> str:
    slots = [
        ("Prompt Used:", prompt_text),
        ("Model's Expected Output Quality:", prediction_text),
        ("Linguistic Evaluation Scores:", "; ".join(nle_sentences)),
        ("Task Alignment Evaluation:", render_answers(answers) if answers is not None else ""),
    ]
    parts = [REWARD_INTRO] + [f"{heading}\n{body}" for heading, body in slots] + [REWARD_OUTRO]
    return "\n\n".join(parts)


_FEEDBACK_RE = re.compile(r"^\s*\**\s*feedback\s*\**\s*:", re.I)


def parse_feedback(text: str) -> str:
    """The feedback sentence, joined across soft line wraps up to the first blank line."""
    lines = text.splitlines()
    for i, line in enumerate(lines):
        m = _FEEDBACK_RE.match(line)
        if not m:
            continue
        body = [line[m.end():].strip()]
        for cont in lines[i + 1:]:
            if not cont.strip() or _FEEDBACK_RE.match(cont):
                break
            body.append(cont.strip())
        return "Feedback: " + " ".join(b for b in body if b)
    raise MissingFeedbackPrefix("no line starting with 'Feedback:'")


_FIXES = {
    "Task Alignment": "state the task and the expected record type explicitly",
    "Semantic Fidelity": "keep entries closer to the reference venues in field content and value formats",
    "Diversity & Novelty": "require unique names, addresses, and properties for every entry",
    "Fluency & Grammar": "ask for short, natural field values",
    "Structure & JSON Validity": "instruct the model to return ONLY a JSON list with no surrounding prose",
    "Usefulness / Utility": "list every schema field that each entry must include",
    "Bias / Safety": "forbid unsafe, biased, or inappropriate language",
}


def mechanical_feedback(answers: JudgeAnswers) -> str:
    """Deterministic stand-in for the feedback agent, driven only by the rubric answers."""
    failed = [c for c in CATEGORIES if not answers.favorable(c)]
    if not failed:
        return "Feedback: The prompt satisfies every rubric check, so keep its current instructions unchanged."
    kept = [c.lower() for c in CATEGORIES if answers.favorable(c)]
    fixes = "; ".join(_FIXES[c] for c in failed)
    head = f"The prompt passes {len(kept)} of {len(CATEGORIES)} rubric checks"
    return f"Feedback: {head}, but to improve future generations {fixes}."
