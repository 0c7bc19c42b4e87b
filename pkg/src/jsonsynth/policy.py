"""Prompt-optimizer policy: edit catalog, edit operator, softmax template policy
and its clipped-surrogate update, plus the external-optimizer prompt round trip.

The template policy is linear-softmax: each catalog entry k has a weight row
``theta[k]`` over the feature vector ``phi = [1, f_1, ..., f_F]`` built from the
history summary, and ``pi(k | h) = softmax(theta @ phi)_k``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateTrajectory, MissingPromptBlock
from .schema import Prompt, SchemaSpec

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 5
FEATURE_NAMES = ("last_reward", "reward_delta", "last_sim", "last_diversity", "last_novelty",
                 "last_entropy_norm", "last_fluency", "last_valid")
N_FEATURES = len(FEATURE_NAMES)


# --- edit catalog and operator -------------------------------------------------

@dataclass(frozen=True)
class EditTemplate:
    name: str
    operation: str  # noop | append | prepend | replace_line
    payload: Any = ""

    def __post_init__(self):
        if self.operation not in ("noop", "append", "prepend", "replace_line"):
            raise ValueError(f"unknown edit operation {self.operation!r}")
        if self.operation == "replace_line" and not (
                isinstance(self.payload, dict) and {"prefix", "line"} <= set(self.payload)):
            raise ValueError("replace_line payload needs 'prefix' and 'line'")

    def apply(self, text: str) -> str:
        lines = text.split("\n")
        if self.operation == "noop":
            return text
        if self.operation in ("append", "prepend"):
            # appending a constraint that is already present is a no-op
            if self.payload in lines:
                return text
            return f"{text}\n{self.payload}" if self.operation == "append" else f"{self.payload}\n{text}"
        prefix, line = self.payload["prefix"], self.payload["line"]
        for i, existing in enumerate(lines):
            if existing.startswith(prefix):
                lines[i] = line
                return "\n".join(lines)
        return f"{text}\n{line}"


@dataclass(frozen=True)
class EditCatalog:
    templates: tuple[EditTemplate, ...]

    def __post_init__(self):
        if not self.templates:
            raise ValueError("edit catalog is empty")
        if self.templates[self.noop_index].operation != "noop":
            raise ValueError("catalog entry 0 must be the no-op edit")

    noop_index = 0

    def __len__(self):
        return len(self.templates)

    def names(self) -> list[str]:
        return [t.name for t in self.templates]


def load_edit_catalog(path: Union[str, Path, None] = None) -> EditCatalog:
    if path is None:
        doc = json.loads(resources.files("jsonsynth").joinpath("data/edit_catalog.json").read_text("utf-8"))
    else:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    return EditCatalog(tuple(EditTemplate(d["name"], d["operation"], d.get("payload", "")) for d in doc))


@dataclass(frozen=True)
class EditAction:
    kind: str  # template | full_rewrite
    index: Optional[int] = None
    text: Optional[str] = None
    log_prob: Optional[float] = None

    def __post_init__(self):
        if self.kind == "template":
            if self.index is None or self.index < 0:
                raise ValueError("template action needs a catalog index")
            if self.log_prob is not None and self.log_prob > 0:
                raise ValueError("log_prob must be <= 0")
        elif self.kind == "full_rewrite":
            if not self.text:
                raise ValueError("full_rewrite needs non-empty text")
        else:
            raise ValueError(f"unknown action kind {self.kind!r}")

    @classmethod
    def template(cls, index: int, log_prob: Optional[float] = None) -> "EditAction":
        return cls("template", index=index, log_prob=log_prob)

    @classmethod
    def full_rewrite(cls, text: str) -> "EditAction":
        return cls("full_rewrite", text=text)

    def as_dict(self) -> dict:
        if self.kind == "template":
            return {"kind": "template", "index": self.index, "log_prob": self.log_prob}
        return {"kind": "full_rewrite", "text": self.text}


def apply_edit(prompt: Prompt, action: EditAction, catalog: Optional[EditCatalog] = None) -> Prompt:
    if action.kind == "full_rewrite":
        text = action.text
    else:
        if catalog is None or action.index >= len(catalog):
            raise ValueError(f"template index {action.index} outside catalog")
        text = catalog.templates[action.index].apply(prompt.text)
    nxt = prompt.iteration + 1
    return Prompt(id=f"p{nxt}", text=text, iteration=nxt, parent_id=prompt.id)


# --- history summary -------------------------------------------------------------

@dataclass(frozen=True)
class HistoryEntry:
    prompt_id: str
    reward: float
    subrewards: tuple[float, ...]
    pass_fraction: float
    feedback: str = ""
    valid: bool = False


@dataclass(frozen=True)
class HistorySummary:
    window: tuple[HistoryEntry, ...]
    features: np.ndarray


def summarize_history(window: Sequence[HistoryEntry], size: int = DEFAULT_WINDOW) -> HistorySummary:
    kept = tuple(window)[-size:] if size > 0 else ()
    feats = np.zeros(N_FEATURES)
    if kept:
        last = kept[-1]
        feats[0] = last.reward
        feats[1] = last.reward - kept[-2].reward if len(kept) > 1 else 0.0
        feats[2:7] = last.subrewards
        feats[7] = 1.0 if last.valid else 0.0
    return HistorySummary(kept, feats)


# --- template policy -------------------------------------------------------------

@dataclass
class PolicyParams:
    theta: np.ndarray
    baseline: float = 0.0
    baseline_decay: float = 0.9
    step: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2:
            raise ValueError("theta must be a (templates, 1 + features) matrix")
        if not np.all(np.isfinite(self.theta)) or not np.isfinite(self.baseline):
            raise ValueError("policy parameters must be finite")
        if not 0.0 < self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in (0, 1)")

    @classmethod
    def zeros(cls, n_templates: int, n_features: int = N_FEATURES, **kw) -> "PolicyParams":
        return cls(np.zeros((n_templates, n_features + 1)), **kw)

    def to_checkpoint(self) -> dict:
        return {"theta": self.theta.tolist(), "baseline": self.baseline, "step": self.step}

    @classmethod
    def from_checkpoint(cls, doc: dict, baseline_decay: float = 0.9) -> "PolicyParams":
        return cls(np.array(doc["theta"], dtype=float), float(doc["baseline"]), baseline_decay, int(doc["step"]))

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_checkpoint()), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path], baseline_decay: float = 0.9) -> "PolicyParams":
        return cls.from_checkpoint(json.loads(Path(path).read_text(encoding="utf-8")), baseline_decay)


def _phi(features) -> np.ndarray:
    return np.concatenate(([1.0], np.asarray(features, dtype=float)))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def action_log_probs(theta: np.ndarray, features) -> np.ndarray:
    return _log_softmax(theta @ _phi(features))


def action_probs(theta: np.ndarray, features) -> np.ndarray:
    return np.exp(action_log_probs(theta, features))


def sample_edit(params: PolicyParams, history_summary: HistorySummary, rng: np.random.Generator) -> EditAction:
    logp = action_log_probs(params.theta, history_summary.features)
    p = np.exp(logp)
    k = int(rng.choice(len(p), p=p / p.sum()))
    return EditAction.template(k, float(logp[k]))


def compute_advantage(subrewards: Sequence[float], weights: Sequence[float], baseline: float) -> float:
    if len(subrewards) != len(weights):
        raise ValueError("subrewards and weights differ in length")
    return float(sum(w * s for w, s in zip(weights, subrewards)) - baseline)


def update_baseline(baseline: float, reward: float, decay: float) -> float:
    return decay * baseline + (1 - decay) * reward


@dataclass(frozen=True)
class TrajectoryStep:
    features: np.ndarray
    action: EditAction
    advantage: float


def _template_steps(trajectory, old_log_probs):
    if len(trajectory) != len(old_log_probs):
        raise ValueError("trajectory and old_log_probs differ in length")
    kept = [(s, lp) for s, lp in zip(trajectory, old_log_probs) if s.action.kind == "template"]
    skipped = len(trajectory) - len(kept)
    if skipped:
        log.debug("ppo_update: %d full_rewrite step(s) treated as off-policy, no gradient", skipped)
    if not kept:
        raise DegenerateTrajectory("trajectory has no template-kind steps")
    return kept


def surrogate_objective(theta: np.ndarray, trajectory: Sequence[TrajectoryStep], old_log_probs: Sequence[float],
                        theta_ref: np.ndarray, epsilon: float, kl_coeff: float) -> float:
    """Mean clipped surrogate minus ``kl_coeff`` times mean KL(pi_theta || pi_ref)."""
    steps = _template_steps(trajectory, old_log_probs)
    total = 0.0
    for step, old_lp in steps:
        logp = action_log_probs(theta, step.features)
        ratio = np.exp(logp[step.action.index] - old_lp)
        adv = step.advantage
        total += min(ratio * adv, np.clip(ratio, 1 - epsilon, 1 + epsilon) * adv)
        ref = action_log_probs(theta_ref, step.features)
        total -= kl_coeff * float(np.exp(logp) @ (logp - ref))
    return total / len(steps)


def surrogate_gradient(theta: np.ndarray, trajectory: Sequence[TrajectoryStep], old_log_probs: Sequence[float],
                       theta_ref: np.ndarray, epsilon: float, kl_coeff: float) -> np.ndarray:
    steps = _template_steps(trajectory, old_log_probs)
    grad = np.zeros_like(theta)
    for step, old_lp in steps:
        phi = _phi(step.features)
        logp = action_log_probs(theta, step.features)
        p = np.exp(logp)
        a = step.action.index
        ratio = np.exp(logp[a] - old_lp)
        adv = step.advantage
        # the clipped branch is flat in theta; only the unclipped branch carries gradient
        if ratio * adv <= np.clip(ratio, 1 - epsilon, 1 + epsilon) * adv:
            dlogp = -p.copy()
            dlogp[a] += 1.0
            grad += adv * ratio * np.outer(dlogp, phi)
        ref = action_log_probs(theta_ref, step.features)
        diff = logp - ref
        kl = float(p @ diff)
        grad -= kl_coeff * np.outer(p * (diff - kl), phi)
    return grad / len(steps)


def ppo_update(params: PolicyParams, trajectory: Sequence[TrajectoryStep], old_log_probs: Sequence[float],
               epsilon: float = 0.2, kl_coeff: float = 0.01, step_size: float = 0.05) -> PolicyParams:
    """One gradient-ascent step on the clipped surrogate, KL-anchored to ``params``."""
    if not trajectory:
        raise DegenerateTrajectory("empty trajectory")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    grad = surrogate_gradient(params.theta, trajectory, old_log_probs, params.theta, epsilon, kl_coeff)
    return PolicyParams(params.theta + step_size * grad, params.baseline, params.baseline_decay, params.step + 1)


# --- external optimizer prompt ----------------------------------------------------

OPTIMIZER_INSTRUCTION = "Please generate an LLM prompt to create more of this JSON dataset."


def build_optimizer_prompt(seed_examples: Sequence[dict], schema: Optional[SchemaSpec],
                           last_feedback: Optional[str]) -> str:
    parts = [OPTIMIZER_INSTRUCTION, json.dumps(list(seed_examples), indent=2, ensure_ascii=False)]
    if schema is not None:
        parts.append("Schema fields: " + ", ".join(schema.field_names))
    if last_feedback:
        parts.append(f"Feedback on the previous prompt:\n{last_feedback}")
    parts.append("Reply with the optimized prompt (including a Requirements: section), "
                 "then a performance prediction starting with a Strengths: heading.")
    return "\n\n".join(parts)


_HEADING = r"^[ \t>#]*\**[ \t]*{name}[ \t]*\**[ \t]*:?[ \t]*\**[ \t]*$"
_STRENGTHS_RE = re.compile(_HEADING.format(name="strengths"), re.I | re.M)
_REQUIREMENTS_RE = re.compile(r"^[ \t>#]*\**[ \t]*requirements[ \t]*\**[ \t]*:", re.I | re.M)
_LABEL_RE = re.compile(r"^\s*(output:\s*)?optimized llm prompt:?\s*\n", re.I)


def parse_optimizer_output(text: str) -> tuple[str, str]:
    """Split an optimizer reply into (optimized prompt, performance prediction)."""
    strengths = _STRENGTHS_RE.search(text)
    if strengths is None and _REQUIREMENTS_RE.search(text) is None:
        raise MissingPromptBlock("reply has neither a Requirements nor a Strengths heading")
    if strengths is None:
        prompt_part, prediction = text, ""
    else:
        prompt_part, prediction = text[:strengths.start()], text[strengths.start():].strip()
    prompt_part = _LABEL_RE.sub("", prompt_part).strip()
    if not prompt_part:
        raise MissingPromptBlock("reply has no prompt text before the prediction")
    return prompt_part, prediction
