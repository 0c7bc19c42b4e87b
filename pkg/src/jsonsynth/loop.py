"""The refinement loop: generate, measure, judge, score, edit, update; plus run records."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .agents import (
    AgentEndpoint,
    BudgetLimits,
    BudgetMeter,
    ChatGenerator,
    ChatJudge,
    ChatOptimizer,
    HttpChatBackend,
    JudgeEvidence,
    MechanicalJudge,
    ScriptedBackend,
    ScriptedTranscript,
    ToyGenerator,
)
from .errors import AgentError, BudgetExceeded, ConfigError, EmptyBatch
from .judge import (
    JudgeAnswers,
    RewardSignal,
    Rubric,
    ScorerConfig,
    build_judge_prompt,
    build_reward_prompt,
    parse_answers,
    parse_feedback,
    score,
)
from .metrics import MetricVector, ReferenceCorpus, TsrThresholds, independent_metrics, mean_metric_vector
from .nle import BandTable, describe, load_band_table
from .policy import (
    EditAction,
    EditCatalog,
    HistoryEntry,
    PolicyParams,
    TrajectoryStep,
    apply_edit,
    build_optimizer_prompt,
    compute_advantage,
    load_edit_catalog,
    parse_optimizer_output,
    ppo_update,
    sample_edit,
    summarize_history,
    update_baseline,
)
from .schema import Prompt, Sample, SchemaSpec, load_schema, validate

log = logging.getLogger(__name__)

DEFAULT_PROMPT = "Generate travel details"
REASON_CONVERGED = "converged"
REASON_ITERATIONS = "iteration budget"


def _bundled(name: str) -> Path:
    return Path(str(resources.files("jsonsynth").joinpath(f"data/{name}")))


# --- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class RoleBackend:
    """``kind`` is toy/mechanical/template (in-process), scripted, or http."""

    kind: str
    transcript: Optional[Path] = None
    endpoint: Optional[AgentEndpoint] = None

    def as_dict(self) -> dict:
        doc: dict[str, Any] = {"kind": self.kind}
        if self.transcript is not None:
            doc["transcript"] = str(self.transcript)
        if self.endpoint is not None:
            doc["endpoint"] = dict(self.endpoint.__dict__)
        return doc


_LOCAL_KIND = {"generator": "toy", "judge": "mechanical", "optimizer": "template"}


@dataclass(frozen=True)
class RunConfig:
    schema_path: Path = field(default_factory=lambda: _bundled("attraction_schema.json"))
    seed_examples_path: Path = field(default_factory=lambda: _bundled("seed_examples.json"))
    reference_corpus_path: Path = field(default_factory=lambda: _bundled("reference_corpus.jsonl"))
    band_table_path: Optional[Path] = None
    edit_catalog_path: Optional[Path] = None
    scorer: ScorerConfig = ScorerConfig()
    generator: RoleBackend = RoleBackend("toy")
    judge: RoleBackend = RoleBackend("mechanical")
    optimizer: RoleBackend = RoleBackend("template")
    budgets: BudgetLimits = BudgetLimits()
    gamma: float = 0.9
    tau_valid: float = 0.8
    tau_sim: float = 0.5
    tau_s: float = 0.5
    tau_d: float = 0.3
    seed: int = 0
    initial_prompt: str = DEFAULT_PROMPT
    batch_size: int = 1
    n_eval: int = 5
    consecutive_favorable: int = 1
    history_window: int = 5
    ppo_epsilon: float = 0.2
    kl_coeff: float = 0.01
    policy_step_size: float = 0.05
    judge_sim_threshold: float = 0.6
    judge_novelty_threshold: float = 0.1
    judge_ppl_threshold: float = 40.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.batch_size < 1 or self.n_eval < 1 or self.consecutive_favorable < 1:
            raise ConfigError("batch_size, n_eval and consecutive_favorable must be >= 1")
        for p in (self.schema_path, self.seed_examples_path, self.reference_corpus_path,
                  self.band_table_path, self.edit_catalog_path):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"referenced file does not exist: {p}")
        for role in ("generator", "judge", "optimizer"):
            backend = getattr(self, role)
            allowed = {_LOCAL_KIND[role], "scripted", "http"}
            if backend.kind not in allowed:
                raise ConfigError(f"{role} backend must be one of {sorted(allowed)}, got {backend.kind!r}")
            if backend.kind == "scripted" and (backend.transcript is None or not Path(backend.transcript).is_file()):
                raise ConfigError(f"{role}: scripted backend needs an existing transcript file")
            if backend.kind == "http" and backend.endpoint is None:
                raise ConfigError(f"{role}: http backend needs an endpoint")

    @property
    def thresholds(self) -> TsrThresholds:
        return TsrThresholds(self.tau_s, self.tau_d)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Union[str, Path] = ".") -> "RunConfig":
        base = Path(base_dir)
        kw: dict[str, Any] = {}

        def path(value):
            p = Path(value)
            return p if p.is_absolute() else base / p

        for key in ("schema_path", "seed_examples_path", "reference_corpus_path",
                    "band_table_path", "edit_catalog_path"):
            if doc.get(key) is not None:
                kw[key] = path(doc[key])
        if "scorer" in doc:
            kw["scorer"] = ScorerConfig.from_dict(doc["scorer"])
        for role in ("generator", "judge", "optimizer"):
            spec = doc.get("backends", {}).get(role)
            if spec is None:
                continue
            if isinstance(spec, str):
                spec = {"kind": spec}
            kw[role] = RoleBackend(
                spec["kind"],
                path(spec["transcript"]) if spec.get("transcript") else None,
                AgentEndpoint.from_dict(spec["endpoint"]) if spec.get("endpoint") else None,
            )
        if "budgets" in doc:
            b = doc["budgets"]
            default = BudgetLimits()
            kw["budgets"] = BudgetLimits(int(b.get("tokens", default.tokens)), int(b.get("calls", default.calls)),
                                         int(b.get("iterations", default.iterations)))
        scalars = {name for name in cls.__dataclass_fields__} - set(kw) - {
            "schema_path", "seed_examples_path", "reference_corpus_path", "band_table_path",
            "edit_catalog_path", "scorer", "generator", "judge", "optimizer", "budgets"}
        for name in scalars:
            if name in doc:
                kw[name] = doc[name]
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def with_backend(self, kind: str) -> "RunConfig":
        """Select the backend family: toy forces every role in-process; scripted/http
        require the generator role to be configured that way (other roles keep their setting)."""
        if kind == "toy":
            return replace(self, generator=RoleBackend("toy"), judge=RoleBackend("mechanical"),
                           optimizer=RoleBackend("template"))
        if kind not in ("scripted", "http"):
            raise ConfigError(f"unknown backend {kind!r}")
        if self.generator.kind != kind:
            raise ConfigError(f"--backend {kind} needs backends.generator configured as {kind}")
        return self

    def as_dict(self) -> dict:
        return {
            "schema_path": str(self.schema_path),
            "seed_examples_path": str(self.seed_examples_path),
            "reference_corpus_path": str(self.reference_corpus_path),
            "band_table_path": str(self.band_table_path) if self.band_table_path else None,
            "edit_catalog_path": str(self.edit_catalog_path) if self.edit_catalog_path else None,
            "scorer": self.scorer.as_dict(),
            "backends": {r: getattr(self, r).as_dict() for r in ("generator", "judge", "optimizer")},
            "budgets": {"tokens": self.budgets.tokens, "calls": self.budgets.calls,
                        "iterations": self.budgets.iterations},
            **{name: getattr(self, name) for name in (
                "gamma", "tau_valid", "tau_sim", "tau_s", "tau_d", "seed", "initial_prompt", "batch_size",
                "n_eval", "consecutive_favorable", "history_window", "ppo_epsilon", "kl_coeff",
                "policy_step_size", "judge_sim_threshold", "judge_novelty_threshold", "judge_ppl_threshold")},
        }


# --- pure helpers ----------------------------------------------------------------

def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    return float(sum(r * gamma ** t for t, r in enumerate(rewards)))


def check_termination(answers: JudgeAnswers, iteration: int, config: RunConfig,
                      favorable_streak: Optional[int] = None) -> Optional[str]:
    """``favorable_streak`` counts consecutive all-favorable iterations ending at this one."""
    streak = favorable_streak if favorable_streak is not None else (1 if answers.all_favorable else 0)
    if answers.all_favorable and streak >= config.consecutive_favorable:
        return REASON_CONVERGED
    if iteration >= config.budgets.iterations:
        return REASON_ITERATIONS
    return None


@dataclass(frozen=True)
class ConstraintReport:
    n: int
    valid_rate: float
    mean_sim: float
    mean_distinct_n: float
    valid_ok: bool
    sim_ok: bool

    @property
    def satisfied(self) -> bool:
        return self.valid_ok and self.sim_ok

    def as_dict(self) -> dict:
        return {"n": self.n, "valid_rate": self.valid_rate, "mean_sim": self.mean_sim,
                "mean_distinct_n": self.mean_distinct_n, "valid_ok": self.valid_ok, "sim_ok": self.sim_ok,
                "satisfied": self.satisfied}


def constraint_report(final_batch: Sequence[tuple[bool, MetricVector]], config: RunConfig) -> ConstraintReport:
    """``final_batch`` holds (schema-valid?, metrics) per sample."""
    if not final_batch:
        raise EmptyBatch("constraint report needs at least one sample")
    n = len(final_batch)
    valid_rate = sum(1 for ok, _ in final_batch if ok) / n
    mean_sim = sum(mv.sim for _, mv in final_batch) / n
    mean_distinct = sum(mv.distinct_n for _, mv in final_batch) / n
    return ConstraintReport(n, valid_rate, mean_sim, mean_distinct,
                            valid_rate >= config.tau_valid, mean_sim >= config.tau_sim)


def rescore(record: dict, scorer: ScorerConfig) -> RewardSignal:
    """Recompute a logged iteration's reward from its recorded answers and metrics."""
    answers = JudgeAnswers(dict(record["answers"]))
    return score(answers, MetricVector.from_dict(record["metrics"]), scorer)


# --- run records -----------------------------------------------------------------

@dataclass
class RunRecord:
    iteration: int
    prompt: Prompt
    samples: list[Sample]
    valid: list[bool]
    metrics: MetricVector
    nle: list[str]
    judge_reply: str
    answers: JudgeAnswers
    reward: RewardSignal
    budget: dict
    edit: Optional[EditAction] = None
    edit_name: Optional[str] = None
    terminated: bool = False
    reason: Optional[str] = None

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "prompt": {"id": self.prompt.id, "text": self.prompt.text, "parent_id": self.prompt.parent_id},
            "samples": [s.raw_text for s in self.samples],
            "valid": self.valid,
            "metrics": self.metrics.as_dict(),
            "nle": self.nle,
            "judge_reply": self.judge_reply,
            "answers": self.answers.answers,
            "reward": self.reward.as_dict(),
            "budget": self.budget,
            "edit": ({**self.edit.as_dict(), "name": self.edit_name} if self.edit else None),
            "terminated": self.terminated,
            "reason": self.reason,
        }


@dataclass
class RunReport:
    rewards: list[float]
    discounted_return: float
    gamma: float
    termination_reason: str
    final_prompt: str
    final_metrics: Optional[dict]
    constraints: Optional[ConstraintReport]
    budget: dict
    records: list[RunRecord] = field(default_factory=list, repr=False)
    error: Optional[str] = None

    @property
    def iterations(self) -> int:
        return len(self.rewards)

    def as_dict(self) -> dict:
        return {
            "rewards": self.rewards,
            "iterations": self.iterations,
            "gamma": self.gamma,
            "discounted_return": self.discounted_return,
            "termination_reason": self.termination_reason,
            "final_prompt": self.final_prompt,
            "final_metrics": self.final_metrics,
            "constraints": self.constraints.as_dict() if self.constraints else None,
            "budget": self.budget,
            "error": self.error,
        }


def trace_lines(records: Sequence[RunRecord]) -> str:
    return "".join(json.dumps(r.as_dict(), sort_keys=True, ensure_ascii=False) + "\n" for r in records)


# --- the loop --------------------------------------------------------------------

def _backend(role: RoleBackend):
    if role.kind == "scripted":
        return ScriptedBackend(ScriptedTranscript.load(role.transcript))
    return HttpChatBackend(role.endpoint)


@dataclass
class _Environment:
    schema: SchemaSpec
    seeds: list[dict]
    corpus: ReferenceCorpus
    bands: BandTable
    catalog: EditCatalog
    rubric: Rubric


def _load_environment(config: RunConfig) -> _Environment:
    schema = load_schema(config.schema_path)
    seeds = json.loads(Path(config.seed_examples_path).read_text(encoding="utf-8"))
    refs = []
    with open(config.reference_corpus_path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if line.strip():
                doc = json.loads(line)
                refs.append(Sample.from_text(str(doc.get("id", f"ref-{i}")), doc["raw_text"]))
    return _Environment(schema, seeds, ReferenceCorpus(refs), load_band_table(config.band_table_path),
                        load_edit_catalog(config.edit_catalog_path), Rubric())


def run_loop(config: RunConfig, meter: Optional[BudgetMeter] = None, backends: Optional[dict] = None) -> RunReport:
    """Run the refinement loop to termination or budget exhaustion.

    ``backends`` may inject ready-made role objects (keys generator/judge/optimizer),
    which is how tests wire stub transports.
    """
    env = _load_environment(config)
    meter = meter or BudgetMeter(config.budgets)
    gen_rng, policy_rng, eval_rng = (np.random.default_rng(s)
                                     for s in np.random.SeedSequence(config.seed).spawn(3))
    roles = dict(backends or {})
    if "generator" not in roles:
        roles["generator"] = (ToyGenerator(gen_rng) if config.generator.kind == "toy"
                              else ChatGenerator(_backend(config.generator)))
    if "judge" not in roles:
        roles["judge"] = (MechanicalJudge(env.schema, config.judge_sim_threshold, config.judge_novelty_threshold,
                                          config.judge_ppl_threshold)
                          if config.judge.kind == "mechanical" else ChatJudge(_backend(config.judge)))
    if "optimizer" not in roles and config.optimizer.kind != "template":
        roles["optimizer"] = ChatOptimizer(_backend(config.optimizer))
    generator, judge, optimizer = roles["generator"], roles["judge"], roles.get("optimizer")

    params = PolicyParams.zeros(len(env.catalog))
    weights = config.scorer.subreward_weights
    prompt = Prompt("p1", config.initial_prompt)
    prediction = ""
    history: list[HistoryEntry] = []
    records: list[RunRecord] = []
    pending: Optional[tuple[np.ndarray, EditAction]] = None
    streak = 0
    reason: Optional[str] = None
    error: Optional[str] = None
    last_feedback: Optional[str] = None

    t = 0
    try:
        while reason is None:
            t += 1
            try:
                meter.charge(iterations=1)
                samples = []
                for k in range(config.batch_size):
                    raw = generator.generate(prompt.text, meter)
                    samples.append(Sample.from_text(f"t{t}-{k}", raw, prompt.id))
                valid = [s.parsed and validate(s.json_value, env.schema) for s in samples]
                mv = mean_metric_vector([env.corpus.metric_vector(s.tokens) for s in samples])
                nle = describe(mv, env.bands)
                evidence = JudgeEvidence(samples, mv)
                judge_reply = judge.answer(build_judge_prompt(samples[0], nle, env.rubric), evidence, meter)
                answers = parse_answers(judge_reply)
                evidence.answers = answers
                signal = score(answers, mv, config.scorer)
                feedback_reply = judge.feedback(build_reward_prompt(prompt.text, prediction, nle, answers),
                                                evidence, meter)
                feedback = parse_feedback(feedback_reply)
            except AgentError as exc:
                exc.iteration = t
                raise

            advantage = compute_advantage(signal.subrewards, weights, params.baseline)
            signal = replace(signal, advantage=advantage, feedback_sentence=feedback)
            history.append(HistoryEntry(prompt.id, signal.scalar, signal.subrewards,
                                        answers.favorable_count / len(answers.answers), feedback, all(valid)))
            last_feedback = feedback

            # credit the edit that produced this prompt with this iteration's advantage
            if pending is not None and pending[1].kind == "template":
                feats, action = pending
                step = TrajectoryStep(feats, action, advantage)
                params = ppo_update(params, [step], [action.log_prob], config.ppo_epsilon, config.kl_coeff,
                                    config.policy_step_size)
            params = replace(params, baseline=update_baseline(params.baseline, signal.scalar, params.baseline_decay))

            streak = streak + 1 if answers.all_favorable else 0
            reason = check_termination(answers, t, config, streak)
            record = RunRecord(t, prompt, samples, valid, mv, nle, judge_reply, answers, signal,
                               meter.state.as_dict(), terminated=reason is not None, reason=reason)
            records.append(record)
            if reason is not None:
                break

            summary = summarize_history(history, config.history_window)
            try:
                if optimizer is None:
                    action = sample_edit(params, summary, policy_rng)
                else:
                    reply = optimizer.propose(build_optimizer_prompt(env.seeds, env.schema, last_feedback), meter)
                    new_text, prediction = parse_optimizer_output(reply)
                    action = EditAction.full_rewrite(new_text)
            except AgentError as exc:
                exc.iteration = t
                raise
            record.edit = action
            record.edit_name = (env.catalog.templates[action.index].name if action.kind == "template"
                                else "full-rewrite")
            pending = (summary.features, action)
            prompt = apply_edit(prompt, action, env.catalog)
    except BudgetExceeded as exc:
        reason = f"budget: {exc.which}"
        error = str(exc)
        log.warning("stopping at iteration %d: %s", t, exc)

    final_metrics = None
    constraints = None
    if error is None:
        try:
            final_metrics, constraints = _final_evaluation(config, env, generator, prompt, meter)
        except BudgetExceeded as exc:
            error = f"final evaluation skipped: {exc}"
            log.warning(error)

    rewards = [r.reward.scalar for r in records]
    return RunReport(
        rewards=rewards,
        discounted_return=discounted_return(rewards, config.gamma),
        gamma=config.gamma,
        termination_reason=reason or REASON_ITERATIONS,
        final_prompt=prompt.text,
        final_metrics=final_metrics,
        constraints=constraints,
        budget=meter.state.as_dict(),
        records=records,
        error=error,
    )


def _final_evaluation(config, env, generator, prompt, meter):
    batch = [Sample.from_text(f"eval-{k}", generator.generate(prompt.text, meter), prompt.id)
             for k in range(config.n_eval)]
    final = independent_metrics(batch, env.corpus, env.schema, config.thresholds)
    per_sample = [(s.parsed and validate(s.json_value, env.schema), env.corpus.metric_vector(s.tokens))
                  for s in batch]
    return final, constraint_report(per_sample, config)


def _rfc3339_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


def write_run(out_dir: Union[str, Path], config: RunConfig, report: RunReport,
              started_at: Optional[str] = None) -> Path:
    """Write config.json, trace.jsonl and report.json; only the report carries timestamps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n", "utf-8")
    (out / "trace.jsonl").write_text(trace_lines(report.records), "utf-8")
    doc = report.as_dict()
    doc["started_at"] = started_at or _rfc3339_now()
    doc["finished_at"] = _rfc3339_now()
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8")
    return out


def read_trace(path: Union[str, Path]) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

