"""Command-line entry point: run, eval, validate, simulate, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 a declared threshold
or check was violated by an otherwise successful run.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import AgentError, BudgetExceeded, ConfigError, JsonSynthError, RegimeViolation

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2, 3
EVAL_METRICS = ("bleu", "rouge_l", "meteor", "tsr", "field_overlap",
                "sim", "distinct_n", "novelty", "entropy", "perplexity")

log = logging.getLogger("jsonsynth")


class UsageError(Exception):
    pass


def _emit(doc, out: Optional[str]):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def load_samples(path: str):
    """Samples from a JSONL file (one JSON value or {"raw_text": ...} per line)
    or a JSON file holding a list (one sample per element)."""
    from .schema import Sample

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    text = p.read_text(encoding="utf-8")
    if not text.strip():
        raise UsageError(f"{path} is empty")
    out = []
    if p.suffix == ".jsonl":
        for i, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            raw = line
            try:
                doc = json.loads(line)
                if isinstance(doc, dict) and "raw_text" in doc:
                    raw = doc["raw_text"]
                    out.append(Sample.from_text(str(doc.get("id", i)), raw))
                    continue
            except json.JSONDecodeError:
                pass
            out.append(Sample.from_text(str(i), raw))
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            return [Sample.from_text("1", text)]
        items = doc if isinstance(doc, list) else [doc]
        for i, item in enumerate(items, 1):
            out.append(Sample.from_text(str(i), json.dumps(item, ensure_ascii=False)))
    return out


# --- commands ---------------------------------------------------------------------

def cmd_run(args) -> int:
    from .loop import RunConfig, _rfc3339_now, run_loop, write_run

    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            from dataclasses import replace
            config = replace(config, seed=args.seed)
        if args.backend:
            config = config.with_backend(args.backend)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    started = _rfc3339_now()
    report = run_loop(config)
    write_run(args.out, config, report, started)
    print(f"{report.iterations} iteration(s), reason: {report.termination_reason}, "
          f"G = {report.discounted_return:.6f}, written to {args.out}")
    if report.error and report.termination_reason.startswith("budget"):
        print(f"stopped early: {report.error}", file=sys.stderr)
    if report.constraints is not None and not report.constraints.satisfied:
        c = report.constraints
        print(f"constraint violated: valid_rate {c.valid_rate:.3f} (>= {config.tau_valid}: {c.valid_ok}), "
              f"mean_sim {c.mean_sim:.3f} (>= {config.tau_sim}: {c.sim_ok})", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import ReferenceCorpus, TsrThresholds, independent_metrics, mean_metric_vector
    from .schema import load_schema

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()] if args.metrics else list(EVAL_METRICS)
    unknown = [m for m in wanted if m not in EVAL_METRICS]
    if unknown:
        raise UsageError(f"unknown metric(s): {', '.join(unknown)}; choose from {', '.join(EVAL_METRICS)}")
    samples = load_samples(args.samples)
    refs = load_samples(args.refs)
    schema = load_schema(args.schema) if args.schema else None
    if "tsr" in wanted and schema is None:
        raise UsageError("tsr needs --schema")
    corpus = ReferenceCorpus(refs)
    result = independent_metrics(samples, corpus, schema, TsrThresholds(args.tau_s, args.tau_d))
    mv = mean_metric_vector([corpus.metric_vector(s.tokens) for s in samples]).as_dict()
    merged = {**result, **{k: mv[k] for k in ("sim", "distinct_n", "novelty", "entropy", "perplexity")}}
    report = {m: merged[m] for m in wanted if m in merged}
    report["n_samples"] = len(samples)
    report["per_sample"] = _per_sample(samples, corpus, schema)
    report["n_references"] = len(refs)
    _emit(report, args.out)
    return EXIT_OK


def _per_sample(samples, corpus, schema) -> list[dict]:
    from .metrics import bleu, meteor, rouge_l
    from .schema import validate

    rows = []
    for s in samples:
        row = {"id": s.id, "parsed": s.parsed}
        if schema is not None:
            row["valid"] = bool(s.parsed and validate(s.json_value, schema))
        if s.tokens:
            refs = corpus.token_lists
            row.update(corpus.metric_vector(s.tokens).as_dict())
            row["bleu"] = bleu(s.tokens, refs)
            row["rouge_l"] = max(rouge_l(s.tokens, r) for r in refs)
            row["meteor"] = max(meteor(s.tokens, r) for r in refs)
        rows.append(row)
    return rows


def cmd_validate(args) -> int:
    from .schema import load_schema, validate

    schema = load_schema(args.schema)
    samples = load_samples(args.samples)
    bad = 0
    for s in samples:
        ok = s.parsed and validate(s.json_value, schema)
        bad += not ok
        print(f"{s.id}\t{'valid' if ok else 'invalid'}")
    print(f"{len(samples) - bad}/{len(samples)} valid")
    return EXIT_OK if bad == 0 else EXIT_VIOLATION


def cmd_simulate(args) -> int:
    from .envsim import QuadraticLandscape, contraction_report, ordering_probe, verify_contraction
    from .judge import ScorerConfig

    if args.theorem == "ordering":
        cfg = ScorerConfig.load(args.scorer) if args.scorer else ScorerConfig.load()
        verdict = ordering_probe(cfg, pairs=args.pairs, seed=args.seed)
        _emit(verdict.as_dict(), args.out)
        return EXIT_OK if verdict.passed else EXIT_VIOLATION

    landscape = QuadraticLandscape.centered(args.d, mu=args.mu, noise_sigma=args.sigma, alignment_c=args.c)
    try:
        trace = verify_contraction(landscape, args.eta, args.steps, args.trials, args.seed, guarantee=args.strict)
    except RegimeViolation as exc:
        print(f"regime violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    _emit(contraction_report(landscape, trace, args.steps, args.trials), args.out)
    return EXIT_OK if trace.passed else EXIT_VIOLATION


def cmd_report(args) -> int:
    from .judge import JudgeAnswers
    from .loop import discounted_return, read_trace

    run = Path(args.run)
    trace_path, report_path = run / "trace.jsonl", run / "report.json"
    if not trace_path.is_file() or not report_path.is_file():
        raise UsageError(f"{run} lacks trace.jsonl or report.json")
    records = read_trace(trace_path)
    report = json.loads(report_path.read_text(encoding="utf-8"))
    rewards = [r["reward"]["scalar"] for r in records]
    g = discounted_return(rewards, report["gamma"])
    if len(rewards) != len(report["rewards"]) or not math.isclose(g, report["discounted_return"],
                                                                  rel_tol=0, abs_tol=1e-12):
        print(f"integrity check failed: trace gives G = {g!r} over {len(rewards)} iteration(s), "
              f"report says {report['discounted_return']!r} over {len(report['rewards'])}", file=sys.stderr)
        return EXIT_FAILURE
    lines = [f"run: {run}",
             f"iterations: {len(rewards)}   termination: {report['termination_reason']}",
             "rewards: " + ", ".join(f"{r:.4f}" for r in rewards),
             f"discounted return (gamma={report['gamma']}): {g:.6f}"]
    for rec in records:
        fav = JudgeAnswers(rec["answers"]).favorable_count
        edit = (rec.get("edit") or {}).get("name", "-")
        lines.append(f"  t={rec['iteration']}  r={rec['reward']['scalar']:.4f}  favorable={fav}/7  edit={edit}")
    fm = report.get("final_metrics")
    if fm:
        lines.append("final metrics: " + ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                                   for k, v in sorted(fm.items())))
    cons = report.get("constraints")
    if cons:
        lines.append(f"constraints: valid_rate={cons['valid_rate']:.3f} ok={cons['valid_ok']}  "
                     f"mean_sim={cons['mean_sim']:.3f} ok={cons['sim_ok']}  "
                     f"mean_distinct_n={cons['mean_distinct_n']:.3f}")
    print("\n".join(lines))
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jsonsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the refinement loop")
    p.add_argument("--config", help="RunConfig JSON (bundled defaults when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--backend", choices=("toy", "scripted", "http"))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a sample file against references")
    p.add_argument("--samples", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--schema")
    p.add_argument("--metrics", help=f"comma-separated subset of {','.join(EVAL_METRICS)}")
    p.add_argument("--tau-s", type=float, default=0.5)
    p.add_argument("--tau-d", type=float, default=0.3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="check samples against a schema")
    p.add_argument("--samples", required=True)
    p.add_argument("--schema", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run the contraction or ordering simulation")
    p.add_argument("--theorem", choices=("contraction", "ordering"), default="contraction")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--mu", type=float, default=2.0)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--scorer", help="scorer config JSON for the ordering probe")
    p.add_argument("--strict", action="store_true", help="fail when eta is outside the guaranteed regime")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"jsonsynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AgentError, BudgetExceeded) as exc:
        where = getattr(exc, "iteration", None)
        prefix = f"iteration {where}: " if where else ""
        print(f"jsonsynth {args.command}: {prefix}{exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (JsonSynthError, OSError, ValueError) as exc:
        print(f"jsonsynth {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
