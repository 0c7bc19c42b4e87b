"""Synthetic checks for the convergence and ordering properties of the loop.

A quadratic objective T(P) = T* - (mu/2)||P - P*||^2 makes aligned noisy ascent
exactly analysable: without noise the distance to P* shrinks by (1 - eta*c*mu)
every step, and with noise the mean-square distance obeys a one-step recursion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import RegimeViolation
from .judge import CATEGORIES, JudgeAnswers, ScorerConfig, score
from .metrics import MetricVector

log = logging.getLogger(__name__)

RATIO_TOL = 1e-9
N_SE = 3.0
BALL_SLACK = 2.0


@dataclass(frozen=True)
class QuadraticLandscape:
    p_star: np.ndarray
    mu: float = 2.0
    noise_sigma: float = 0.0
    alignment_c: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p_star", np.asarray(self.p_star, dtype=float))
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.alignment_c <= 1.0:
            raise ValueError("alignment_c must lie in (0, 1]")

    @classmethod
    def centered(cls, d: int = 4, **kw) -> "QuadraticLandscape":
        return cls(np.zeros(d), **kw)

    @property
    def dimension(self) -> int:
        return self.p_star.shape[0]

    @property
    def lipschitz(self) -> float:
        return self.mu

    def value(self, p: np.ndarray) -> float:
        return -0.5 * self.mu * float(np.sum((np.asarray(p) - self.p_star) ** 2))

    def gradient(self, p: np.ndarray) -> np.ndarray:
        return -self.mu * (np.asarray(p, dtype=float) - self.p_star)

    def max_eta(self) -> float:
        L = self.lipschitz
        return min(self.alignment_c / L, 2 * self.alignment_c * self.mu / L ** 2)

    def rate(self, eta: float) -> float:
        return 1.0 - eta * self.alignment_c * self.mu


def _noise(rng: np.random.Generator, shape) -> np.ndarray:
    # unit expected squared norm per step, so sigma^2 is the total noise variance
    return rng.standard_normal(shape) / math.sqrt(shape[-1])


def landscape_step(landscape: QuadraticLandscape, p: np.ndarray, eta: float,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if eta > landscape.max_eta():
        log.warning("eta=%g is outside the guaranteed-contraction regime (max %g)", eta, landscape.max_eta())
    p = np.asarray(p, dtype=float)
    step = eta * landscape.alignment_c * landscape.gradient(p)
    if landscape.noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy landscapes need an rng")
        step = step + eta * landscape.noise_sigma * _noise(rng, p.shape)
    return p + step


@dataclass
class ContractionTrace:
    eta: float
    mean_sq_dist: np.ndarray        # steps + 1 entries, index 0 is the start
    bounds: np.ndarray              # recursion bound for steps 1..steps (index 0 is nan)
    std_err: np.ndarray             # standard error of the paired recursion slack
    distances: np.ndarray           # root-mean-square distance per step
    ratios: np.ndarray              # per-step distance ratios (first trial)
    checks: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def verify_contraction(landscape: QuadraticLandscape, eta: float, steps: int = 50, trials: int = 1,
                       base_seed: int = 0, guarantee: bool = False,
                       start: Optional[np.ndarray] = None) -> ContractionTrace:
    """Simulate ``trials`` independent runs; trial i draws from seed ``base_seed + i``."""
    if steps < 1 or trials < 1:
        raise ValueError("steps and trials must be >= 1")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if eta > landscape.max_eta():
        if guarantee:
            raise RegimeViolation(f"eta={eta} exceeds the admissible step {landscape.max_eta()}")
        log.warning("eta=%g outside the guaranteed regime; checks may fail", eta)

    d = landscape.dimension
    start = np.ones(d) / math.sqrt(d) if start is None else np.asarray(start, dtype=float)
    sigma = landscape.noise_sigma
    rate = landscape.rate(eta)
    c, mu = landscape.alignment_c, landscape.mu

    errors = np.tile(start - landscape.p_star, (trials, 1))
    if sigma > 0:
        noise = np.stack([_noise(np.random.default_rng(base_seed + i), (steps, d)) for i in range(trials)])
    sq = np.empty((steps + 1, trials))
    sq[0] = np.sum(errors ** 2, axis=1)
    for t in range(steps):
        # e' = e + eta*c*grad = (1 - eta*c*mu) e, plus the scaled noise
        errors = errors * rate
        if sigma > 0:
            errors = errors + eta * sigma * noise[:, t, :]
        sq[t + 1] = np.sum(errors ** 2, axis=1)

    mean_sq = sq.mean(axis=1)
    bounds = np.full(steps + 1, np.nan)
    bounds[1:] = rate * mean_sq[:-1] + (eta * sigma) ** 2
    slack = sq[1:] - rate * sq[:-1]
    std_err = np.zeros(steps + 1)
    if trials > 1:
        std_err[1:] = slack.std(axis=1, ddof=1) / math.sqrt(trials)

    dist = np.sqrt(sq[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = dist[1:] / dist[:-1]

    checks = {}
    details = {"rate": rate, "max_eta": landscape.max_eta()}
    if sigma == 0:
        ok = bool(np.all(np.abs(ratios - rate) <= RATIO_TOL)) if dist[0] > 0 else bool(np.all(dist == 0))
        checks["ratios_match_rate"] = ok
        details["max_ratio_error"] = float(np.max(np.abs(ratios - rate))) if dist[0] > 0 else 0.0
    else:
        excess = mean_sq[1:] - bounds[1:] - N_SE * std_err[1:]
        checks["recursion_within_3se"] = bool(np.all(excess <= 0))
        ball = eta ** 2 * sigma ** 2 / (c * mu)
        checks["terminal_ball"] = bool(mean_sq[-1] <= BALL_SLACK * ball)
        details.update({
            "ball_radius": ball,
            "ball_limit": BALL_SLACK * ball,
            "terminal_mean_sq_dist": float(mean_sq[-1]),
            # where the recursion itself settles, and where the exact dynamics settle
            "recursion_fixed_point": eta * sigma ** 2 / (c * mu),
            "stationary_mean_sq_dist": (eta * sigma) ** 2 / (1 - rate ** 2) if abs(rate) < 1 else math.inf,
            "worst_recursion_excess": float(np.max(excess)),
        })
    return ContractionTrace(eta, mean_sq, bounds, std_err, np.sqrt(mean_sq), ratios, checks, details)


def contraction_report(landscape: QuadraticLandscape, trace: ContractionTrace, steps: int, trials: int) -> dict:
    per_step = [{"mean_sq_dist": float(m), "bound": None if math.isnan(b) else float(b)}
                for m, b in zip(trace.mean_sq_dist[1:], trace.bounds[1:])]
    return {
        "eta": trace.eta,
        "mu": landscape.mu,
        "c": landscape.alignment_c,
        "sigma": landscape.noise_sigma,
        "steps": steps,
        "trials": trials,
        "per_step": per_step,
        "verdict": {"pass": trace.passed, "checks": trace.checks, **trace.details},
    }


@dataclass(frozen=True)
class OrderingVerdict:
    pairs: int
    violations: int
    tie_mismatches: int
    worst_pair: Optional[tuple[float, float]] = None

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.tie_mismatches == 0

    def as_dict(self) -> dict:
        return {"pairs": self.pairs, "violations": self.violations, "tie_mismatches": self.tie_mismatches,
                "worst_pair": self.worst_pair, "pass": self.passed}


def ordering_probe(scorer_config: ScorerConfig, sim_values: Optional[Sequence[float]] = None,
                   fixed_other_subrewards: Optional[dict] = None, answers: Optional[JudgeAnswers] = None,
                   pairs: int = 100, seed: int = 0) -> OrderingVerdict:
    """Check that raising similarity alone strictly raises the reward.

    With ``sim_values`` every ordered pair from the grid is compared; otherwise
    ``pairs`` random (sim_a, sim_b) draws are used. ``fixed_other_subrewards``
    holds the remaining metric fields shared by both sides.
    """
    rng = np.random.default_rng(seed)
    others = {"distinct_n": 0.5, "entropy": 3.0, "novelty": 0.5, "perplexity": 20.0}
    if fixed_other_subrewards:
        others.update(fixed_other_subrewards)
    if answers is None:
        answers = JudgeAnswers({c: bool(rng.random() < 0.5) for c in CATEGORIES})

    if sim_values is not None:
        grid = [float(v) for v in sim_values]
        candidates = [(a, b) for i, a in enumerate(grid) for b in grid[i + 1:]]
    else:
        candidates = [tuple(float(x) for x in rng.random(2)) for _ in range(pairs)]

    def reward(sim):
        return score(answers, MetricVector(sim=sim, **others), scorer_config).scalar

    violations = ties = 0
    worst = None
    for a, b in candidates:
        ra, rb = reward(a), reward(b)
        if a == b:
            if ra != rb:
                ties += 1
            continue
        hi, lo = (ra, rb) if a > b else (rb, ra)
        if not hi > lo:
            violations += 1
            worst = (a, b)
    return OrderingVerdict(len(candidates), violations, ties, worst)
