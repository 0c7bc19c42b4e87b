"""Training metrics (PPL, Sim, Distinct-n, H, Nov-n) and independent metrics
(BLEU, ROUGE-L, METEOR, TSR, Field Overlap).

All logarithms are natural: entropy is reported in nats and perplexity is
``exp`` of the mean negative log-probability.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .errors import (
    EmptyBatch,
    EmptyHypothesis,
    EmptyInput,
    EmptyReferences,
    EmptyReferenceSet,
    EmptySequence,
)
from .schema import Sample, SchemaSpec, extract_fields, records, validate

DEFAULT_N = 2
BOS = "<s>"
UNK = "<unk>"


@dataclass(frozen=True)
class MetricVector:
    sim: float
    distinct_n: float
    entropy: float
    novelty: float
    perplexity: float
    entropy_mode: str = "model"

    def __post_init__(self):
        for name in ("sim", "distinct_n", "entropy", "novelty", "perplexity"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("sim", "distinct_n", "novelty"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.entropy < 0 or self.perplexity < 1.0 - 1e-12:
            raise ValueError("entropy must be >= 0 and perplexity >= 1")

    def as_dict(self) -> dict:
        return {
            "sim": self.sim,
            "distinct_n": self.distinct_n,
            "entropy": self.entropy,
            "novelty": self.novelty,
            "perplexity": self.perplexity,
            "entropy_mode": self.entropy_mode,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricVector":
        return cls(doc["sim"], doc["distinct_n"], doc["entropy"], doc["novelty"],
                   doc["perplexity"], doc.get("entropy_mode", "model"))


@dataclass(frozen=True)
class TsrThresholds:
    tau_s: float = 0.5
    tau_d: float = 0.3

    def __post_init__(self):
        if not (0 <= self.tau_s <= 1 and 0 <= self.tau_d <= 1):
            raise ValueError("TSR thresholds must lie in [0, 1]")


class LanguageModel(Protocol):
    """Anything that can score the next token given the preceding tokens."""

    def log_prob(self, token: str, history: Sequence[str]) -> float: ...

    def distribution(self, history: Sequence[str]) -> np.ndarray: ...


class UniformLanguageModel:
    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size

    def log_prob(self, token, history):
        return -math.log(self.vocab_size)

    def distribution(self, history):
        return np.full(self.vocab_size, 1.0 / self.vocab_size)


class NgramLanguageModel:
    """Add-alpha smoothed n-gram model over a closed vocabulary plus ``<unk>``."""

    def __init__(self, order: int, counts: dict, vocab: Iterable[str], smoothing_alpha: float = 0.1):
        if order < 1:
            raise ValueError("order must be >= 1")
        if smoothing_alpha <= 0:
            raise ValueError("smoothing_alpha must be > 0")
        self.order = order
        self.counts = counts
        self.vocab = sorted(set(vocab) | {UNK})
        self.smoothing_alpha = smoothing_alpha
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        self._dense: dict[tuple, tuple[np.ndarray, float]] = {}

    @classmethod
    def fit(cls, corpus: Iterable[Sequence[str]], order: int = 2, smoothing_alpha: float = 0.1):
        counts: dict[tuple, Counter] = {}
        vocab: set[str] = set()
        for tokens in corpus:
            vocab.update(tokens)
            padded = [BOS] * (order - 1) + list(tokens)
            for i in range(order - 1, len(padded)):
                ctx = tuple(padded[i - order + 1:i])
                counts.setdefault(ctx, Counter())[padded[i]] += 1
        return cls(order, counts, vocab, smoothing_alpha)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _context(self, history: Sequence[str]) -> tuple:
        if self.order == 1:
            return ()
        padded = [BOS] * (self.order - 1) + [t if t in self._index else UNK for t in history]
        return tuple(padded[len(padded) - self.order + 1:])

    def _dense_counts(self, ctx: tuple) -> tuple[np.ndarray, float]:
        hit = self._dense.get(ctx)
        if hit is None:
            vec = np.zeros(self.vocab_size)
            for tok, c in self.counts.get(ctx, {}).items():
                vec[self._index[tok]] += c
            hit = (vec, float(vec.sum()))
            self._dense[ctx] = hit
        return hit

    def distribution(self, history):
        vec, total = self._dense_counts(self._context(history))
        return (vec + self.smoothing_alpha) / (total + self.smoothing_alpha * self.vocab_size)

    def log_prob(self, token, history):
        ctx = self._context(history)
        counter = self.counts.get(ctx, {})
        total = sum(counter.values())
        key = token if token in self._index else UNK
        c = counter.get(key, 0)
        return math.log((c + self.smoothing_alpha) / (total + self.smoothing_alpha * self.vocab_size))


class TfIdfEmbedder:
    """Sparse TF-IDF encoder used as the default ``E(.)`` for similarity.

    Tokens never seen during fitting keep the maximal idf, so out-of-vocabulary
    mass still counts toward the vector norm.
    """

    def __init__(self, idf: Optional[dict[str, float]] = None, default_idf: float = 1.0):
        self.idf = dict(idf or {})
        self.vocabulary = {tok: i for i, tok in enumerate(sorted(self.idf))}
        self.default_idf = default_idf

    @classmethod
    def fit(cls, corpus: Sequence[Sequence[str]]):
        n_docs = len(corpus)
        df = Counter()
        for tokens in corpus:
            df.update(set(tokens))
        idf = {tok: math.log((1 + n_docs) / (1 + d)) + 1.0 for tok, d in df.items()}
        return cls(idf, default_idf=math.log(1 + n_docs) + 1.0)

    def embed(self, tokens: Sequence[str]) -> dict[str, float]:
        tf = Counter(tokens)
        return {tok: c * self.idf.get(tok, self.default_idf) for tok, c in tf.items()}


def cosine(u: dict[str, float], v: dict[str, float]) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    if len(u) > len(v):
        u, v = v, u
    return sum(x * v.get(k, 0.0) for k, x in u.items()) / (nu * nv)


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def reference_ngrams(corpus: Iterable[Sequence[str]], n: int = DEFAULT_N) -> set[tuple[str, ...]]:
    out: set[tuple[str, ...]] = set()
    for tokens in corpus:
        out.update(ngrams(tokens, n))
    return out


def perplexity(tokens: Sequence[str], lm: LanguageModel) -> float:
    if not tokens:
        raise EmptySequence("perplexity needs at least one token")
    total = sum(lm.log_prob(tok, tokens[:i]) for i, tok in enumerate(tokens))
    return max(1.0, math.exp(-total / len(tokens)))


def similarity(sample_tokens: Sequence[str], reference_samples: Sequence[Sequence[str]],
               embedder: TfIdfEmbedder) -> float:
    """Max cosine against the references, clamped to [0, 1]; zero vectors score 0."""
    if not reference_samples:
        raise EmptyReferenceSet("similarity needs at least one reference")
    x = embedder.embed(sample_tokens)
    best = max(cosine(x, embedder.embed(ref)) for ref in reference_samples)
    return min(1.0, max(0.0, best))


def distinct_n(tokens: Sequence[str], n: int = DEFAULT_N) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = ngrams(tokens, n)
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


def entropy(tokens: Sequence[str], lm: Optional[LanguageModel] = None) -> float:
    """Mean per-position entropy under ``lm``, or empirical unigram entropy when ``lm`` is None."""
    if not tokens:
        raise EmptySequence("entropy needs at least one token")
    if lm is None:
        counts = np.array(list(Counter(tokens).values()), dtype=float)
        p = counts / counts.sum()
        return float(max(0.0, -(p * np.log(p)).sum()))
    total = 0.0
    for i in range(len(tokens)):
        p = lm.distribution(tokens[:i])
        p = p[p > 0]
        total -= float((p * np.log(p)).sum())
    return max(0.0, total / len(tokens))


def novelty(tokens: Sequence[str], reference_ngram_set: set, n: int = DEFAULT_N) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = ngrams(tokens, n)
    if not grams:
        return 0.0
    overlap = sum(1 for g in grams if g in reference_ngram_set)
    return 1.0 - overlap / len(grams)


def bleu(hypothesis_tokens: Sequence[str], reference_tokens_list: Sequence[Sequence[str]],
         max_n: int = 4, weights: Optional[Sequence[float]] = None, smoothing: bool = False) -> float:
    """Corpus-free sentence BLEU with per-reference clipping and closest-length brevity penalty.

    With ``smoothing`` the precisions for n >= 2 use add-one counts. Orders longer
    than the hypothesis have no candidate n-grams; they are dropped and the
    remaining weights renormalized, so bleu(x, [x]) = 1 for every non-empty x.
    """
    if not hypothesis_tokens:
        raise EmptyHypothesis("hypothesis is empty")
    refs = [r for r in reference_tokens_list if r]
    if not refs:
        raise EmptyReferences("need at least one non-empty reference")
    if weights is None:
        weights = [1.0 / max_n] * max_n
    if len(weights) != max_n or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must have max_n entries summing to 1")

    usable = [(n, w) for n, w in zip(range(1, max_n + 1), weights) if n <= len(hypothesis_tokens)]
    mass = sum(w for _, w in usable)
    if mass == 0:
        return 0.0
    log_sum = 0.0
    for n, w in ((n, w / mass) for n, w in usable):
        hyp_counts = Counter(ngrams(hypothesis_tokens, n))
        max_ref = Counter()
        for ref in refs:
            for gram, c in Counter(ngrams(ref, n)).items():
                max_ref[gram] = max(max_ref[gram], c)
        matched = sum(min(c, max_ref[g]) for g, c in hyp_counts.items())
        total = sum(hyp_counts.values())
        if smoothing and n > 1:
            matched, total = matched + 1, total + 1
        if total == 0 or matched == 0:
            if w == 0:
                continue
            return 0.0
        log_sum += w * math.log(matched / total)

    c = len(hypothesis_tokens)
    r = min((len(ref) for ref in refs), key=lambda length: (abs(length - c), length))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis_tokens: Sequence[str], reference_tokens: Sequence[str], beta: float = 1.0) -> float:
    if not hypothesis_tokens or not reference_tokens:
        raise EmptyInput("ROUGE-L needs non-empty hypothesis and reference")
    lcs = lcs_length(hypothesis_tokens, reference_tokens)
    if lcs == 0:
        return 0.0
    p = lcs / len(hypothesis_tokens)
    r = lcs / len(reference_tokens)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def meteor_alignment(hypothesis_tokens: Sequence[str], reference_tokens: Sequence[str]) -> list[tuple[int, int]]:
    """Greedy left-to-right exact-token alignment; each reference position used once."""
    used = [False] * len(reference_tokens)
    pairs = []
    for i, tok in enumerate(hypothesis_tokens):
        for j, ref_tok in enumerate(reference_tokens):
            if not used[j] and ref_tok == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor(hypothesis_tokens: Sequence[str], reference_tokens: Sequence[str]) -> float:
    if not hypothesis_tokens or not reference_tokens:
        raise EmptyInput("METEOR needs non-empty hypothesis and reference")
    pairs = meteor_alignment(hypothesis_tokens, reference_tokens)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(hypothesis_tokens)
    r = m / len(reference_tokens)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    # a single chunk covering both sequences is a perfect match
    if chunks == 1 and m == len(hypothesis_tokens) == len(reference_tokens):
        frag = 0.0
    else:
        frag = 0.5 * (chunks / m) ** 3
    return (1 - frag) * f_mean


def tsr(samples: Sequence[Sample], schema: SchemaSpec, thresholds: TsrThresholds,
        embedder: TfIdfEmbedder, reference_samples: Sequence[Sequence[str]], n: int = DEFAULT_N) -> float:
    if not samples:
        raise EmptyBatch("TSR needs at least one sample")
    passed = 0
    for s in samples:
        if not s.parsed or not validate(s.json_value, schema):
            continue
        if similarity(s.tokens, reference_samples, embedder) <= thresholds.tau_s:
            continue
        if distinct_n(s.tokens, n) <= thresholds.tau_d:
            continue
        passed += 1
    return passed / len(samples)


def reference_field_set(values: Iterable) -> set[tuple[str, str]]:
    out: set[tuple[str, str]] = set()
    for value in values:
        for rec in records(value):
            out |= extract_fields(rec)
    return out


def field_overlap(samples: Sequence[Sample], reference_fields: set) -> float:
    """Mean per-record fraction of (path, value) pairs also present in the reference set.

    Array-valued samples contribute one term per element; an unparseable sample
    contributes a single zero.
    """
    if not samples:
        raise EmptyBatch("field overlap needs at least one sample")
    ratios = []
    for s in samples:
        recs = records(s.json_value) if s.parsed else []
        if not recs:
            ratios.append(0.0)
            continue
        for rec in recs:
            fields = extract_fields(rec)
            ratios.append(len(fields & reference_fields) / len(fields) if fields else 0.0)
    return sum(ratios) / len(ratios)


@dataclass
class ReferenceCorpus:
    """Reference set X with its fitted providers, shared by every metric call."""

    samples: list[Sample]
    n: int = DEFAULT_N
    lm_order: int = 2
    lm_alpha: float = 0.1
    token_lists: list[list[str]] = field(init=False)
    embedder: TfIdfEmbedder = field(init=False)
    lm: NgramLanguageModel = field(init=False)
    ngram_set: set = field(init=False)
    fields: set = field(init=False)

    def __post_init__(self):
        if not self.samples:
            raise EmptyReferenceSet("reference corpus is empty")
        self.token_lists = [s.tokens for s in self.samples]
        self.embedder = TfIdfEmbedder.fit(self.token_lists)
        self.lm = NgramLanguageModel.fit(self.token_lists, order=self.lm_order, smoothing_alpha=self.lm_alpha)
        self.ngram_set = reference_ngrams(self.token_lists, self.n)
        self.fields = reference_field_set(s.json_value for s in self.samples if s.parsed)

    def metric_vector(self, tokens: Sequence[str], use_lm_entropy: bool = True) -> MetricVector:
        if not tokens:
            # nothing generated: worst similarity/diversity, uniform-model fluency
            return MetricVector(0.0, 0.0, 0.0, 0.0, float(self.lm.vocab_size),
                                "model" if use_lm_entropy else "empirical")
        return MetricVector(
            sim=similarity(tokens, self.token_lists, self.embedder),
            distinct_n=distinct_n(tokens, self.n),
            entropy=entropy(tokens, self.lm if use_lm_entropy else None),
            novelty=novelty(tokens, self.ngram_set, self.n),
            perplexity=perplexity(tokens, self.lm),
            entropy_mode="model" if use_lm_entropy else "empirical",
        )


def mean_metric_vector(vectors: Sequence[MetricVector]) -> MetricVector:
    if not vectors:
        raise EmptyBatch("no metric vectors to average")
    k = len(vectors)
    return MetricVector(
        sim=sum(v.sim for v in vectors) / k,
        distinct_n=sum(v.distinct_n for v in vectors) / k,
        entropy=sum(v.entropy for v in vectors) / k,
        novelty=sum(v.novelty for v in vectors) / k,
        perplexity=sum(v.perplexity for v in vectors) / k,
        entropy_mode=vectors[0].entropy_mode,
    )


def independent_metrics(samples: Sequence[Sample], corpus: ReferenceCorpus, schema: Optional[SchemaSpec],
                        thresholds: TsrThresholds) -> dict:
    """BLEU/ROUGE-L/METEOR (per-sample best reference, averaged), TSR and Field Overlap."""
    scored = [s for s in samples if s.tokens]
    if not scored:
        raise EmptyBatch("no non-empty samples to score")
    refs = corpus.token_lists
    out = {
        "bleu": sum(bleu(s.tokens, refs) for s in scored) / len(scored),
        "rouge_l": sum(max(rouge_l(s.tokens, r) for r in refs) for s in scored) / len(scored),
        "meteor": sum(max(meteor(s.tokens, r) for r in refs) for s in scored) / len(scored),
        "field_overlap": field_overlap(samples, corpus.fields),
        "n_samples": len(samples),
    }
    if schema is not None:
        out["tsr"] = tsr(samples, schema, thresholds, corpus.embedder, refs, corpus.n)
    return out
