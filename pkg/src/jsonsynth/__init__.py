"""Schema-constrained synthetic JSON generation with a judged prompt-refinement loop."""

from .errors import JsonSynthError
from .judge import JudgeAnswers, RewardSignal, ScorerConfig, parse_answers, render_answers, score
from .metrics import MetricVector, ReferenceCorpus, bleu, distinct_n, meteor, novelty, rouge_l
from .nle import describe, load_band_table
from .schema import Prompt, Sample, SchemaSpec, extract_fields, extract_json, load_schema, validate

__version__ = "0.1.0"
