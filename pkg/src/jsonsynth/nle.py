"""Natural-language evaluator: turns a MetricVector into banded sentences for the judge."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Union

from .errors import MissingMetric, NonMonotonicBounds
from .metrics import MetricVector

# sentence order is part of the judge-facing contract
METRIC_ORDER = ("sim", "distinct_n", "novelty", "perplexity", "entropy")


@dataclass(frozen=True)
class Band:
    upper: float
    label: str
    template: str


@dataclass(frozen=True)
class BandTable:
    bands: dict[str, tuple[Band, ...]]

    def lookup(self, metric: str, value: float) -> tuple[int, Band]:
        """First band whose (exclusive) upper bound exceeds ``value``."""
        for i, band in enumerate(self.bands[metric]):
            if value < band.upper:
                return i, band
        last = self.bands[metric][-1]
        return len(self.bands[metric]) - 1, last


def load_band_table(document: Union[dict, str, Path, None] = None) -> BandTable:
    """Build a BandTable from a parsed document, a file path, or the bundled default."""
    if document is None:
        document = json.loads(resources.files("jsonsynth").joinpath("data/band_table.json").read_text("utf-8"))
    elif not isinstance(document, dict):
        with open(document, encoding="utf-8") as fh:
            document = json.load(fh)

    bands = {}
    for metric in METRIC_ORDER:
        if metric not in document or not document[metric]:
            raise MissingMetric(f"band table has no bands for {metric!r}")
        rows = []
        for row in document[metric]:
            upper = row["upper"]
            upper = math.inf if upper in ("inf", "+inf", "Infinity") else float(upper)
            rows.append(Band(upper, row["label"], row["template"]))
        uppers = [b.upper for b in rows]
        if any(b <= a for a, b in zip(uppers, uppers[1:])):
            raise NonMonotonicBounds(f"bounds for {metric!r} must strictly increase: {uppers}")
        if uppers[-1] != math.inf:
            raise NonMonotonicBounds(f"last bound for {metric!r} must be inf")
        bands[metric] = tuple(rows)
    return BandTable(bands)


def describe(metric_vector: MetricVector, band_table: BandTable) -> list[str]:
    sentences = []
    for metric in METRIC_ORDER:
        value = getattr(metric_vector, metric)
        _, band = band_table.lookup(metric, value)
        sentences.append(band.template.format(value=f"{value:.2f}"))
    return sentences


def labels(metric_vector: MetricVector, band_table: BandTable) -> list[str]:
    return [band_table.lookup(m, getattr(metric_vector, m))[1].label for m in METRIC_ORDER]
