import json
from importlib import resources
from pathlib import Path

import pytest

from jsonsynth.schema import Sample, load_schema

FIXTURES = Path(__file__).parent / "fixtures"
DATA = Path(str(resources.files("jsonsynth").joinpath("data")))


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def schema():
    return load_schema(DATA / "attraction_schema.json")


@pytest.fixture(scope="session")
def seed_entries():
    return json.loads((DATA / "seed_examples.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def generated_entries():
    return json.loads((DATA / "generated_sample.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def reference_samples():
    out = []
    for line in (DATA / "reference_corpus.jsonl").read_text(encoding="utf-8").splitlines():
        doc = json.loads(line)
        out.append(Sample.from_text(doc["id"], doc["raw_text"]))
    return out
