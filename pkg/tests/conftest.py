import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kinn.data import bundled
from kinn.encoding import FixedVectorEncoder, HashEncoder
from kinn.lexicon import Concept, Lexicon, load_lexicon

settings.register_profile("kinn", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("kinn")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def therapy_post() -> str:
    return (FIXTURES / "therapy_post.txt").read_text(encoding="utf-8").rstrip("\n")


@pytest.fixture
def toy_lexicon() -> Lexicon:
    return load_lexicon(bundled("toy_lexicon.jsonl"))


@pytest.fixture
def wrist_lexicon() -> Lexicon:
    return Lexicon([Concept("c1", "wrist")])


@pytest.fixture
def hash_encoder() -> HashEncoder:
    return HashEncoder(32)


@pytest.fixture
def boundary_encoder():
    """Phrase vectors engineered around the 0.80 cosine boundary."""
    table = {
        "anchor": [1.0, 0.0, 0.0],
        "exact": [4.0, 3.0, 0.0],  # cosine 4/5 = 0.80 exactly
        "below": [0.79, float(np.sqrt(1 - 0.79 ** 2)), 0.0],
        "far": [0.0, 0.0, 1.0],
    }
    return FixedVectorEncoder(table, fallback=HashEncoder(3), name="boundary")


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
