import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpmaps.core import N_CELLS, Record  # noqa: E402


def make_record(rid, correct, human=None, attention=None, error=None, split="test", **kw):
    rng = np.random.default_rng(zlib.crc32(rid.encode()))
    if human is None:
        human = rng.random(N_CELLS) + 0.01
    return Record(id=rid, correct=correct, human_attention=human, attention_map=attention,
                  error_map=error, split=split, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
