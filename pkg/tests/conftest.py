"""Shared fixtures: backend parametrization and quick sample construction."""

import zlib

import numpy as np
import pytest

from hardreid import kernels
from hardreid.data import Sample

BACKENDS = ["python"]
try:
    kernels._load("native")
    BACKENDS.append("native")
except ImportError:
    pass

# one line per acceptance criterion, echoed after the test summary so the
# pass/fail verdicts survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


def make_sample(sample_id, identity, clothing, viewpoint, split="train",
                origin="real", features=None, dim=4):
    # crc32 keeps the per-id feature vector stable across processes
    if features is None:
        rng = np.random.default_rng(zlib.crc32(sample_id.encode()))
        features = rng.normal(size=dim)
    return Sample(
        sample_id=sample_id,
        identity=identity,
        clothing=clothing,
        viewpoint=viewpoint,
        split=split,
        origin=origin,
        features=np.asarray(features, dtype=np.float64),
    )


def make_batch(labels, prefix="s", **kwargs):
    """labels: list of (identity, clothing, viewpoint) triples."""
    return [
        make_sample(f"{prefix}{i}", y, c, v, **kwargs)
        for i, (y, c, v) in enumerate(labels, start=1)
    ]
