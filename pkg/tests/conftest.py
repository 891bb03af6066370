from datetime import datetime, timezone

import numpy as np
import pytest

from timerag.metrics import MetricSample


def make_sample(values, sample_id="s1", names=None, freq=1.0, label=None):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    names = names or [f"m{i}" for i in range(values.shape[1])]
    start = datetime(2026, 1, 1, tzinfo=timezone.utc)
    return MetricSample(
        id=sample_id,
        values=values,
        metric_names=names,
        frequency_seconds=freq,
        period_start=start,
        period_end=start,
        failure_label=label,
    )


@pytest.fixture
def sample_factory():
    return make_sample


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines past pytest's output capture."""
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    for line in VERDICTS:
        terminalreporter.write_line(line)
