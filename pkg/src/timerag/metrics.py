"""Loading, standardization, normalization and patching of performance-metric samples.

A sample is a T x F matrix of metric readings plus metadata. Samples are
standardized to a fixed length (long samples split into non-overlapping
windows, short ones extrapolated with a pluggable forecaster), min-max
normalized per feature, and finally segmented into fixed-length patches.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ConflictError, DataError, ParseError

DEFAULT_TARGET_LEN = 900
DEFAULT_PATCH_LEN = 30

# Forecaster contract: history (T, F) -> next-step vector (F,)
Forecaster = Callable[[np.ndarray], np.ndarray]


@dataclass
class MetricSample:
    id: str
    values: np.ndarray  # (T, F) float64
    metric_names: list[str]
    frequency_seconds: float
    period_start: datetime
    period_end: datetime
    failure_label: int | None = None
    raw_min: np.ndarray | None = None  # per-feature, set by normalize_minmax
    raw_max: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"sample {self.id!r}: values must be a non-empty T x F matrix")
        if len(self.metric_names) != self.values.shape[1]:
            raise DataError(
                f"sample {self.id!r}: {len(self.metric_names)} metric names "
                f"for {self.values.shape[1]} value columns"
            )
        if not np.isfinite(self.values).all():
            raise DataError(f"sample {self.id!r}: non-finite values")
        if self.frequency_seconds <= 0:
            raise DataError(f"sample {self.id!r}: frequency_seconds must be positive")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def F(self) -> int:
        return self.values.shape[1]


@dataclass
class Patch:
    sample_id: str
    index: int
    values: np.ndarray  # (patch_len, F)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0:
            raise ValueError("empty patch")


def _parse_ts(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00"))


def _sample_from_record(rec: dict, line_no: int) -> MetricSample:
    try:
        return MetricSample(
            id=rec["id"],
            values=np.asarray(rec["values"], dtype=np.float64),
            metric_names=list(rec["metric_names"]),
            frequency_seconds=float(rec["frequency_seconds"]),
            period_start=_parse_ts(rec["period_start"]),
            period_end=_parse_ts(rec["period_end"]),
            failure_label=rec.get("failure_label"),
            raw_min=None if rec.get("raw_min") is None else np.asarray(rec["raw_min"], dtype=np.float64),
            raw_max=None if rec.get("raw_max") is None else np.asarray(rec["raw_max"], dtype=np.float64),
        )
    except DataError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"line {line_no}: malformed sample record: {exc}") from exc


def load_samples(path: str | Path, format: str = "jsonl") -> list[MetricSample]:
    """Load samples from a JSONL file or a directory of CSVs with JSON sidecars."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "jsonl":
        samples = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"line {i}: invalid JSON: {exc}") from exc
                samples.append(_sample_from_record(rec, i))
    elif format == "csv-dir":
        samples = [_load_csv_sample(p) for p in sorted(path.glob("*.csv"))]
    else:
        raise ValueError(f"unknown format {format!r}")
    seen = set()
    for s in samples:
        if s.id in seen:
            raise ConflictError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
    return samples


def _load_csv_sample(csv_path: Path) -> MetricSample:
    sidecar = csv_path.with_suffix(".json")
    if not sidecar.exists():
        raise ParseError(f"{csv_path.name}: missing sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp":
            raise ParseError(f"{csv_path.name}: header must start with 'timestamp'")
        names = header[1:]
        stamps, rows = [], []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{csv_path.name} line {i}: expected {len(header)} fields")
            try:
                stamps.append(_parse_ts(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{csv_path.name} line {i}: {exc}") from exc
    if len(rows) < 1:
        raise ParseError(f"{csv_path.name}: no data rows")
    freq = meta.get("frequency_seconds")
    if freq is None:
        freq = (stamps[1] - stamps[0]).total_seconds() if len(stamps) > 1 else 1.0
    return MetricSample(
        id=meta["id"],
        values=np.asarray(rows, dtype=np.float64),
        metric_names=names,
        frequency_seconds=float(freq),
        period_start=stamps[0],
        period_end=stamps[-1],
        failure_label=meta.get("failure_label"),
    )


def save_samples(samples: Iterable[MetricSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "id": s.id,
                "metric_names": s.metric_names,
                "frequency_seconds": s.frequency_seconds,
                "period_start": s.period_start.isoformat(),
                "period_end": s.period_end.isoformat(),
                "values": s.values.tolist(),
                "failure_label": s.failure_label,
            }
            if s.raw_min is not None and s.raw_max is not None:
                rec["raw_min"] = s.raw_min.tolist()
                rec["raw_max"] = s.raw_max.tolist()
            fh.write(json.dumps(rec) + "\n")


def linear_forecaster(history: np.ndarray) -> np.ndarray:
    """Reference forecaster: per-feature least-squares line over the last
    min(T, 64) steps, evaluated one step past the end."""
    history = np.asarray(history, dtype=np.float64)
    tail = history[-64:]
    n = tail.shape[0]
    if n == 1:
        return tail[0].copy()
    x = np.arange(n, dtype=np.float64)
    out = np.empty(tail.shape[1])
    for f in range(tail.shape[1]):
        slope, intercept = np.polyfit(x, tail[:, f], 1)
        out[f] = slope * n + intercept
    return out


def extrapolate(
    sample: MetricSample,
    target_len: int,
    forecaster: Forecaster = linear_forecaster,
) -> MetricSample:
    """Extend a short sample to target_len by iterative one-step forecasting.

    The observed prefix is preserved bit-exact; each forecast step sees the
    history including previously forecast rows.
    """
    if sample.T >= target_len:
        raise ValueError(f"sample {sample.id!r} already has {sample.T} >= {target_len} rows")
    values = sample.values
    while values.shape[0] < target_len:
        step = np.asarray(forecaster(values), dtype=np.float64)
        if step.shape != (sample.F,) or not np.isfinite(step).all():
            raise DataError(f"forecaster returned invalid step for sample {sample.id!r}")
        values = np.vstack([values, step])
    new_end = sample.period_start + timedelta(
        seconds=(target_len - 1) * sample.frequency_seconds
    )
    return replace(sample, values=values, period_end=new_end)


def standardize_length(
    sample: MetricSample,
    target_len: int = DEFAULT_TARGET_LEN,
    forecaster: Forecaster = linear_forecaster,
) -> list[MetricSample]:
    """Standardize a sample to exactly target_len rows.

    Longer samples are split into consecutive non-overlapping windows; a
    trailing remainder of at least target_len/2 rows is extrapolated up to
    target_len, shorter remainders are dropped. Shorter samples are
    extrapolated. Exact-length samples pass through unchanged.
    """
    if target_len < 2:
        raise ValueError("target_len must be >= 2")
    if sample.T == target_len:
        return [sample]
    if sample.T < target_len:
        return [extrapolate(sample, target_len, forecaster)]

    out = []
    n_windows = sample.T // target_len
    freq = sample.frequency_seconds
    for w in range(n_windows):
        lo = w * target_len
        start = sample.period_start + timedelta(seconds=lo * freq)
        out.append(
            replace(
                sample,
                id=f"{sample.id}#w{w}",
                values=sample.values[lo : lo + target_len].copy(),
                period_start=start,
                period_end=start + timedelta(seconds=(target_len - 1) * freq),
            )
        )
    rem = sample.T - n_windows * target_len
    if rem * 2 >= target_len:
        lo = n_windows * target_len
        start = sample.period_start + timedelta(seconds=lo * freq)
        tail = replace(
            sample,
            id=f"{sample.id}#w{n_windows}",
            values=sample.values[lo:].copy(),
            period_start=start,
            period_end=start + timedelta(seconds=(rem - 1) * freq),
        )
        out.append(extrapolate(tail, target_len, forecaster))
    return out


def normalize_minmax(sample: MetricSample) -> MetricSample:
    """Per-feature min-max scaling to [0, 1], recording raw extrema.

    Constant features map to all-zeros (raw_min == raw_max retained so the
    round-trip stays exact).
    """
    lo = sample.values.min(axis=0)
    hi = sample.values.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (sample.values - lo) / np.where(span > 0, span, 1.0), 0.0)
    return replace(sample, values=scaled, raw_min=lo, raw_max=hi)


def denormalize(sample: MetricSample) -> MetricSample:
    """Inverse of normalize_minmax using the stored extrema."""
    if sample.raw_min is None or sample.raw_max is None:
        raise ValueError(f"sample {sample.id!r} has no stored extrema")
    span = sample.raw_max - sample.raw_min
    values = np.where(span > 0, sample.values * span + sample.raw_min, sample.raw_min)
    return replace(sample, values=values, raw_min=None, raw_max=None)


def segment_into_patches(
    sample: MetricSample, patch_len: int = DEFAULT_PATCH_LEN
) -> list[Patch]:
    """Cut a sample into contiguous non-overlapping patches of patch_len rows.

    The trailing remainder shorter than patch_len is dropped.
    """
    if patch_len < 1:
        raise ValueError("patch_len must be >= 1")
    if patch_len > sample.T:
        raise ValueError(f"patch_len {patch_len} exceeds sample length {sample.T}")
    n = sample.T // patch_len
    return [
        Patch(sample.id, i, sample.values[i * patch_len : (i + 1) * patch_len].copy())
        for i in range(n)
    ]
