"""Synthetic scenario generator and the multiple-choice accuracy harness.

Scenarios are 900-step, 3-feature samples composed from per-patch shape
primitives; each failure class is tied to one anomalous shape family so the
rule abstractor and a simple centroid classifier can both separate them.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import MetricSample

FAILURE_CLASSES = [
    "cpu_hog",
    "memory_leak",
    "network_delay",
    "packet_loss",
    "resource_exhaustion",
]

# dominant anomalous shape per failure class
CLASS_SHAPES = {
    "cpu_hog": "spike",
    "memory_leak": "rising",
    "network_delay": "oscillating",
    "packet_loss": "drop",
    "resource_exhaustion": "saturated",
}

METRIC_NAMES = ["cpu_usage", "memory_usage", "network_io"]


@dataclass
class GeneratorConfig:
    target_len: int = 900
    n_features: int = 3
    patch_len: int = 30
    min_anomalies: int = 6
    max_anomalies: int = 12
    noise: float = 0.004  # uniform +/- bound, keeps deviations under 4 sigma


@dataclass
class SyntheticScenario:
    sample: MetricSample
    shape_sequence: list[str]  # intended rule-abstractor label per patch slot
    failure_class: int
    seed: int


def _shape_series(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "stable":
        return np.full(n, 0.4)
    if shape == "rising":
        return np.linspace(0.1, 0.9, n)
    if shape == "falling":
        return np.linspace(0.9, 0.1, n)
    if shape == "spike":
        # depressed baseline with a single extreme point; one point keeps the
        # peak above the abstractor's mean + 4 sigma line
        base = np.full(n, 0.2)
        base[rng.integers(2, n - 2)] = 1.0
        return base
    if shape == "drop":
        base = np.full(n, 0.6)
        base[rng.integers(2, n - 2)] = 0.0
        return base
    if shape == "oscillating":
        t = np.arange(n)
        return 0.4 + 0.25 * np.sin(2 * np.pi * 3 * t / n)
    if shape == "saturated":
        return np.full(n, 0.98)
    raise ValueError(f"unknown shape {shape!r}")


def generate_synthetic(
    n: int, cfg: GeneratorConfig | None = None, seed: int = 0
) -> list[SyntheticScenario]:
    """Deterministic synthetic failure scenarios, classes cycling 0..4.

    Slot 0 of every sample is a full-range calibration ramp so per-feature
    min-max normalization is close to the identity; the remaining slots are
    stable except for the class's anomalous patches.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    cfg = cfg or GeneratorConfig()
    n_slots = cfg.target_len // cfg.patch_len
    scenarios = []
    epoch = datetime(2026, 1, 1, tzinfo=timezone.utc)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        class_id = i % len(FAILURE_CLASSES)
        shape = CLASS_SHAPES[FAILURE_CLASSES[class_id]]
        shapes = ["stable"] * n_slots
        shapes[0] = "rising"
        n_anom = int(rng.integers(cfg.min_anomalies, cfg.max_anomalies + 1))
        slots = rng.choice(np.arange(1, n_slots), size=n_anom, replace=False)
        for s in slots:
            shapes[s] = shape

        base = np.concatenate(
            [
                np.linspace(0.0, 1.0, cfg.patch_len)
                if j == 0
                else _shape_series(shapes[j], cfg.patch_len, rng)
                for j in range(n_slots)
            ]
        )
        values = base[:, None] + rng.uniform(
            -cfg.noise, cfg.noise, size=(cfg.target_len, cfg.n_features)
        )
        values = np.clip(values, 0.0, 1.0)

        sample = MetricSample(
            id=f"synth-{seed}-{i:04d}",
            values=values,
            metric_names=list(METRIC_NAMES[: cfg.n_features]),
            frequency_seconds=1.0,
            period_start=epoch + timedelta(hours=i),
            period_end=epoch + timedelta(hours=i, seconds=cfg.target_len - 1),
            failure_label=class_id,
        )
        scenarios.append(SyntheticScenario(sample, shapes, class_id, seed))
    return scenarios


@dataclass
class MCQItem:
    scenario: SyntheticScenario
    choices: list[str]
    gold_index: int


def build_mcq(scenario: SyntheticScenario, n_choices: int = 5, seed: int = 0) -> MCQItem:
    """Gold class plus distinct distractor classes, deterministically shuffled."""
    if n_choices not in (4, 5):
        raise ValueError("n_choices must be 4 or 5")
    gold = FAILURE_CLASSES[scenario.failure_class]
    others = [c for c in FAILURE_CLASSES if c != gold]
    rng = np.random.default_rng(
        [seed, scenario.failure_class, zlib.crc32(scenario.sample.id.encode("utf-8"))]
    )
    distractors = [str(c) for c in rng.choice(others, size=n_choices - 1, replace=False)]
    choices = [gold] + distractors
    rng.shuffle(choices)
    choices = [str(c) for c in choices]
    return MCQItem(scenario, choices, choices.index(gold))


_ANSWER = re.compile(r"answer\s*(?:is)?\s*[:\-]*\s*\(?([a-z])\)?(?![a-z])", re.IGNORECASE)


def parse_answer(llm_text: str, n_choices: int) -> int | None:
    """Last 'answer: <letter>' wins; a bare letter is accepted; else abstain."""
    matches = _ANSWER.findall(llm_text)
    if matches:
        idx = ord(matches[-1].lower()) - ord("a")
        return idx if 0 <= idx < n_choices else None
    bare = llm_text.strip().rstrip(".").lower()
    if len(bare) == 1 and 0 <= ord(bare) - ord("a") < n_choices:
        return ord(bare) - ord("a")
    return None


def format_mcq_prompt(item: MCQItem) -> str:
    lines = [
        f"Sample {item.scenario.sample.id}: which failure type best explains the telemetry?",
    ]
    for j, choice in enumerate(item.choices):
        lines.append(f"{chr(ord('A') + j)}. {choice}")
    lines.append('Reply with "Answer: <letter>".')
    return "\n".join(lines)


Pipeline = Callable[[MCQItem, str], str]  # (item, prompt) -> raw answer text


def evaluate_accuracy(
    items: Sequence[MCQItem], pipeline: Pipeline, seed: int = 0
) -> tuple[float, list[dict]]:
    """Fraction of items answered correctly; abstentions score zero."""
    if not items:
        raise ValueError("no items to evaluate")
    records = []
    correct = 0
    for item in items:
        prompt = format_mcq_prompt(item)
        raw = pipeline(item, prompt)
        parsed = parse_answer(raw, len(item.choices))
        hit = parsed == item.gold_index
        correct += int(hit)
        records.append(
            {
                "sample_id": item.scenario.sample.id,
                "prompt": prompt,
                "raw_answer": raw,
                "parsed_index": parsed,
                "gold_index": item.gold_index,
                "correct": hit,
            }
        )
    return correct / len(items), records


def save_results(accuracy: float, records: Sequence[dict], seed: int, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"accuracy": accuracy, "n": len(records), "seed": seed}) + "\n")
