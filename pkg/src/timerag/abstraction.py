"""Single-token semantic labeling of patches.

A closed vocabulary of shape words (stable, rising, ...) labels each patch.
The reference abstractor is a deterministic rule over the feature-averaged
series; an optional chat-backed abstractor delegates to an external model
and falls back to the rules when the model leaves the vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import DataError
from .metrics import MetricSample, Patch, segment_into_patches
from .templates import load_template

DEFAULT_LABEL_TOKENS = [
    "stable",
    "rising",
    "falling",
    "spike",
    "drop",
    "oscillating",
    "noisy",
    "saturated",
]


@dataclass
class LabelVocabulary:
    """Closed token set for patch labels, with ids in the active vocabulary."""

    tokens: list[str] = field(default_factory=lambda: list(DEFAULT_LABEL_TOKENS))
    token_ids: list[int] | None = None  # ids in the embedding-table vocabulary

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("label vocabulary must be non-empty")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("label vocabulary has duplicate tokens")
        if self.token_ids is None:
            self.token_ids = list(range(len(self.tokens)))
        if len(self.token_ids) != len(self.tokens):
            raise ValueError("token_ids length mismatch")

    def id_of(self, token: str) -> int:
        return self.token_ids[self.tokens.index(token)]

    @classmethod
    def from_table(cls, table, tokens: Iterable[str] | None = None) -> "LabelVocabulary":
        """Resolve label tokens against an embedding table's vocabulary."""
        tokens = list(tokens) if tokens is not None else list(DEFAULT_LABEL_TOKENS)
        return cls(tokens=tokens, token_ids=[table.id_of(t) for t in tokens])


@dataclass
class PatchLabel:
    sample_id: str
    patch_index: int
    token: str
    token_id: int
    provenance: str = "rule"  # rule | llm | fallback


@dataclass
class AbstractionThresholds:
    """Decision thresholds of the rule-based abstractor (on normalized values)."""

    spike_sigma: float = 4.0
    saturation_min: float = 0.95
    trend: float = 0.2  # threshold on slope * patch_len
    osc_sign_changes: int = 3
    osc_range: float = 0.2
    noisy_sigma: float = 0.1


def _sign_changes(series: np.ndarray) -> int:
    d = np.diff(series)
    signs = np.sign(d)
    signs = signs[signs != 0]
    if signs.size < 2:
        return 0
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


def abstract_patch_rule(
    patch: Patch,
    vocab: LabelVocabulary,
    thresholds: AbstractionThresholds = AbstractionThresholds(),
) -> PatchLabel:
    """Deterministic label from statistics of the feature-averaged series.

    Rules fire in priority order: spike, drop, saturated, rising, falling,
    oscillating, noisy, stable.
    """
    m = patch.values.mean(axis=1)
    n = m.shape[0]
    mu = float(m.mean())
    sigma = float(m.std())
    rng = float(m.max() - m.min())
    if n > 1:
        x = np.arange(n, dtype=np.float64)
        slope = float(np.polyfit(x, m, 1)[0])
    else:
        slope = 0.0
    th = thresholds

    if sigma > 0 and (m > mu + th.spike_sigma * sigma).any():
        token = "spike"
    elif sigma > 0 and (m < mu - th.spike_sigma * sigma).any():
        token = "drop"
    elif m.min() >= th.saturation_min:
        token = "saturated"
    elif slope * n > th.trend:
        token = "rising"
    elif slope * n < -th.trend:
        token = "falling"
    elif _sign_changes(m) >= th.osc_sign_changes and rng > th.osc_range:
        token = "oscillating"
    elif sigma > th.noisy_sigma:
        token = "noisy"
    else:
        token = "stable"
    return PatchLabel(patch.sample_id, patch.index, token, vocab.id_of(token))


def render_abstraction_prompt(patch: Patch, vocab: LabelVocabulary) -> str:
    """Render the chat prompt for one patch: statistics, a downsampled view
    of the feature-averaged series, and the closed token list."""
    m = patch.values.mean(axis=1)
    step = max(1, len(m) // 10)
    preview = ", ".join(f"{v:.4f}" for v in m[::step])
    template = load_template("abstraction_prompt.txt")
    return template.format(
        n_steps=patch.values.shape[0],
        n_features=patch.values.shape[1],
        mean=f"{m.mean():.4f}",
        std=f"{m.std():.4f}",
        minimum=f"{m.min():.4f}",
        maximum=f"{m.max():.4f}",
        preview=preview,
        tokens=", ".join(vocab.tokens),
    )


def abstract_patch_llm(
    patch: Patch,
    vocab: LabelVocabulary,
    client,
    thresholds: AbstractionThresholds = AbstractionThresholds(),
    max_retries: int = 2,
) -> PatchLabel:
    """Ask a chat model for the label; constrain to the vocabulary.

    Out-of-vocabulary answers are retried max_retries times, then the rule
    abstractor takes over with provenance "fallback".
    """
    from .llmclient import ChatRequest

    prompt = render_abstraction_prompt(patch, vocab)
    messages = [{"role": "user", "content": prompt}]
    for _ in range(1 + max_retries):
        response = client.chat(ChatRequest(messages=list(messages)))
        answer = response.content.strip().strip(".'\"").lower()
        if answer in vocab.tokens:
            return PatchLabel(patch.sample_id, patch.index, answer, vocab.id_of(answer), "llm")
        messages.append({"role": "assistant", "content": response.content})
        messages.append(
            {
                "role": "user",
                "content": "Answer with exactly one token from the list, nothing else.",
            }
        )
    label = abstract_patch_rule(patch, vocab, thresholds)
    label.provenance = "fallback"
    return label


Abstractor = Callable[[Patch], PatchLabel]


def label_dataset(
    samples: Iterable[MetricSample],
    abstractor: Abstractor,
    patch_len: int,
) -> list[tuple[Patch, PatchLabel]]:
    """Label every patch of every sample, in (sample order, patch index) order."""
    out = []
    for sample in samples:
        for patch in segment_into_patches(sample, patch_len):
            out.append((patch, abstractor(patch)))
    return out


def save_labels(labels: Iterable[PatchLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(
                json.dumps(
                    {
                        "sample_id": lab.sample_id,
                        "patch_index": lab.patch_index,
                        "token": lab.token,
                        "token_id": lab.token_id,
                        "provenance": lab.provenance,
                    }
                )
                + "\n"
            )


def load_labels(path: str | Path) -> list[PatchLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                PatchLabel(
                    rec["sample_id"],
                    rec["patch_index"],
                    rec["token"],
                    rec["token_id"],
                    rec.get("provenance", "rule"),
                )
            )
    return out
