from pathlib import Path

import numpy as np
import pytest

from timerag.abstraction import (
    LabelVocabulary,
    abstract_patch_llm,
    abstract_patch_rule,
    label_dataset,
    load_labels,
    render_abstraction_prompt,
    save_labels,
)
from timerag.llmclient import MockChatClient
from timerag.metrics import Patch, normalize_minmax

from conftest import make_sample

GOLDEN = Path(__file__).parent / "golden"


def patch_of(series) -> Patch:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    return Patch("s", 0, series)


class TestRuleAbstractor:
    def setup_method(self):
        self.vocab = LabelVocabulary()

    def test_constant_is_stable(self):
        assert abstract_patch_rule(patch_of([0.4] * 30), self.vocab).token == "stable"

    def test_linear_ramp_is_rising(self):
        assert abstract_patch_rule(patch_of(np.linspace(0, 1, 30)), self.vocab).token == "rising"

    def test_descending_ramp_is_falling(self):
        assert abstract_patch_rule(patch_of(np.linspace(1, 0, 30)), self.vocab).token == "falling"

    def test_single_outlier_is_spike(self):
        series = np.full(30, 0.2)
        series[11] = 1.0  # ~5 sigma above the patch mean
        assert abstract_patch_rule(patch_of(series), self.vocab).token == "spike"

    def test_single_low_outlier_is_drop(self):
        series = np.full(30, 0.6)
        series[4] = 0.0
        assert abstract_patch_rule(patch_of(series), self.vocab).token == "drop"

    def test_high_plateau_is_saturated(self):
        assert abstract_patch_rule(patch_of([0.97] * 30), self.vocab).token == "saturated"

    def test_sine_is_oscillating(self):
        t = np.arange(30)
        series = 0.4 + 0.25 * np.sin(2 * np.pi * 3 * t / 30)
        assert abstract_patch_rule(patch_of(series), self.vocab).token == "oscillating"

    def test_wide_hump_is_noisy(self):
        # large spread, single direction change, no trend: falls through to noisy
        t = np.linspace(0, 1, 30)
        series = 0.2 + 0.5 * np.sin(np.pi * t)
        assert abstract_patch_rule(patch_of(series), self.vocab).token == "noisy"

    def test_deterministic_and_total(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = patch_of(rng.uniform(0, 1, (30, 3)))
            first = abstract_patch_rule(p, self.vocab)
            second = abstract_patch_rule(p, self.vocab)
            assert first.token == second.token
            assert first.token in self.vocab.tokens

    def test_token_id_round_trip(self):
        label = abstract_patch_rule(patch_of([0.4] * 30), self.vocab)
        assert self.vocab.tokens[self.vocab.token_ids.index(label.token_id)] == label.token

    def test_empty_patch_rejected(self):
        with pytest.raises(ValueError):
            Patch("s", 0, np.empty((0, 1)))


class TestLlmAbstractor:
    def test_scripted_answer(self):
        vocab = LabelVocabulary()
        client = MockChatClient(["spike"])
        label = abstract_patch_llm(patch_of([0.4] * 30), vocab, client)
        assert label.token == "spike"
        assert label.provenance == "llm"

    def test_out_of_vocabulary_falls_back(self):
        vocab = LabelVocabulary()
        client = MockChatClient(["banana", "banana", "banana"])
        label = abstract_patch_llm(patch_of([0.4] * 30), vocab, client)
        assert label.token == "stable"  # rule-based fallback for a constant patch
        assert label.provenance == "fallback"
        assert len(client.requests) == 3

    def test_prompt_matches_golden(self):
        rng = np.random.default_rng(42)
        patch = Patch("golden", 0, rng.uniform(0, 1, (30, 3)))
        rendered = render_abstraction_prompt(patch, LabelVocabulary())
        assert rendered == (GOLDEN / "abstraction_prompt.golden").read_text()


class TestLabelDataset:
    def test_count_and_order(self):
        rng = np.random.default_rng(1)
        samples = [
            normalize_minmax(make_sample(rng.uniform(size=(900, 2)), f"s{i}")) for i in range(2)
        ]
        vocab = LabelVocabulary()
        labeled = label_dataset(samples, lambda p: abstract_patch_rule(p, vocab), 30)
        assert len(labeled) == 60
        keys = [(lab.sample_id, lab.patch_index) for _, lab in labeled]
        assert keys == sorted(keys, key=lambda k: (int(k[0][1:]), k[1]))

    def test_empty_input(self):
        assert label_dataset([], lambda p: None, 30) == []

    def test_persistence_round_trip(self, tmp_path):
        vocab = LabelVocabulary()
        labels = [abstract_patch_rule(patch_of([0.4] * 30), vocab)]
        save_labels(labels, tmp_path / "labels.jsonl")
        [back] = load_labels(tmp_path / "labels.jsonl")
        assert (back.sample_id, back.patch_index, back.token, back.token_id) == (
            labels[0].sample_id,
            labels[0].patch_index,
            labels[0].token,
            labels[0].token_id,
        )


class TestVocabulary:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            LabelVocabulary(tokens=["a", "a"])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            LabelVocabulary(tokens=[])

    def test_from_table_resolves_ids(self):
        from timerag.vocab import build_synthetic_table

        table = build_synthetic_table(32, 8, seed=0)
        vocab = LabelVocabulary.from_table(table)
        for token, token_id in zip(vocab.tokens, vocab.token_ids):
            assert table.tokens[token_id] == token
