"""Training loop for the alignment encoder: combined alignment and
classification cross-entropy, Adam with cosine annealing, and dynamic
masking of over-predicted tokens. The embedding table stays frozen."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .abstraction import PatchLabel
from .encoder import AlignmentModel, forward_graph
from .errors import NumericError
from .metrics import MetricSample, segment_into_patches
from .vocab import EmbeddingTable


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr_max: float = 3e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_top_fraction: float = 0.01
    mask_probability: float = 0.3

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if not (0.0 <= self.mask_probability <= 1.0 and 0.0 <= self.mask_top_fraction <= 1.0):
            raise ValueError("mask probabilities must lie in [0, 1]")


@dataclass
class TokenMask:
    masked_ids: set[int] = field(default_factory=set)
    epoch_built: int = 0
    counts: np.ndarray | None = None


@dataclass
class TrainingExample:
    patches: np.ndarray  # (L, patch_len, F)
    token_ids: np.ndarray  # (L,)
    class_id: int


def assemble_examples(
    samples: Sequence[MetricSample],
    labels: Iterable[PatchLabel],
    patch_len: int,
) -> list[TrainingExample]:
    """Join samples with their patch labels into training examples."""
    by_sample: dict[str, dict[int, int]] = {}
    for lab in labels:
        by_sample.setdefault(lab.sample_id, {})[lab.patch_index] = lab.token_id
    out = []
    for sample in samples:
        if sample.failure_label is None:
            raise ValueError(f"sample {sample.id!r} has no failure label")
        patches = segment_into_patches(sample, patch_len)
        ids = by_sample.get(sample.id, {})
        if len(ids) != len(patches):
            raise ValueError(f"sample {sample.id!r}: {len(ids)} labels for {len(patches)} patches")
        arr = np.stack([p.values for p in patches])
        tok = np.array([ids[i] for i in range(len(patches))], dtype=np.intp)
        out.append(TrainingExample(arr, tok, int(sample.failure_label)))
    return out


def _mask_offsets(y_tokens: np.ndarray, mask: TokenMask | None, v: int) -> np.ndarray | None:
    """Additive logit offsets: -inf on masked ids, except each position's
    own gold target which stays live."""
    if mask is None or not mask.masked_ids:
        return None
    row = np.zeros(v)
    row[sorted(mask.masked_ids)] = -np.inf
    offsets = np.broadcast_to(row, y_tokens.shape + (v,)).copy()
    np.put_along_axis(offsets, y_tokens[..., None], 0.0, axis=-1)
    return offsets


def alignment_loss(
    h_align: Tensor,
    y_tokens: np.ndarray,
    table: EmbeddingTable,
    mask: TokenMask | None = None,
) -> Tensor:
    """Mean cross-entropy of E @ h_align against the gold token ids."""
    y_tokens = np.asarray(y_tokens, dtype=np.intp)
    if (y_tokens < 0).any() or (y_tokens >= table.size).any():
        raise ValueError("token target out of range")
    logits = ad.einsum("bld,vd->blv", h_align, Tensor(table.vectors))
    offsets = _mask_offsets(y_tokens, mask, table.size)
    if offsets is not None:
        logits = logits + Tensor(offsets)
    per_pos = ad.logsumexp(logits, axis=-1) - ad.take_along_last(logits, y_tokens)
    return ad.tmean(per_pos)


def classification_loss(h_clf: Tensor, y_class: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy over the batch."""
    y_class = np.asarray(y_class, dtype=np.intp)
    n_classes = h_clf.shape[-1]
    if (y_class < 0).any() or (y_class >= n_classes).any():
        raise ValueError("class label out of range")
    per_example = ad.logsumexp(h_clf, axis=-1) - ad.take_along_last(h_clf, y_class)
    return ad.tmean(per_example)


def total_loss(
    h_align: Tensor,
    h_clf: Tensor,
    y_tokens: np.ndarray,
    y_class: np.ndarray,
    table: EmbeddingTable,
    mask: TokenMask | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Unweighted sum of alignment and classification losses."""
    l_align = alignment_loss(h_align, y_tokens, table, mask)
    l_clf = classification_loss(h_clf, y_class)
    return l_align + l_clf, l_align, l_clf


def compute_gradients(
    model: AlignmentModel,
    patches: np.ndarray,
    y_tokens: np.ndarray,
    y_class: np.ndarray,
    mask: TokenMask | None = None,
):
    """Reverse-mode gradients of the total loss for every trainable tensor.

    Returns (grads, loss, loss_align, loss_clf, h_align value, h_clf value).
    """
    tensors = model.param_tensors(trainable=True)
    h_align, h_clf = forward_graph(patches, tensors, model.cfg, model.table)
    loss, l_align, l_clf = total_loss(h_align, h_clf, y_tokens, y_class, model.table, mask)
    ad.backward(loss)
    grads = {}
    for name, t in tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.value)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return grads, float(loss.value), float(l_align.value), float(l_clf.value), h_align.value, h_clf.value


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_max at step 0 down to lr_min at total_steps."""
    if total_steps <= 0:
        return cfg.lr_max
    frac = min(max(step / total_steps, 0.0), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def update_token_mask(
    predicted_token_counts: np.ndarray,
    epoch: int,
    cfg: TrainConfig,
    n_prototypes: int,
    rng: np.random.Generator,
) -> TokenMask:
    """Build the mask for the given (1-based) upcoming epoch.

    Tokens in the top mask_top_fraction of the vocabulary by predicted
    frequency whose share exceeds 2/S are each masked independently with
    mask_probability. No masking before epoch 2.
    """
    counts = np.asarray(predicted_token_counts, dtype=np.float64)
    if epoch < 2:
        return TokenMask(set(), epoch, counts)
    total = counts.sum()
    if total <= 0:
        return TokenMask(set(), epoch, counts)
    v = counts.shape[0]
    top_n = max(1, int(math.ceil(cfg.mask_top_fraction * v)))
    order = np.lexsort((np.arange(v), -counts))
    threshold = 2.0 / n_prototypes
    masked = set()
    for token_id in order[:top_n]:
        if counts[token_id] / total > threshold and rng.random() < cfg.mask_probability:
            masked.add(int(token_id))
    return TokenMask(masked, epoch, counts)


class Adam:
    """Plain Adam over a named parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)


def train(
    examples: Sequence[TrainingExample],
    model: AlignmentModel,
    cfg: TrainConfig,
) -> tuple[AlignmentModel, list[dict]]:
    """Optimize the model in place; returns it plus per-epoch metrics."""
    if not examples:
        raise ValueError("empty training set")
    metrics: list[dict] = []
    if cfg.epochs == 0:
        return model, metrics

    rng = np.random.default_rng(cfg.seed)
    mask_rng = np.random.default_rng(cfg.seed + 1)
    optimizer = Adam(model.params, cfg)
    n = len(examples)
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    mask = TokenMask()
    last_good = model.copy_params()
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        counts = np.zeros(model.table.size)
        sums = {"loss": 0.0, "loss_align": 0.0, "loss_clf": 0.0, "tok_hit": 0, "tok_n": 0, "cls_hit": 0}
        epoch_lr = cosine_lr(step, total_steps, cfg)
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [examples[i] for i in idx]
            patches = np.stack([e.patches for e in batch])
            y_tokens = np.stack([e.token_ids for e in batch])
            y_class = np.array([e.class_id for e in batch], dtype=np.intp)
            try:
                grads, loss, l_align, l_clf, ha, hc = compute_gradients(
                    model, patches, y_tokens, y_class, mask
                )
            except NumericError:
                model.params = last_good
                return model, metrics
            if not math.isfinite(loss):
                model.params = last_good
                return model, metrics
            lr = cosine_lr(step, total_steps, cfg)
            optimizer.step(model.params, grads, lr)
            step += 1

            decoded = np.argmax(ha @ model.table.vectors.T, axis=-1)
            np.add.at(counts, decoded.ravel(), 1)
            sums["loss"] += loss * len(batch)
            sums["loss_align"] += l_align * len(batch)
            sums["loss_clf"] += l_clf * len(batch)
            sums["tok_hit"] += int((decoded == y_tokens).sum())
            sums["tok_n"] += decoded.size
            sums["cls_hit"] += int((np.argmax(hc, axis=-1) == y_class).sum())

        metrics.append(
            {
                "epoch": epoch,
                "loss": sums["loss"] / n,
                "loss_align": sums["loss_align"] / n,
                "loss_clf": sums["loss_clf"] / n,
                "token_acc": sums["tok_hit"] / sums["tok_n"],
                "class_acc": sums["cls_hit"] / n,
                "lr": epoch_lr,
                "masked_tokens": sorted(mask.masked_ids),
            }
        )
        last_good = model.copy_params()
        mask = update_token_mask(counts, epoch + 1, cfg, model.cfg.n_prototypes, mask_rng)
    return model, metrics


def save_metrics(metrics: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec) + "\n")
