"""Time-series alignment encoder: patch embedding, gated cross-attention onto
the prototype pool, and the single-layer failure classifier.

The forward pass is written once over autodiff Tensors; inference wraps the
parameters as constants and reads values out, training marks them trainable
and runs the same graph backwards.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, NumericError
from .vocab import EmbeddingTable, decode_greedy_batch


@dataclass
class EncoderConfig:
    patch_len: int = 30
    n_features: int = 3
    d_model: int = 32
    d_llm: int = 32
    n_heads: int = 4
    n_classes: int = 5
    n_prototypes: int = 16
    lambda_init: float = 0.8
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    @property
    def d_keys(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AlignedRepresentation:
    h_align: np.ndarray  # (B, L, d_llm)
    h_clf: np.ndarray  # (B, n_classes)
    decoded_tokens: np.ndarray  # (B, L) int token ids


def _linear_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: EncoderConfig, vocab_size: int, seed: int = 0) -> dict[str, np.ndarray]:
    """All trainable parameters, in the canonical (checkpoint) order."""
    rng = np.random.default_rng(seed)
    pf = cfg.patch_len * cfg.n_features
    hk = cfg.n_heads * cfg.d_keys
    params = {
        "w_embed": _linear_init(rng, pf, cfg.d_model),
        "b_embed": np.zeros(cfg.d_model),
        "w_q": _linear_init(rng, cfg.d_model, hk),
        "b_q": np.zeros(hk),
        "w_k": _linear_init(rng, cfg.d_llm, hk),
        "b_k": np.zeros(hk),
        "w_v": _linear_init(rng, cfg.d_llm, hk),
        "b_v": np.zeros(hk),
        "w_out": _linear_init(rng, hk, cfg.d_llm),
        "b_out": np.zeros(cfg.d_llm),
        "temperature": np.array(1.0),
        "gate_raw": np.array(0.0),
        "lambda_q1": rng.normal(0.0, 0.1, cfg.d_keys),
        "lambda_k1": rng.normal(0.0, 0.1, cfg.d_keys),
        "lambda_q2": rng.normal(0.0, 0.1, cfg.d_keys),
        "lambda_k2": rng.normal(0.0, 0.1, cfg.d_keys),
        "rms_gain": np.ones(cfg.d_keys),
        "proto": rng.uniform(-1.0 / vocab_size, 1.0 / vocab_size, (cfg.n_prototypes, vocab_size)),
        "w_clf": _linear_init(rng, cfg.d_llm, cfg.n_classes),
        "b_clf": np.zeros(cfg.n_classes),
    }
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def _check_finite(t: Tensor, stage: str) -> None:
    if not np.isfinite(t.value).all():
        raise NumericError(f"non-finite values at stage {stage!r}")


def patches_to_array(patches) -> np.ndarray:
    """Coerce a (B, L) nest of patch matrices into a (B, L, patch_len, F) array."""
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected uniform B x L x patch_len x F patches, got ndim={arr.ndim}")
    return arr


def embed_patches(patches, p: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Affine map of each flattened patch into the model dimension."""
    arr = patches_to_array(patches)
    b, l, pl, f = arr.shape
    if pl != cfg.patch_len or f != cfg.n_features:
        raise ValueError(f"patch shape ({pl},{f}) does not match config")
    flat = Tensor(arr.reshape(b * l, pl * f))
    target = ad.matmul(flat, p["w_embed"]) + p["b_embed"]
    return ad.reshape(target, (b, l, cfg.d_model))


def gated_cross_attention(
    target: Tensor,
    source: Tensor,
    value: Tensor,
    p: dict[str, Tensor],
    cfg: EncoderConfig,
    return_internals: bool = False,
):
    """Cross-attention from patch embeddings onto the prototype rows.

    Attention weights are rescaled by a learned scalar (1 - lambda_full), the
    per-head context is RMS-normalized and shrunk by (1 - lambda_init), and a
    sigmoid gate blends the result with the reshaped input before the output
    projection.
    """
    b, l, _ = target.shape
    s = source.shape[0]
    h, dk = cfg.n_heads, cfg.d_keys

    q = ad.reshape(ad.matmul(ad.reshape(target, (b * l, cfg.d_model)), p["w_q"]) + p["b_q"], (b, l, h, dk))
    k = ad.reshape(ad.matmul(source, p["w_k"]) + p["b_k"], (s, h, dk))
    v = ad.reshape(ad.matmul(value, p["w_v"]) + p["b_v"], (s, h, dk))

    scale = ad.mul(p["temperature"], 1.0 / np.sqrt(dk))
    scores = ad.mul(ad.einsum("blhd,shd->blhs", q, k), scale)
    _check_finite(scores, "attention-scores")
    attn = ad.softmax(scores, axis=-1)

    lam_full = (
        ad.exp(ad.tsum(ad.mul(p["lambda_q1"], p["lambda_k1"])))
        - ad.exp(ad.tsum(ad.mul(p["lambda_q2"], p["lambda_k2"])))
        + cfg.lambda_init
    )
    attn_rescaled = ad.mul(1.0 - lam_full, attn)
    context = ad.einsum("blhs,shd->blhd", attn_rescaled, v)
    _check_finite(context, "attention-context")

    ms = ad.tmean(ad.power(context, 2.0), axis=-1, keepdims=True)
    inv_rms = ad.power(ms + cfg.rms_eps, -0.5)
    normed = ad.mul(ad.mul(context, inv_rms), p["rms_gain"])
    r = ad.mul(normed, 1.0 - cfg.lambda_init)

    gate = ad.sigmoid(p["gate_raw"])
    target_heads = ad.reshape(target, (b, l, h, dk))
    o = ad.mul(gate, r) + ad.mul(1.0 - gate, target_heads)
    out = ad.matmul(ad.reshape(o, (b * l, h * dk)), p["w_out"]) + p["b_out"]
    out = ad.reshape(out, (b, l, cfg.d_llm))
    _check_finite(out, "attention-output")
    if return_internals:
        internals = {
            "attn_pre_rescale": attn,
            "lambda_full": lam_full,
            "context": context,
            "normed_context": r,
            "blend": o,
        }
        return out, internals
    return out


def forward_graph(
    patches: np.ndarray,
    p: dict[str, Tensor],
    cfg: EncoderConfig,
    table: EmbeddingTable,
) -> tuple[Tensor, Tensor]:
    """Full differentiable forward: aligned embeddings and class logits."""
    prototypes = ad.matmul(p["proto"], Tensor(table.vectors))
    target = embed_patches(patches, p, cfg)
    h_align = gated_cross_attention(target, prototypes, prototypes, p, cfg)
    pooled = ad.tmean(h_align, axis=1)
    h_clf = ad.matmul(pooled, p["w_clf"]) + p["b_clf"]
    return h_align, h_clf


class AlignmentModel:
    """Bundle of config, frozen table, and the trainable parameter arrays."""

    CKPT_FORMAT = "timerag-ckpt"
    CKPT_VERSION = 1

    def __init__(
        self,
        cfg: EncoderConfig,
        table: EmbeddingTable,
        params: dict[str, np.ndarray] | None = None,
        seed: int = 0,
    ):
        self.cfg = cfg
        self.table = table
        self.params = params if params is not None else init_params(cfg, table.size, seed)

    def param_tensors(self, trainable: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=trainable) for k, v in self.params.items()}

    def forward(self, patches) -> AlignedRepresentation:
        arr = patches_to_array(patches)
        h_align, h_clf = forward_graph(arr, self.param_tensors(), self.cfg, self.table)
        decoded = decode_greedy_batch(h_align.value, self.table)
        return AlignedRepresentation(h_align.value, h_clf.value, decoded)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def save(self, path: str | Path) -> None:
        """Manifest line (JSON) + raw little-endian float64 blobs, in
        parameter declaration order; round-trips bit-exact."""
        manifest = {
            "format": self.CKPT_FORMAT,
            "version": self.CKPT_VERSION,
            "config": asdict(self.cfg),
            "table_hash": self.table.content_hash(),
            "tensors": [[k, list(v.shape)] for k, v in self.params.items()],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
            for v in self.params.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, table: EmbeddingTable) -> "AlignmentModel":
        with open(path, "rb") as fh:
            try:
                manifest = json.loads(fh.readline().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"bad checkpoint manifest: {exc}") from exc
            if manifest.get("format") != cls.CKPT_FORMAT or manifest.get("version") != cls.CKPT_VERSION:
                raise FormatError("unrecognized checkpoint format/version")
            if manifest["table_hash"] != table.content_hash():
                raise FormatError("checkpoint was trained against a different embedding table")
            cfg = EncoderConfig(**manifest["config"])
            params = {}
            for name, shape in manifest["tensors"]:
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(n * 8)
                if len(buf) != n * 8:
                    raise FormatError(f"checkpoint truncated at tensor {name!r}")
                params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        return cls(cfg, table, params)
