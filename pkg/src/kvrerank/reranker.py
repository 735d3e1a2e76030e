"""Two-phase relevance scoring over [document]+[query] pairs.

The scoring layout is static: document tokens always occupy absolute
positions ``[0, document_len)`` and query tokens ``[document_len,
document_len + query_len)``, independent of how much of either segment is
padding. That makes a document's KV cache a fixed-size, position-stable
buffer that any later query can sit on top of.

``score_full`` computes the whole pair from tokens; ``score_reuse`` consumes
a precomputed ``DocKV`` and runs only the query segment. Both schedule their
work as a document block followed by a query block with identical shapes, so
on either forward path the two give byte-identical scores.

Counters describe the work implied by the layout (pads excluded): tokens
pushed through the per-token layers, unmasked causal attention pairs, peak
tokens resident in one forward, and cache bytes consumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError
from .hashing import fnv1a64
from .model import KVTensorSet, ModelConfig, Weights, forward, init_weights, reference_forward

PAD_ID = 0


@dataclass(frozen=True)
class LayoutConfig:
    document_len: int = 256
    query_len: int = 48
    pad_id: int = PAD_ID

    def validate(self) -> None:
        if self.document_len < 1 or self.query_len < 1:
            raise ConfigError("document_len and query_len must be >= 1")
        if self.pad_id != 0:
            raise ConfigError("pad id 0 is reserved and fixed")

    @property
    def total_len(self) -> int:
        return self.document_len + self.query_len


@dataclass(frozen=True)
class DocKV:
    """A document's fixed-length KV cache plus its non-pad prefix length."""

    chunk_id: str
    kv: KVTensorSet
    valid_len: int

    @property
    def document_len(self) -> int:
        return self.kv.token_count

    @property
    def payload_nbytes(self) -> int:
        return self.kv.payload_nbytes


@dataclass
class CounterReport:
    linear_token_count: int = 0
    attn_mac_pairs: int = 0
    peak_activation_tokens: int = 0
    kv_bytes_loaded: int = 0

    def merge(self, other: "CounterReport") -> None:
        self.linear_token_count += other.linear_token_count
        self.attn_mac_pairs += other.attn_mac_pairs
        self.peak_activation_tokens = max(self.peak_activation_tokens,
                                          other.peak_activation_tokens)
        self.kv_bytes_loaded += other.kv_bytes_loaded

    def as_dict(self) -> dict:
        return {
            "linear_token_count": self.linear_token_count,
            "attn_mac_pairs": self.attn_mac_pairs,
            "peak_activation_tokens": self.peak_activation_tokens,
            "kv_bytes_loaded": self.kv_bytes_loaded,
        }


@dataclass(frozen=True)
class ScoredPair:
    chunk_id: str
    query_id: str
    score: float


@dataclass(frozen=True)
class RerankModel:
    """Weights plus layout plus the linear scoring head."""

    config: ModelConfig
    weights: Weights
    score_head: np.ndarray
    layout: LayoutConfig

    @classmethod
    def build(cls, config: ModelConfig | None = None,
              layout: LayoutConfig | None = None) -> "RerankModel":
        config = config or ModelConfig()
        layout = layout or LayoutConfig()
        config.validate()
        layout.validate()
        if layout.total_len > config.max_position:
            raise ConfigError(
                f"layout needs {layout.total_len} positions, model allows "
                f"{config.max_position}")
        weights = init_weights(config)
        head = _score_head(config)
        return cls(config=config, weights=weights, score_head=head, layout=layout)


def _score_head(config: ModelConfig) -> np.ndarray:
    import math

    from .hashing import uniform_signed

    bound = math.sqrt(6.0 / (config.model_dim + 1))
    head = uniform_signed(config.seed ^ fnv1a64("score_head"), config.model_dim, bound)
    head.flags.writeable = False
    return head


def tokenize(text: str, max_len: int, pad_id: int = PAD_ID,
             vocab_size: int = ModelConfig.vocab_size) -> np.ndarray:
    """Hash words to stable token ids, truncate to max_len, right-pad.

    id 0 is reserved for padding; real words map to [1, vocab_size).
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    out = np.full(max_len, pad_id, dtype=np.int64)
    for i, word in enumerate(text.split()[:max_len]):
        out[i] = 1 + fnv1a64(word) % (vocab_size - 1)
    return out


def _forward_fn(path: str):
    if path == "fast":
        return forward
    if path == "reference":
        return reference_forward
    raise ConfigError(f"unknown scoring path {path!r} (use 'fast' or 'reference')")


def _doc_valid(model: RerankModel, doc_tokens: np.ndarray) -> tuple[np.ndarray, int]:
    layout = model.layout
    doc_tokens = np.asarray(doc_tokens)
    if doc_tokens.shape != (layout.document_len,):
        raise ShapeError(
            f"document tokens must have length {layout.document_len}, "
            f"got {doc_tokens.shape}")
    valid = doc_tokens != layout.pad_id
    valid_len = int(valid.sum())
    if valid_len == 0:
        raise DegenerateInputError("document is entirely padding")
    if not valid[:valid_len].all():
        raise ShapeError("document pads must be trailing (non-pad prefix only)")
    return valid, valid_len


def _query_valid(model: RerankModel, query_tokens: np.ndarray) -> np.ndarray:
    layout = model.layout
    query_tokens = np.asarray(query_tokens)
    if query_tokens.shape != (layout.query_len,):
        raise ShapeError(
            f"query tokens must have length {layout.query_len}, got {query_tokens.shape}")
    valid = query_tokens != layout.pad_id
    if not valid.any():
        raise DegenerateInputError("query is entirely padding")
    return valid


def doc_prefill(model: RerankModel, doc_tokens, chunk_id: str = "",
                path: str = "fast",
                counters: CounterReport | None = None) -> DocKV:
    """Run the document segment alone and capture its fixed-length KV.

    The returned cache covers all ``document_len`` positions (pad rows
    included, flagged via ``valid_len``) so the buffer shape never depends
    on the document's real length.
    """
    valid, valid_len = _doc_valid(model, doc_tokens)
    fwd = _forward_fn(path)
    _, produced = fwd(model.weights, np.asarray(doc_tokens),
                      np.arange(model.layout.document_len), past=None, valid=valid)
    if counters is not None:
        counters.merge(CounterReport(
            linear_token_count=valid_len,
            attn_mac_pairs=_pair_count(valid, 0),
            peak_activation_tokens=valid_len,
        ))
    return DocKV(chunk_id=chunk_id, kv=produced, valid_len=valid_len)


def _query_block(model: RerankModel, doc_kv: KVTensorSet, doc_valid: np.ndarray,
                 query_tokens: np.ndarray, query_valid: np.ndarray, path: str) -> float:
    layout = model.layout
    positions = np.arange(layout.document_len, layout.total_len)
    valid = np.concatenate([doc_valid, query_valid])
    fwd = _forward_fn(path)
    hidden, _ = fwd(model.weights, query_tokens, positions, past=doc_kv, valid=valid)
    last = int(np.nonzero(query_valid)[0][-1])
    return float(np.dot(hidden[last], model.score_head))


def score_full(model: RerankModel, doc_tokens, query_tokens,
               path: str = "fast") -> tuple[float, CounterReport]:
    """Score a pair from raw tokens, computing the document side in place."""
    doc_tokens = np.asarray(doc_tokens)
    query_tokens = np.asarray(query_tokens)
    dvalid, d_len = _doc_valid(model, doc_tokens)
    qvalid = _query_valid(model, query_tokens)
    fwd = _forward_fn(path)
    _, doc_cache = fwd(model.weights, doc_tokens,
                       np.arange(model.layout.document_len), past=None, valid=dvalid)
    score = _query_block(model, doc_cache, dvalid, query_tokens, qvalid, path)
    q_len = int(qvalid.sum())
    full_valid = np.concatenate([dvalid, qvalid])
    counters = CounterReport(
        linear_token_count=d_len + q_len,
        attn_mac_pairs=_pair_count(full_valid, 0),
        peak_activation_tokens=d_len + q_len,
    )
    return score, counters


def score_reuse(model: RerankModel, doc_kv: DocKV, query_tokens,
                path: str = "fast") -> tuple[float, CounterReport]:
    """Score a pair on top of a precomputed document KV cache."""
    layout = model.layout
    cfg = model.config
    expected = (cfg.layers, cfg.kv_heads, layout.document_len, cfg.head_dim)
    if doc_kv.kv.keys.shape != expected:
        raise ShapeError(
            f"cached KV shape {doc_kv.kv.keys.shape} does not match layout/model "
            f"{expected}")
    if doc_kv.kv.position_offset != 0:
        raise ShapeError("document KV must start at position 0")
    if not (0 < doc_kv.valid_len <= layout.document_len):
        raise ShapeError(f"valid_len {doc_kv.valid_len} out of range")
    query_tokens = np.asarray(query_tokens)
    qvalid = _query_valid(model, query_tokens)
    dvalid = np.arange(layout.document_len) < doc_kv.valid_len
    score = _query_block(model, doc_kv.kv, dvalid, query_tokens, qvalid, path)
    q_len = int(qvalid.sum())
    full_valid = np.concatenate([dvalid, qvalid])
    counters = CounterReport(
        linear_token_count=q_len,
        attn_mac_pairs=_pair_count(full_valid, layout.document_len),
        peak_activation_tokens=q_len,
        kv_bytes_loaded=doc_kv.payload_nbytes,
    )
    return score, counters


def score_batch(model: RerankModel, pairs, mode: str, max_batch: int = 8,
                path: str = "fast") -> tuple[list[ScoredPair], CounterReport]:
    """Score (document, query) pairs in groups of at most ``max_batch``.

    ``pairs`` is a sequence of ``(query_id, chunk_id, doc, query_tokens)``
    where ``doc`` is a DocKV in reuse mode and a token array in full mode.
    Every pair is scored by the corresponding single-pair operation, so
    results are independent of grouping and order.
    """
    if mode not in ("full", "reuse"):
        raise ConfigError(f"unknown rerank mode {mode!r}")
    if max_batch < 1:
        raise ConfigError("max_batch must be >= 1")
    results: list[ScoredPair] = []
    totals = CounterReport()
    for start in range(0, len(pairs), max_batch):
        for query_id, chunk_id, doc, query_tokens in pairs[start:start + max_batch]:
            if mode == "reuse":
                if not isinstance(doc, DocKV):
                    raise ShapeError("reuse mode requires DocKV entries")
                score, c = score_reuse(model, doc, query_tokens, path=path)
            else:
                score, c = score_full(model, doc, query_tokens, path=path)
            totals.merge(c)
            results.append(ScoredPair(chunk_id=chunk_id, query_id=query_id, score=score))
    return results, totals


def _pair_count(valid: np.ndarray, row_start: int) -> int:
    """Unmasked causal (query row, key) pairs among valid positions.

    Counts pairs (i, j) with j <= i, both valid, for rows i >= row_start.
    """
    prefix = np.cumsum(valid.astype(np.int64))
    rows = np.nonzero(valid[row_start:])[0] + row_start
    return int(prefix[rows].sum())
