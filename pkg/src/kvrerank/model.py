"""Minimal deterministic decoder-only transformer with grouped-query attention.

Two forward implementations share one contract:

* ``reference_forward`` processes tokens one at a time with a fixed loop
  order. It defines the bit-exact semantics of the model: because every
  token is handled by an identical sequence of fixed-shape operations, the
  hidden states it produces for a token do not depend on how the sequence
  was split into calls. Running ``[doc; query]`` in one call and running
  ``query`` on top of the KV produced for ``doc`` give byte-identical
  results.
* ``forward`` is the vectorized path. It stays within 1e-5 relative of the
  reference and is deterministic call-for-call, but splitting a sequence at
  an arbitrary point is only guaranteed bit-stable when the split shapes
  match (the scoring layer arranges exactly that).

Weights are pure functions of (config, seed): each tensor draws from its own
splitmix64 stream keyed by the tensor name, so any single tensor can be
regenerated independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, PositionError, ShapeError
from .hashing import fnv1a64, uniform_signed

_EPS = 1e-6
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 8
    kv_heads: int = 2
    head_dim: int = 16
    vocab_size: int = 32768
    rope_base: float = 10000.0
    max_position: int = 1024
    seed: int = 0

    def validate(self) -> None:
        for name in ("layers", "model_dim", "heads", "kv_heads", "head_dim",
                     "vocab_size", "max_position"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.heads % self.kv_heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must be divisible by kv_heads ({self.kv_heads})")
        if self.model_dim != self.heads * self.head_dim:
            raise ConfigError(
                f"model_dim ({self.model_dim}) != heads*head_dim "
                f"({self.heads * self.head_dim})")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")

    @property
    def group_size(self) -> int:
        return self.heads // self.kv_heads


@dataclass(frozen=True)
class KVTensorSet:
    """Per-layer keys/values for a span of tokens.

    Shapes are ``[layers, kv_heads, token_count, head_dim]`` float32. Keys
    carry rotary encoding applied at their absolute positions, so entries
    can be concatenated with later spans without reprocessing.
    """

    keys: np.ndarray
    values: np.ndarray
    position_offset: int

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ShapeError("keys and values must share a shape")
        if self.keys.ndim != 4:
            raise ShapeError("KV tensors must be [layers, kv_heads, tokens, head_dim]")

    @property
    def token_count(self) -> int:
        return self.keys.shape[2]

    @property
    def payload_nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


@dataclass(frozen=True)
class LayerWeights:
    attn_gain: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_gain: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    # fused [model_dim, (heads + 2*kv_heads)*head_dim] projection, derived
    wqkv: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class Weights:
    config: ModelConfig
    token_embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_gain: np.ndarray
    rope_cos: np.ndarray = field(repr=False, default=None)
    rope_sin: np.ndarray = field(repr=False, default=None)
    rope_rot: np.ndarray = field(repr=False, default=None)


def _tensor(config: ModelConfig, name: str, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    seed = config.seed ^ fnv1a64(name)
    t = uniform_signed(seed, int(np.prod(shape)), bound).reshape(shape)
    t.flags.writeable = False
    return t


def _ones(dim: int) -> np.ndarray:
    g = np.ones(dim, dtype=np.float32)
    g.flags.writeable = False
    return g


@lru_cache(maxsize=8)
def _rope_tables(base: float, head_dim: int, max_position: int):
    inv_freq = base ** (-(np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    ang = np.arange(max_position, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(np.float32)
    sin = np.sin(ang).astype(np.float32)
    rot = (cos + 1j * sin).astype(np.complex64)
    for t in (cos, sin, rot):
        t.flags.writeable = False
    return cos, sin, rot


def init_weights(config: ModelConfig) -> Weights:
    """Deterministically fill all parameter tensors for `config`.

    Norm gains are exactly 1.0; every other tensor is uniform in
    [-sqrt(6/(fan_in+fan_out)), +...] from its own named stream.
    """
    config.validate()
    d = config.model_dim
    h, kvh, hd = config.heads, config.kv_heads, config.head_dim
    layers = []
    for i in range(config.layers):
        p = f"layers.{i}"
        wq = _tensor(config, f"{p}.attn.wq", (d, h * hd))
        wk = _tensor(config, f"{p}.attn.wk", (d, kvh * hd))
        wv = _tensor(config, f"{p}.attn.wv", (d, kvh * hd))
        wqkv = np.hstack([wq, wk, wv])
        wqkv.flags.writeable = False
        layers.append(LayerWeights(
            attn_gain=_ones(d),
            wq=wq, wk=wk, wv=wv,
            wo=_tensor(config, f"{p}.attn.wo", (h * hd, d)),
            mlp_gain=_ones(d),
            w_up=_tensor(config, f"{p}.mlp.w_up", (d, 4 * d)),
            w_down=_tensor(config, f"{p}.mlp.w_down", (4 * d, d)),
            wqkv=wqkv,
        ))
    cos, sin, rot = _rope_tables(config.rope_base, hd, config.max_position)
    return Weights(
        config=config,
        token_embedding=_tensor(config, "token_embedding", (config.vocab_size, d)),
        layers=tuple(layers),
        final_gain=_ones(d),
        rope_cos=cos, rope_sin=sin, rope_rot=rot,
    )


def _empty_past(config: ModelConfig) -> KVTensorSet:
    shape = (config.layers, config.kv_heads, 0, config.head_dim)
    return KVTensorSet(np.empty(shape, np.float32), np.empty(shape, np.float32), 0)


def _check_call(weights: Weights, tokens, positions, past, valid):
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ShapeError("tokens must be a non-empty 1-D sequence")
    if positions.shape != tokens.shape:
        raise ShapeError("positions must match tokens in length")
    if np.any(np.diff(positions) <= 0):
        raise ShapeError("positions must be strictly increasing")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ShapeError("token id out of vocabulary range")
    if positions[0] < 0 or positions[-1] >= cfg.max_position:
        raise PositionError(
            f"positions [{positions[0]}, {positions[-1]}] exceed "
            f"max_position {cfg.max_position}")
    if past is None:
        past = _empty_past(cfg)
    expected = (cfg.layers, cfg.kv_heads, past.token_count, cfg.head_dim)
    if past.keys.shape != expected:
        raise ShapeError(f"past KV shape {past.keys.shape} != expected {expected}")
    if past.token_count and positions[0] != past.position_offset + past.token_count:
        raise ShapeError(
            f"positions must continue the past span: expected start "
            f"{past.position_offset + past.token_count}, got {positions[0]}")
    total = past.token_count + tokens.size
    if valid is None:
        valid = np.ones(total, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (total,):
            raise ShapeError(
                f"valid mask must cover past+current tokens ({total}), got {valid.shape}")
    return tokens, positions, past, valid


def _zero_result(cfg: ModelConfig, T: int, position_offset: int):
    hidden = np.zeros((T, cfg.model_dim), dtype=np.float32)
    shape = (cfg.layers, cfg.kv_heads, T, cfg.head_dim)
    produced = KVTensorSet(np.zeros(shape, np.float32), np.zeros(shape, np.float32),
                           position_offset)
    return hidden, produced


def reference_forward(weights: Weights, tokens, positions, past: KVTensorSet | None = None,
                      valid=None) -> tuple[np.ndarray, KVTensorSet]:
    """Scalar-order forward pass; the semantic ground truth for this module.

    Tokens are processed strictly one at a time (layer loop inside the token
    loop), every accumulation in ascending index order, float32 throughout,
    softmax with max subtraction. Pad positions (``valid`` false) are
    excluded from every softmax; a token with no valid key gets a zero
    attention output. An entirely invalid input yields zero hidden states
    and a zero KV set.
    """
    tokens, positions, past, valid = _check_call(weights, tokens, positions, past, valid)
    cfg = weights.config
    P, T = past.token_count, tokens.size
    if not valid.any():
        return _zero_result(cfg, T, int(positions[0]))

    L, H, KVH, HD, D = cfg.layers, cfg.heads, cfg.kv_heads, cfg.head_dim, cfg.model_dim
    G = cfg.group_size
    rot = weights.rope_rot

    kbuf = np.empty((L, KVH, P + T, HD), dtype=np.float32)
    vbuf = np.empty_like(kbuf)
    if P:
        kbuf[:, :, :P] = past.keys
        vbuf[:, :, :P] = past.values

    n_valid_prefix = np.cumsum(valid.astype(np.int64))
    hidden = np.empty((T, D), dtype=np.float32)
    qkv = np.empty(D + 2 * KVH * HD, dtype=np.float32)
    qk_rows = (qkv[:D + KVH * HD].reshape(H + KVH, HD)
               .view(np.complex64).reshape(H + KVH, HD // 2))
    xn = np.empty(D, dtype=np.float32)
    tmp = np.empty(D, dtype=np.float32)
    up = np.empty(4 * D, dtype=np.float32)
    scratch = np.empty(4 * D, dtype=np.float32)
    neg_inf = np.float32(-np.inf)

    for i in range(T):
        h = weights.token_embedding[tokens[i]].copy()
        j = P + i
        n = j + 1
        invalid_keys = ~valid[:n]
        any_invalid = bool(invalid_keys.any())
        attend = n_valid_prefix[j] > 0
        for li in range(L):
            lw = weights.layers[li]
            _norm_vec(h, lw.attn_gain, xn)
            np.dot(xn, lw.wqkv, out=qkv)
            np.multiply(qk_rows, rot[positions[i]], out=qk_rows)
            kbuf[li, :, j] = qkv[D:D + KVH * HD].reshape(KVH, HD)
            vbuf[li, :, j] = qkv[D + KVH * HD:].reshape(KVH, HD)
            if attend:
                q = qkv[:D].reshape(KVH, G, HD)
                scores = np.matmul(kbuf[li, :, :n], q.transpose(0, 2, 1))
                if any_invalid:
                    scores[:, invalid_keys, :] = neg_inf
                m = scores.max(axis=1, keepdims=True)
                np.subtract(scores, m, out=scores)
                np.exp(scores, out=scores)
                s = scores.sum(axis=1, keepdims=True)
                np.divide(scores, s, out=scores)
                attn = np.matmul(scores.transpose(0, 2, 1), vbuf[li, :, :n])
                np.dot(attn.reshape(H * HD), lw.wo, out=tmp)
                np.add(h, tmp, out=h)
            _norm_vec(h, lw.mlp_gain, xn)
            np.dot(xn, lw.w_up, out=up)
            _gelu_inplace(up, scratch)
            np.dot(up, lw.w_down, out=tmp)
            np.add(h, tmp, out=h)
        _norm_vec(h, weights.final_gain, hidden[i])

    produced = KVTensorSet(kbuf[:, :, P:].copy(), vbuf[:, :, P:].copy(),
                           int(positions[0]))
    return hidden, produced


def _norm_vec(x: np.ndarray, gain: np.ndarray, out: np.ndarray) -> None:
    ss = float(np.dot(x, x))
    inv = np.float32(1.0 / math.sqrt(ss / x.size + _EPS))
    np.multiply(x, inv, out=out)
    np.multiply(out, gain, out=out)


def _gelu_inplace(x: np.ndarray, scratch: np.ndarray) -> None:
    # tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    np.multiply(x, x, out=scratch)
    np.multiply(scratch, np.float32(_GELU_C), out=scratch)
    scratch += np.float32(1.0)
    np.multiply(scratch, x, out=scratch)
    np.multiply(scratch, np.float32(_SQRT_2_OVER_PI), out=scratch)
    np.tanh(scratch, out=scratch)
    scratch += np.float32(1.0)
    np.multiply(x, scratch, out=x)
    np.multiply(x, np.float32(0.5), out=x)


def forward(weights: Weights, tokens, positions, past: KVTensorSet | None = None,
            valid=None) -> tuple[np.ndarray, KVTensorSet]:
    """Vectorized forward pass; within 1e-5 relative of `reference_forward`."""
    tokens, positions, past, valid = _check_call(weights, tokens, positions, past, valid)
    cfg = weights.config
    P, T = past.token_count, tokens.size
    if not valid.any():
        return _zero_result(cfg, T, int(positions[0]))

    L, H, KVH, HD, D = cfg.layers, cfg.heads, cfg.kv_heads, cfg.head_dim, cfg.model_dim
    G = cfg.group_size
    rot = weights.rope_rot[positions][:, None, :]
    neg_inf = np.float32(-np.inf)

    # pads get -inf assigned per key column; the current block additionally
    # carries a causal triangle (past positions are always behind current)
    invalid_cols = None if valid.all() else ~valid
    causal = np.where(np.arange(T)[None, :] <= np.arange(T)[:, None],
                      np.float32(0.0), neg_inf)

    x = weights.token_embedding[tokens]
    new_k = np.empty((L, KVH, T, HD), dtype=np.float32)
    new_v = np.empty_like(new_k)
    # attention runs in two pieces, past then current, sharing one softmax;
    # the cached past is read in place by the GEMMs, never copied
    scores_p = np.empty((KVH, G * T, P), dtype=np.float32) if P else None
    scores_c = np.empty((KVH, G * T, T), dtype=np.float32)
    z = np.empty((KVH, G * T, 1), dtype=np.float32)
    q = np.empty((KVH, G, T, HD), dtype=np.float32)
    masked = invalid_cols is not None
    invalid_p = invalid_cols[:P] if masked and P else None
    invalid_c = invalid_cols[P:] if masked else None

    for li in range(L):
        lw = weights.layers[li]
        xn = _norm_rows(x, lw.attn_gain)
        qkv = xn @ lw.wqkv
        qk = qkv[:, :D + KVH * HD].reshape(T, H + KVH, HD)
        qk_c = qk.view(np.complex64).reshape(T, H + KVH, HD // 2)
        np.multiply(qk_c, rot, out=qk_c)
        k = np.ascontiguousarray(qk[:, H:].transpose(1, 0, 2))
        v = np.ascontiguousarray(
            qkv[:, D + KVH * HD:].reshape(T, KVH, HD).transpose(1, 0, 2))
        new_k[li], new_v[li] = k, v

        np.copyto(q, qk[:, :H].reshape(T, KVH, G, HD).transpose(1, 2, 0, 3))
        q2 = q.reshape(KVH, G * T, HD)
        if P:
            np.matmul(q2, past.keys[li].transpose(0, 2, 1), out=scores_p)
            if invalid_p is not None and invalid_p.any():
                scores_p.reshape(KVH, G, T, P)[:, :, :, invalid_p] = neg_inf
        np.matmul(q2, k.transpose(0, 2, 1), out=scores_c)
        cview = scores_c.reshape(KVH, G, T, T)
        if invalid_c is not None and invalid_c.any():
            cview[:, :, :, invalid_c] = neg_inf
        cview += causal

        _exp_rows(scores_p, scores_c, z, masked=masked)
        # normalize the (small) weighted values instead of the probabilities
        attn = np.matmul(scores_c, v)
        if P:
            attn += np.matmul(scores_p, past.values[li])
        np.divide(attn, z, out=attn)
        attn = np.ascontiguousarray(
            attn.reshape(KVH, G, T, HD).transpose(2, 0, 1, 3)).reshape(T, H * HD)
        x = x + attn @ lw.wo

        xn = _norm_rows(x, lw.mlp_gain)
        x = x + _gelu(xn @ lw.w_up) @ lw.w_down

    hidden = _norm_rows(x, weights.final_gain)
    return hidden, KVTensorSet(new_k, new_v, int(positions[0]))


def _exp_rows(scores_p: np.ndarray | None, scores_c: np.ndarray, z: np.ndarray,
              masked: bool) -> None:
    """In place, row-wise over both score pieces: s <- exp(s - rowmax);
    z <- row sums, with the max and sum shared across the pieces.

    Rows are processed in a fixed number of chunks so the subtract, exp, and
    sum passes stay cache-resident; every operation is row-local, so the
    result matches an unchunked pass. A fully masked row (all -inf, possible
    only with `masked`) becomes all zeros with z forced to 1 so the caller's
    division keeps the zero attention output.
    """
    rows = scores_c.shape[1]
    step = max(1, (rows + 3) // 4)
    for c0 in range(0, rows, step):
        vc = scores_c[:, c0:c0 + step, :]
        m = vc.max(axis=-1, keepdims=True)
        if scores_p is not None:
            vp = scores_p[:, c0:c0 + step, :]
            m = np.maximum(m, vp.max(axis=-1, keepdims=True))
        if masked:
            m = np.where(np.isfinite(m), m, np.float32(0.0))
        np.subtract(vc, m, out=vc)
        np.exp(vc, out=vc)
        s = vc.sum(axis=-1, keepdims=True)
        if scores_p is not None:
            np.subtract(vp, m, out=vp)
            np.exp(vp, out=vp)
            s = s + vp.sum(axis=-1, keepdims=True)
        if masked:
            s = np.where(s == 0.0, np.float32(1.0), s)
        z[:, c0:c0 + step] = s


def _norm_rows(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x * (np.float32(1.0) / np.sqrt(ms + np.float32(_EPS))) * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    inner = np.float32(_SQRT_2_OVER_PI) * (x + np.float32(_GELU_C) * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))
