"""Multi-head attention reference, float and 12-bit fixed-point paths.

Every pruned or quantized variant in the package is checked against the
functions here. Pruned heads keep their slot in the output and emit zeros,
so shapes never change with the masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_CONTEXT = 1024
PROB_BITS = 12


@dataclass
class AttentionInput:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    heads: int
    stage: str = "summarization"

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q))
        self.k = np.atleast_2d(np.asarray(self.k))
        self.v = np.atleast_2d(np.asarray(self.v))
        d_in = self.q.shape[1]
        if self.heads < 1 or d_in % self.heads:
            raise ValueError(f"D_in={d_in} not divisible by {self.heads} heads")
        if self.k.shape[1] != d_in or self.v.shape[1] != d_in:
            raise ValueError("Q, K and V must share D_in")
        if self.k.shape[0] != self.v.shape[0]:
            raise ValueError("K and V must have the same number of tokens")
        if self.q.shape[0] < 1 or self.k.shape[0] < 1:
            raise ValueError("need at least one query and one key")
        if self.stage == "generation" and self.q.shape[0] != 1:
            raise ValueError("generation stage takes a single query vector")

    @property
    def head_dim(self) -> int:
        return self.q.shape[1] // self.heads

    @property
    def l0(self) -> int:
        return self.q.shape[0]

    @property
    def l1(self) -> int:
        return self.k.shape[0]


@dataclass
class AttentionResult:
    out: np.ndarray  # (L0, D_in)
    prob: np.ndarray  # (h, L0, L1)
    score: np.ndarray  # (h, L0, L1)
    extra: dict = field(default_factory=dict)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    rows, d_in = x.shape
    return x.reshape(rows, heads, d_in // heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, rows, d = x.shape
    return x.transpose(1, 0, 2).reshape(rows, h * d)


def taylor_exp(x, order: int = 5) -> np.ndarray:
    """Truncated Taylor exponential, range-reduced by powers of two."""
    x = np.asarray(x, dtype=np.float64)
    n = np.round(x / math.log(2.0))
    r = x - n * math.log(2.0)
    acc = np.ones_like(r)
    term = np.ones_like(r)
    for i in range(1, order + 1):
        term = term * r / i
        acc = acc + term
    return np.ldexp(acc, n.astype(np.int64))


def softmax_row(s, mask=None, scale: float = 1.0, exp=np.exp) -> np.ndarray:
    """Softmax of ``scale * s`` over the kept entries; masked entries are 0.

    ``scale`` folds the dequantization step and the 1/sqrt(D) factor into
    one multiply, as the hardware softmax unit does.
    """
    s = np.asarray(s, dtype=np.float64)
    keep = _index_mask(mask, s.shape[0])
    if not keep.any():
        raise ValueError("softmax over an empty mask")
    x = np.where(keep, s * scale, -np.inf)
    x = x - x[keep].max()
    e = np.where(keep, exp(np.where(keep, x, 0.0)), 0.0)
    return e / e.sum()


def _softmax_rows(scores: np.ndarray, keep: np.ndarray, exp=np.exp) -> np.ndarray:
    """Row softmax over the last axis restricted to ``keep`` (broadcastable)."""
    x = np.where(keep, scores, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(keep, exp(np.where(keep, x, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def attention_dense(inp: AttentionInput, exp=np.exp) -> AttentionResult:
    q = split_heads(inp.q.astype(np.float64), inp.heads)
    k = split_heads(inp.k.astype(np.float64), inp.heads)
    v = split_heads(inp.v.astype(np.float64), inp.heads)
    score = q @ k.transpose(0, 2, 1) / math.sqrt(inp.head_dim)
    prob = _softmax_rows(score, np.ones(score.shape, dtype=bool), exp=exp)
    return AttentionResult(merge_heads(prob @ v), prob, score)


def _index_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ValueError(f"boolean mask must have length {n}")
        return mask.copy()
    out = np.zeros(n, dtype=bool)
    if mask.size and (mask.min() < 0 or mask.max() >= n):
        raise ValueError("mask index out of range")
    out[mask.astype(np.int64)] = True
    return out


def attention_masked(inp: AttentionInput, token_mask=None, head_mask=None,
                     value_mask=None, exp=np.exp) -> AttentionResult:
    """Attention restricted to kept K/V tokens, kept heads and kept V rows.

    ``token_mask`` selects K/V tokens, ``head_mask`` heads; both accept index
    lists or boolean vectors. ``value_mask`` is a boolean (h, L0, L1) array
    marking which V rows each (head, query) may read; probabilities are not
    renormalized after value pruning.
    """
    h, l0, l1, d = inp.heads, inp.l0, inp.l1, inp.head_dim
    tok = _index_mask(token_mask, l1)
    if not tok.any():
        raise ValueError("token mask removes every token")
    hd = _index_mask(head_mask, h)
    q = split_heads(inp.q.astype(np.float64), h)
    k = split_heads(inp.k.astype(np.float64), h)
    v = split_heads(inp.v.astype(np.float64), h)
    score = np.zeros((h, l0, l1))
    prob = np.zeros((h, l0, l1))
    out = np.zeros((h, l0, d))
    idx = np.flatnonzero(tok)
    for head in np.flatnonzero(hd):
        s = q[head] @ k[head][idx].T / math.sqrt(d)
        p = _softmax_rows(s, np.ones(s.shape, dtype=bool), exp=exp)
        score[head][:, idx] = s
        prob[head][:, idx] = p
        if value_mask is None:
            out[head] = p @ v[head][idx]
        else:
            pv = p * np.asarray(value_mask)[head][:, idx]
            out[head] = pv @ v[head][idx]
    return AttentionResult(merge_heads(out), prob, score)


def generation_step(cache_k: np.ndarray, cache_v: np.ndarray, q_vec, new_k, new_v,
                    heads: int, max_context: int = MAX_CONTEXT):
    """Append one token to the K/V caches and attend with a single query.

    Returns ``(result, cache_k, cache_v)`` with the grown caches.
    """
    q_vec = np.atleast_2d(np.asarray(q_vec, dtype=np.float64))
    new_k = np.atleast_2d(np.asarray(new_k, dtype=np.float64))
    new_v = np.atleast_2d(np.asarray(new_v, dtype=np.float64))
    d_in = q_vec.shape[1]
    if cache_k is None or len(cache_k) == 0:
        cache_k = np.zeros((0, d_in))
        cache_v = np.zeros((0, d_in))
    if cache_k.shape[1] != d_in or cache_v.shape[1] != d_in or new_k.shape[1] != d_in:
        raise ValueError("cache D_in does not match the query")
    if cache_k.shape[0] + 1 > max_context:
        raise ValueError(f"context would exceed {max_context} tokens")
    cache_k = np.vstack([cache_k, new_k])
    cache_v = np.vstack([cache_v, new_v])
    res = attention_dense(AttentionInput(q_vec, cache_k, cache_v, heads, stage="generation"))
    return res, cache_k, cache_v


def quantize_probs(prob: np.ndarray, bits: int = PROB_BITS) -> np.ndarray:
    top = (1 << bits) - 1
    return np.floor(prob * top + 0.5).astype(np.int64)


def attention_fixed(q_codes, k_codes, v_codes, q_scale: float, k_scale: float,
                    v_scale: float, heads: int, token_mask=None, head_mask=None,
                    value_mask=None, prob_bits: int = PROB_BITS) -> AttentionResult:
    """Fixed-point attention oracle.

    Integer Q.K^T, softmax on dequantized-and-normalized scores, requantized
    ``prob_bits`` probabilities, integer prob.V accumulation. ``out`` is the
    dequantized accumulator; ``extra['out_acc']`` holds the raw integers.
    """
    q_codes = np.atleast_2d(np.asarray(q_codes, dtype=np.int64))
    k_codes = np.atleast_2d(np.asarray(k_codes, dtype=np.int64))
    v_codes = np.atleast_2d(np.asarray(v_codes, dtype=np.int64))
    l0, d_in = q_codes.shape
    l1 = k_codes.shape[0]
    d = d_in // heads
    tok = _index_mask(token_mask, l1)
    if not tok.any():
        raise ValueError("token mask removes every token")
    hd = _index_mask(head_mask, heads)
    idx = np.flatnonzero(tok)
    qh, kh, vh = (split_heads(x, heads) for x in (q_codes, k_codes, v_codes))
    score_scale = q_scale * k_scale / math.sqrt(d)
    top = (1 << prob_bits) - 1
    score = np.zeros((heads, l0, l1))
    prob = np.zeros((heads, l0, l1))
    acc = np.zeros((heads, l0, d), dtype=np.int64)
    for head in np.flatnonzero(hd):
        s_int = qh[head] @ kh[head][idx].T
        p = np.stack([softmax_row(row, scale=score_scale) for row in s_int])
        pc = quantize_probs(p, prob_bits)
        if value_mask is not None:
            pc = pc * np.asarray(value_mask)[head][:, idx]
        score[head][:, idx] = s_int * score_scale
        prob[head][:, idx] = p
        acc[head] = pc @ vh[head][idx]
    out = merge_heads(acc.astype(np.float64) * (v_scale / top))
    return AttentionResult(out, prob, score, extra={"out_acc": merge_heads(acc)})
