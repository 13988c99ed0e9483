"""Progressive quantization: MSB-only attention first, LSB refetch on flat rows.

A row whose largest MSB-only probability is below the threshold fetches the
LSB planes and is recomputed once at full precision. Everything downstream
(importance accumulation, value pruning, prob x V) uses the final row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionResult, PROB_BITS, _index_mask, merge_heads,
                        quantize_probs, softmax_row, split_heads)
from .quant import QuantTensor, msb_only_value, plane_bytes


@dataclass(frozen=True)
class PQPolicy:
    threshold: float = 0.1
    msb_bits: int = 8
    lsb_bits: int = 4
    enabled: bool = True

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")

    @property
    def total_bits(self) -> int:
        return self.msb_bits + self.lsb_bits

    @classmethod
    def parse(cls, text: str, threshold: float = 0.1) -> "PQPolicy":
        """``"8+4"`` -> 8 MSB bits and 4 LSB bits."""
        msb, lsb = (int(x) for x in text.split("+"))
        return cls(threshold, msb, lsb, True)


@dataclass
class PQStats:
    rows_total: int = 0
    rows_refetched: int = 0
    lsb_bytes_fetched: int = 0

    def merge(self, other: "PQStats") -> "PQStats":
        self.rows_total += other.rows_total
        self.rows_refetched += other.rows_refetched
        self.lsb_bytes_fetched += other.lsb_bytes_fetched
        return self

    @property
    def refetch_rate(self) -> float:
        return self.rows_refetched / self.rows_total if self.rows_total else 0.0


def decide_lsb(prob_row, policy: PQPolicy) -> bool:
    prob_row = np.asarray(prob_row)
    if prob_row.size == 0:
        raise ValueError("empty probability row")
    return bool(prob_row.max() < policy.threshold)


def head_probs(q_msb, k_msb, q_full, k_full, score_scale: float, policy: PQPolicy):
    """Final probabilities for one head plus the per-row refetch flags.

    All code arrays are integer (rows x D); K holds only kept tokens.
    """
    s_msb = q_msb @ k_msb.T
    probs = np.stack([softmax_row(row, scale=score_scale) for row in s_msb])
    refetch = probs.max(axis=1) < policy.threshold
    for r in np.flatnonzero(refetch):
        probs[r] = softmax_row(q_full[r] @ k_full.T, scale=score_scale)
    return probs, refetch


def progressive_attention(q: QuantTensor, k: QuantTensor, v: QuantTensor, heads: int,
                          policy: PQPolicy, token_mask=None, head_mask=None,
                          prob_bits: int = PROB_BITS):
    """Fixed-point attention under progressive quantization.

    Returns ``(result, stats, refetch)`` where ``refetch`` is a boolean
    (h, L0) array. LSB traffic is charged once per head for the kept K and V
    rows plus the Q row of every refetched query.
    """
    l0, d_in = q.codes.shape
    l1 = k.codes.shape[0]
    d = d_in // heads
    tok = _index_mask(token_mask, l1)
    if not tok.any():
        raise ValueError("token mask removes every token")
    hd = _index_mask(head_mask, heads)
    idx = np.flatnonzero(tok)
    full = [split_heads(t.codes.astype(np.int64), heads) for t in (q, k, v)]
    if policy.enabled:
        msb = [split_heads(msb_only_value(t).codes, heads) for t in (q, k, v)]
    else:
        msb = full
    score_scale = q.params.scale * k.params.scale / math.sqrt(d)
    top = (1 << prob_bits) - 1
    stats = PQStats()
    refetch = np.zeros((heads, l0), dtype=bool)
    prob = np.zeros((heads, l0, l1))
    acc = np.zeros((heads, l0, d), dtype=np.int64)
    lsb = policy.lsb_bits
    for head in np.flatnonzero(hd):
        kq, kk = full[1][head][idx], msb[1][head][idx]
        if policy.enabled:
            p, rf = head_probs(msb[0][head], kk, full[0][head], kq, score_scale, policy)
        else:
            p = np.stack([softmax_row(r, scale=score_scale) for r in full[0][head] @ kq.T])
            rf = np.zeros(l0, dtype=bool)
        pc = quantize_probs(p, prob_bits)
        v_full, v_msb = full[2][head][idx], msb[2][head][idx]
        acc[head] = np.where(rf[:, None], pc @ v_full, pc @ v_msb)
        prob[head][:, idx] = p
        refetch[head] = rf
        stats.rows_total += l0
        if rf.any():
            stats.rows_refetched += int(rf.sum())
            stats.lsb_bytes_fetched += (2 * plane_bytes(idx.size * d, lsb)
                                        + int(rf.sum()) * plane_bytes(d, lsb))
    out = merge_heads(acc.astype(np.float64) * (v.params.scale / top))
    return AttentionResult(out, prob, np.zeros_like(prob), extra={"out_acc": merge_heads(acc)}), stats, refetch


def softmax_error_bound_check(s, i0: int, ds: float):
    """Total |change| in softmax(s) from nudging entry ``i0`` by ``ds``, and its first-order bound."""
    s = np.asarray(s, dtype=np.float64)
    p = softmax_row(s)
    others = np.arange(s.size) != i0
    rest = float(p[others].sum())
    # every other entry is rescaled by Z/Z' = 1 / (1 + p[i0] * (e^ds - 1)); the
    # i0 entry moves by the others' total change. Subtracting two softmax
    # vectors directly drowns changes below ~1e-17 in rounding noise.
    ratio_m1 = math.expm1(-math.log1p(p[i0] * math.expm1(ds)))
    measured = 2 * abs(ratio_m1) * rest
    bound = abs(ds) * 2 * p[i0] * rest
    return float(measured), float(bound)


def softmax_change_direct(s, i0: int, ds: float) -> float:
    """Total |change| by subtracting the two softmax vectors (well-conditioned inputs only)."""
    s = np.asarray(s, dtype=np.float64)
    s2 = s.copy()
    s2[i0] += ds
    return float(np.abs(softmax_row(s2) - softmax_row(s)).sum())
