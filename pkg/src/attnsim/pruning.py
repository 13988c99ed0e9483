"""Cascade token/head pruning and local value pruning.

Token importance is the running sum of attention probabilities a token
receives; head importance is the running sum of |attention_out| over the
head's chunk. Selection keeps the top-k by score through the top-k engine,
so ties go to the lower original index. Kept sets only shrink until
``reset_masks`` (used between generation steps).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .topk import TopKConfig, filter_top_k

TOKEN_PREFIX = 0.15
HEAD_PREFIX = 0.30


@dataclass
class ImportanceState:
    token_scores: np.ndarray
    head_scores: np.ndarray
    kept_tokens: np.ndarray
    kept_heads: np.ndarray
    selections: list = field(default_factory=list)

    @classmethod
    def new(cls, num_tokens: int, num_heads: int) -> "ImportanceState":
        return cls(np.zeros(num_tokens), np.zeros(num_heads),
                   np.arange(num_tokens), np.arange(num_heads))

    @property
    def num_tokens(self) -> int:
        return self.token_scores.shape[0]

    def extend_tokens(self, count: int = 1) -> None:
        """Append new (kept, zero-score) tokens, e.g. one per generation step."""
        n = self.num_tokens
        self.token_scores = np.concatenate([self.token_scores, np.zeros(count)])
        self.kept_tokens = np.concatenate([self.kept_tokens, np.arange(n, n + count)])

    def reset_masks(self) -> None:
        self.kept_tokens = np.arange(self.num_tokens)
        self.kept_heads = np.arange(self.head_scores.shape[0])


def accumulate_token_importance(state: ImportanceState, prob, head_ids=None) -> ImportanceState:
    """Add probabilities of shape (kept heads, L0, kept tokens) to the token scores.

    ``head_ids`` names a subset of kept heads when accumulating head by head.
    """
    prob = np.asarray(prob, dtype=np.float64)
    n_heads = state.kept_heads.size if head_ids is None else len(head_ids)
    if head_ids is not None and not np.isin(head_ids, state.kept_heads).all():
        raise ValueError("head_ids must be kept heads")
    if prob.ndim != 3 or prob.shape[0] != n_heads or prob.shape[2] != state.kept_tokens.size:
        raise ValueError(
            f"prob shape {prob.shape} does not match {n_heads} heads "
            f"x L0 x {state.kept_tokens.size} kept tokens")
    state.token_scores[state.kept_tokens] += prob.sum(axis=(0, 1))
    return state


def accumulate_head_importance(state: ImportanceState, attention_out) -> ImportanceState:
    out = np.atleast_2d(np.asarray(attention_out, dtype=np.float64))
    h = state.head_scores.shape[0]
    if out.shape[1] % h:
        raise ValueError(f"D_in={out.shape[1]} not divisible by {h} heads")
    per_head = np.abs(out.reshape(out.shape[0], h, -1)).sum(axis=(0, 2))
    state.head_scores[state.kept_heads] += per_head[state.kept_heads]
    return state


def keep_count(keep_ratio: float, n: int) -> int:
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep ratio must be in (0, 1], got {keep_ratio}")
    k = math.ceil(keep_ratio * n - 1e-9)
    if k < 1:
        raise ValueError("selection would keep no element")
    return k


def _select(scores, kept, k, kind, state, cfg):
    if k < 1:
        raise ValueError("selection would keep no element")
    if k >= kept.size:
        return kept
    res = filter_top_k(scores[kept], k, cfg or TopKConfig())
    state.selections.append((kind, int(kept.size), int(k), res.passes))
    return kept[res.kept_indices]


def select_tokens_count(state: ImportanceState, k: int, cfg: TopKConfig | None = None) -> np.ndarray:
    state.kept_tokens = _select(state.token_scores, state.kept_tokens, k, "token", state, cfg)
    return state.kept_tokens


def select_tokens(state: ImportanceState, keep_ratio: float, cfg: TopKConfig | None = None) -> np.ndarray:
    return select_tokens_count(state, keep_count(keep_ratio, state.kept_tokens.size), cfg)


def select_heads_count(state: ImportanceState, k: int, cfg: TopKConfig | None = None) -> np.ndarray:
    state.kept_heads = _select(state.head_scores, state.kept_heads, k, "head", state, cfg)
    return state.kept_heads


def select_heads(state: ImportanceState, keep_ratio: float, cfg: TopKConfig | None = None) -> np.ndarray:
    return select_heads_count(state, keep_count(keep_ratio, state.kept_heads.size), cfg)


def local_value_prune(prob_row, keep_ratio: float, cfg: TopKConfig | None = None,
                      return_result: bool = False):
    """Positions (within ``prob_row``) of the V rows this head/query keeps."""
    prob_row = np.asarray(prob_row)
    if prob_row.size == 0:
        raise ValueError("empty probability row")
    k = keep_count(keep_ratio, prob_row.size)
    if k == prob_row.size:
        kept = np.arange(prob_row.size)
        return (kept, None) if return_result else kept
    res = filter_top_k(prob_row, k, cfg or TopKConfig())
    return (res.kept_indices, res) if return_result else res.kept_indices


@dataclass
class PruneSchedule:
    token_ratios: list
    head_ratios: list
    token_prefix: float = TOKEN_PREFIX
    head_prefix: float = HEAD_PREFIX
    r_start: float = 1.0
    r_end: float = 1.0

    @property
    def num_layers(self) -> int:
        return len(self.token_ratios)

    @classmethod
    def keep_all(cls, num_layers: int) -> "PruneSchedule":
        return cls([1.0] * num_layers, [1.0] * num_layers)

    def token_target(self, layer: int, total: int) -> int:
        return max(1, math.ceil(self.token_ratios[layer] * total - 1e-9))

    def head_target(self, layer: int, total: int) -> int:
        return max(1, math.ceil(self.head_ratios[layer] * total - 1e-9))


def schedule_ratios(num_layers: int, r_avg: float, prefix_fraction: float = TOKEN_PREFIX,
                    delta: float | None = None):
    """Per-layer keep fractions: an unpruned prefix, then a linear ramp.

    ``r_avg`` is the mean over the non-prefix layers. The ramp runs from
    ``r_avg + delta`` down to ``r_avg - delta``. Returns
    ``(ratios, r_start, r_end)``.
    """
    if num_layers < 1:
        raise ValueError("need at least one layer")
    if not 0 < r_avg <= 1:
        raise ValueError(f"r_avg must be in (0, 1], got {r_avg}")
    prefix = min(num_layers, math.ceil(prefix_fraction * num_layers - 1e-9))
    rest = num_layers - prefix
    if delta is None:
        # r/2 cap keeps r_end positive for aggressive averages
        delta = min((1 - r_avg) / 2, r_avg / 2)
    r_start = min(1.0, r_avg + delta)
    r_end = 2 * r_avg - r_start
    if r_end <= 0:
        raise ValueError("delta too large: end ratio would not be positive")
    ramp = list(np.linspace(r_start, r_end, rest)) if rest > 1 else [r_avg] * rest
    return [1.0] * prefix + [float(r) for r in ramp], r_start, r_end


def rest_average(num_layers: int, overall: float, prefix_fraction: float) -> float:
    """Mean ratio the non-prefix layers need for an all-layer mean of ``overall``."""
    prefix = min(num_layers, math.ceil(prefix_fraction * num_layers - 1e-9))
    rest = num_layers - prefix
    if rest == 0 or overall >= 1:
        return 1.0
    r = (num_layers * overall - prefix) / rest
    if r <= 0:
        raise ValueError(
            f"overall keep {overall} unreachable with {prefix} unpruned prefix layers")
    return r


def make_schedule(num_layers: int, token_keep_avg: float = 1.0, head_keep_avg: float = 1.0,
                  token_prefix: float = TOKEN_PREFIX, head_prefix: float = HEAD_PREFIX) -> PruneSchedule:
    """Schedule whose all-layer mean keep fractions equal the given averages."""
    t_avg = rest_average(num_layers, token_keep_avg, token_prefix)
    h_avg = rest_average(num_layers, head_keep_avg, head_prefix)
    tok, r_start, r_end = schedule_ratios(num_layers, t_avg, token_prefix)
    head, _, _ = schedule_ratios(num_layers, h_avg, head_prefix)
    return PruneSchedule(tok, head, token_prefix, head_prefix, r_start, r_end)


def write_importance_csv(path, state: ImportanceState) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "score"])
        for i, s in enumerate(state.token_scores):
            w.writerow([i, repr(float(s))])


def read_importance_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    scores = np.zeros(len(rows))
    for r in rows:
        scores[int(r["token"])] = float(r["score"])
    return scores
