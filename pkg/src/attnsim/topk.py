"""Quick-select top-k engine and zero eliminator, functional plus cycle model.

The engine keeps two FIFOs: a random pivot from the active FIFO splits it
into smaller (FIFO_L) and larger (FIFO_R) elements, equal ones are only
counted. Once the k-th largest value and how many copies of it survive are
known, a second pass filters the buffered input in its original order and
the zero eliminator compacts the survivors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TopKConfig:
    parallelism: int = 16
    fifo_depth: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


@dataclass
class TopKResult:
    kth_value: float
    num_eq_kth: int
    kept_indices: np.ndarray
    cycles: int
    passes: list = field(default_factory=list)
    fifo_overflow: bool = False

    @property
    def num_passes(self) -> int:
        return len(self.passes)


@dataclass
class SelectOutcome:
    kth_value: float
    num_eq_kth: int
    passes: list
    fifo_overflow: bool


def _rng(cfg: TopKConfig, rng):
    return rng if rng is not None else np.random.default_rng(cfg.rng_seed)


def quick_select(scores, k: int, cfg: TopKConfig = TopKConfig(), rng=None) -> SelectOutcome:
    scores = np.asarray(scores)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} scores")
    capacity = cfg.fifo_depth * cfg.parallelism
    if k == n:
        # nothing to discard: the filter keeps everything
        kth = scores.min()
        return SelectOutcome(kth, int(np.count_nonzero(scores == kth)), [], n > capacity)
    rng = _rng(cfg, rng)
    fifo_l, fifo_r = scores, scores[:0]
    target, num_eq, pivot = k, 0, None
    passes = []
    overflow = n > capacity
    while True:
        if fifo_r.size + num_eq < target:
            # pivot too large
            target -= fifo_r.size + num_eq
            fifo_r = fifo_r[:0]
            src = fifo_l
        elif fifo_r.size >= target:
            # pivot too small
            fifo_l = fifo_l[:0]
            src = fifo_r
        else:
            return SelectOutcome(pivot, int(target - fifo_r.size), passes, overflow)
        pivot = src[rng.integers(src.size)]
        passes.append(int(src.size))
        fifo_l = src[src < pivot]
        fifo_r = src[src > pivot]
        num_eq = src.size - fifo_l.size - fifo_r.size
        overflow = overflow or max(fifo_l.size, fifo_r.size) > capacity


def zero_eliminate(arr, valid=None):
    """Stable compaction through a prefix sum and a log2(n)-stage shifter.

    Entries equal to zero are holes unless ``valid`` marks them explicitly.
    Returns ``(compacted, source_indices)``.
    """
    arr = np.asarray(arr)
    n = arr.shape[0]
    keep = (arr != 0) if valid is None else np.asarray(valid, dtype=bool)
    if n == 0:
        return arr[:0], np.zeros(0, dtype=np.int64)
    width = 1 << max(0, math.ceil(math.log2(n)))
    zero_cnt = np.zeros(width, dtype=np.int64)
    zero_cnt[1:n] = np.cumsum(~keep)[:-1]
    occupied = np.zeros(width, dtype=bool)
    occupied[:n] = keep
    vals = np.zeros(width, dtype=arr.dtype)
    vals[:n] = arr
    src = np.full(width, -1, dtype=np.int64)
    src[:n] = np.arange(n)
    pos = np.arange(width)
    for stage in range(int(math.log2(width))):
        shift = 1 << stage
        move = occupied & ((zero_cnt >> stage) & 1).astype(bool)
        dest = np.where(move, pos - shift, pos)[occupied]
        if np.unique(dest).size != dest.size:
            raise AssertionError("zero eliminator shifter collision")
        new_occ = np.zeros(width, dtype=bool)
        new_occ[dest] = True
        for a in (vals, src, zero_cnt):
            moved = a[occupied]
            a[:] = 0 if a is not src else -1
            a[dest] = moved
        occupied = new_occ
    m = int(keep.sum())
    return vals[:m], src[:m]


def topk_cycles(n: int, k: int, passes, cfg: TopKConfig = TopKConfig()) -> int:
    """Latency of one top-k job: partition passes, filter pass, eliminator stages."""
    p = cfg.parallelism
    select = sum(-(-m // p) for m in passes)
    return select + -(-n // p) + (math.ceil(math.log2(n)) if n > 1 else 0)


def topk_occupancy(n: int, passes, cfg: TopKConfig = TopKConfig()) -> int:
    """Cycles one job blocks the engine when jobs stream back to back.

    The quick-select arrays and the filter comparators are separate
    hardware, so consecutive jobs overlap one in selection and one in
    filtering; the slower of the two sets the engine's throughput.
    """
    p = cfg.parallelism
    return max(sum(-(-m // p) for m in passes), -(-n // p))


def filter_top_k(scores, k: int, cfg: TopKConfig = TopKConfig(), rng=None,
                 tie_rule: str = "first") -> TopKResult:
    """Indices of the k largest scores, in input order.

    Elements above the k-th value always survive; among elements equal to
    it, the first ``num_eq_kth`` in input order are kept (``tie_rule="last"``
    keeps the last ones instead, used only for fault injection).
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    sel = quick_select(scores, k, cfg, rng)
    greater = scores > sel.kth_value
    equal = scores == sel.kth_value
    eq_rank = np.cumsum(equal) if tie_rule == "first" else np.cumsum(equal[::-1])[::-1]
    survive = greater | (equal & (eq_rank <= sel.num_eq_kth))
    # survivors are marked by position so zero-valued scores are not treated as holes
    _, kept = zero_eliminate(np.arange(n) + 1, valid=survive)
    return TopKResult(sel.kth_value, sel.num_eq_kth, kept,
                      topk_cycles(n, k, sel.passes, cfg), sel.passes, sel.fifo_overflow)
