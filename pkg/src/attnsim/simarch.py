"""Cycle-approximate, traffic-exact model of the attention pipeline.

The simulator consumes a :class:`Trace` -- what was kept, refetched and
selected in every (step, layer, head, query) -- and charges DRAM bytes and
per-stage service times for it. Stages on the critical path (fetch, Q x K,
softmax, value top-k, prob x V) are composed by bottleneck: every query
costs its slowest stage, plus one fill/drain per layer. Token/head top-k
runs beside the critical path and only adds its excess.

DRAM bytes are exact element counts times bit widths. DRAM time is ideal
bandwidth per channel with 32-byte round-robin interleaving.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import PROB_BITS, merge_heads, quantize_probs, softmax_row, split_heads
from .quant import plane_bytes
from .topk import TopKConfig, topk_cycles, topk_occupancy

KB = 1024
STAGES = ("fetch", "qk", "softmax", "topk", "pv")
BYTE_KEYS = ("q_msb", "k_msb", "v_msb", "q_lsb", "k_lsb", "v_lsb", "out")


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    qk_multipliers: int = 512
    pv_multipliers: int = 512
    key_sram_bytes: int = 196 * KB
    value_sram_bytes: int = 196 * KB
    hbm_channels: int = 16
    channel_bw_bytes_per_cycle: int = 32
    freq_hz: float = 1e9
    softmax_parallelism: int = 8
    softmax_fifo_depth: int = 128
    onchip_bits: int = 12
    max_context: int = 1024
    interleave_bytes: int = 32
    # operand width before quantization is switched on (speedup breakdown only)
    unquantized_bits: int = 32

    def __post_init__(self):
        for name, val in asdict(self).items():
            if val <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def bandwidth_bytes_per_s(self) -> float:
        return self.hbm_channels * self.channel_bw_bytes_per_cycle * self.freq_hz

    @property
    def peak_flops(self) -> float:
        return 2.0 * (self.qk_multipliers + self.pv_multipliers) * self.freq_hz


@dataclass(frozen=True)
class Precision:
    msb_bits: int = 12
    lsb_bits: int = 0
    progressive: bool = False

    @classmethod
    def static(cls, bits: int) -> "Precision":
        return cls(bits, 0, False)

    @property
    def total_bits(self) -> int:
        return self.msb_bits + self.lsb_bits


@dataclass
class HeadRecord:
    head: int
    token_ids: np.ndarray
    v_kept: np.ndarray
    refetch: np.ndarray
    v_passes: list
    v_ids: list | None = None


@dataclass
class LayerRecord:
    step: int
    layer: int
    context: int
    num_queries: int
    total_heads: int
    heads: list
    selections: list = field(default_factory=list)


@dataclass
class Trace:
    stage: str
    head_dim: int
    num_heads: int
    precision: Precision
    layers: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass
class TrafficStats:
    dram_bytes: dict = field(default_factory=lambda: dict.fromkeys(BYTE_KEYS, 0))
    sram_reads: int = 0
    sram_writes: int = 0
    mult_ops: int = 0

    @property
    def total(self) -> int:
        return sum(self.dram_bytes.values())


@dataclass
class SimReport:
    total_cycles: int
    latency_s: float
    dram_bytes: dict
    dram_bytes_total: int
    flops: int
    effective_flops_per_s: float
    operational_intensity: float
    stage_cycles: dict
    pq_stats: dict
    pruning_summary: dict
    traffic: dict
    bounds: dict
    roofline: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def qk_stage_cycles(l1_kept: int, d: int, arch: ArchConfig = ArchConfig()) -> int:
    if d > arch.qk_multipliers:
        raise ValueError(f"head dim {d} exceeds {arch.qk_multipliers} multipliers")
    if arch.qk_multipliers % d:
        raise ValueError(f"head dim {d} must divide {arch.qk_multipliers}")
    return -(-l1_kept // (arch.qk_multipliers // d))


def pv_stage_cycles(v_kept: int, d: int, arch: ArchConfig = ArchConfig()) -> int:
    if d > arch.pv_multipliers or arch.pv_multipliers % d:
        raise ValueError(f"head dim {d} must divide {arch.pv_multipliers}")
    return -(-v_kept // (arch.pv_multipliers // d))


def softmax_stage_cycles(l1_kept: int, arch: ArchConfig = ArchConfig()) -> int:
    return -(-l1_kept // arch.softmax_parallelism)


def fetch_cycles(channel_bytes, arch: ArchConfig = ArchConfig()) -> int:
    """Cycles to drain per-channel byte counts; channels work in parallel."""
    channel_bytes = np.asarray(channel_bytes, dtype=np.int64)
    if channel_bytes.size == 0:
        return 0
    return int(-(-channel_bytes.max() // arch.channel_bw_bytes_per_cycle))


def channel_load(rows, row_bytes: int, base: int, arch: ArchConfig = ArchConfig()) -> np.ndarray:
    """Bytes landing on each channel when fetching ``rows`` of a head-major plane.

    Each row starts on an interleave boundary; row ``r`` occupies interleave
    chunks ``base + r * chunks_per_row + j``.
    """
    load = np.zeros(arch.hbm_channels, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0 or row_bytes == 0:
        return load
    g = arch.interleave_bytes
    cpr = -(-row_bytes // g)
    sizes = np.full(cpr, g, dtype=np.int64)
    sizes[-1] = row_bytes - g * (cpr - 1)
    chunks = base + rows[:, None] * cpr + np.arange(cpr)
    np.add.at(load, chunks.ravel() % arch.hbm_channels, np.broadcast_to(sizes, chunks.shape).ravel())
    return load


def _base(*key) -> int:
    return zlib.crc32(repr(key).encode()) % 4093


class _Acc:
    """Running totals for one simulation."""

    def __init__(self):
        self.traffic = TrafficStats()
        self.stage = dict.fromkeys(STAGES, 0)
        self.flops = 0
        self.rows_total = 0
        self.rows_refetched = 0
        self.lsb_bytes = 0
        self.tok_kept = 0
        self.tok_total = 0
        self.head_kept = 0
        self.head_total = 0
        self.v_kept = 0
        self.v_total = 0
        self.lower = 0
        self.upper = 0
        self.rows = []
        self.fifo_overflow = False

    def add_bytes(self, key, n):
        self.traffic.dram_bytes[key] += int(n)


def _operand_bits(prec: Precision, override: int | None):
    if override is not None:
        return override, 0, False
    return prec.msb_bits, prec.lsb_bits, prec.progressive


def simulate(trace: Trace, arch: ArchConfig = ArchConfig(), topk_cfg: TopKConfig = TopKConfig(),
             operand_bits: int | None = None, keep_rows: bool = False) -> SimReport:
    """Charge cycles and DRAM traffic for an execution trace.

    ``operand_bits`` forces a static operand width and ignores LSB refetches
    (the pre-quantization configurations of the speedup breakdown).
    ``keep_rows`` keeps one stage record per (step, layer, head, query).
    """
    d = trace.head_dim
    if d > arch.qk_multipliers:
        raise ValueError(f"head dim {d} exceeds {arch.qk_multipliers}")
    msb, lsb, progressive = _operand_bits(trace.precision, operand_bits)
    out_bits = operand_bits if operand_bits is not None else arch.onchip_bits
    acc = _Acc()
    total = 0
    for rec in trace.layers:
        if rec.context > arch.max_context:
            raise ValueError(f"context {rec.context} exceeds max_context {arch.max_context}")
        if trace.stage == "generation":
            crit, last = _generation_layer(rec, d, arch, topk_cfg, msb, lsb, progressive, out_bits, acc, keep_rows)
        else:
            crit, last = _summarization_layer(rec, d, arch, topk_cfg, msb, lsb, progressive, out_bits, acc, keep_rows)
        fill = (sum(last) - max(last)) if last else 0
        sel = 0
        for kind, n, k, passes in rec.selections:
            sel += topk_cycles(n, k, passes, topk_cfg)
        overflow = max(0, sel - crit)
        acc.stage["topk"] += sel
        acc.upper += sel
        total += crit + fill + overflow
        acc.head_kept += len(rec.heads)
        acc.head_total += rec.total_heads
    return _report(trace, arch, acc, total)


def _query_stages(n, vk, refetch, passes, d, arch, cfg):
    rep = 2 if refetch else 1
    qk = qk_stage_cycles(n, d, arch) * rep
    sm = softmax_stage_cycles(n, arch) * rep
    tk = topk_occupancy(n, passes, cfg) if passes is not None else 0
    pv = pv_stage_cycles(vk, d, arch)
    return qk, sm, tk, pv


def _generation_layer(rec, d, arch, cfg, msb, lsb, progressive, out_bits, acc, keep_rows):
    crit = 0
    last = None
    q_row = plane_bytes(d, msb)
    k_row = plane_bytes(d, msb)
    l_row = plane_bytes(d, lsb) if lsb else 0
    o_row = plane_bytes(d, out_bits)
    for hr in rec.heads:
        n = hr.token_ids.size
        vk = int(hr.v_kept[0])
        v_ids = hr.v_ids[0] if hr.v_ids is not None else hr.token_ids[:vk]
        refetch = bool(progressive and hr.refetch[0])
        key = (rec.layer, hr.head)
        load = channel_load([0], q_row, _base("q", *key, rec.step), arch)
        load += channel_load(hr.token_ids, k_row, _base("k", *key), arch)
        load += channel_load(v_ids, k_row, _base("v", *key), arch)
        load += channel_load([0], o_row, _base("o", *key, rec.step), arch)
        acc.add_bytes("q_msb", q_row)
        acc.add_bytes("k_msb", n * k_row)
        acc.add_bytes("v_msb", vk * k_row)
        acc.add_bytes("out", o_row)
        if refetch:
            load += channel_load([0], l_row, _base("ql", *key, rec.step), arch)
            load += channel_load(hr.token_ids, l_row, _base("kl", *key), arch)
            load += channel_load(v_ids, l_row, _base("vl", *key), arch)
            lsb_bytes = l_row * (1 + n + vk)
            acc.add_bytes("q_lsb", l_row)
            acc.add_bytes("k_lsb", n * l_row)
            acc.add_bytes("v_lsb", vk * l_row)
            acc.lsb_bytes += lsb_bytes
        fetch = fetch_cycles(load, arch)
        qk, sm, tk, pv = _query_stages(n, vk, refetch, hr.v_passes[0], d, arch, cfg)
        stages = (fetch, qk, sm, tk, pv)
        _tally(acc, stages, n, vk, refetch, d, rec, hr.head, 0, keep_rows, progressive)
        acc.tok_kept += n
        acc.tok_total += rec.context
        crit += max(stages)
        last = stages
    return crit, last


def _summarization_layer(rec, d, arch, cfg, msb, lsb, progressive, out_bits, acc, keep_rows):
    head_fetch = []
    head_compute = []
    last = None
    q_row = plane_bytes(d, msb)
    k_row = plane_bytes(d, msb)
    l_row = plane_bytes(d, lsb) if lsb else 0
    o_row = plane_bytes(d, out_bits)
    onchip_row = plane_bytes(d, arch.onchip_bits)
    double_buffer = True
    for hr in rec.heads:
        n = hr.token_ids.size
        if n * onchip_row > min(arch.key_sram_bytes, arch.value_sram_bytes):
            raise CapacityError(
                f"layer {rec.layer} head {hr.head}: {n} kept tokens need {n * onchip_row} B "
                f"of K/V SRAM, have {arch.key_sram_bytes} B")
        if 2 * n * onchip_row > min(arch.key_sram_bytes, arch.value_sram_bytes):
            double_buffer = False
        key = (rec.layer, hr.head)
        load = channel_load(hr.token_ids, k_row, _base("k", *key), arch)
        load += channel_load(hr.token_ids, k_row, _base("v", *key), arch)
        acc.add_bytes("k_msb", n * k_row)
        acc.add_bytes("v_msb", n * k_row)
        acc.traffic.sram_writes += 2 * n
        nq = rec.num_queries
        refetch = np.asarray(hr.refetch, dtype=bool) & progressive
        if refetch.any():
            # LSB planes of this head's K and V come in once and stay cached
            load += channel_load(hr.token_ids, l_row, _base("kl", *key), arch)
            load += channel_load(hr.token_ids, l_row, _base("vl", *key), arch)
            acc.add_bytes("k_lsb", n * l_row)
            acc.add_bytes("v_lsb", n * l_row)
            acc.lsb_bytes += 2 * n * l_row
        head_fetch.append(fetch_cycles(load, arch))
        compute = 0
        q_load = channel_load(np.arange(nq), q_row, _base("q", *key), arch)
        q_load += channel_load(np.arange(nq), o_row, _base("o", *key), arch)
        per_q_fetch = -(-fetch_cycles(q_load, arch) // max(nq, 1))
        acc.add_bytes("q_msb", nq * q_row)
        acc.add_bytes("out", nq * o_row)
        for qi in range(nq):
            vk = int(hr.v_kept[qi])
            rf = bool(refetch[qi])
            fetch = per_q_fetch
            if rf:
                acc.add_bytes("q_lsb", l_row)
                acc.lsb_bytes += l_row
                fetch += -(-l_row // arch.channel_bw_bytes_per_cycle)
            qk, sm, tk, pv = _query_stages(n, vk, rf, hr.v_passes[qi], d, arch, cfg)
            stages = (fetch, qk, sm, tk, pv)
            _tally(acc, stages, n, vk, rf, d, rec, hr.head, qi, keep_rows, progressive)
            acc.traffic.sram_reads += n * (2 if rf else 1) + vk
            compute += max(stages)
            last = stages
        head_compute.append(compute)
        acc.tok_kept += n
        acc.tok_total += rec.context
    if not head_fetch:
        return 0, last
    if double_buffer:
        crit = head_fetch[0]
        for i, c in enumerate(head_compute):
            nxt = head_fetch[i + 1] if i + 1 < len(head_fetch) else 0
            crit += max(c, nxt)
    else:
        crit = sum(head_fetch) + sum(head_compute)
    acc.stage["fetch"] += sum(head_fetch)
    acc.upper += sum(head_fetch)
    return crit, last


def _tally(acc, stages, n, vk, refetch, d, rec, head, qi, keep_rows, progressive):
    for name, c in zip(STAGES, stages):
        acc.stage[name] += c
    acc.lower += max(stages)
    acc.upper += sum(stages)
    rep = 2 if refetch else 1
    acc.flops += 2 * n * d * rep + 2 * vk * d
    acc.traffic.mult_ops += n * d * rep + vk * d
    acc.v_kept += vk
    acc.v_total += n
    if progressive:
        acc.rows_total += 1
        acc.rows_refetched += int(refetch)
    if keep_rows:
        acc.rows.append((rec.step, rec.layer, head, qi, n, vk, int(refetch), *stages))


def _report(trace, arch, acc, total) -> SimReport:
    flops = acc.flops
    total_bytes = acc.traffic.total
    latency = total / arch.freq_hz
    oi = flops / total_bytes if total_bytes else 0.0
    eff = flops / latency if latency else 0.0
    report = SimReport(
        total_cycles=int(total),
        latency_s=latency,
        dram_bytes=dict(acc.traffic.dram_bytes),
        dram_bytes_total=int(total_bytes),
        flops=int(flops),
        effective_flops_per_s=eff,
        operational_intensity=oi,
        stage_cycles=dict(acc.stage),
        pq_stats={"rows_total": acc.rows_total, "rows_refetched": acc.rows_refetched,
                  "lsb_bytes_fetched": acc.lsb_bytes,
                  "refetch_rate": acc.rows_refetched / acc.rows_total if acc.rows_total else 0.0},
        pruning_summary={
            "token_keep_avg": acc.tok_kept / acc.tok_total if acc.tok_total else 1.0,
            "head_keep_avg": acc.head_kept / acc.head_total if acc.head_total else 1.0,
            "v_keep_avg": acc.v_kept / acc.v_total if acc.v_total else 1.0,
        },
        traffic={"sram_reads": acc.traffic.sram_reads, "sram_writes": acc.traffic.sram_writes,
                 "mult_ops": acc.traffic.mult_ops},
        bounds={"pipelined_lower": int(acc.lower), "serialized_upper": int(acc.upper)},
        metadata={
            "stage": trace.stage,
            "pipeline_model": "per-query bottleneck stage, one fill/drain per layer, "
                              "heads back to back; token/head top-k overlapped with the layer",
            "fifo_overflow": bool(trace.meta.get("fifo_overflow", False)),
            **{k: v for k, v in trace.meta.items() if isinstance(v, (int, float, str, bool))},
        },
    )
    report.roofline = roofline_eval(report, arch)
    if acc.rows:
        report.metadata["_rows"] = acc.rows
    return report


def roofline_eval(report: SimReport, arch: ArchConfig = ArchConfig()) -> dict:
    oi = report.operational_intensity
    mem_roof = oi * arch.bandwidth_bytes_per_s
    roof = min(arch.peak_flops, mem_roof)
    achieved = report.effective_flops_per_s
    if achieved > roof * (1 + 1e-9):
        raise AssertionError(f"achieved {achieved:.3e} FLOP/s above roof {roof:.3e}")
    return {
        "bound": "compute" if mem_roof >= arch.peak_flops else "memory",
        "roof_flops": roof,
        "achieved_flops": achieved,
        "ridge_oi": arch.peak_flops / arch.bandwidth_bytes_per_s,
        "peak_flops": arch.peak_flops,
        "bandwidth_bytes_per_s": arch.bandwidth_bytes_per_s,
    }


def stage_rows(report: SimReport) -> list:
    return report.metadata.get("_rows", [])


STAGE_CSV_HEADER = ("step", "layer", "head", "query", "keys", "v_kept", "refetch") + STAGES


# ---------------------------------------------------------------------------
# functional datapath


def datapath_head(q_codes, k_codes, v_codes, score_scale: float, v_scale: float,
                  value_mask=None, arch: ArchConfig = ArchConfig(), prob_bits: int = PROB_BITS):
    """One head through the Q x K array, softmax unit and prob x V array.

    Works cycle by cycle: the Q x K array takes ``512 / D`` key rows per
    cycle and reduces them with the split adder tree; prob x V takes
    ``512 / D`` probabilities per cycle and accumulates D outputs. Returns
    ``(out, out_acc, prob, cycles)``.
    """
    q_codes = np.atleast_2d(np.asarray(q_codes, dtype=np.int64))
    k_codes = np.asarray(k_codes, dtype=np.int64)
    v_codes = np.asarray(v_codes, dtype=np.int64)
    l0, d = q_codes.shape
    l1 = k_codes.shape[0]
    lanes = arch.qk_multipliers // d
    top = (1 << prob_bits) - 1
    out_acc = np.zeros((l0, d), dtype=np.int64)
    prob = np.zeros((l0, l1))
    cycles = 0
    for qi in range(l0):
        scores = np.zeros(l1, dtype=np.int64)
        broadcast = np.tile(q_codes[qi], lanes)
        for start in range(0, l1, lanes):
            rows = k_codes[start:start + lanes]
            line = np.zeros(lanes * d, dtype=np.int64)
            line[:rows.size] = rows.ravel()
            products = line * broadcast
            scores[start:start + rows.shape[0]] = products.reshape(lanes, d).sum(axis=1)[:rows.shape[0]]
            cycles += 1
        p = softmax_row(scores, scale=score_scale)
        prob[qi] = p
        pc = quantize_probs(p, prob_bits)
        if value_mask is not None:
            pc = pc * np.asarray(value_mask)[qi]
        kept = np.flatnonzero(pc) if value_mask is not None else np.arange(l1)
        accum = np.zeros(d, dtype=np.int64)
        for start in range(0, kept.size, lanes):
            sel = kept[start:start + lanes]
            accum += (pc[sel][:, None] * v_codes[sel]).sum(axis=0)
            cycles += 1
        out_acc[qi] = accum
    return out_acc.astype(np.float64) * (v_scale / top), out_acc, prob, cycles


def datapath_attention(q_codes, k_codes, v_codes, q_scale, k_scale, v_scale, heads,
                       token_mask=None, head_mask=None, value_mask=None,
                       arch: ArchConfig = ArchConfig()):
    """Multi-head wrapper around :func:`datapath_head`; pruned heads output zeros."""
    q_codes = np.atleast_2d(np.asarray(q_codes, dtype=np.int64))
    l0, d_in = q_codes.shape
    l1 = np.asarray(k_codes).shape[0]
    d = d_in // heads
    tok = np.ones(l1, dtype=bool) if token_mask is None else np.zeros(l1, dtype=bool)
    if token_mask is not None:
        tok[np.asarray(token_mask)] = True
    idx = np.flatnonzero(tok)
    head_ids = range(heads) if head_mask is None else sorted(np.asarray(head_mask).tolist())
    qh, kh, vh = (split_heads(np.asarray(x, dtype=np.int64), heads) for x in (q_codes, k_codes, v_codes))
    score_scale = q_scale * k_scale / math.sqrt(d)
    acc = np.zeros((heads, l0, d), dtype=np.int64)
    for h in head_ids:
        vm = None if value_mask is None else np.asarray(value_mask)[h][:, idx]
        _, a, _, _ = datapath_head(qh[h], kh[h][idx], vh[h][idx], score_scale, v_scale, vm, arch)
        acc[h] = a
    return merge_heads(acc)


# ---------------------------------------------------------------------------
# speedup breakdown

BREAKDOWN_STEPS = ("datapath_only", "+pruning", "+parallel_topk", "+pq")


def speedup_breakdown(cfg, token_keep: float, head_keep: float = 1.0, v_keep: float = 1.0,
                      pq=None, refetch_rate: float = 0.0, arch: ArchConfig = ArchConfig(),
                      topk_cfg: TopKConfig = TopKConfig()) -> dict:
    """Latency of four cumulative configurations on one workload.

    1. dense attention with unquantized operands,
    2. cascade token/head pruning plus local V pruning, top-k engine at P=1,
    3. the same with the engine at ``topk_cfg.parallelism``,
    4. plus progressive quantization (``pq``) at the injected refetch rate.

    Without an enabled ``pq`` step 4 repeats step 3. Speedups are relative
    to the previous step and cumulative relative to step 1.
    """
    from dataclasses import replace
    from .pruning import make_schedule
    from .workloads import synthetic_trace

    wide = arch.unquantized_bits
    schedule = make_schedule(cfg.num_layers, token_keep, head_keep)
    dense = synthetic_trace(cfg, None, Precision.static(wide), 0.0, 1.0, topk_cfg)
    if pq is not None and pq.enabled:
        prec = Precision(pq.msb_bits, pq.lsb_bits, True)
    else:
        prec = Precision.static(wide)
    pruned = synthetic_trace(cfg, schedule, prec, refetch_rate, v_keep, topk_cfg)
    serial = replace(topk_cfg, parallelism=1)
    reports = [
        simulate(dense, arch, topk_cfg, operand_bits=wide),
        simulate(pruned, arch, serial, operand_bits=wide),
        simulate(pruned, arch, topk_cfg, operand_bits=wide),
    ]
    reports.append(simulate(pruned, arch, topk_cfg) if pq is not None and pq.enabled else reports[-1])
    cycles = [r.total_cycles for r in reports]
    steps = []
    for i, (name, r) in enumerate(zip(BREAKDOWN_STEPS, reports)):
        steps.append({
            "step": name,
            "cycles": r.total_cycles,
            "latency_s": r.latency_s,
            "dram_bytes": r.dram_bytes_total,
            "speedup_step": cycles[i - 1] / cycles[i] if i else 1.0,
            "speedup_total": cycles[0] / cycles[i],
        })
    return {"model": cfg.name, "parallelism": topk_cfg.parallelism, "token_keep": token_keep,
            "head_keep": head_keep, "v_keep": v_keep, "refetch_rate": refetch_rate,
            "steps": steps, "reports": reports}
