import numpy as np
import pytest

from attnsim.attention import attention_fixed
from attnsim.progressive import PQPolicy
from attnsim.pruning import make_schedule
from attnsim.quant import quantize
from attnsim.simarch import (ArchConfig, CapacityError, HeadRecord, LayerRecord, Precision, SimReport,
                             Trace, channel_load, datapath_attention, fetch_cycles, pv_stage_cycles,
                             qk_stage_cycles, roofline_eval, simulate, softmax_stage_cycles,
                             speedup_breakdown, stage_rows)
from attnsim.workloads import ModelConfig, preset, run_model, synthetic_trace


def _single_token_trace(stage="generation"):
    t = Trace(stage, 64, 1, Precision.static(12))
    t.layers.append(LayerRecord(0, 0, 1, 1, 1, [HeadRecord(0, np.array([0]), np.array([1]),
                                                           np.array([False]), [None], None)]))
    return t


def test_arch_defaults():
    a = ArchConfig()
    assert a.bandwidth_bytes_per_s == 512e9
    assert a.peak_flops == 2.048e12
    with pytest.raises(ValueError):
        ArchConfig(hbm_channels=0)


@pytest.mark.parametrize("stage", ["generation", "summarization"])
def test_single_token_bytes(stage):
    r = simulate(_single_token_trace(stage))
    assert r.dram_bytes_total == 384


def test_stage_formulas():
    assert qk_stage_cycles(1024, 64) == 128
    assert qk_stage_cycles(1, 512) == 1
    assert qk_stage_cycles(7, 64) == 1
    assert pv_stage_cycles(512, 64) == 64
    assert pv_stage_cycles(256, 64) == 32
    assert softmax_stage_cycles(17) == 3
    with pytest.raises(ValueError):
        qk_stage_cycles(4, 1024)


def test_fetch_cycles_examples():
    assert fetch_cycles(np.full(16, 320)) == 10
    load = np.zeros(16)
    load[3] = 16 * 320
    assert fetch_cycles(load) == 160


def _queue_oracle(requests, arch):
    """Event-driven: each channel drains one interleave chunk per cycle from its queue."""
    queues = [[] for _ in range(arch.hbm_channels)]
    for chunk, size in requests:
        queues[chunk % arch.hbm_channels].append(size)
    cycles = 0
    while any(queues):
        for q in queues:
            if q:
                left = q[0] - arch.channel_bw_bytes_per_cycle
                if left > 0:
                    q[0] = left
                else:
                    q.pop(0)
        cycles += 1
    return cycles


def test_fetch_matches_queue_oracle(rng):
    arch = ArchConfig()
    for _ in range(20):
        rows = np.sort(rng.choice(1024, int(rng.integers(1, 300)), replace=False))
        row_bytes = int(rng.choice([96, 64, 32, 48]))
        base = int(rng.integers(0, 4000))
        cpr = -(-row_bytes // 32)
        requests = []
        for r in rows:
            for j in range(cpr):
                size = 32 if j < cpr - 1 else row_bytes - 32 * (cpr - 1)
                requests.append((base + r * cpr + j, size))
        assert fetch_cycles(channel_load(rows, row_bytes, base, arch), arch) == _queue_oracle(requests, arch)


def test_generation_kv_bytes_follow_series():
    cfg = ModelConfig("g", 2, 2, 64, "generation", prompt_len=100, gen_steps=5)
    r = simulate(synthetic_trace(cfg))
    per_token = 96 * 2 * 2  # 12-bit row, 2 heads, 2 layers
    assert r.dram_bytes["k_msb"] == sum(101 + t for t in range(5)) * per_token


def test_token_keep_scales_kv_bytes():
    cfg = ModelConfig("g", 4, 2, 64, "generation", prompt_len=200, gen_steps=4)
    dense = simulate(synthetic_trace(cfg)).dram_bytes["k_msb"]
    sched = make_schedule(4, 0.5, 1.0)
    pruned = simulate(synthetic_trace(cfg, sched)).dram_bytes["k_msb"]
    expected = sum(sched.token_target(l, 200 + t + 1) for t in range(4) for l in range(4)) * 96 * 2
    assert pruned == expected
    assert abs(pruned / dense - np.mean(sched.token_ratios)) < 0.01


def test_cycle_bounds_and_bottleneck(rng):
    for name, pq in (("bert-base", None), ("gpt2-small", PQPolicy())):
        cfg = preset(name, mode="mixed", flat_fraction=0.2)
        r = run_model(cfg, make_schedule(cfg.num_layers, 0.5, 0.8), pq, v_keep=0.8, arch=ArchConfig()).report
        assert r.total_cycles >= max(r.stage_cycles.values())
        assert r.bounds["pipelined_lower"] <= r.total_cycles <= r.bounds["serialized_upper"]


def test_capacity_error():
    t = Trace("summarization", 64, 1, Precision.static(12))
    n = 196 * 1024 // 96 + 1
    ids = np.arange(n)
    t.layers.append(LayerRecord(0, 0, n, 1, 1, [HeadRecord(0, ids, np.array([n]), np.array([False]),
                                                           [None])]))
    with pytest.raises(CapacityError):
        simulate(t, ArchConfig(max_context=4096))


def test_context_limit():
    t = _single_token_trace()
    t.layers[0].context = 2000
    with pytest.raises(ValueError):
        simulate(t)


def test_roofline_zero_flops():
    rep = SimReport(0, 0.0, {}, 0, 0, 0.0, 0.0, {}, {}, {}, {}, {})
    out = roofline_eval(rep)
    assert out["roof_flops"] == 0 and out["bound"] == "memory"


def test_roofline_regimes():
    bert = simulate(synthetic_trace(preset("bert-base")))
    gpt = simulate(synthetic_trace(preset("gpt2-small")))
    assert bert.roofline["bound"] == "compute"
    assert gpt.roofline["bound"] == "memory"
    for r in (bert, gpt):
        assert r.roofline["achieved_flops"] <= r.roofline["roof_flops"] * (1 + 1e-9)


def test_progressive_traffic_accounting():
    cfg = ModelConfig("g", 2, 2, 64, "generation", prompt_len=50, gen_steps=4)
    tr = synthetic_trace(cfg, None, Precision(8, 4, True), refetch_rate=0.25)
    r = simulate(tr)
    refetched = sum(int(hr.refetch[0]) for rec in tr.layers for hr in rec.heads)
    assert refetched == 4  # 16 rows at 25%
    assert r.pq_stats["rows_refetched"] == 4
    assert r.dram_bytes["q_lsb"] == 4 * 32
    lsb_keys = sum(hr.token_ids.size for rec in tr.layers for hr in rec.heads if hr.refetch[0])
    assert r.dram_bytes["k_lsb"] == lsb_keys * 32


def test_breakdown_all_equal_without_pruning():
    b = speedup_breakdown(ModelConfig("s", 2, 2, 64, seq_len=64), 1.0, 1.0, 1.0, None)
    cycles = [s["cycles"] for s in b["steps"]]
    assert len(set(cycles)) == 1
    assert [s["step"] for s in b["steps"]] == ["datapath_only", "+pruning", "+parallel_topk", "+pq"]


def test_breakdown_p1_vs_p16_only_topk_differs():
    cfg = ModelConfig("g", 4, 2, 64, "generation", prompt_len=300, gen_steps=3)
    b = speedup_breakdown(cfg, 0.4, 1.0, 0.75, None)
    r1, r16 = b["reports"][1], b["reports"][2]
    assert r1.dram_bytes == r16.dram_bytes and r1.flops == r16.flops
    for s in ("fetch", "qk", "softmax", "pv"):
        assert r1.stage_cycles[s] == r16.stage_cycles[s]
    assert r1.stage_cycles["topk"] > r16.stage_cycles["topk"]


def test_datapath_matches_fixed_oracle(rng):
    q, k, v = (rng.standard_normal((5, 32)) for _ in range(3))
    k, v = rng.standard_normal((13, 32)), rng.standard_normal((13, 32))
    tq, tk, tv = (quantize(x, 12) for x in (q, k, v))
    keep = np.array([0, 2, 3, 5, 6, 7, 9, 12])
    vmask = rng.random((2, 5, 13)) < 0.6
    args = (tq.codes, tk.codes, tv.codes, tq.params.scale, tk.params.scale, tv.params.scale, 2)
    ref = attention_fixed(*args, token_mask=keep, head_mask=[1], value_mask=vmask)
    got = datapath_attention(*args, token_mask=keep, head_mask=[1], value_mask=vmask)
    assert np.array_equal(got, ref.extra["out_acc"])


def test_stage_rows_written_on_request():
    cfg = ModelConfig("s", 1, 2, 64, seq_len=8)
    r = simulate(synthetic_trace(cfg), keep_rows=True)
    rows = stage_rows(r)
    assert len(rows) == 2 * 8 and len(rows[0]) == 12


def test_simulation_deterministic():
    cfg = ModelConfig("g", 3, 2, 64, "generation", prompt_len=80, gen_steps=3)
    a = simulate(synthetic_trace(cfg, make_schedule(3, 0.5, 0.7), v_keep=0.5))
    b = simulate(synthetic_trace(cfg, make_schedule(3, 0.5, 0.7), v_keep=0.5))
    assert a.to_dict() == b.to_dict()
