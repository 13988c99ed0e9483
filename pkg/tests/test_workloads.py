import numpy as np
import pytest

from attnsim.attention import attention_dense, softmax_row
from attnsim.pruning import make_schedule
from attnsim.simarch import ArchConfig
from attnsim.workloads import (ModelConfig, PRESETS, importance_from_trace, preset, read_trace,
                               run_model, synth_inputs, synth_layer, synthetic_trace, write_trace)


def test_presets():
    g = preset("gpt2-small")
    assert (g.num_layers, g.heads, g.prompt_len, g.gen_steps) == (12, 12, 992, 32)
    b = preset("bert-large")
    assert (b.num_layers, b.heads) == (24, 16)
    assert preset("gpt2-medium", seed=7).seed == 7
    assert preset("bert-base", seq_len=64).seq_len == 64
    assert preset("bert-base", heads=12) == PRESETS["bert-base"]
    with pytest.raises(ValueError):
        preset("gpt3")
    with pytest.raises(ValueError):
        preset("gpt2-small", prompt_len=1000)


def test_inputs_deterministic():
    cfg = ModelConfig("t", 2, 2, 8, seq_len=10, seed=3)
    a = [x.q for x in synth_inputs(cfg)]
    b = [x.q for x in synth_inputs(cfg)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def _max_probs(q, k, heads, d):
    out = []
    for r in range(q.shape[0]):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            out.append(softmax_row(k[:, sl] @ q[r, sl] / np.sqrt(d)).max())
    return np.array(out)


def test_peaked_mode_is_peaked():
    cfg = ModelConfig("t", 1, 4, 64, seq_len=256, mode="peaked")
    q, k, _ = synth_layer(cfg, 0)
    assert np.mean(_max_probs(q, k, 4, 64) > 0.5) >= 0.9


def test_normal_mode_is_flat_at_long_context():
    cfg = ModelConfig("t", 1, 2, 64, seq_len=1024)
    q, k, _ = synth_layer(cfg, 0)
    assert _max_probs(q[:64], k, 2, 64).mean() < 0.1


def test_keep_all_float_matches_dense():
    cfg = ModelConfig("t", 3, 2, 8, seq_len=12)
    run = run_model(cfg, numeric="float")
    for layer, inp in enumerate(synth_inputs(cfg)):
        assert np.array_equal(run.outputs[layer], attention_dense(inp).out)


def test_generation_counts_follow_schedule():
    cfg = preset("gpt2-small", gen_steps=2)
    sched = make_schedule(12, 1 / 3.8, 1.0)
    run = run_model(cfg, sched)
    for i, toks in enumerate(run.kept_tokens):
        step, layer = divmod(i, 12)
        total = 992 + step + 1
        assert toks.size == min(total, sched.token_target(layer, total))


def test_head_schedule_monotone():
    cfg = ModelConfig("t", 12, 12, 8, seq_len=16)
    run = run_model(cfg, make_schedule(12, 1.0, 1 / 1.1))
    sizes = [h.size for h in run.kept_heads]
    assert sizes == sorted(sizes, reverse=True) and sizes[-1] < 12


def test_head_granularity_runs_and_cascades():
    cfg = ModelConfig("t", 6, 4, 8, seq_len=30)
    run = run_model(cfg, make_schedule(6, 0.4, 1.0), granularity="head")
    sizes = [t.size for t in run.kept_tokens]
    assert sizes == sorted(sizes, reverse=True)


def test_run_model_determinism():
    cfg = ModelConfig("t", 4, 2, 8, "generation", prompt_len=20, gen_steps=3, mode="mixed", flat_fraction=0.3)
    a = run_model(cfg, make_schedule(4, 0.5, 0.6), arch=ArchConfig())
    b = run_model(cfg, make_schedule(4, 0.5, 0.6), arch=ArchConfig())
    assert a.report.to_dict() == b.report.to_dict()
    assert all(np.array_equal(x, y) for x, y in zip(a.outputs, b.outputs))


def test_synthetic_trace_matches_functional_counts():
    cfg = ModelConfig("t", 6, 4, 16, "generation", prompt_len=60, gen_steps=3)
    sched = make_schedule(6, 0.4, 0.7)
    fun = run_model(cfg, sched).trace
    syn = synthetic_trace(cfg, sched)
    for a, b in zip(fun.layers, syn.layers):
        assert [h.token_ids.size for h in a.heads] == [h.token_ids.size for h in b.heads]


def test_trace_file_roundtrip(tmp_path, rng):
    p = rng.random((3, 2, 4, 6))
    path = tmp_path / "t.bin"
    write_trace(path, p)
    assert path.read_bytes().split(b"\n", 1)[0] == b"4,6,2,3"
    assert np.allclose(read_trace(path), p.astype(np.float32))
    path.write_bytes(b"4,6,2,3\n" + b"\x00" * 10)
    with pytest.raises(ValueError):
        read_trace(path)


def test_importance_from_trace(rng):
    p = rng.random((4, 2, 5, 10))
    p /= p.sum(axis=3, keepdims=True)
    state, kept = importance_from_trace(p, make_schedule(4, 0.5, 1.0))
    assert kept[0].size == 10 and kept[-1].size < 10
    assert all(np.isin(b, a).all() for a, b in zip(kept, kept[1:]))
