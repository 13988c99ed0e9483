import math

import numpy as np
import pytest

from attnsim.attention import (AttentionInput, attention_dense, attention_fixed, attention_masked,
                               generation_step, softmax_row, taylor_exp)


def naive_attention(q, k, v, h):
    l0, d_in = q.shape
    l1 = k.shape[0]
    d = d_in // h
    out = np.zeros((l0, d_in))
    for head in range(h):
        for i in range(l0):
            s = [sum(q[i, head * d + t] * k[j, head * d + t] for t in range(d)) / math.sqrt(d)
                 for j in range(l1)]
            m = max(s)
            e = [math.exp(x - m) for x in s]
            z = sum(e)
            for t in range(d):
                out[i, head * d + t] = sum(e[j] / z * v[j, head * d + t] for j in range(l1))
    return out


def test_identity_example():
    eye = np.eye(2)
    res = attention_dense(AttentionInput(eye, eye, eye, 1))
    s = eye / math.sqrt(2)
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    assert np.allclose(res.score[0], s)
    assert np.allclose(res.prob[0], p)
    assert np.allclose(res.out, p)


def test_single_key_copies_value(rng):
    v = rng.standard_normal((1, 8))
    res = attention_dense(AttentionInput(rng.standard_normal((3, 8)), rng.standard_normal((1, 8)), v, 2))
    assert np.all(res.prob == 1.0)
    assert np.array_equal(res.out, np.repeat(v, 3, axis=0))


def test_matches_naive_oracle(rng):
    q, k, v = (rng.standard_normal((8, 64)) for _ in range(3))
    res = attention_dense(AttentionInput(q, k, v, 4))
    assert np.abs(res.out - naive_attention(q, k, v, 4)).max() < 1e-9
    assert np.allclose(res.prob.sum(axis=2), 1, atol=1e-9)


def test_softmax_examples():
    assert np.allclose(softmax_row([0, 0, 0, 0]), 0.25)
    p = softmax_row([10.0, 0.0])
    assert np.allclose(p, [math.exp(10) / (math.exp(10) + 1), 1 / (math.exp(10) + 1)])
    assert softmax_row([5, 99, 5], mask=[0, 2]).tolist() == [0.5, 0.0, 0.5]
    with pytest.raises(ValueError):
        softmax_row([1.0, 2.0], mask=np.zeros(2, dtype=bool))


def test_input_validation(rng):
    with pytest.raises(ValueError):
        AttentionInput(rng.standard_normal((2, 6)), rng.standard_normal((2, 6)), rng.standard_normal((2, 6)), 4)
    with pytest.raises(ValueError):
        AttentionInput(rng.standard_normal((2, 8)), rng.standard_normal((2, 8)), rng.standard_normal((2, 8)), 2,
                       stage="generation")


def test_masked_full_masks_equal_dense(rng):
    inp = AttentionInput(*(rng.standard_normal((5, 16)) for _ in range(3)), 2)
    a = attention_dense(inp)
    b = attention_masked(inp, np.ones(5, bool), np.ones(2, bool))
    assert np.array_equal(a.out, b.out)


def test_masked_token_equals_sliced(rng):
    q, k, v = (rng.standard_normal((6, 16)) for _ in range(3))
    keep = np.array([0, 1, 3, 4, 5])
    a = attention_masked(AttentionInput(q, k, v, 2), keep)
    b = attention_dense(AttentionInput(q, k[keep], v[keep], 2))
    assert np.abs(a.out - b.out).max() < 1e-12
    assert np.all(a.prob[:, :, 2] == 0)


def test_masked_head_zero_chunk(rng):
    inp = AttentionInput(*(rng.standard_normal((4, 16)) for _ in range(3)), 2)
    res = attention_masked(inp, head_mask=[1])
    assert not res.out[:, :8].any()
    assert res.out[:, 8:].any()
    with pytest.raises(ValueError):
        attention_masked(inp, token_mask=np.zeros(4, bool))


def test_permutation_equivariance(rng):
    q = rng.standard_normal((3, 16))
    k, v = rng.standard_normal((7, 16)), rng.standard_normal((7, 16))
    perm = rng.permutation(7)
    a = attention_dense(AttentionInput(q, k, v, 2))
    b = attention_dense(AttentionInput(q, k[perm], v[perm], 2))
    assert np.allclose(a.out, b.out, atol=1e-12)
    assert np.allclose(a.prob[:, :, perm], b.prob, atol=1e-15)


def test_generation_steps(rng):
    d_in = 8
    res, ck, cv = generation_step(None, None, rng.standard_normal(d_in), rng.standard_normal(d_in),
                                  rng.standard_normal(d_in), 2)
    assert ck.shape == (1, d_in)
    assert np.all(res.prob == 1.0)
    _, ck, cv = generation_step(ck, cv, rng.standard_normal(d_in), rng.standard_normal(d_in),
                                rng.standard_normal(d_in), 2)
    q = rng.standard_normal(d_in)
    nk, nv = rng.standard_normal(d_in), rng.standard_normal(d_in)
    res, ck3, cv3 = generation_step(ck, cv, q, nk, nv, 2)
    ref = attention_dense(AttentionInput(q[None], np.vstack([ck, nk]), np.vstack([cv, nv]), 2))
    assert np.array_equal(res.out, ref.out)


def test_generation_context_limit(rng):
    ck = rng.standard_normal((992, 16))
    cv = rng.standard_normal((992, 16))
    for _ in range(32):
        _, ck, cv = generation_step(ck, cv, *(rng.standard_normal(16) for _ in range(3)), 2)
    assert ck.shape[0] == 1024
    with pytest.raises(ValueError):
        generation_step(ck, cv, *(rng.standard_normal(16) for _ in range(3)), 2)


def test_taylor_exp_close_on_normalized_scores():
    x = np.linspace(-4, 0, 50)
    # reported, not asserted tightly: fifth order is rough for large negative inputs
    assert np.abs(taylor_exp(x[-10:]) - np.exp(x[-10:])).max() < 1e-2


def test_fixed_point_out_is_scaled_accumulator(rng):
    q, k, v = (rng.integers(-2047, 2048, (4, 16)) for _ in range(3))
    res = attention_fixed(q, k, v, 0.01, 0.02, 0.03, 2)
    assert np.array_equal(res.out, res.extra["out_acc"] * (0.03 / 4095))
    assert res.extra["out_acc"].dtype == np.int64
