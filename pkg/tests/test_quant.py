import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnsim.quant import (QuantParams, QuantTensor, bitwidth_convert, combine_msb_lsb,
                           from_dram_image, msb_only_value, pack_fields, plane_bytes, quantize,
                           split_msb_lsb, to_dram_image, unpack_fields)


def _t(codes, msb=8, lsb=4, scale=1.0):
    return QuantTensor(np.asarray(codes, dtype=np.int64), QuantParams(scale, msb, lsb))


def test_zero_tensor_gets_unit_scale():
    t = quantize(np.zeros((2, 2)), 8)
    assert t.params.scale == 1.0
    assert not t.codes.any()


def test_symmetric_extremes():
    t = quantize([[1.0, -1.0]], 8)
    assert t.codes.tolist() == [[127, -127]]
    assert t.params.scale == pytest.approx(1 / 127)


def test_roundtrip_error_within_half_step(rng):
    x = rng.standard_normal((64, 64))
    t = quantize(x, 12)
    assert np.abs(t.dequantize() - x).max() <= t.params.scale / 2 + 1e-15


def test_rounding_is_half_away_from_zero():
    x = np.array([[127.0, 0.5, -0.5, 1.5, -1.5, 2.5]])
    t = quantize(x, 8)
    assert t.params.scale == 1.0
    assert t.codes.tolist() == [[127, 1, -1, 2, -2, 3]]


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        quantize([[np.nan]], 12)
    with pytest.raises(ValueError):
        quantize([[1.0]], 9)
    with pytest.raises(ValueError):
        QuantParams(0.0, 8, 4)
    with pytest.raises(ValueError):
        QuantParams(1.0, 7, 4)


def test_default_splits():
    assert (quantize([[1.0]], 12).params.msb_bits, quantize([[1.0]], 12).params.lsb_bits) == (12, 0)
    p = quantize([[1.0]], 16).params
    assert (p.msb_bits, p.lsb_bits) == (12, 4)
    p = quantize([[1.0]], 12, msb_bits=8).params
    assert (p.msb_bits, p.lsb_bits) == (8, 4)


def test_split_examples():
    assert [int(v) for v in split_msb_lsb(_t([0]))[0]] == [0]
    msb, lsb = split_msb_lsb(_t([1717]))
    assert (int(msb[0]), int(lsb[0])) == (107, 5)
    assert combine_msb_lsb(msb, lsb, 4)[0] == 1717
    msb, lsb = split_msb_lsb(_t([-1]))
    assert (int(msb[0]), int(lsb[0])) == (-1, 15)
    assert combine_msb_lsb(msb, lsb, 4)[0] == -1


def test_split_rejects_msb_only_tensor():
    with pytest.raises(ValueError):
        split_msb_lsb(_t([3], msb=12, lsb=0))


def test_split_roundtrip_exhaustive_12bit():
    codes = np.arange(-2048, 2048)
    msb, lsb = split_msb_lsb(_t(codes))
    assert np.array_equal(combine_msb_lsb(msb, lsb, 4), codes)
    assert msb.min() >= -128 and msb.max() <= 127
    assert lsb.min() >= 0 and lsb.max() <= 15


def test_msb_only_examples_and_bound():
    assert msb_only_value(_t([1717, 0, -1])).codes.tolist() == [1712, 0, -16]
    codes = np.arange(-2047, 2048)
    t = _t(codes, scale=0.37)
    err = np.abs(t.dequantize() - msb_only_value(t).dequantize())
    assert err.max() < 0.37 * 16


def test_bitwidth_convert_examples():
    assert bitwidth_convert(b"\xff", 4).tolist() == [-1, -1]
    assert bitwidth_convert(b"\x7f", 8).tolist() == [127]
    codes = np.array([-2048, -1, 0, 5, 2047, 100])
    assert bitwidth_convert(pack_fields(codes, 12), 12).tolist() == codes.tolist()
    with pytest.raises(ValueError):
        bitwidth_convert(b"\x00", 12)
    with pytest.raises(ValueError):
        bitwidth_convert(b"\x00", 6)


def test_unaligned_fields_cross_byte_boundaries():
    # 12-bit fields start at bit 0 and bit 12 of a 3-byte stream
    stream = pack_fields([0x123, -0x123], 12)
    assert len(stream) == 3
    assert unpack_fields(stream, 12).tolist() == [0x123, -0x123]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-2047, 2047), min_size=4, max_size=40).filter(lambda v: len(v) % 4 == 0),
       st.sampled_from([(8, 4), (4, 4), (12, 4), (6, 4), (10, 4)]))
def test_dram_image_roundtrip(values, split):
    msb, lsb = split
    lim = 2 ** (msb + lsb - 1) - 1
    codes = np.clip(np.array(values), -lim, lim).reshape(2, -1)
    t = _t(codes, msb, lsb, 0.5)
    mp, lp = to_dram_image(t)
    assert len(mp) == plane_bytes(codes.size, msb)
    assert len(lp) == plane_bytes(codes.size, lsb)
    back = from_dram_image(mp, lp, codes.shape, t.params)
    assert np.array_equal(back.codes, codes)


def test_plane_bytes():
    assert plane_bytes(64, 12) == 96
    assert plane_bytes(3, 4) == 2
