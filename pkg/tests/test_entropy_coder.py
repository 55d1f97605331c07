import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsevox import CorruptBitstreamError
from sparsevox import entropy_coder as ec


def oracle_bits(p1, bits):
    """Ideal codelength summed in plain Python floats."""
    return sum(-math.log2(p if b else 1.0 - p) for p, b in zip(p1, bits))


def test_coin_flips_are_one_bit_each():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, 8000)
    payload = ec.encode(np.full(8000, 0.5), bits)
    assert len(payload) <= 8000 // 8 + 8
    assert np.array_equal(ec.decode(payload, np.full(8000, 0.5)), bits)


def test_skewed_ones():
    payload = ec.encode(np.full(1000, 0.99), np.ones(1000, dtype=int))
    ideal = 1000 * -math.log2(0.99)
    assert ideal == pytest.approx(14.5, abs=0.05)
    assert len(payload) <= math.ceil(ideal / 8) + 8


def test_single_bit_within_termination():
    assert len(ec.encode([0.3], [1])) <= 8


def test_empty_stream():
    payload = ec.RangeEncoder().finish()
    assert len(payload) <= 8
    dec = ec.RangeDecoder(payload)
    assert dec.decode_bits(np.zeros(0)).size == 0
    assert dec.at_end()


def test_deterministic():
    rng = np.random.default_rng(1)
    p, b = rng.uniform(0.01, 0.99, 500), rng.integers(0, 2, 500)
    assert ec.encode(p, b) == ec.encode(p, b)


def test_scalar_and_vector_paths_agree():
    rng = np.random.default_rng(2)
    p, b = rng.uniform(ec.P_MIN, 1 - ec.P_MIN, 3000), rng.integers(0, 2, 3000)
    enc = ec.RangeEncoder()
    for pi, bi in zip(p, b):
        enc.encode_bit(float(pi), int(bi))
    assert enc.finish() == ec.encode(p, b)
    dec = ec.RangeDecoder(ec.encode(p, b))
    assert [dec.decode_bit(float(pi)) for pi in p] == b.tolist()


def test_range_stays_normalised():
    rng = np.random.default_rng(3)
    enc = ec.RangeEncoder()
    for p, b in zip(rng.uniform(ec.P_MIN, 1 - ec.P_MIN, 2000), rng.integers(0, 2, 2000)):
        enc.encode_bit(float(p), int(b))
        assert ec.TOP <= enc.range <= ec.MASK32


def test_wrong_probability_desyncs():
    rng = np.random.default_rng(4)
    n = 400
    p = rng.uniform(0.2, 0.8, n)
    bits = rng.integers(0, 2, n)
    payload = ec.encode(p, bits)
    k = 100
    bad = p.copy()
    bad[k] = 1.0 - bad[k]
    out = ec.RangeDecoder(payload)
    got = [out.decode_bit(float(x)) for x in bad[:k]]
    assert got == bits[:k].tolist()  # everything before the mutation is intact
    try:
        rest = [out.decode_bit(float(x)) for x in bad[k:]]
        changed = rest != bits[k:].tolist() or not out.at_end()
    except CorruptBitstreamError:
        changed = True
    assert changed


def test_truncated_payload_raises():
    rng = np.random.default_rng(5)
    p = rng.uniform(0.3, 0.7, 2000)
    payload = ec.encode(p, rng.integers(0, 2, 2000))
    with pytest.raises(CorruptBitstreamError):
        ec.decode(payload[: len(payload) // 2], p)
    with pytest.raises(CorruptBitstreamError):
        ec.RangeDecoder(b"\x01\x02")


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, float("nan"), ec.P_MIN / 2])
def test_probability_contract(bad):
    with pytest.raises(ValueError):
        ec.RangeEncoder().encode_bit(bad, 1)


def test_quantize_bounds():
    assert ec.quantize(ec.P_MIN) >= 1
    assert ec.quantize(1 - ec.P_MIN) <= ec.PROB_ONE - 1
    assert ec.quantize(0.5) == 1 << 15
    q = ec.quantize_array(np.array([ec.P_MIN, 0.25, 1 - ec.P_MIN]))
    assert q.tolist() == [ec.quantize(ec.P_MIN), ec.quantize(0.25), ec.quantize(1 - ec.P_MIN)]


probs = st.floats(ec.P_MIN, 1 - ec.P_MIN)


@given(st.lists(st.tuples(probs, st.integers(0, 1)), max_size=400))
def test_round_trip_and_bound(pairs):
    p = np.array([a for a, _ in pairs], dtype=np.float64)
    b = np.array([c for _, c in pairs], dtype=np.int64)
    payload = ec.encode(p, b)
    assert np.array_equal(ec.decode(payload, p), b)
    assert 8 * len(payload) <= oracle_bits(p, b) + 64
    assert len(payload) <= oracle_bits(p, b) / 8 + 8


def test_ideal_codelength_matches_oracle():
    rng = np.random.default_rng(6)
    p, b = rng.uniform(0.01, 0.99, 200), rng.integers(0, 2, 200)
    assert ec.ideal_codelength(p, b) == pytest.approx(oracle_bits(p, b), rel=1e-12)
