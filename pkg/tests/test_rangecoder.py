import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cevc.errors import CapacityError, CorruptionError, DesyncError
from cevc.rangecoder import (TOTAL, CdfTable, Payload, RangeDecoder, ideal_bits, quantize_cdf,
                             rc_decode, rc_encode)


def random_pmfs(rng, n, A):
    p = rng.dirichlet(np.full(A, 0.3), size=n)
    return p / p.sum(axis=1, keepdims=True)


def test_quantize_cdf_even_split():
    np.testing.assert_array_equal(quantize_cdf([0.5, 0.5]).cum, [0, 32768, 65536])


def test_quantize_cdf_keeps_tiny_symbol():
    t = quantize_cdf([1 - 1e-9, 1e-9])
    assert t.freq()[1] >= 1
    np.testing.assert_array_equal(t.cum, [0, 65535, 65536])


def test_quantize_cdf_counts_and_kl():
    rng = np.random.default_rng(0)
    for p in random_pmfs(rng, 20, 40):
        t = quantize_cdf(p)
        f = t.freq()
        assert f.sum() == TOTAL and np.all(f >= 1)
        q = f / TOTAL
        kl = np.sum(np.where(p > 0, p * np.log2(np.where(p > 0, p, 1) / q), 0.0))
        assert kl < 1e-3


def test_quantize_cdf_largest_remainder_by_hand():
    # free = 65533; ideal = (21844.33.., 21844.33.., 21844.33..) -> one leftover unit to index 0
    t = quantize_cdf(np.full(3, 1 / 3))
    np.testing.assert_array_equal(t.freq(), [21846, 21845, 21845])


def test_quantize_cdf_is_deterministic_per_row():
    rng = np.random.default_rng(1)
    p = random_pmfs(rng, 5, 17)
    batch = quantize_cdf(p).cum
    for i in range(5):
        np.testing.assert_array_equal(batch[i], quantize_cdf(p[i]).cum)


def test_quantize_cdf_errors():
    with pytest.raises(CapacityError):
        quantize_cdf(np.full(TOTAL + 1, 1.0 / (TOTAL + 1)))
    with pytest.raises(ValueError):
        quantize_cdf([0.5, 0.4])


def test_round_trip_random_tables():
    rng = np.random.default_rng(2)
    n = 10_000
    A = 9
    tables = quantize_cdf(random_pmfs(rng, n, A), offset=-4)
    sym = np.array([rng.choice(A, p=tables.freq()[i] / TOTAL) for i in range(n)]) - 4
    payload = rc_encode(sym, tables)
    np.testing.assert_array_equal(rc_decode(payload, tables, n), sym)


def test_round_trip_pairs_interface():
    t1 = quantize_cdf([0.2, 0.3, 0.5], offset=-1)
    t2 = quantize_cdf([0.9, 0.1])
    pairs = [(-1, t1), (1, t2), (1, t1), (0, t2)]
    payload = rc_encode(pairs)
    np.testing.assert_array_equal(rc_decode(payload, [t for _, t in pairs]), [-1, 1, 1, 0])


def test_uniform_256_payload_size():
    rng = np.random.default_rng(3)
    t = quantize_cdf(np.full(256, 1 / 256))
    tables = CdfTable(np.tile(t.cum, (1000, 1)))
    payload = rc_encode(rng.integers(0, 256, 1000), tables)
    assert 1000 <= len(payload.data) <= 1012


def test_skewed_stream_is_tiny():
    p = np.full(10, 0.001 / 9)
    p[3] = 0.999
    t = quantize_cdf(p)
    tables = CdfTable(np.tile(t.cum, (10_000, 1)))
    payload = rc_encode(np.full(10_000, 3), tables)
    assert len(payload.data) < 30


def test_payload_within_model_bits():
    rng = np.random.default_rng(4)
    tables = quantize_cdf(random_pmfs(rng, 1000, 30))
    sym = np.array([rng.choice(30, p=tables.freq()[i] / TOTAL) for i in range(1000)])
    bound = ideal_bits(sym, tables)
    bits = 8 * len(rc_encode(sym, tables).data)
    assert bound <= bits <= bound + 256


def test_flipped_byte_is_corruption():
    rng = np.random.default_rng(5)
    tables = quantize_cdf(random_pmfs(rng, 200, 5))
    payload = rc_encode(rng.integers(0, 5, 200), tables)
    data = bytearray(payload.data)
    data[len(data) // 2] ^= 0x10
    with pytest.raises(CorruptionError):
        rc_decode(Payload(bytes(data), payload.count, payload.crc), tables, 200)


def test_empty_stream():
    payload = rc_encode([])
    assert payload.data == b""
    assert rc_decode(payload, [], 0).size == 0


def test_desync_names_symbol_index():
    t = quantize_cdf([0.5, 0.5]).cum.tolist()
    dec = RangeDecoder(b"\xff\xff\xff\xff\xff")
    dec.code = dec.range  # forces a target value past the total
    with pytest.raises(DesyncError) as info:
        dec.decode(t, index=7)
    assert info.value.index == 7


def test_wrong_tables_change_symbols():
    rng = np.random.default_rng(6)
    good = quantize_cdf(random_pmfs(rng, 300, 6))
    bad = quantize_cdf(random_pmfs(rng, 300, 6))
    sym = rng.integers(0, 6, 300)
    payload = rc_encode(sym, good)
    try:
        out = rc_decode(payload, bad, 300)
    except DesyncError:
        return
    assert not np.array_equal(out, sym)


def test_boundary_symbols_round_trip():
    L = 255
    rng = np.random.default_rng(7)
    pmf = random_pmfs(rng, 4, 2 * L + 1)
    tables = quantize_cdf(pmf, offset=-L)
    sym = np.array([-L, L, L, -L])
    np.testing.assert_array_equal(rc_decode(rc_encode(sym, tables), tables, 4), sym)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 60), st.integers(1, 300))
def test_round_trip_property(seed, A, n):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(A, rng.uniform(0.05, 2.0)), size=n)
    tables = quantize_cdf(p / p.sum(axis=1, keepdims=True))
    sym = rng.integers(0, A, n)
    payload = rc_encode(sym, tables)
    np.testing.assert_array_equal(rc_decode(payload, tables, n), sym)
    bound = ideal_bits(sym, tables)
    assert bound <= 8 * len(payload.data) <= bound + 256
