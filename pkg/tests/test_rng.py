import math

import numpy as np

from matlora.rng import Pcg32, normal_matrix


def test_reference_stream():
    # Canonical PCG32 demo values for seed=42, stream=54.
    r = Pcg32(42, 54)
    expected = [0xA15C02B7, 0x7B47F409, 0xBA1D3330, 0x83D2F293, 0xBFA4784B, 0xCBED606E]
    assert [r.next_uint32() for _ in range(6)] == expected


def test_streams_are_independent():
    a = Pcg32(7, 1)
    b = Pcg32(7, 2)
    assert [a.next_uint32() for _ in range(8)] != [b.next_uint32() for _ in range(8)]


def test_same_seed_same_sequence():
    a = Pcg32(123, 9)
    b = Pcg32(123, 9)
    assert [a.uniform() for _ in range(100)] == [b.uniform() for _ in range(100)]


def test_uniform_range():
    r = Pcg32(5)
    us = [r.uniform() for _ in range(10000)]
    assert all(0.0 <= u < 1.0 for u in us)
    assert abs(sum(us) / len(us) - 0.5) < 0.02


def test_gauss_pair_matches_box_muller_formula():
    probe = Pcg32(11, 3)
    raw = [probe.next_uint32() for _ in range(2)]
    u1 = (raw[0] + 1) * 2.0**-32
    u2 = raw[1] * 2.0**-32
    expect = (
        math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2),
        math.sqrt(-2.0 * math.log(u1)) * math.sin(2.0 * math.pi * u2),
    )
    r = Pcg32(11, 3)
    assert r.gauss_pair() == expect


def test_gauss_moments():
    r = Pcg32(17)
    zs = np.array([r.gauss() for _ in range(20000)])
    assert abs(zs.mean()) < 0.03
    assert abs(zs.std() - 1.0) < 0.03


def test_normal_matrix_row_major_order():
    a = normal_matrix(Pcg32(3, 1), 2, 3)
    r = Pcg32(3, 1)
    flat = [r.gauss() for _ in range(6)]
    assert a.shape == (2, 3)
    assert list(a.reshape(-1)) == flat
