import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from saas.backbone import sample
from saas.io import (
    canonical_json,
    curve_csv,
    decode_matrix,
    decode_pgm,
    encode_matrix,
    encode_pgm,
    load_trace,
    quantize,
    read_curve_csv,
    read_matrix,
    read_pgm,
    save_trace,
    write_map_pgm,
    write_mask_pgm,
    write_matrix,
)


def test_quantize_example():
    q = quantize(np.array([[0, 0.25], [0.5, 1]]))
    assert q.tolist() == [[0, 16384], [32768, 65535]]


def test_mask_pgm(tmp_path):
    write_mask_pgm(tmp_path / "m.pgm", np.ones((3, 3), bool))
    text = (tmp_path / "m.pgm").read_text()
    assert text.startswith("P2\n3 3\n1\n")
    pixels, maxval = decode_pgm((tmp_path / "m.pgm").read_bytes())
    assert maxval == 1 and np.all(pixels == 1)


@pytest.mark.parametrize("binary", [True, False])
def test_map_round_trip(tmp_path, rng, binary):
    m = rng.random((5, 7))
    write_map_pgm(tmp_path / "a.pgm", m, binary=binary)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == m.shape
    assert np.max(np.abs(back - m)) <= 0.5 / 65535 + 1e-15


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1)))
@settings(deadline=None)
def test_pgm_round_trip_property(m):
    back = decode_pgm(encode_pgm(quantize(m), 65535))[0] / 65535
    assert np.max(np.abs(back - m)) <= 1 / 65535


def test_pgm_8bit_and_comments():
    data = b"P2\n# comment\n2 1\n255\n0 255\n"
    pixels, maxval = decode_pgm(data)
    assert maxval == 255 and pixels.tolist() == [[0, 255]]
    p5 = encode_pgm(np.array([[1, 200]]), 255)
    assert decode_pgm(p5)[0].tolist() == [[1, 200]]


def test_pgm_errors():
    with pytest.raises(ValueError):
        decode_pgm(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        encode_pgm(np.array([[2]]), 1)


def test_matrix_format(tmp_path, rng):
    m = rng.standard_normal((3, 4))
    data = encode_matrix(m)
    assert struct.unpack("<QQ", data[:16]) == (3, 4)
    assert np.frombuffer(data[16:], "<f8").tolist() == m.ravel().tolist()
    write_matrix(tmp_path / "m.f64", m)
    assert read_matrix(tmp_path / "m.f64").tobytes() == m.tobytes()
    with pytest.raises(ValueError):
        decode_matrix(data[:-8])


def test_trace_round_trip(tmp_path, small_layout, small_weights, small_sampler, small_conditions):
    _, trace = sample(small_layout, small_weights, small_sampler, small_conditions, capture=[1, 3])
    entries = save_trace(trace, tmp_path / "trace")
    assert len(entries) == len(trace)
    e = entries[0]
    assert set(e) == {"step", "layer", "head", "rows", "cols", "dtype", "file"}
    assert e["dtype"] == "f64" and e["rows"] == small_layout.total_len
    back = load_trace(tmp_path / "trace")
    for a, b in zip(trace.records(), back.records()):
        assert (a.step, a.layer, a.head) == (b.step, b.layer, b.head)
        assert a.matrix.tobytes() == b.matrix.tobytes()
    only = load_trace(tmp_path / "trace", steps=[2])
    assert only.steps == [2]


def test_missing_trace(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_trace(tmp_path)


def test_csv(tmp_path):
    text = curve_csv([(0, 0.5), (5, 1.0)])
    assert text.splitlines()[0] == "parameter,similarity"
    (tmp_path / "c.csv").write_text(text)
    assert read_curve_csv(tmp_path / "c.csv") == [(0, 0.5), (5, 1.0)]


def test_canonical_json_sorted():
    assert canonical_json({"b": 1, "a": {"d": 2, "c": 3}}) == canonical_json({"a": {"c": 3, "d": 2}, "b": 1})
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})
