import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from stadm.container import decode_container, encode_container, read_container, write_container
from stadm.errors import DataError, ParseError

names = st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=12)
arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(allow_nan=False))


@given(st.dictionaries(names, arrays, max_size=4), st.dictionaries(names, st.integers(), max_size=3))
def test_round_trip(arrs, header):
    h, back = decode_container(encode_container(header, arrs))
    assert h == header
    assert set(back) == set(arrs)
    for k, v in arrs.items():
        assert back[k].shape == v.shape and back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_encoding_is_order_independent():
    a, b = np.ones(2), np.zeros((1, 3))
    assert encode_container({"x": 1}, {"a": a, "b": b}) == encode_container({"x": 1}, {"b": b, "a": a})


def test_parse_errors():
    blob = encode_container({"k": "v"}, {"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(ParseError, match="magic"):
        decode_container(b"NOPE" + blob[4:])
    with pytest.raises(ParseError, match="data of w"):
        decode_container(blob[:-8])
    with pytest.raises(ParseError, match="trailing"):
        decode_container(blob + b"\0")
    with pytest.raises(ParseError, match="version"):
        decode_container(blob[:4] + (7).to_bytes(4, "little") + blob[8:])


def test_file_round_trip_and_missing(tmp_path):
    write_container(tmp_path / "c.stpk", {"a": 1}, {"x": np.array([1.5])})
    header, arrs = read_container(tmp_path / "c.stpk")
    assert header == {"a": 1} and arrs["x"].tolist() == [1.5]
    assert [p.name for p in tmp_path.iterdir()] == ["c.stpk"]
    with pytest.raises(DataError):
        read_container(tmp_path / "missing.stpk")
