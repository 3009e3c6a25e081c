import pytest
from hypothesis import given
from hypothesis import strategies as st

from uqloc import kvfile


def section(text):
    return kvfile.Section(kvfile.parse(text), "test.cfg")


def test_parse_comments_and_blank_lines():
    entries = kvfile.parse("# header\n\na = 1  # trailing\nb.c = x, y\n")
    assert entries == {"a": "1", "b.c": "x, y"}


@pytest.mark.parametrize("text", ["novalue\n", " = 3\n", "a = 1\na = 2\n"])
def test_parse_errors(text):
    with pytest.raises(kvfile.ConfigError):
        kvfile.parse(text)


def test_typed_getters():
    sec = section("n = 3\nx = 2.5\nf = yes\nl = 1, 2, 3\nt = (1, 2), (3, 4.5)\nc = none\n")
    assert sec.integer("n") == 3
    assert sec.number("x") == 2.5
    assert sec.flag("f") is True
    assert sec.integers("l") == (1, 2, 3)
    assert sec.numbers("l", length=3) == (1.0, 2.0, 3.0)
    assert sec.tuples("t", 2) == [(1.0, 2.0), (3.0, 4.5)]
    assert sec.optional_number("c") is None
    assert sec.number("missing", 7.0) == 7.0


def test_errors_name_the_key():
    sec = section("n = three\nt = (1, 2, 3)\nl = 1, 2\n")
    with pytest.raises(kvfile.ConfigError, match="'n'"):
        sec.integer("n")
    with pytest.raises(kvfile.ConfigError, match="'t'"):
        sec.tuples("t", 2)
    with pytest.raises(kvfile.ConfigError, match="'l'"):
        sec.numbers("l", length=3)
    with pytest.raises(kvfile.ConfigError, match="missing required key 'q'"):
        sec.text("q")


def test_single_tuple():
    assert section("t = (1, 2, 3)\n").tuples("t", 3) == [(1.0, 2.0, 3.0)]


@given(st.dictionaries(
    st.from_regex(r"[a-z][a-z0-9_.]{0,10}", fullmatch=True),
    st.one_of(st.integers(-10**12, 10**12), st.floats(allow_nan=False, allow_infinity=False),
              st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=4)),
    max_size=6,
))
def test_dump_round_trip(entries):
    sec = section(kvfile.dump(entries, header="round trip"))
    for key, value in entries.items():
        if isinstance(value, list):
            assert list(sec.numbers(key)) == value
        elif isinstance(value, int):
            assert sec.integer(key) == value
        else:
            assert sec.number(key) == value


def test_format_numpy_scalars():
    import numpy as np

    assert kvfile.format_value(np.float64(0.5)) == "0.5"
    assert kvfile.format_value(np.int64(3)) == "3"
    assert kvfile.format_value([(1, 2), (3, 4)]) == "(1, 2), (3, 4)"
