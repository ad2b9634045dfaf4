import datetime as dt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contextbank.encoding import (CODE_FIELDS, BoxPx, EncodingRangeError, SpatioTemporalCode, Timestamp, encode,
                                  encode_box, encode_datetime, flip_code, flip_codes)


def test_year_midpoint():
    assert encode_datetime(Timestamp(2010, 1, 1, 0, 0))[0] == 0.5


def test_month_day_hour_minute():
    out = encode_datetime(Timestamp(2010, 6, 31, 0, 30))
    assert out[1:].tolist() == [0.5, 1.0, 0.0, 0.5]


def test_boundaries():
    out = encode_datetime(Timestamp(1990, 12, 1, 0, 0))
    assert out[0] == 0.0 and out[1] == 1.0
    assert encode_datetime(Timestamp(2030, 1, 1, 23, 59))[0] == 1.0


@pytest.mark.parametrize("year", [1989, 2031])
def test_year_out_of_range(year):
    with pytest.raises(EncodingRangeError):
        encode_datetime(Timestamp(year, 1, 1, 0, 0))


@pytest.mark.parametrize("fields", [(2010, 0, 1, 0, 0), (2010, 13, 1, 0, 0), (2010, 1, 0, 0, 0),
                                    (2010, 1, 32, 0, 0), (2010, 1, 1, 24, 0), (2010, 1, 1, 0, 60)])
def test_timestamp_field_ranges(fields):
    with pytest.raises(EncodingRangeError):
        Timestamp(*fields)


def test_full_image_box():
    assert encode_box(BoxPx(320, 240, 640, 480, 640, 480)).tolist() == [0.5, 0.5, 1.0, 1.0]


def test_x_ratio():
    assert encode_box(BoxPx(160, 240, 10, 10, 640, 480))[0] == 0.25


def test_corner_box():
    assert encode_box(BoxPx(5, 5, 10, 10, 100, 100)).tolist() == [0.05, 0.05, 0.1, 0.1]


def test_zero_image_dimension():
    with pytest.raises(ValueError):
        encode_box(BoxPx(5, 5, 10, 10, 0, 100))


def test_code_layout():
    assert CODE_FIELDS == ("year_n", "month_n", "day_n", "hour_n", "minute_n",
                           "x_center_n", "y_center_n", "width_n", "height_n")
    c = encode(Timestamp(2010, 6, 31, 12, 30), BoxPx(160, 120, 64, 48, 640, 480))
    assert c.to_array().tolist() == [0.5, 0.5, 1.0, 0.5, 0.5, 0.25, 0.25, 0.1, 0.1]
    assert SpatioTemporalCode.from_array(c.to_array()) == c


def test_flip_fixed_point_and_reflection():
    c = SpatioTemporalCode(0, 0, 0, 0, 0, 0.5, 0.3, 0.1, 0.1)
    assert flip_code(c).x_center_n == 0.5
    assert flip_code(SpatioTemporalCode(0, 0, 0, 0, 0, 0.2, 0.3, 0.1, 0.1)).x_center_n == pytest.approx(0.8)


@given(st.floats(0, 1), st.floats(0, 1))
def test_flip_is_involution(x, y):
    c = SpatioTemporalCode(0.1, 0.2, 0.3, 0.4, 0.5, x, y, 0.1, 0.2)
    twice = flip_code(flip_code(c))
    assert twice.x_center_n == pytest.approx(x, abs=1e-15)
    assert flip_code(c).y_center_n == y


def test_flip_codes_matches_flip_code():
    rng = np.random.default_rng(0)
    codes = rng.uniform(size=(6, 9))
    ref = np.array([flip_code(SpatioTemporalCode.from_array(r)).to_array() for r in codes])
    np.testing.assert_array_equal(flip_codes(codes), ref)


def test_box_flip_mirrors_code():
    b = BoxPx(100, 50, 20, 10, 640, 480)
    t = Timestamp(2012, 6, 1, 0, 0)
    assert encode(t, b.flipped()).x_center_n == pytest.approx(flip_code(encode(t, b)).x_center_n, abs=1e-15)


@given(st.datetimes(min_value=dt.datetime(1990, 1, 1), max_value=dt.datetime(2030, 12, 31)))
def test_all_components_in_unit_interval(t):
    out = encode_datetime(Timestamp.from_datetime(t))
    assert np.all((out >= 0) & (out <= 1))
