"""Nine-float spatiotemporal code stored next to every memory-bank embedding.

Layout (fixed): year, month, day, hour, minute, x_center, y_center, width, height.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import astuple, dataclass, fields, replace

import numpy as np

YEAR_MIN = 1990
YEAR_MAX = 2030
CODE_SIZE = 9
X_CENTER_INDEX = 5


class EncodingRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Timestamp:
    year: int
    month: int
    day: int
    hour: int
    minute: int
    second: int = 0

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise EncodingRangeError(f"month {self.month} outside 1..12")
        # Day validity is checked by range only, not per calendar month.
        if not 1 <= self.day <= 31:
            raise EncodingRangeError(f"day {self.day} outside 1..31")
        if not 0 <= self.hour <= 23:
            raise EncodingRangeError(f"hour {self.hour} outside 0..23")
        if not 0 <= self.minute <= 59:
            raise EncodingRangeError(f"minute {self.minute} outside 0..59")
        if not 0 <= self.second <= 59:
            raise EncodingRangeError(f"second {self.second} outside 0..59")

    @classmethod
    def from_datetime(cls, t: _dt.datetime) -> "Timestamp":
        return cls(t.year, t.month, t.day, t.hour, t.minute, t.second)


@dataclass(frozen=True)
class BoxPx:
    """Axis-aligned box in pixels, center format, with its image size."""

    x_center: float
    y_center: float
    width: float
    height: float
    image_width: float
    image_height: float

    def corners(self):
        hw, hh = self.width / 2.0, self.height / 2.0
        return (self.x_center - hw, self.y_center - hh, self.x_center + hw, self.y_center + hh)

    def flipped(self) -> "BoxPx":
        return replace(self, x_center=self.image_width - self.x_center)


@dataclass(frozen=True)
class SpatioTemporalCode:
    year_n: float
    month_n: float
    day_n: float
    hour_n: float
    minute_n: float
    x_center_n: float
    y_center_n: float
    width_n: float
    height_n: float

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "SpatioTemporalCode":
        values = [float(v) for v in values]
        if len(values) != CODE_SIZE:
            raise ValueError(f"expected {CODE_SIZE} values, got {len(values)}")
        return cls(*values)


CODE_FIELDS = tuple(f.name for f in fields(SpatioTemporalCode))


def encode_datetime(t: Timestamp) -> np.ndarray:
    if not YEAR_MIN <= t.year <= YEAR_MAX:
        raise EncodingRangeError(f"year {t.year} outside [{YEAR_MIN}, {YEAR_MAX}]")
    return np.array([
        (t.year - YEAR_MIN) / (YEAR_MAX - YEAR_MIN),
        t.month / 12.0,
        t.day / 31.0,
        t.hour / 24.0,
        t.minute / 60.0,
    ])


def encode_box(b: BoxPx) -> np.ndarray:
    if b.image_width <= 0 or b.image_height <= 0:
        raise ValueError(f"image size must be positive, got {b.image_width}x{b.image_height}")
    return np.array([
        b.x_center / b.image_width,
        b.y_center / b.image_height,
        b.width / b.image_width,
        b.height / b.image_height,
    ])


def encode(t: Timestamp, b: BoxPx) -> SpatioTemporalCode:
    return SpatioTemporalCode.from_array(np.concatenate([encode_datetime(t), encode_box(b)]))


def flip_code(c: SpatioTemporalCode) -> SpatioTemporalCode:
    return replace(c, x_center_n=1.0 - c.x_center_n)


def flip_codes(codes: np.ndarray) -> np.ndarray:
    """Vectorised :func:`flip_code` over an ``(m, 9)`` array."""
    out = np.array(codes, dtype=np.float64, copy=True)
    out[:, X_CENTER_INDEX] = 1.0 - out[:, X_CENTER_INDEX]
    return out
