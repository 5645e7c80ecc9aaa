"""Shared domain types and scan-grid geometry.

The scan grid is an abstract index space: scan index k runs 0..K-1 in
snake (boustrophedon) order, row-major with even rows traversed left to
right. Nothing here assumes metric spacing between sample sites.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Any, Mapping

from .errors import ConfigError

SNAKE_ROW_MAJOR = "snake_row_major"

RANGING_MODES = ("short", "long")
LAYOUT_NAMES = ("3x3-wide", "4x4", "3x6", "8x8")


@dataclass(frozen=True)
class SensorConfig:
    """Static sensor description. ranging_mode is metadata only and never
    changes processing behavior."""

    pixel_count: int = 9
    bin_count: int = 128
    layout_name: str = "3x3-wide"
    ranging_mode: str = "short"
    max_count: int = 65535

    def __post_init__(self) -> None:
        if self.pixel_count < 1:
            raise ConfigError(f"pixel_count must be >= 1, got {self.pixel_count}")
        if self.bin_count < 1:
            raise ConfigError(f"bin_count must be >= 1, got {self.bin_count}")
        if self.max_count < 1:
            raise ConfigError(f"max_count must be >= 1, got {self.max_count}")
        if self.layout_name not in LAYOUT_NAMES:
            raise ConfigError(
                f"unknown layout_name {self.layout_name!r}, expected one of {LAYOUT_NAMES}"
            )
        if self.ranging_mode not in RANGING_MODES:
            raise ConfigError(
                f"unknown ranging_mode {self.ranging_mode!r}, expected one of {RANGING_MODES}"
            )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SensorConfig":
        return cls(
            pixel_count=int(d["pixel_count"]),
            bin_count=int(d["bin_count"]),
            layout_name=str(d["layout_name"]),
            ranging_mode=str(d["ranging_mode"]),
            max_count=int(d["max_count"]),
        )


@dataclass(frozen=True)
class GridSpec:
    """Scan-grid geometry. Only snake_row_major ordering is implemented;
    the order tag travels with every dataset so captures using a different
    convention can declare it."""

    cols: int = 80
    rows: int = 45
    order: str = SNAKE_ROW_MAJOR

    def __post_init__(self) -> None:
        if self.cols < 1 or self.rows < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.cols}x{self.rows}")
        if self.order != SNAKE_ROW_MAJOR:
            raise ConfigError(f"unsupported scan order {self.order!r}")

    @property
    def point_count(self) -> int:
        """Total number of scan points K."""
        return self.cols * self.rows

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GridSpec":
        return cls(cols=int(d["cols"]), rows=int(d["rows"]), order=str(d["order"]))


@dataclass(frozen=True)
class RgbFrameSpec:
    """RGB frame size in pixels."""

    width: int = 848
    height: int = 480

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"frame must be at least 1x1, got {self.width}x{self.height}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RgbFrameSpec":
        return cls(width=int(d["width"]), height=int(d["height"]))


def snake_index_to_cell(k: int, grid: GridSpec) -> tuple[int, int]:
    """Map scan index k to its (row, col) grid cell under snake ordering.

    Even rows run left to right, odd rows right to left.
    """
    if not 0 <= k < grid.point_count:
        raise IndexError(f"scan index {k} out of range for {grid.cols}x{grid.rows} grid")
    row, offset = divmod(k, grid.cols)
    col = offset if row % 2 == 0 else grid.cols - 1 - offset
    return row, col


def snake_cell_to_index(row: int, col: int, grid: GridSpec) -> int:
    """Inverse of snake_index_to_cell."""
    if not 0 <= row < grid.rows:
        raise IndexError(f"row {row} out of range for {grid.cols}x{grid.rows} grid")
    if not 0 <= col < grid.cols:
        raise IndexError(f"col {col} out of range for {grid.cols}x{grid.rows} grid")
    offset = col if row % 2 == 0 else grid.cols - 1 - col
    return row * grid.cols + offset
