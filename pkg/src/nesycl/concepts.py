"""Shape and color vocabulary shared by the generator, decomposer and reasoners."""

from __future__ import annotations

from enum import IntEnum


class ShapeKind(IntEnum):
    SQUARE = 0
    TRIANGLE = 1
    CIRCLE = 2
    PENTAGON = 3


class ColorKind(IntEnum):
    BLUE = 0
    RED = 1
    PURPLE = 2
    GREEN = 3
    YELLOW = 4
    ORANGE = 5
    WHITE = 6


PALETTE: dict[ColorKind, tuple[int, int, int]] = {
    ColorKind.BLUE: (40, 90, 255),
    ColorKind.RED: (230, 25, 35),
    ColorKind.PURPLE: (155, 45, 205),
    ColorKind.GREEN: (30, 185, 60),
    ColorKind.YELLOW: (245, 235, 40),
    ColorKind.ORANGE: (255, 140, 0),
    ColorKind.WHITE: (255, 255, 255),
}

BACKGROUND: tuple[int, int, int] = (20, 20, 20)

NUM_SHAPES = len(ShapeKind)
NUM_COLORS = len(ColorKind)
