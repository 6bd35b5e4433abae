"""Raster canvas for drawing the synthetic anatomy shapes as boolean masks."""

import logging
import math

import numpy as np

logger = logging.getLogger(__name__)

SHAPES = ("disc", "ring", "cross", "box", "diamond", "triangle", "bar", "twin")


class MaskCanvas:
    """Boolean canvas; x is the column, y the row. Drawing outside is clipped."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.canvas = np.zeros((height, width), dtype=bool)
        self._ys, self._xs = np.mgrid[0:height, 0:width]

    def set_pixel(self, x: int, y: int, value: bool = True):
        if 0 <= x < self.width and 0 <= y < self.height:
            self.canvas[y, x] = value

    def draw_line(self, x1: int, y1: int, x2: int, y2: int, thickness: int = 1):
        """Bresenham line, thickened with a square brush."""
        half = max(thickness, 1) // 2
        dx = abs(x2 - x1)
        dy = abs(y2 - y1)
        sx = 1 if x1 < x2 else -1
        sy = 1 if y1 < y2 else -1
        err = dx - dy

        x, y = x1, y1
        while True:
            self.fill_rectangle(x - half, y - half, 2 * half + 1, 2 * half + 1)
            if x == x2 and y == y2:
                break
            e2 = 2 * err
            if e2 > -dy:
                err -= dy
                x += sx
            if e2 < dx:
                err += dx
                y += sy

    def fill_rectangle(self, x: int, y: int, width: int, height: int):
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + width, self.width), min(y + height, self.height)
        if x0 < x1 and y0 < y1:
            self.canvas[y0:y1, x0:x1] = True

    def draw_rectangle(self, x: int, y: int, width: int, height: int, thickness: int = 1):
        t = thickness
        self.fill_rectangle(x, y, width, t)  # top
        self.fill_rectangle(x, y + height - t, width, t)  # bottom
        self.fill_rectangle(x, y, t, height)  # left
        self.fill_rectangle(x + width - t, y, t, height)  # right

    def _ellipse(self, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
        return ((self._xs - cx) / max(rx, 0.5)) ** 2 + ((self._ys - cy) / max(ry, 0.5)) ** 2 <= 1.0

    def fill_ellipse(self, cx: float, cy: float, rx: float, ry: float):
        self.canvas |= self._ellipse(cx, cy, rx, ry)

    def draw_ring(self, cx: float, cy: float, r_outer: float, r_inner: float):
        self.canvas |= self._ellipse(cx, cy, r_outer, r_outer) & ~self._ellipse(cx, cy, r_inner, r_inner)

    def fill_diamond(self, cx: float, cy: float, width: float, height: float):
        half_w, half_h = max(width / 2, 0.5), max(height / 2, 0.5)
        self.canvas |= np.abs(self._xs - cx) / half_w + np.abs(self._ys - cy) / half_h <= 1.0

    def fill_triangle(self, cx: float, cy: float, r: float):
        """Upward triangle inscribed in a circle of radius r."""
        top = cy - r
        bottom = cy + r / 2
        inside_rows = (self._ys >= top) & (self._ys <= bottom)
        half = (self._ys - top) / (1.5 * r) * (r * math.sqrt(3) / 2)
        self.canvas |= inside_rows & (np.abs(self._xs - cx) <= half)

    def draw_cross(self, cx: int, cy: int, r: int, thickness: int):
        self.draw_line(cx - r, cy, cx + r, cy, thickness)
        self.draw_line(cx, cy - r, cx, cy + r, thickness)

    def draw_shape(self, kind: str, cx: int, cy: int, r: int):
        """One of SHAPES centred on (cx, cy) with characteristic size r."""
        thick = max(2, r // 3)
        match kind:
            case "disc":
                self.fill_ellipse(cx, cy, r, r)
            case "ring":
                self.draw_ring(cx, cy, r, max(r - thick, 1))
            case "cross":
                self.draw_cross(cx, cy, r, thick)
            case "box":
                self.draw_rectangle(cx - r, cy - r, 2 * r + 1, 2 * r + 1, thick)
            case "diamond":
                self.fill_diamond(cx, cy, 2 * r, 2 * r)
            case "triangle":
                self.fill_triangle(cx, cy, r)
            case "bar":
                self.draw_line(cx - r, cy + r // 2, cx + r, cy - r // 2, thick)
            case "twin":
                self.fill_ellipse(cx - r / 2, cy, r / 2.5, r / 2.5)
                self.fill_ellipse(cx + r / 2, cy, r / 2.5, r / 2.5)
            case _:
                raise ValueError(f"unknown shape {kind!r}")

    def to_array(self) -> np.ndarray:
        return self.canvas.copy()

    def to_string(self) -> str:
        return "\n".join("".join("#" if v else "." for v in row) for row in self.canvas)
