"""Random partitions of the domain and per-cell jump heights."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MIN_GAP = 1e-12
MIN_CELL_AREA = 1e-12


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Partition1D:
    """Cells (0, x1], (x1, x2], ..., (x_{tau-1}, 1) of the unit interval."""

    breakpoints: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.ndim != 1:
            raise ValueError("breakpoints must be one-dimensional")
        if b.size and (b[0] <= 0.0 or b[-1] >= 1.0 or np.any(np.diff(b) <= 0.0)):
            raise ValueError("breakpoints must be strictly increasing inside (0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "breakpoints", b)

    @property
    def n_cells(self) -> int:
        return self.breakpoints.size + 1

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([[0.0], self.breakpoints, [1.0]])

    def locate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("point outside [0, 1]")
        return np.searchsorted(self.breakpoints, x, side="left")

    def to_json(self):
        return {"dim": 1, "breakpoints": self.breakpoints.tolist()}


def _line_x(bottom, top, y):
    return bottom + (top - bottom) * y


def _intersect(vb, vt, hl, hr):
    """Intersection of x = vb + (vt - vb) y with y = hl + (hr - hl) x."""
    dv = vt - vb
    dh = hr - hl
    y = (hl + dh * vb) / (1.0 - dh * dv)
    return np.array([vb + dv * y, y])


@dataclass(frozen=True)
class LinePartition2D:
    """Unit square cut by non-crossing 'vertical' and 'horizontal' chords.

    Vertical chord j joins (bottom[j], 0) to (top[j], 1); horizontal chord i
    joins (0, left[i]) to (1, right[i]). Because both families are paired in
    ascending order, chords of one family never cross and every vertical
    chord meets every horizontal chord exactly once. The faces are therefore
    the convex quadrilaterals of a topological grid; cell ``b * n_strips + s``
    lies in horizontal band ``b`` (counted from the bottom) and vertical strip
    ``s`` (counted from the left).
    """

    bottom: np.ndarray
    top: np.ndarray
    left: np.ndarray
    right: np.ndarray
    corners: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("bottom", "top", "left", "right"):
            a = np.asarray(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.bottom.shape != self.top.shape or self.left.shape != self.right.shape:
            raise ValueError("chord endpoint arrays must pair up")
        # boundary sides act as chords x = 0, x = 1, y = 0, y = 1
        vb = np.concatenate([[0.0], self.bottom, [1.0]])
        vt = np.concatenate([[0.0], self.top, [1.0]])
        hl = np.concatenate([[0.0], self.left, [1.0]])
        hr = np.concatenate([[0.0], self.right, [1.0]])
        P = np.empty((hl.size, vb.size, 2))
        for i in range(hl.size):
            for j in range(vb.size):
                P[i, j] = _intersect(vb[j], vt[j], hl[i], hr[i])
        P.setflags(write=False)
        object.__setattr__(self, "corners", P)

    @property
    def n_strips(self) -> int:
        return self.bottom.size + 1

    @property
    def n_bands(self) -> int:
        return self.left.size + 1

    @property
    def n_cells(self) -> int:
        return self.n_strips * self.n_bands

    def cell_polygon(self, c: int) -> np.ndarray:
        b, s = divmod(c, self.n_strips)
        P = self.corners
        return np.array([P[b, s], P[b, s + 1], P[b + 1, s + 1], P[b + 1, s]])

    def cells(self) -> list[np.ndarray]:
        return [self.cell_polygon(c) for c in range(self.n_cells)]

    def cell_areas(self) -> np.ndarray:
        areas = []
        for poly in self.cells():
            x, y = poly[:, 0], poly[:, 1]
            areas.append(0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
        return np.array(areas)

    def chord_segments(self) -> list[np.ndarray]:
        """Interior chords as polylines through their crossing points."""
        P = self.corners
        segs = [P[:, j] for j in range(1, P.shape[1] - 1)]
        segs += [P[i, :] for i in range(1, P.shape[0] - 1)]
        return segs

    def locate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 2:
            raise ValueError("2D points need a trailing axis of length 2")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("point outside [0, 1]^2")
        px, py = x[..., 0], x[..., 1]
        # strictly right of a vertical chord / strictly above a horizontal one;
        # points on a chord go to the lower-index side
        strip = np.zeros(px.shape, dtype=np.int64)
        for b, t in zip(self.bottom, self.top):
            strip += px > _line_x(b, t, py)
        band = np.zeros(px.shape, dtype=np.int64)
        for l, r in zip(self.left, self.right):
            band += py > _line_x(l, r, px)
        return band * self.n_strips + strip

    def to_json(self):
        return {"dim": 2, "bottom": self.bottom.tolist(), "top": self.top.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist()}


def _distinct_sorted_uniforms(k, rng):
    u = np.sort(rng.random(k))
    while k and (u[0] <= 0.0 or np.any(np.diff(u) < MIN_GAP) or 1.0 - u[-1] < MIN_GAP):
        bad = np.zeros(k, dtype=bool)
        bad[0] |= u[0] <= 0.0
        bad[1:] |= np.diff(u) < MIN_GAP
        bad[-1] |= 1.0 - u[-1] < MIN_GAP
        u[bad] = rng.random(int(bad.sum()))
        u = np.sort(u)
    return u


def sample_partition_1d(intensity: float, rng: np.random.Generator) -> Partition1D:
    """Poisson(intensity - 2) + 2 cells with uniform breakpoints.

    ``intensity`` is the expected number of cells.
    """
    if not intensity > 2:
        raise ValueError("intensity must exceed 2 (at least two cells)")
    tau = int(rng.poisson(intensity - 2.0)) + 2
    return Partition1D(_distinct_sorted_uniforms(tau - 1, rng))


def sample_line_partition_2d(line_intensity: float, rng: np.random.Generator) -> LinePartition2D:
    """Random line partition: Poisson(line_intensity) + 1 chords per family."""
    if not line_intensity > 0:
        raise ValueError("line intensity must be positive")
    px = int(rng.poisson(line_intensity))
    py = int(rng.poisson(line_intensity))
    bottom = _distinct_sorted_uniforms(px + 1, rng)
    top = _distinct_sorted_uniforms(px + 1, rng)
    left = _distinct_sorted_uniforms(py + 1, rng)
    right = _distinct_sorted_uniforms(py + 1, rng)
    part = LinePartition2D(bottom, top, left, right)
    for _ in range(100):
        areas = part.cell_areas()
        bad = np.flatnonzero(areas < MIN_CELL_AREA)
        if bad.size == 0:
            return part
        b, s = divmod(int(bad[0]), part.n_strips)
        log.info("perturbing chord endpoints around degenerate cell %d (area %.2e)", bad[0], areas[bad[0]])
        top = top.copy()
        right = right.copy()
        if 0 < s <= top.size:
            top[s - 1] = np.clip(top[s - 1] + 1e-9, MIN_GAP, 1 - MIN_GAP)
        if 0 < b <= right.size:
            right[b - 1] = np.clip(right[b - 1] + 1e-9, MIN_GAP, 1 - MIN_GAP)
        part = LinePartition2D(bottom, np.sort(top), left, np.sort(right))
    raise RuntimeError("could not repair degenerate line partition")


def locate_cell(partition, x) -> np.ndarray:
    return partition.locate(x)


@dataclass(frozen=True)
class JumpHeights:
    values: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < 0):
            raise ValueError("jump heights must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


class UniformHeights:
    """i.i.d. U([lo, hi]) heights; exact, so the bias is always zero."""

    exact = True

    def __init__(self, lo: float, hi: float):
        if not (0.0 <= lo < hi):
            raise ValueError("need 0 <= lo < hi")
        self.lo, self.hi = float(lo), float(hi)

    def from_uniforms(self, u, eps: float = 0.0) -> JumpHeights:
        return JumpHeights(self.lo + (self.hi - self.lo) * np.asarray(u), 0.0)

    def describe(self):
        return {"heights": "uniform", "jump_lo": self.lo, "jump_hi": self.hi}


class ConstantHeights:
    """Preset heights (one value for every cell)."""

    exact = True

    def __init__(self, value: float):
        if value < 0:
            raise ValueError("height must be non-negative")
        self.value = float(value)

    def from_uniforms(self, u, eps: float = 0.0) -> JumpHeights:
        return JumpHeights(np.full(np.shape(u), self.value), 0.0)

    def describe(self):
        return {"heights": "constant", "jump_value": self.value}


def sample_uniform_heights(count: int, lo: float, hi: float, rng: np.random.Generator) -> JumpHeights:
    if count < 1:
        raise ValueError("count must be positive")
    return UniformHeights(lo, hi).from_uniforms(rng.random(count))


def dump_jsonl(path, records):
    """Write (partition, heights) pairs as JSON lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for part, heights in records:
            rec = part.to_json()
            rec["heights"] = np.asarray(heights.values).tolist()
            rec["bias"] = heights.bias
            fh.write(json.dumps(rec) + "\n")
