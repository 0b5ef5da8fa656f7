"""Realizations of the jump-diffusion coefficient a = abar + Phi(W_N) + P_eps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .jumps import DomainError, JumpHeights, LinePartition2D, Partition1D
from .spectra import GaussianFieldRealization, SpectrumModel, sample_gaussian_field

INTERFACE_OFFSET = 1e-9


class InvalidCoefficientError(ValueError):
    """Raised when a sampled coefficient is not strictly positive."""


def zero_function(x):
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1] if x.ndim >= 2 and x.shape[-1] == 2 else x.shape
    return np.zeros(shape)


@dataclass(frozen=True)
class CoefficientSample:
    """One pathwise coefficient, evaluable at points of the domain.

    Any of ``field``, ``partition`` may be None: no Gaussian part means
    Phi(0) is used everywhere, no partition means a single cell.
    """

    dim: int
    field: GaussianFieldRealization | None
    partition: Partition1D | LinePartition2D | None
    heights: JumpHeights
    abar: Callable = zero_function
    phi: Callable = np.exp

    @property
    def bias(self) -> float:
        return self.heights.bias

    def _shape(self, x):
        return x.shape[:-1] if self.dim == 2 else x.shape

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 2 and (x.ndim == 0 or x.shape[-1] != 2):
            raise ValueError("2D points need a trailing axis of length 2")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("evaluation point outside the closed unit domain")
        return x

    def gaussian_part(self, x) -> np.ndarray:
        x = self._check(x)
        w = self.field(x) if self.field is not None and self.field.cutoff > 0 else np.zeros(self._shape(x))
        return self.phi(w)

    def jump_part(self, x) -> np.ndarray:
        x = self._check(x)
        if self.partition is None:
            return np.full(self._shape(x), self.heights.values[0])
        return self.heights.values[self.partition.locate(x)]

    def __call__(self, x) -> np.ndarray:
        x = self._check(x)
        a = np.asarray(self.abar(x), dtype=float) + self.gaussian_part(x) + self.jump_part(x)
        if not np.all(np.isfinite(a)) or np.any(a <= 0.0):
            bad = np.flatnonzero(~(np.isfinite(a) & (a > 0)).ravel())[0]
            raise InvalidCoefficientError(
                f"coefficient not strictly positive: a = {a.ravel()[bad]!r} at point index {bad}")
        return a

    evaluate = __call__


def make_coefficient(abar, spectrum: SpectrumModel | None, N: int, noise,
                     partition, heights: JumpHeights, phi: Callable = np.exp,
                     dim: int | None = None) -> CoefficientSample:
    if partition is None:
        n_cells = 1
        dim = dim or (spectrum.dim if spectrum is not None else 1)
    else:
        n_cells = partition.n_cells
        dim = 2 if isinstance(partition, LinePartition2D) else 1
    if heights.values.shape != (n_cells,):
        raise ValueError(f"{heights.values.size} heights for {n_cells} cells")
    if spectrum is not None and spectrum.dim != dim:
        raise ValueError("spectrum and partition dimensions differ")
    field = None
    if spectrum is not None:
        field = sample_gaussian_field(spectrum, N, noise)
    elif N != 0 or np.size(noise) != 0:
        raise ValueError("a Gaussian part needs a spectrum")
    return CoefficientSample(dim, field, partition, heights, abar if abar is not None else zero_function, phi)


def probe_grid_1d(partition: Partition1D | None, n: int = 1001) -> np.ndarray:
    """Equispaced points plus both sides of every breakpoint."""
    pts = [np.linspace(0.0, 1.0, n)]
    if partition is not None and partition.breakpoints.size:
        b = partition.breakpoints
        pts += [b - INTERFACE_OFFSET, b, b + INTERFACE_OFFSET]
    return np.clip(np.unique(np.concatenate(pts)), 0.0, 1.0)


def probe_grid_2d(partition: LinePartition2D | None, n: int = 101, per_chord: int = 101) -> np.ndarray:
    """Tensor grid plus points straddling every chord."""
    g = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = [np.column_stack([X.ravel(), Y.ravel()])]
    if partition is not None:
        s = np.linspace(0.0, 1.0, per_chord)[:, None]
        for b, t in zip(partition.bottom, partition.top):
            p = np.column_stack([b + (t - b) * s[:, 0], s[:, 0]])
            pts += [p - [INTERFACE_OFFSET, 0.0], p + [INTERFACE_OFFSET, 0.0]]
        for l, r in zip(partition.left, partition.right):
            p = np.column_stack([s[:, 0], l + (r - l) * s[:, 0]])
            pts += [p - [0.0, INTERFACE_OFFSET], p + [0.0, INTERFACE_OFFSET]]
    return np.clip(np.concatenate(pts), 0.0, 1.0)


def bounds_probe(sample: CoefficientSample, grid=None) -> tuple[float, float]:
    """(min, max) of the coefficient over a probe grid straddling the interfaces."""
    if grid is None:
        grid = probe_grid_1d(sample.partition) if sample.dim == 1 else probe_grid_2d(sample.partition)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("probe grid is empty")
    a = sample(grid)
    return float(a.min()), float(a.max())


def dump_coefficient_csv(path, sample: CoefficientSample, grid) -> None:
    grid = np.asarray(grid, dtype=float)
    a = sample(grid)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if sample.dim == 1:
            fh.write("x,a\n")
            for x, v in zip(grid, a):
                fh.write(f"{x:.12g},{v:.12g}\n")
        else:
            fh.write("x,y,a\n")
            for (x, y), v in zip(grid, a):
                fh.write(f"{x:.12g},{y:.12g},{v:.12g}\n")
