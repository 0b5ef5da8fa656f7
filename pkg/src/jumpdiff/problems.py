"""Problem definitions, coupled sample draws and per-level pathwise solves."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import fem1d, fem2d, rng
from .coefficient import CoefficientSample, make_coefficient, zero_function
from .gig import GigHeights
from .jumps import ConstantHeights, JumpHeights, UniformHeights, sample_line_partition_2d, sample_partition_1d
from .spectra import SpectrumModel, make_spectrum


@dataclass(frozen=True)
class Problem:
    """Everything that defines the random elliptic problem and its levels.

    ``intensity`` is the expected cell count in 1D and the chord intensity
    per direction in 2D; ``None`` means a single cell. Level thresholds are
    ``h_base * 2**-level``.
    """

    name: str
    dim: int
    spectrum: SpectrumModel | None
    intensity: float | None
    heights: UniformHeights | GigHeights | ConstantHeights
    f: float | Callable = 1.0
    h_base: float = 0.5
    bc: fem2d.MixedBC = fem2d.HOMOGENEOUS_DIRICHLET
    theta_min: float = fem2d.DEFAULT_MIN_ANGLE
    quadrature: str = "midpoint"
    abar: Callable = zero_function
    phi: Callable = np.exp
    params: dict = field(default_factory=dict, compare=False)

    def h_level(self, level: int) -> float:
        return self.h_base * 2.0 ** (-level)

    @property
    def deterministic(self) -> bool:
        """True when no part of the coefficient is random."""
        return self.spectrum is None and self.intensity is None and isinstance(self.heights, ConstantHeights)

    def oracle_values(self) -> np.ndarray:
        """Quadrature-oracle solution on the reference grid (deterministic 1D problems only)."""
        if self.dim != 1 or not self.deterministic:
            raise ValueError("the oracle reference needs a deterministic 1D problem")
        coeff = make_coefficient(self.abar, None, 0, np.empty(0), None, self.heights.from_uniforms(np.zeros(1)),
                                 self.phi, dim=1)
        return fem1d.oracle_solve_1d(coeff, self.f)(fem1d.REF_GRID_1D)

    @property
    def grid_size(self) -> int:
        return fem1d.REF_GRID_1D.size if self.dim == 1 else fem2d.REF_N_2D**2

    def sample_partition(self, stream: np.random.Generator):
        if self.intensity is None:
            return None
        if self.dim == 1:
            return sample_partition_1d(self.intensity, stream)
        return sample_line_partition_2d(self.intensity, stream)

    def mesh(self, partition, level: int, adaptive: bool):
        h = self.h_level(level)
        if self.dim == 1:
            return fem1d.adaptive_mesh_1d(partition, h) if adaptive else fem1d.uniform_mesh_1d(h)
        return fem2d.triangulate_conforming(partition, h, self.theta_min) if adaptive else fem2d.uniform_tri_mesh(h)

    def solve(self, coeff: CoefficientSample, mesh):
        """Pathwise FEM solve, prolonged to the flattened reference grid."""
        if self.dim == 1:
            sol = fem1d.assemble_solve_1d(coeff, self.f, mesh, self.quadrature)
            return fem1d.prolong_1d(sol)
        quad = "centroid" if self.quadrature == "midpoint" else self.quadrature
        u = fem2d.assemble_solve_2d(coeff, self.f, mesh, self.bc, quad)
        return fem2d.prolong_2d(mesh, u).ravel()

    def h1_norm_sq(self, d) -> float:
        if self.dim == 1:
            return float(fem1d.h1_norm_sq_batch(d)[0])
        return fem2d.h1_norm_sq_2d(np.reshape(d, (fem2d.REF_N_2D, fem2d.REF_N_2D)))

    def h1_dist(self, a, b) -> float:
        return math.sqrt(self.h1_norm_sq(np.asarray(a) - np.asarray(b)))

    def describe(self) -> dict:
        out = {"problem": self.name, "dim": self.dim, "h_base": self.h_base, "f": self.f if not callable(self.f) else "callable",
               "theta_min": self.theta_min, "quadrature": self.quadrature}
        out["spectrum"] = self.spectrum.kind if self.spectrum is not None else "none"
        if self.spectrum is not None:
            out.update({f"spectrum_{k}": v for k, v in self.spectrum.params.items()})
        out["intensity"] = self.intensity if self.intensity is not None else "none"
        out.update(self.heights.describe())
        out.update(self.params)
        return out


class SampleDraw:
    """The randomness of one outcome omega, shared by every level that uses it.

    Partition, height uniforms and Gaussian noise come from three disjoint
    counter-based streams keyed by (master, purpose, replication, level, index).
    Noise of any length is a prefix of the same sequence.
    """

    def __init__(self, problem: Problem, master: int, purpose: int, replication: int, level: int, index: int):
        self.problem = problem
        self.key = (master, purpose, replication, level, index)
        self._partition = None
        self._partition_done = False
        self._uniforms = None
        self._noise = np.empty(0)

    def _stream(self, kind):
        return rng.stream(rng.seed_label(*self.key, stream=kind))

    @property
    def partition(self):
        if not self._partition_done:
            self._partition = self.problem.sample_partition(self._stream(rng.PARTITION))
            self._partition_done = True
        return self._partition

    @property
    def height_uniforms(self) -> np.ndarray:
        if self._uniforms is None:
            n = 1 if self.partition is None else self.partition.n_cells
            self._uniforms = self._stream(rng.HEIGHTS).random(n)
        return self._uniforms

    def noise(self, n: int) -> np.ndarray:
        if n > self._noise.size:
            self._noise = self._stream(rng.NOISE).standard_normal(n)
        return self._noise[:n]

    def coefficient(self, N: int, eps: float) -> CoefficientSample:
        p = self.problem
        heights = p.heights.from_uniforms(self.height_uniforms, eps)
        N = N if p.spectrum is not None else 0
        return make_coefficient(p.abar, p.spectrum, N, self.noise(N), self.partition, heights, p.phi, dim=p.dim)


@dataclass
class LevelResult:
    values: np.ndarray
    realized_h: float
    bias: float
    uniforms: np.ndarray | None = None
    heights: np.ndarray | None = None


def solve_level(draw: SampleDraw, level: int, N: int, eps: float, adaptive: bool, keep_heights: bool = False) -> LevelResult:
    p = draw.problem
    coeff = draw.coefficient(N, eps)
    mesh = p.mesh(draw.partition, level, adaptive)
    vals = p.solve(coeff, mesh)
    res = LevelResult(vals, mesh.realized_h, coeff.bias)
    if keep_heights:
        res.uniforms = draw.height_uniforms
        res.heights = coeff.heights.values
    return res


# ---------------------------------------------------------------- presets

PRESETS = ("bm-uniform-1d", "se-gig-1d", "hetero-2d", "custom")

PRESET_DEFAULTS = {
    "bm-uniform-1d": {"dim": 1, "spectrum": "brownian-motion-1d", "intensity": 12.0, "heights": "uniform",
                      "jump_lo": 0.0, "jump_hi": 10.0, "f": 1.0, "h_base": 0.5},
    "se-gig-1d": {"dim": 1, "spectrum": "squared-exponential-nystrom-1d", "v": 1.0, "r": 0.1, "nystrom_points": 200,
                  "intensity": 12.0, "heights": "gig", "gig_psi": 0.25, "gig_chi": 9.0, "gig_lambda": -1.0,
                  "f": 1.0, "h_base": 0.5},
    "hetero-2d": {"dim": 2, "spectrum": "heat-kernel-2d", "v": 0.25, "r": 0.02, "intensity": 1.0, "heights": "uniform",
                  "jump_lo": 0.0, "jump_hi": 5.0, "f": 1.0, "h_base": 0.4, "bc": "dirichlet", "theta": 15.0},
    "custom": {"dim": 1, "spectrum": "none", "intensity": "none", "heights": "constant", "jump_value": 0.0,
               "f": 1.0, "h_base": 0.5, "bc": "dirichlet"},
}

PROBLEM_KEYS = {"dim", "spectrum", "v", "r", "nystrom_points", "intensity", "heights", "jump_lo", "jump_hi",
                "jump_value", "gig_psi", "gig_chi", "gig_lambda", "f", "h_base", "bc", "theta", "quadrature"}


def _none_or_float(v):
    if v is None or (isinstance(v, str) and v.lower() == "none"):
        return None
    return float(v)


def make_problem(preset: str, **overrides) -> Problem:
    if preset not in PRESET_DEFAULTS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    cfg = dict(PRESET_DEFAULTS[preset])
    unknown = set(overrides) - PROBLEM_KEYS
    if unknown:
        raise ValueError(f"unknown problem parameter(s): {', '.join(sorted(unknown))}")
    cfg.update(overrides)
    dim = int(cfg["dim"])
    kind = str(cfg["spectrum"])
    spec_params = {k: float(cfg[k]) for k in ("v", "r") if k in cfg}
    if "nystrom_points" in cfg:
        spec_params["nystrom_points"] = int(cfg["nystrom_points"])
    spectrum = make_spectrum(kind, **spec_params)
    if spectrum is not None and spectrum.dim != dim:
        raise ValueError(f"spectrum {kind} does not match dim={dim}")
    hk = str(cfg["heights"])
    if hk == "uniform":
        heights = UniformHeights(float(cfg.get("jump_lo", 0.0)), float(cfg.get("jump_hi", 1.0)))
    elif hk == "gig":
        heights = GigHeights(float(cfg["gig_psi"]), float(cfg["gig_chi"]), float(cfg["gig_lambda"]))
    elif hk == "constant":
        heights = ConstantHeights(float(cfg.get("jump_value", 0.0)))
    else:
        raise ValueError(f"unknown heights model {hk!r}")
    bc_name = str(cfg.get("bc", "dirichlet"))
    if bc_name == "dirichlet":
        bc = fem2d.HOMOGENEOUS_DIRICHLET
    elif bc_name == "mixed":
        bc = fem2d.FLOW_BC
    else:
        raise ValueError(f"unknown boundary preset {bc_name!r}")
    quad = str(cfg.get("quadrature", "midpoint"))
    return Problem(
        name=preset, dim=dim, spectrum=spectrum, intensity=_none_or_float(cfg["intensity"]), heights=heights,
        f=float(cfg["f"]), h_base=float(cfg["h_base"]), bc=bc, theta_min=float(cfg.get("theta", 15.0)),
        quadrature=quad, params={"bc": bc_name} if dim == 2 else {})


def with_heights(problem: Problem, heights) -> Problem:
    return replace(problem, heights=heights)
