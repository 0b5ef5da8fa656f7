"""Covariance spectra and truncated Karhunen-Loeve sampling.

Three covariance models are supported:

* ``brownian-motion-1d``: closed-form pairs
  ``eta_i = (8 / ((2i+1) pi))**2``, ``e_i(x) = sin((2i+1) pi x / 2)``, i >= 0.
* ``heat-kernel-2d``: closed-form pairs ``eta_i = v exp(-pi^2 i^2 r^2)``,
  ``e_i(x) = sin(pi i x1) sin(pi i x2)``, i >= 1.
* ``squared-exponential-nystrom-1d``: eigenpairs of the kernel
  ``v exp(-|x-y|^2 / (2 r^2))`` on (0, 1), approximated by Nystrom's method on
  a Gauss-Legendre grid.

KL modes are numbered from 1. For the Brownian-motion basis, which is indexed
from 0, mode ``k`` is the analytic pair ``i = k - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import polygamma

DEFAULT_CACHE_CAP = 4096
ANALYTIC_CAP = 1 << 22


class SpectrumError(RuntimeError):
    pass


class CutoffError(SpectrumError):
    """The requested tail target is out of reach within the mode cap."""

    def __init__(self, target, cap, tail_at_cap):
        self.target = target
        self.cap = cap
        super().__init__(
            f"cannot reach tail target {target:.3e}: hard cap of {cap} modes "
            f"leaves Xi_cap = {tail_at_cap:.3e}")


@dataclass(frozen=True)
class EigenPair:
    index: int
    value: float
    eigenfunction: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"negative eigenvalue {self.value} at index {self.index}")


def _check_unit_box(x, dim):
    x = np.asarray(x, dtype=float)
    if dim == 2 and x.shape[-1] != 2:
        raise ValueError("2D evaluation points need a trailing axis of length 2")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("evaluation point outside the closed unit domain")
    return x


def bm_eigenpair(i: int) -> EigenPair:
    if i < 0:
        raise ValueError("Brownian-motion eigenpairs are indexed from 0")
    freq = (2 * i + 1) * np.pi / 2

    def e(x):
        return np.sin(freq * np.asarray(x, dtype=float))

    return EigenPair(i, (8.0 / ((2 * i + 1) * np.pi)) ** 2, e)


def heat2d_eigenpair(i: int, v: float, r: float) -> EigenPair:
    if i < 1 or v <= 0 or r <= 0:
        raise ValueError("need i >= 1, v > 0, r > 0")

    def e(x):
        x = np.asarray(x, dtype=float)
        return np.sin(np.pi * i * x[..., 0]) * np.sin(np.pi * i * x[..., 1])

    return EigenPair(i, v * np.exp(-np.pi ** 2 * i ** 2 * r ** 2), e)


def _odd_sine_series(theta, coeffs, block=128):
    """Sum_k coeffs[k] * sin((2k+1) theta) for every entry of ``theta``.

    Long series are evaluated blockwise as Im(exp(i(2kB+1)theta) * P(theta))
    with P a short trigonometric polynomial shared by all blocks, so the bulk
    of the work is a single complex matrix product.
    """
    theta = np.asarray(theta, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    n = coeffs.size
    if n == 0:
        return np.zeros_like(theta)
    if n <= block:
        return np.sin(np.multiply.outer(theta, 2 * np.arange(n) + 1)) @ coeffs
    nblk = -(-n // block)
    padded = np.zeros(nblk * block)
    padded[:n] = coeffs
    t = theta.ravel()
    out = np.empty(t.size)
    step = max(1, (1 << 21) // nblk)  # bounds the work arrays to ~32 MB each
    for s in range(0, t.size, step):
        tc = t[s:s + step]
        inner = np.exp(1j * 2 * np.multiply.outer(tc, np.arange(block))) @ padded.reshape(nblk, block).T
        base = np.exp(1j * np.multiply.outer(tc, 2 * block * np.arange(nblk) + 1))
        out[s:s + step] = np.einsum("pk,pk->p", base, inner).imag
    return out.reshape(theta.shape)


class SpectrumModel:
    """Eigenpair source for one covariance operator.

    ``eigenvalues(n)`` returns the KL weights of modes 1..n and
    ``evaluate(coeffs, x)`` returns ``sum_k coeffs[k] e_k(x)``.
    """

    kind: str = ""
    dim: int = 1

    def __init__(self, params: dict, cap: int):
        self.params = dict(params)
        self.cap = int(cap)

    def eigenvalues(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def eigenfunctions(self, x, n: int) -> np.ndarray:
        raise NotImplementedError

    def pair(self, k: int) -> EigenPair:
        raise NotImplementedError

    def trace(self) -> float:
        raise NotImplementedError

    def xi_tail(self, N: int) -> float:
        raise NotImplementedError

    def evaluate(self, coeffs, x) -> np.ndarray:
        x = _check_unit_box(x, self.dim)
        coeffs = np.asarray(coeffs, dtype=float)
        return self.eigenfunctions(x, coeffs.size) @ coeffs

    def _check_order(self, values):
        if np.any(values < 0) or np.any(np.diff(values) > 0):
            raise SpectrumError(f"{self.kind}: eigenvalues must be non-negative and non-increasing")

    def __repr__(self):
        return f"{type(self).__name__}({self.params})"


class BrownianSpectrum(SpectrumModel):
    kind = "brownian-motion-1d"
    dim = 1

    def __init__(self, cap: int = ANALYTIC_CAP):
        super().__init__({}, cap)
        self._check_order(self.eigenvalues(64))

    def eigenvalues(self, n):
        i = np.arange(n)
        return (8.0 / ((2 * i + 1) * np.pi)) ** 2

    def eigenfunctions(self, x, n):
        x = np.asarray(x, dtype=float)
        return np.sin(np.multiply.outer(x, (2 * np.arange(n) + 1) * np.pi / 2))

    def pair(self, k):
        return bm_eigenpair(k - 1)

    def trace(self):
        return 8.0

    def xi_tail(self, N):
        if N < 0:
            raise ValueError("N must be non-negative")
        # sum_{i>=N} 1/(2i+1)^2 = trigamma(N + 1/2) / 4
        return float(16.0 / np.pi ** 2 * polygamma(1, N + 0.5))

    def evaluate(self, coeffs, x):
        x = _check_unit_box(x, 1)
        return _odd_sine_series(x * (np.pi / 2), coeffs)


class HeatKernel2DSpectrum(SpectrumModel):
    kind = "heat-kernel-2d"
    dim = 2

    def __init__(self, v: float = 0.25, r: float = 0.02, cap: int = ANALYTIC_CAP):
        if v <= 0 or r <= 0:
            raise ValueError("v and r must be positive")
        super().__init__({"v": v, "r": r}, cap)
        self.v, self.r = float(v), float(r)
        # terms beyond this index are below 1e-17 and are dropped from tails
        n_sig = int(np.ceil(np.sqrt(max(np.log(self.v / 1e-17), 1.0)) / (np.pi * self.r))) + 2
        terms = self.eigenvalues(n_sig)
        self._tails = np.concatenate([np.cumsum(terms[::-1])[::-1], [0.0]])
        self._check_order(terms)

    def eigenvalues(self, n):
        i = np.arange(1, n + 1)
        return self.v * np.exp(-np.pi ** 2 * i ** 2 * self.r ** 2)

    def eigenfunctions(self, x, n):
        x = np.asarray(x, dtype=float)
        k = np.pi * np.arange(1, n + 1)
        return np.sin(np.multiply.outer(x[..., 0], k)) * np.sin(np.multiply.outer(x[..., 1], k))

    def pair(self, k):
        return heat2d_eigenpair(k, self.v, self.r)

    def trace(self):
        return float(self._tails[0])

    def xi_tail(self, N):
        if N < 0:
            raise ValueError("N must be non-negative")
        return float(self._tails[min(N, self._tails.size - 1)])


class NystromSpectrum(SpectrumModel):
    """Squared-exponential kernel on (0, 1) via Nystrom's method.

    Eigenfunctions are rescaled to unit sup-norm (checked on the quadrature
    nodes and a 1001-point probe grid); each KL weight is the operator
    eigenvalue times the squared scale, so ``eta_k e_k(x) e_k(y)`` and hence
    the law of the field are unchanged. ``operator_values`` keeps the
    L2-normalised eigenvalues, which satisfy the trace identity
    ``sum eta = v |D|``.
    """

    kind = "squared-exponential-nystrom-1d"
    dim = 1

    def __init__(self, v: float = 1.0, r: float = 0.1, n: int = 200,
                 cap: int = DEFAULT_CACHE_CAP, rel_cut: float = 1e-13):
        if n < 8:
            raise ValueError("Nystrom grid needs n >= 8")
        if v <= 0 or r <= 0:
            raise ValueError("v and r must be positive")
        super().__init__({"v": v, "r": r, "nystrom-points": n}, cap)
        self.v, self.r, self.n = float(v), float(r), int(n)
        t, w = np.polynomial.legendre.leggauss(n)
        self.nodes = 0.5 * (t + 1.0)
        self.weights = 0.5 * w
        sw = np.sqrt(self.weights)
        B = sw[:, None] * self._kernel(self.nodes, self.nodes) * sw[None, :]
        try:
            lam, vec = np.linalg.eigh(B)
        except np.linalg.LinAlgError as exc:
            raise SpectrumError(
                f"Nystrom eigendecomposition failed (n={n}, cond={np.linalg.cond(B):.3e})") from exc
        order = np.argsort(lam)[::-1]
        lam = np.clip(lam[order], 0.0, None)
        vec = vec[:, order]
        self.all_operator_values = lam
        keep = int(np.sum(lam > rel_cut * lam[0]))
        lam, vec = lam[:keep], vec[:, :keep]
        phi_nodes = vec / sw[:, None]
        # e_k(x) = (1/lam_k) sum_j w_j k(x, x_j) phi_k(x_j)
        interp = self.weights[:, None] * phi_nodes / lam[None, :]
        probe = np.union1d(self.nodes, np.linspace(0.0, 1.0, 1001))
        sup = np.max(np.abs(self._kernel(probe, self.nodes) @ interp), axis=0)
        self._interp = interp / sup[None, :]
        self.operator_values = lam
        self._values = lam * sup ** 2
        self.cap = min(self.cap, keep)
        self._check_order(self.operator_values)

    def _kernel(self, x, y):
        d = np.subtract.outer(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return self.v * np.exp(-d ** 2 / (2 * self.r ** 2))

    def _take(self, n):
        if n > self._values.size:
            raise CutoffError(np.nan, self._values.size, self.xi_tail(self._values.size))
        return n

    def eigenvalues(self, n):
        return self._values[: self._take(n)].copy()

    def eigenfunctions(self, x, n):
        return self._kernel(x, self.nodes) @ self._interp[:, : self._take(n)]

    def evaluate(self, coeffs, x):
        x = _check_unit_box(x, 1)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.size == 0:
            return np.zeros(np.shape(x))
        return self._kernel(x, self.nodes) @ (self._interp[:, : self._take(coeffs.size)] @ coeffs)

    def pair(self, k):
        self._take(k)
        col = self._interp[:, k - 1]
        return EigenPair(k, float(self._values[k - 1]), lambda x: self._kernel(x, self.nodes) @ col)

    def trace(self):
        return self.v * 1.0

    def xi_tail(self, N):
        if N < 0:
            raise ValueError("N must be non-negative")
        return float(max(self.trace() - np.sum(self.operator_values[:N]), 0.0))


def nystrom_spectrum(v: float, r: float, n: int) -> NystromSpectrum:
    return NystromSpectrum(v=v, r=r, n=n)


def xi_tail(spectrum: SpectrumModel, N: int) -> float:
    return spectrum.xi_tail(N)


def choose_cutoff(spectrum: SpectrumModel, target: float) -> int:
    """Smallest N with Xi_N <= target."""
    if not target > 0:
        raise ValueError("target must be positive")
    if spectrum.xi_tail(0) <= target:
        return 0
    hi = spectrum.cap
    tail_hi = spectrum.xi_tail(hi)
    if tail_hi > target:
        raise CutoffError(target, hi, tail_hi)
    lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if spectrum.xi_tail(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class GaussianFieldRealization:
    """W_N = sum_{k<=N} sqrt(eta_k) Z_k e_k."""

    spectrum: SpectrumModel
    coefficients: np.ndarray = field(repr=False)

    @property
    def cutoff(self) -> int:
        return int(self.coefficients.size)

    def __call__(self, x) -> np.ndarray:
        return self.spectrum.evaluate(self.coefficients, x)

    def truncate(self, n: int) -> "GaussianFieldRealization":
        if n > self.cutoff:
            raise ValueError("cannot extend a realization beyond its cutoff")
        return GaussianFieldRealization(self.spectrum, self.coefficients[:n])


def sample_gaussian_field(spectrum: SpectrumModel, N: int, noise) -> GaussianFieldRealization:
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (N,):
        raise ValueError(f"expected {N} standard-normal draws, got shape {noise.shape}")
    coeffs = np.sqrt(spectrum.eigenvalues(N)) * noise
    coeffs.setflags(write=False)
    return GaussianFieldRealization(spectrum, coeffs)


def make_spectrum(kind: str, **params) -> SpectrumModel | None:
    if kind in ("none", "", None):
        return None
    if kind == BrownianSpectrum.kind:
        return BrownianSpectrum()
    if kind == HeatKernel2DSpectrum.kind:
        return HeatKernel2DSpectrum(v=params.get("v", 0.25), r=params.get("r", 0.02))
    if kind == NystromSpectrum.kind:
        return NystromSpectrum(v=params.get("v", 1.0), r=params.get("r", 0.1),
                               n=int(params.get("nystrom_points", 200)))
    raise ValueError(f"unknown spectrum kind {kind!r}")
