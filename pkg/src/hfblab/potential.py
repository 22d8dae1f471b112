"""Scaled pair interaction ``V_N(x) = N^{d beta} V(N^beta x)`` and convolution."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .fields import Field, _same_grid
from .grid import Grid


class ResolutionError(ValueError):
    pass


def bump(r):
    r = np.asarray(r, float)
    out = np.zeros_like(r)
    m = r < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r[m] ** 2))
    return out


PROFILES: dict = {"bump": (bump, 1.0)}


def load_profile(path) -> tuple:
    """Read a two-column text file ``r v(r)`` into a callable profile."""
    tab = np.loadtxt(path, ndmin=2)
    r, v = tab[:, 0], tab[:, 1]
    if np.any(np.diff(r) <= 0):
        raise ValueError("radii must be strictly increasing")

    def prof(x):
        return np.interp(np.asarray(x, float), r, v, right=0.0)

    return prof, float(r[-1])


def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


@dataclass(frozen=True)
class PotentialSpec:
    """Radial, nonnegative, nonincreasing interaction profile.

    Parameters
    ----------
    profile : name in :data:`PROFILES` or a ``(callable, support)`` pair.
    amplitude : overall factor; the unscaled profile has L1 mass ``amplitude``.
    beta, N : mean-field scaling parameters.
    radius : support radius of the unscaled profile (default 1).
    """

    profile: object = "bump"
    amplitude: float = 1.0
    beta: float = 0.0
    N: float = 1.0
    radius: float = 1.0
    _norms: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        f, supp = self.shape_fn()
        r = np.linspace(0.0, supp, 2001)
        v = f(r)
        if np.any(v < 0):
            raise ValueError("profile must be nonnegative")
        if np.any(np.diff(v) > 1e-14 * max(1.0, float(v.max()))):
            raise ValueError("profile must be nonincreasing in r")

    def __hash__(self):
        return hash((str(self.profile), self.amplitude, self.beta, self.N, self.radius))

    def shape_fn(self) -> tuple:
        if isinstance(self.profile, str):
            if self.profile not in PROFILES:
                raise ValueError(f"unknown profile {self.profile!r}")
            return PROFILES[self.profile]
        return self.profile

    @property
    def scale(self) -> float:
        """Length contraction ``N**beta``."""
        return float(self.N) ** self.beta

    @property
    def support(self) -> float:
        """Support radius of ``V_N``."""
        return self.shape_fn()[1] * self.radius / self.scale

    def mass_constant(self, d: int) -> float:
        if d not in self._norms:
            f, supp = self.shape_fn()
            val, _ = integrate.quad(lambda r: float(f(r)) * r ** (d - 1), 0.0, supp, limit=200)
            self._norms[d] = _sphere_area(d) * val
        return self._norms[d]

    def unscaled(self, r, d: int):
        """``V(r)`` with unit-L1 profile times ``amplitude``."""
        f, _ = self.shape_fn()
        R = self.radius
        return self.amplitude * f(np.asarray(r) / R) / (R ** d * self.mass_constant(d))

    def scaled(self, r, d: int):
        """``V_N(r) = N^{d beta} V(N^beta r)``."""
        s = self.scale
        return s ** d * self.unscaled(s * np.asarray(r), d)

    def is_zero(self) -> bool:
        return self.amplitude == 0.0


def min_points(p: PotentialSpec, L: float) -> int:
    """Smallest even ``n`` satisfying the resolution guard on a box of length ``L``."""
    n = math.ceil(4.0 * p.scale * L / p.radius - 1e-9)
    return n + (n % 2)


def check_resolution(g: Grid, p: PotentialSpec):
    if p.is_zero():
        return
    if p.scale * g.h / p.radius > 0.25 + 1e-12:
        raise ResolutionError(
            f"resolution guard N^beta*h/R = {p.scale * g.h / p.radius:.3f} > 1/4; "
            f"need n >= {min_points(p, g.L)} for L = {g.L}")
    if p.support >= 0.5 * g.L:
        raise ResolutionError(f"potential support {p.support:.3f} does not fit the half box {0.5 * g.L}")


def _displacement_radius(g: Grid) -> np.ndarray:
    D = g.displacements()
    return np.sqrt(sum(x * x for x in D))


def sample_displacements(g: Grid, p: PotentialSpec, check: bool = True) -> np.ndarray:
    """``V_N`` on minimum-image displacements, FFT order (index 0 is the origin)."""
    if check:
        check_resolution(g, p)
    if p.is_zero():
        return np.zeros(g.shape)
    return p.scaled(_displacement_radius(g), g.dim)


def sample_scaled_potential(g: Grid, p: PotentialSpec, check: bool = True) -> Field:
    """``V_N`` sampled at the grid positions (box centered at the origin)."""
    Vd = sample_displacements(g, p, check)
    return Field(g, np.fft.fftshift(Vd))


def convolve(V: Field, f: Field) -> Field:
    """Circular convolution ``(V * f)(x) = sum_y V(x - y) f(y) h^d`` via FFT."""
    _same_grid(V.grid, f.grid)
    g = V.grid
    vd = np.fft.ifftshift(V.data)
    out = g.ifft(g.fft(vd) * g.fft(f.data)) * g.weight
    if np.isrealobj(V.data) or not np.any(V.data.imag):
        if not np.any(f.data.imag):
            out = out.real
    return Field(g, out)


def convolve_direct(V: Field, f: Field) -> Field:
    """O(M^2) reference convolution on the grid."""
    g = V.grid
    return Field(g, pair_matrix(g, np.fft.ifftshift(V.data)) @ f.flat * g.weight)


def pair_matrix(g: Grid, vdisp: np.ndarray) -> np.ndarray:
    """Dense ``Vmat[x, y] = v(x - y)`` from a displacement table in FFT order."""
    return vdisp.reshape(-1)[_diff_index(g)]


@lru_cache(maxsize=8)
def _diff_index(g: Grid) -> np.ndarray:
    idx = np.indices(g.shape).reshape(g.dim, -1)
    diff = (idx[:, :, None] - idx[:, None, :]) % g.n
    return np.ravel_multi_index(tuple(diff), g.shape)


def lp_norm(f: Field, p: float) -> float:
    a = np.abs(f.data)
    if np.isinf(p):
        return float(a.max())
    return float((np.sum(a ** p) * f.grid.weight) ** (1.0 / p))
