"""Periodic box discretization and spectral multipliers.

Conventions
-----------
The forward transform is unnormalized and the inverse carries ``1/n**d``
(numpy's default). Every integral uses the quadrature weight ``h**d``
explicitly. The free flow ``exp(i t Laplacian)`` acts on Fourier
coefficients as ``exp(-i t |k|^2)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Periodic d-dimensional box ``[-L/2, L/2)^d`` with ``n`` points per axis."""

    dim: int
    n: int
    L: float

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dim}")
        if int(self.n) != self.n or self.n < 4 or self.n % 2:
            raise ValueError(f"points per axis must be an even integer >= 4, got {self.n}")
        if not np.isfinite(self.L) or self.L <= 0:
            raise ValueError(f"box length must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def weight(self) -> float:
        """Cell volume ``h**d``."""
        return self.h ** self.dim

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n ** self.dim

    @property
    def axes(self) -> tuple:
        return tuple(range(self.dim))

    @cached_property
    def x1d(self) -> np.ndarray:
        return -0.5 * self.L + self.h * np.arange(self.n)

    @cached_property
    def k1d(self) -> np.ndarray:
        """Angular frequencies ``2 pi m / L`` in FFT order, m in [-n/2, n/2)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)

    @cached_property
    def d1d(self) -> np.ndarray:
        """First-derivative symbol ``i k`` with the Nyquist mode zeroed."""
        s = 1j * self.k1d
        s[self.n // 2] = 0.0
        return s

    @cached_property
    def disp1d(self) -> np.ndarray:
        """Minimum-image displacements ``m h`` in FFT order."""
        return self.h * (((np.arange(self.n) + self.n // 2) % self.n) - self.n // 2)

    def coords(self) -> list:
        """Position arrays (one per axis) broadcast to the full grid shape."""
        return list(np.meshgrid(*([self.x1d] * self.dim), indexing="ij"))

    def displacements(self) -> list:
        """Minimum-image displacement arrays in FFT order."""
        return list(np.meshgrid(*([self.disp1d] * self.dim), indexing="ij"))

    def wavevectors(self) -> list:
        return list(np.meshgrid(*([self.k1d] * self.dim), indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(k * k for k in self.wavevectors())

    def deriv_symbols(self) -> list:
        """Nyquist-free derivative symbols, one per axis, on the full grid."""
        out = []
        for j in range(self.dim):
            shp = [1] * self.dim
            shp[j] = self.n
            out.append(np.broadcast_to(self.d1d.reshape(shp), self.shape))
        return out

    # transforms -----------------------------------------------------------
    def fft(self, f, axes=None):
        return np.fft.fftn(f, axes=self.axes if axes is None else axes)

    def ifft(self, f, axes=None):
        return np.fft.ifftn(f, axes=self.axes if axes is None else axes)

    def integrate(self, f):
        return np.sum(f) * self.weight

    def l2_norm(self, f) -> float:
        return float(np.sqrt(np.sum(np.abs(f) ** 2) * self.weight))

    def fourier_l2_norm(self, fhat) -> float:
        """L2 norm from unnormalized Fourier coefficients (Plancherel)."""
        return float(np.sqrt(np.sum(np.abs(fhat) ** 2) * self.weight / self.size))

    def apply_multiplier(self, f, symbol):
        return np.fft.ifftn(symbol * np.fft.fftn(f, axes=self.axes), axes=self.axes)

    def derivative(self, f, j: int):
        """Spectral partial derivative along axis ``j`` (Nyquist mode dropped)."""
        shp = [1] * f.ndim
        shp[j] = self.n
        fh = np.fft.fft(f, axis=j)
        return np.fft.ifft(fh * self.d1d.reshape(shp), axis=j)

    def wrap_fraction(self, f, center=None) -> float:
        """Fraction of L2 mass outside the half-size box around ``center``.

        A value above ~1e-3 means the periodic images are no longer negligible.
        """
        c = np.zeros(self.dim) if center is None else np.asarray(center, float)
        mask = np.zeros(self.shape, dtype=bool)
        for j, x in enumerate(self.coords()):
            dx = (x - c[j] + 0.5 * self.L) % self.L - 0.5 * self.L
            mask |= np.abs(dx) > 0.25 * self.L
        m = np.abs(f) ** 2
        tot = m.sum()
        return float(m[mask].sum() / tot) if tot > 0 else 0.0


def make_grid(d: int, n: int, L: float) -> Grid:
    """Build a :class:`Grid`; rejects odd ``n`` and nonpositive ``L``."""
    return Grid(int(d), int(n), float(L))


def laplacian_symbol(g: Grid) -> np.ndarray:
    """Symbol ``-|k|^2`` of the spectral Laplacian."""
    return -g.k2


def fractional_symbol(g: Grid, s: float) -> np.ndarray:
    """Symbol ``|k|^s``; ``s = 0`` gives ones (including the zero mode)."""
    if s < 0:
        raise ValueError(f"order must be nonnegative, got {s}")
    if s == 0:
        return np.ones(g.shape)
    return np.sqrt(g.k2) ** s


def free_propagator_symbol(g: Grid, t: float) -> np.ndarray:
    return np.exp(-1j * t * g.k2)


def free_propagate_field(f, t: float):
    """Apply ``exp(i t Laplacian)`` to a Field (or raw array with a grid)."""
    from .fields import Field

    if not isinstance(f, Field):
        raise TypeError("expected a Field")
    g = f.grid
    return Field(g, g.apply_multiplier(f.data, free_propagator_symbol(g, t)))
