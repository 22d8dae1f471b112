"""Mixed-coordinate dispersive estimate and the conjugated-multiplier kernel.

Data ``f(x, y) = sum_k u_k(r) v_k(s)`` are stored through their factors in
the rotated variables ``r = (x - y)/sqrt(2)``, ``s = (x + y)/sqrt(2)``.
The two-particle free flow ``exp(it(Lap_x + Lap_y))`` equals
``exp(it(Lap_r + Lap_s))``, so each factor evolves by the one-particle flow
on its own grid. For a fixed ``x`` the points ``(r_i, s_j)`` with ``i + j``
fixed sample the fiber ``y -> f(x, y)`` with spacing ``sqrt(2) * h``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import Field
from .grid import Grid, free_propagate_field, make_grid

WRAP_TOL = 1e-3
ORTHO_TOL = 1e-10
BAND_TOL = 1e-8


class WrapAroundError(RuntimeError):
    pass


def gram_matrix(vs: Sequence[Field]) -> np.ndarray:
    V = np.array([v.flat for v in vs])
    return np.conj(V) @ V.T * vs[0].grid.weight


def orthonormality_defect(vs: Sequence[Field]) -> float:
    G = gram_matrix(vs)
    return float(np.max(np.abs(G - np.eye(len(vs)))))


def l1l2_rotated_norm(factors) -> float:
    """``||f||_{L1(dr) L2(ds)}`` from orthonormal ``v_k``: ``int sqrt(sum |u_k|^2) dr``.

    ``factors`` is a list of ``(u_k, v_k)`` pairs or a :class:`ProductFactors`.
    """
    if isinstance(factors, ProductFactors):
        return factors.l1l2()
    us, vs = _split(factors)
    err = orthonormality_defect(vs)
    if err > ORTHO_TOL:
        raise ValueError(f"v_k not orthonormal (defect {err:.2e})")
    dens = sum(np.abs(u.data) ** 2 for u in us)
    return float(np.sum(np.sqrt(dens)) * us[0].grid.weight)


def _split(factors):
    if len(factors) == 0:
        raise ValueError("empty factor list")
    us = [u for u, _ in factors]
    vs = [v for _, v in factors]
    for f in us + vs:
        if f.grid != us[0].grid:
            raise ValueError("all factors must share one grid")
    return us, vs


@dataclass
class ProductFactors:
    """Single tensor-product term ``prod_a u_a(r_a) v_a(s_a)`` with 1-D factors.

    The sup over ``x`` of a separable fiber norm is the product of the
    per-axis sups, so a 3-D experiment only needs 1-D grids.
    """

    axes: list  # [(u_a, v_a)] on 1-D grids

    def __post_init__(self):
        for u, v in self.axes:
            if u.grid.dim != 1 or v.grid != u.grid:
                raise ValueError("product factors need matching 1-D grids")

    @property
    def dim(self) -> int:
        return len(self.axes)

    def l1l2(self) -> float:
        out = 1.0
        for u, v in self.axes:
            out *= float(np.sum(np.abs(u.data)) * u.grid.weight) * v.norm()
        return out


def circular_center(f: Field) -> np.ndarray:
    """Center of mass of ``|f|^2`` on the torus (circular mean per axis)."""
    g = f.grid
    m = np.abs(f.data) ** 2
    out = []
    for x in g.coords():
        z = np.sum(m * np.exp(2j * np.pi * x / g.L))
        out.append(g.L * np.angle(z) / (2 * np.pi))
    return np.array(out)


def field_wrap(f: Field) -> float:
    return f.grid.wrap_fraction(f.data, circular_center(f))


def fiber_profile(us: Sequence[np.ndarray], vs: Sequence[np.ndarray], h: float) -> np.ndarray:
    """``||F(x_m, .)||^2_{L2(dy)}`` for all fiber indices ``m = i + j``.

    Uses ``sum_i |sum_k U_k(i) V_k(m-i)|^2 = sum_{k,l} (U_k conj U_l) * (V_k conj V_l)``
    with zero-padded (linear) FFT convolution.
    """
    d = us[0].ndim
    shp = tuple(2 * s for s in us[0].shape)
    axes = tuple(range(d))
    acc = np.zeros(shp, complex)
    for k in range(len(us)):
        for l in range(len(us)):
            a = np.fft.fftn(us[k] * np.conj(us[l]), shp, axes)
            b = np.fft.fftn(vs[k] * np.conj(vs[l]), shp, axes)
            acc += a * b
    G = np.fft.ifftn(acc).real
    sl = tuple(slice(0, 2 * s - 1) for s in us[0].shape)
    return np.maximum(G[sl], 0.0) * (np.sqrt(2.0) * h) ** d


def _sampled_max(G: np.ndarray, stride: int, extra: Sequence) -> float:
    sl = tuple(slice(0, None, stride) for _ in range(G.ndim))
    best = float(np.max(G[sl]))
    for m in extra:
        idx = tuple(int(round(c)) % s for c, s in zip(m, G.shape))
        best = max(best, float(G[idx]))
    return best


def _com_index(us, vs, g: Grid):
    """Fiber index of the maximizer candidate: sum of the factor centers."""
    x0 = g.x1d[0]
    cu = np.mean([circular_center(Field(g, u)) for u in us], axis=0)
    cv = np.mean([circular_center(Field(g, v)) for v in vs], axis=0)
    return (cu - x0) / g.h + (cv - x0) / g.h


def fiber_sup(factors, t: float, sup_mode: str = "dense", stride: int = 4) -> tuple:
    """Evolve the factors to time ``t``; return ``(sup_x ||F(x,.)||_{L2(dy)}, wrap)``.

    ``sup_mode="sampled"`` evaluates the fiber norm on every ``stride``-th
    fiber plus the center-of-mass candidate; it is a lower bound on the
    dense sup.
    """
    if isinstance(factors, ProductFactors):
        sup2, keep = 1.0, 1.0
        for u, v in factors.axes:
            ut, vt = free_propagate_field(u, t), free_propagate_field(v, t)
            keep *= (1.0 - field_wrap(ut)) * (1.0 - field_wrap(vt))
            G = fiber_profile([ut.data], [vt.data], u.grid.h)
            if sup_mode == "sampled":
                sup2 *= _sampled_max(G, stride, [_com_index([ut.data], [vt.data], u.grid)])
            else:
                sup2 *= float(np.max(G))
        return float(np.sqrt(sup2)), float(1.0 - keep)
    us, vs = _split(factors)
    g = us[0].grid
    ut = [free_propagate_field(u, t) for u in us]
    vt = [free_propagate_field(v, t) for v in vs]
    wrap = max(field_wrap(f) for f in ut + vt)
    G = fiber_profile([u.data for u in ut], [v.data for v in vt], g.h)
    if sup_mode == "sampled":
        sup2 = _sampled_max(G, stride, [_com_index([u.data for u in ut], [v.data for v in vt], g)])
    elif sup_mode == "dense":
        sup2 = float(np.max(G))
    else:
        raise ValueError(f"unknown sup_mode {sup_mode!r}")
    return float(np.sqrt(sup2)), float(wrap)


def dispersive_ratio_series(factors, t_list, sup_mode: str = "dense", stride: int = 4,
                            wrap_tol: float = WRAP_TOL) -> list:
    """``[(t, ratio, wrap, sup)]`` with ``ratio = sup / (t^(-d/2) ||f||_{L1 L2})``.

    Raises :class:`WrapAroundError` when the evolved factors put more than
    ``wrap_tol`` of their mass outside the half-size box.
    """
    d = factors.dim if isinstance(factors, ProductFactors) else factors[0][0].grid.dim
    norm = l1l2_rotated_norm(factors)
    out = []
    for t in t_list:
        if t <= 0:
            raise ValueError("times must be positive")
        sup, wrap = fiber_sup(factors, t, sup_mode, stride)
        if wrap > wrap_tol:
            raise WrapAroundError(f"wrap-around fraction {wrap:.2e} > {wrap_tol:g} at t={t:g}")
        out.append((float(t), sup / (t ** (-0.5 * d) * norm), wrap, sup))
    return out


def decay_slope(series) -> float:
    """Least-squares slope of ``log sup`` against ``log t``."""
    t = np.array([r[0] for r in series])
    s = np.array([r[3] for r in series])
    return float(np.polyfit(np.log(t), np.log(s), 1)[0])


def ratio_spread(series) -> float:
    r = np.array([x[1] for x in series])
    return float(r.max() / np.median(r))


def evolve_factors(factors, t: float):
    return [(free_propagate_field(u, t), free_propagate_field(v, t)) for u, v in factors]


# ---------------------------------------------------------------------------
# factor families

def gaussian_mixture(g: Grid, rng: np.random.Generator, count: int = 3, width=(1.0, 2.0),
                     spread: float = 1.0, momentum: float = 0.0) -> Field:
    """Sum of Gaussians with random centers, widths and phases, L2-normalized."""
    X = g.coords()
    f = np.zeros(g.shape, complex)
    for _ in range(count):
        c = rng.uniform(-spread, spread, g.dim)
        w = rng.uniform(*width)
        p = rng.uniform(-momentum, momentum, g.dim) if momentum else np.zeros(g.dim)
        ph = np.exp(2j * np.pi * rng.random())
        r2 = sum((X[a] - c[a]) ** 2 for a in range(g.dim))
        f += ph * np.exp(-0.5 * r2 / w ** 2 + 1j * sum(p[a] * X[a] for a in range(g.dim)))
    return Field(g, f / g.l2_norm(f))


def hermite_family(g: Grid, count: int, width: float = 1.0, center=0.0) -> list:
    """First ``count`` Hermite functions (tensor products in d > 1), orthonormalized on the grid."""
    from numpy.polynomial.hermite import hermval
    from itertools import product

    c = np.broadcast_to(np.asarray(center, float), (g.dim,))
    X = g.coords()

    def h1(k, x):
        z = x / width
        coef = np.zeros(k + 1)
        coef[k] = 1.0
        return hermval(z, coef) * np.exp(-0.5 * z * z)

    idx = sorted(product(range(count), repeat=g.dim), key=lambda t: (sum(t), t))[:count]
    cols = []
    for t in idx:
        f = np.ones(g.shape)
        for a, k in enumerate(t):
            f = f * h1(k, X[a] - c[a])
        cols.append(f.reshape(-1))
    A = np.array(cols).T * np.sqrt(g.weight)
    Q, _ = np.linalg.qr(A)
    return [Field(g, Q[:, j] / np.sqrt(g.weight)) for j in range(count)]


def gaussian_product(g1: Grid, d: int, width: float, momentum: float = 0.0) -> ProductFactors:
    """Tensor Gaussian data ``prod_a G(r_a) G(s_a)`` on 1-D factor grids."""
    from .fields import gaussian_field
    ax = [(gaussian_field(g1, 0.0, width, momentum), gaussian_field(g1, 0.0, width, -momentum))
          for _ in range(d)]
    return ProductFactors(ax)


def gaussian_ratio_exact(t: float, width: float, d: int = 1) -> float:
    """Continuum ratio for centered Gaussian factors of equal width.

    ``sup = pi^(-d/4) sigma^(-d/2)`` with ``sigma = w sqrt(1 + 4 t^2 / w^4)``,
    and ``||f||_{L1 L2} = (2 sqrt(pi) w)^(d/2)``.
    """
    sig = width * np.sqrt(1 + 4 * t * t / width ** 4)
    sup = np.pi ** (-0.25 * d) * sig ** (-0.5 * d)
    nrm = (2 * np.sqrt(np.pi) * width) ** (0.5 * d)
    return float(sup / (t ** (-0.5 * d) * nrm))


# ---------------------------------------------------------------------------
# conjugated multiplication operator

def weyl_time_floor(g: Grid) -> float:
    """Smallest admissible ``t`` for the kernel route: ``L h / (4 pi)``.

    The kernel phase ``x . eta`` with ``eta = (y - x)/(2t)`` oscillates in
    ``y`` at frequency up to ``L/(4t)``; it is resolved by the grid only
    when that does not exceed ``pi / h``.
    """
    return g.L * g.h / (4 * np.pi)


def conjugated_multiplier(A: Field, t: float, f: Field) -> Field:
    """``exp(-it Lap) A exp(it Lap) f`` via the spectral free flow."""
    return free_propagate_field(Field(A.grid, A.data * free_propagate_field(f, t).data), -t)


def weyl_kernel(A: Field, t: float) -> np.ndarray:
    """Torus-adapted kernel matrix ``K(x_i, y_j)`` (apply with weight ``h``).

    ``K = (4 pi t)^(-1) A_h(eta) exp(i x eta + i t eta^2)`` with
    ``eta = disp(y - x)/(2t)`` and the trigonometric sum
    ``A_h(eta) = h sum_z A(z) exp(-i eta z)`` over one period.
    """
    g = A.grid
    if g.dim != 1:
        raise ValueError("kernel route is implemented for d = 1")
    if t < weyl_time_floor(g) * (1 - 1e-12):
        raise ValueError(f"t={t:g} below the resolved range t >= {weyl_time_floor(g):g}")
    x = g.x1d
    disp = g.disp1d  # indexed by shift j = (y - x)/h mod n
    eta = disp / (2 * t)
    Ah = g.h * np.exp(-1j * np.outer(eta, x)) @ A.data
    # the shifts only reach |eta| <= L/(4t); A must be band-limited inside that range
    edge = np.max(np.abs(Ah[np.abs(np.abs(eta) - np.abs(eta).max()) < 1e-12]))
    if edge > BAND_TOL * np.max(np.abs(Ah)):
        raise ValueError(f"A not band-limited within |eta| <= {np.abs(eta).max():g} at t={t:g}")
    n = g.n
    J = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    E = eta[J]
    return (Ah[J] * np.exp(1j * x[:, None] * E + 1j * t * E * E)) / (4 * np.pi * t)


def weyl_kernel_defect(A: Field, t: float, f: Field, wrap_tol: float = WRAP_TOL) -> float:
    """Relative L2 gap between the conjugation route and the kernel route."""
    g = A.grid
    ft = free_propagate_field(f, t)
    w = field_wrap(ft)
    if w > wrap_tol:
        raise WrapAroundError(f"wrap-around fraction {w:.2e} at t={t:g}")
    a = conjugated_multiplier(A, t, f).data
    b = weyl_kernel(A, t) @ f.data * g.h
    return float(np.linalg.norm(a - b) / np.linalg.norm(a))
