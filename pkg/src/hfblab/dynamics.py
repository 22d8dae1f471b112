"""Right-hand sides of the HFB system and the Strang split-step integrator.

Each right side is returned in the ``(1/i) d_t`` convention with the
linear parts removed:

* ``(1/i) d_t phi - Delta phi = rhs_phi``
* ``(1/i) d_t Lambda - (Delta_1 + Delta_2 - V_N(x1-x2)/N) Lambda = rhs_lambda``
* ``(1/i) d_t Gamma + (Delta_1 - Delta_2) Gamma = rhs_gamma``

``rhs_gamma`` is assembled from the terms of the equation for
``conj(Gamma)`` and conjugated; :func:`collision_bv` assembles the same
object from contractions of the two-body function ``L``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .duhamel import pair_propagator
from .fields import (HERMITIAN, NONE, SYMMETRIC, Field, HFBState, Kernel, PSDViolation,
                     _same_grid, check_psd)
from .grid import Grid
from .potential import PotentialSpec, pair_matrix, sample_displacements

SYM_TOL = 1e-10


class StabilityError(ValueError):
    pass


@dataclass
class _Model:
    """Cached dense interaction data for one (grid, potential) pair."""

    grid: Grid
    Vm: np.ndarray
    zero: bool


@lru_cache(maxsize=16)
def _model(g: Grid, p: PotentialSpec) -> _Model:
    vd = sample_displacements(g, p)
    return _Model(g, pair_matrix(g, vd), p.is_zero())


def _check_params(s: HFBState, p: PotentialSpec):
    if not p.is_zero() and (abs(s.N - p.N) > 1e-12 or abs(s.beta - p.beta) > 1e-12):
        raise ValueError(f"state scaling (N={s.N}, beta={s.beta}) differs from potential "
                         f"(N={p.N}, beta={p.beta})")


# ---------------------------------------------------------------------------
# raw assemblies on arrays (phi: (M,), lam, gam: (M, M))

def _common(Vm, w, phi, gam):
    rho = np.diag(gam).real
    vrho = Vm @ rho * w
    vphi2 = Vm @ np.abs(phi) ** 2 * w
    return vrho, vphi2


def raw_rhs(Vm, w, phi, lam, gam):
    """All three right sides at once; returns ``(r_phi, r_lam, r_gam)``."""
    vrho, vphi2 = _common(Vm, w, phi, gam)
    pp = np.outer(phi, phi)
    pcp = np.outer(phi.conj(), phi)
    gc = gam - pcp
    lc = lam - pp
    r_phi = -phi * vrho - (Vm * gc.T) @ phi * w - (Vm * lc) @ phi.conj() * w

    T1 = (Vm * lam) @ gam
    T3 = (Vm * gam.conj()) @ lam
    r_lam = (-(vrho[:, None] + vrho[None, :]) * lam
             - w * (T1 + T1.T + T3 + T3.T)
             + 2.0 * (vphi2[:, None] + vphi2[None, :]) * pp)

    A = (Vm * lam) @ lam.conj()
    G = (Vm * gam.conj()) @ gam.conj()
    r_gbar = (-w * ((A - A.conj().T) + (G - G.conj().T))
              - (vrho[:, None] - vrho[None, :]) * gam.conj()
              + 2.0 * (vphi2[:, None] - vphi2[None, :]) * pcp.conj())
    return r_phi, r_lam, -r_gbar.conj()


def raw_collision(Vm, w, phi, lam, gam):
    """``B_V(L) = B+ - B-`` from contractions of ``L(x,y;x',y)``."""
    vrho, vphi2 = _common(Vm, w, phi, gam)
    pcp = np.outer(phi.conj(), phi)
    bp = (gam * vrho[:, None] + (Vm * gam) @ gam * w + (Vm * lam.conj()) @ lam.T * w
          - 2.0 * pcp * vphi2[:, None])
    bm = (gam * vrho[None, :] + gam @ (Vm * gam) * w + lam.conj() @ (Vm * lam).T * w
          - 2.0 * pcp * vphi2[None, :])
    return bp - bm


# ---------------------------------------------------------------------------
# public right sides

def rhs_phi(s: HFBState, p: PotentialSpec) -> Field:
    g = s.grid
    if p.is_zero():
        return Field(g, np.zeros(g.shape, complex))
    m = _model(g, p)
    r, _, _ = raw_rhs(m.Vm, g.weight, s.phi.flat, s.lam.data, s.gam.data)
    return Field(g, r)


def rhs_lambda(s: HFBState, p: PotentialSpec) -> Kernel:
    g = s.grid
    if p.is_zero():
        return Kernel(g, np.zeros((g.size, g.size)), SYMMETRIC)
    m = _model(g, p)
    _, r, _ = raw_rhs(m.Vm, g.weight, s.phi.flat, s.lam.data, s.gam.data)
    d = float(np.max(np.abs(r - r.T)))
    if d > SYM_TOL * max(1.0, float(np.max(np.abs(r)))):
        raise ValueError(f"rhs_lambda lost symmetry ({d:.3e})")
    return Kernel(g, r, SYMMETRIC, check=False)


def rhs_gamma(s: HFBState, p: PotentialSpec) -> Kernel:
    """Right side of the Gamma equation; anti-hermitian with zero diagonal."""
    g = s.grid
    if p.is_zero():
        return Kernel(g, np.zeros((g.size, g.size)), NONE)
    m = _model(g, p)
    _, _, r = raw_rhs(m.Vm, g.weight, s.phi.flat, s.lam.data, s.gam.data)
    d = float(np.max(np.abs(r + r.conj().T)))
    if d > SYM_TOL * max(1.0, float(np.max(np.abs(r)))):
        raise ValueError(f"rhs_gamma is not anti-hermitian ({d:.3e})")
    return Kernel(g, r, NONE, check=False)


def collision_bv(s: HFBState, p: PotentialSpec) -> Kernel:
    g = s.grid
    if p.is_zero():
        return Kernel(g, np.zeros((g.size, g.size)), NONE)
    m = _model(g, p)
    return Kernel(g, raw_collision(m.Vm, g.weight, s.phi.flat, s.lam.data, s.gam.data), NONE, check=False)


# ---------------------------------------------------------------------------
# integrator

def max_stable_dt(g: Grid) -> float:
    """Largest step allowed by the guard ``dt * max|k|^2 <= pi``."""
    return float(np.pi / g.k2.max())


class Stepper:
    """Strang split-step for one (grid, potential, dt) triple.

    Nonlinear half steps use the explicit midpoint rule; the linear step is
    exact: ``exp(i dt Delta)`` for phi, the interacting pair propagator for
    Lambda and ``exp(i dt (Delta_2 - Delta_1))`` for Gamma.
    """

    def __init__(self, g: Grid, p: PotentialSpec, dt: float, pair_tol: float = 1e-9):
        if dt == 0 or not np.isfinite(dt):
            raise StabilityError("dt must be finite and nonzero")
        if abs(dt) * g.k2.max() > np.pi * (1 + 1e-12):
            raise StabilityError(f"dt*max|k|^2 = {abs(dt) * g.k2.max():.3f} exceeds pi; "
                                 f"use dt <= {max_stable_dt(g):.3e}")
        self.g, self.p, self.dt = g, p, float(dt)
        self.Vm = None if p.is_zero() else _model(g, p).Vm
        self.w = g.weight
        self.phase_phi = np.exp(-1j * dt * g.k2)
        k2 = g.k2
        sh1 = g.shape + (1,) * g.dim
        sh2 = (1,) * g.dim + g.shape
        self.phase_gam = np.exp(1j * dt * k2).reshape(sh1) * np.exp(-1j * dt * k2).reshape(sh2)
        self.U = pair_propagator(g, None if p.is_zero() else p, pair_tol)

    def _f(self, phi, lam, gam):
        r_phi, r_lam, r_gam = raw_rhs(self.Vm, self.w, phi, lam, gam)
        return 1j * r_phi, 1j * r_lam, 1j * r_gam

    def nonlinear(self, phi, lam, gam, h):
        if self.Vm is None:
            return phi, lam, gam
        k = self._f(phi, lam, gam)
        m = (phi + 0.5 * h * k[0], lam + 0.5 * h * k[1], gam + 0.5 * h * k[2])
        k = self._f(*m)
        return phi + h * k[0], lam + h * k[1], gam + h * k[2]

    def linear(self, phi, lam, gam):
        g = self.g
        phi = g.apply_multiplier(phi.reshape(g.shape), self.phase_phi).reshape(-1)
        lam = self.U.apply(lam, self.dt)
        gh = np.fft.fftn(gam.reshape(g.shape * 2))
        gam = np.fft.ifftn(gh * self.phase_gam).reshape(g.size, g.size)
        return phi, lam, gam

    def step_arrays(self, phi, lam, gam):
        h = 0.5 * self.dt
        phi, lam, gam = self.nonlinear(phi, lam, gam, h)
        phi, lam, gam = self.linear(phi, lam, gam)
        phi, lam, gam = self.nonlinear(phi, lam, gam, h)
        lam = 0.5 * (lam + lam.T)
        gam = 0.5 * (gam + gam.conj().T)
        return phi, lam, gam


def _pack(s: HFBState):
    return s.phi.flat.copy(), s.lam.data.copy(), s.gam.data.copy()


def _unpack(s: HFBState, t, phi, lam, gam) -> HFBState:
    g = s.grid
    return s.replace(t=t, phi=Field(g, phi), lam=Kernel(g, lam, SYMMETRIC, check=False),
                     gam=Kernel(g, gam, HERMITIAN, check=False))


def strang_step(s: HFBState, p: PotentialSpec, dt: float, check: bool = True,
                tol_psd: float = 1e-8) -> HFBState:
    """Advance one second-order Strang step; ``dt`` may be negative."""
    _check_params(s, p)
    st = _stepper(s.grid, p, float(dt))
    out = _unpack(s, s.t + dt, *st.step_arrays(*_pack(s)))
    if check:
        check_psd(out.gam, tol_psd)
    return out


@lru_cache(maxsize=8)
def _stepper(g, p, dt):
    return Stepper(g, p, dt)


@dataclass
class Trajectory:
    """Snapshots ``(t, state)`` at the recording cadence."""

    dt: float
    scheme: str = "strang-midpoint"
    states: list = field(default_factory=list)
    observations: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]

    def append(self, s: HFBState):
        if self.states and not s.t > self.states[-1].t:
            raise ValueError("snapshot times must increase strictly")
        self.states.append(s)


def evolve(s0: HFBState, p: PotentialSpec, T: float, dt: float, cadence: int = 1,
           hooks: Optional[dict] = None, check: bool = True, tol_psd: float = 1e-8,
           keep_states: bool = True) -> Trajectory:
    """Iterate :func:`strang_step` up to time ``T``.

    Parameters
    ----------
    cadence : record every ``cadence``-th step (the initial state is always kept).
    hooks : mapping ``name -> callable(state)``; results are stored per snapshot
        in ``trajectory.observations[name]``.
    check : run symmetry and PSD checks on every snapshot.
    keep_states : if False only the last snapshot is retained (hooks still run).
    """
    _check_params(s0, p)
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError("T must be an integer multiple of dt")
    hooks = hooks or {}
    traj = Trajectory(dt=dt)

    def record(s):
        if check:
            s.lam.__class__(s.grid, s.lam.data, SYMMETRIC)
            s.gam.__class__(s.grid, s.gam.data, HERMITIAN)
            check_psd(s.gam, tol_psd)
        for name, fn in hooks.items():
            traj.observations.setdefault(name, []).append((s.t, fn(s)))
        if keep_states or not traj.states:
            traj.append(s)
        else:
            traj.states[-1] = s

    record(s0)
    if nsteps == 0:
        return traj
    st = Stepper(s0.grid, p, dt)
    arrs = _pack(s0)
    for j in range(1, nsteps + 1):
        arrs = st.step_arrays(*arrs)
        if j % cadence == 0 or j == nsteps:
            record(_unpack(s0, s0.t + j * dt, *arrs))
    return traj
