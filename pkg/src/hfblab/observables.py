"""Conserved and monitored quantities of the HFB flow.

Derivatives use the Nyquist-free spectral symbol ``i k`` so that the
first-derivative matrix is real and antisymmetric; with that choice the
pointwise Cauchy-Schwarz bounds and ``E_k >= 0`` hold exactly for any
positive semidefinite ``Gamma``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .fields import Field, HFBState, Kernel, kernel_trace
from .grid import Grid
from .potential import PotentialSpec, pair_matrix, sample_displacements


# ---------------------------------------------------------------------------
# slot derivatives of kernel arrays

def _slot_deriv(g: Grid, a, slot: int, j: int):
    """Derivative along axis ``j`` of slot ``slot`` (0 first, 1 second) of a kernel array."""
    t = a.reshape(g.shape * 2)
    ax = slot * g.dim + j
    shp = [1] * (2 * g.dim)
    shp[ax] = g.n
    out = np.fft.ifft(np.fft.fft(t, axis=ax) * g.d1d.reshape(shp), axis=ax)
    return out.reshape(g.size, g.size)


def _field_deriv(g: Grid, f, j: int):
    return g.derivative(f.reshape(g.shape), j).reshape(-1)


def _div(g: Grid, vec):
    return sum(_field_deriv(g, vec[j], j) for j in range(g.dim))


# ---------------------------------------------------------------------------
# number and energy

def particle_number(s: HFBState) -> float:
    tr = kernel_trace(s.gam)
    if abs(tr.imag) > 1e-10 * max(1.0, abs(tr.real)):
        raise ValueError(f"trace has imaginary part {tr.imag:.3e}")
    return float(tr.real)


def kinetic_trace(gam: Kernel) -> float:
    """``tr(grad_1 . grad_2 Gamma)`` via the spectral Laplacian on the second slot."""
    g = gam.grid
    t = gam.data.reshape(g.shape * 2)
    ax = tuple(range(g.dim, 2 * g.dim))
    lap2 = np.fft.ifftn(np.fft.fftn(t, axes=ax) * g.k2.reshape((1,) * g.dim + g.shape), axes=ax)
    return float(np.trace(lap2.reshape(g.size, g.size)).real * g.weight)


def energy_terms(s: HFBState, p: PotentialSpec) -> dict:
    g = s.grid
    w = g.weight
    kin = kinetic_trace(s.gam)
    if p.is_zero():
        return dict(kinetic=kin, pair=0.0, direct_exchange=0.0, condensate=0.0)
    Vm = pair_matrix(g, sample_displacements(g, p))
    G = s.gam.data
    rho = np.diag(G).real
    phi2 = np.abs(s.phi.flat) ** 2
    pair = 0.5 * float(np.sum(Vm * np.abs(s.lam.data) ** 2)) * w * w
    de = 0.5 * float(np.sum(Vm * (np.abs(G) ** 2 + np.outer(rho, rho)))) * w * w
    cond = -float(phi2 @ Vm @ phi2) * w * w
    return dict(kinetic=kin, pair=pair, direct_exchange=de, condensate=cond)


def total_energy(s: HFBState, p: PotentialSpec) -> float:
    return float(sum(energy_terms(s, p).values()))


# ---------------------------------------------------------------------------
# pseudo-stress-energy tensor

def density(gam: Kernel) -> np.ndarray:
    return np.diag(gam.data).real.reshape(gam.grid.shape)


def kinetic_density(gam: Kernel) -> Field:
    """``E_k(x) = sum_j d_{x_j} d_{y_j} Gamma(x, y)`` at ``y = x``."""
    g = gam.grid
    ek = np.zeros(g.size)
    for j in range(g.dim):
        t = _slot_deriv(g, _slot_deriv(g, gam.data, 0, j), 1, j)
        ek += np.diag(t).real
    return Field(g, ek)


def _first_slot_grads(gam: Kernel) -> list:
    return [_slot_deriv(gam.grid, gam.data, 0, j) for j in range(gam.grid.dim)]


def momentum_density(gam: Kernel) -> np.ndarray:
    """``P_j = (1/2i) (d_{x'_j} - d_{x_j}) Gamma(x; x')`` on the diagonal; shape ``(d,) + grid.shape``."""
    g = gam.grid
    out = np.empty((g.dim,) + g.shape)
    for j, dg in enumerate(_first_slot_grads(gam)):
        out[j] = -np.diag(dg).imag.reshape(g.shape)
    return out


def two_body_diagonal(s: HFBState) -> np.ndarray:
    """``f(x, y) = L(x, y; x, y)`` as an ``(M, M)`` real array."""
    G = s.gam.data
    rho = np.diag(G).real
    phi2 = np.abs(s.phi.flat) ** 2
    return (np.outer(rho, rho) + np.abs(G) ** 2 + np.abs(s.lam.data) ** 2
            - 2.0 * np.outer(phi2, phi2))


def interaction_density(s: HFBState, p: PotentialSpec) -> np.ndarray:
    """``W(x) = int V_N(x - y) L(x, y; x, y) dy``."""
    g = s.grid
    if p.is_zero():
        return np.zeros(g.shape)
    Vm = pair_matrix(g, sample_displacements(g, p))
    return (np.sum(Vm * two_body_diagonal(s), axis=1) * g.weight).reshape(g.shape)


def stress_and_pressure(s: HFBState, p: PotentialSpec) -> tuple:
    """Stress ``sigma_jk`` (shape ``(d, d) + grid.shape``) and pressure ``p``.

    ``p = (1/2)(-Delta rho + W)`` with the Nyquist-free Laplacian ``D.D``.
    """
    g = s.grid
    G = s.gam.data
    d1 = _first_slot_grads(s.gam)
    sig = np.empty((g.dim, g.dim) + g.shape)
    for j in range(g.dim):
        for k in range(j, g.dim):
            a = np.diag(_slot_deriv(g, d1[j], 1, k))
            b = np.diag(_slot_deriv(g, d1[k], 1, j))
            sig[j, k] = sig[k, j] = (a + b).real.reshape(g.shape)
    rho = np.diag(G).real
    lap = sum(_field_deriv(g, _field_deriv(g, rho, j), j) for j in range(g.dim)).real
    pres = 0.5 * (-lap.reshape(g.shape) + interaction_density(s, p))
    return sig, pres


def interaction_force_l(s: HFBState, p: PotentialSpec) -> np.ndarray:
    """``l_j = (1/2) int V_N(x-y) (d_{y_j} - d_{x_j}) f(x, y) dy``; shape ``(d,) + grid.shape``."""
    g = s.grid
    out = np.zeros((g.dim,) + g.shape)
    if p.is_zero():
        return out
    Vm = pair_matrix(g, sample_displacements(g, p))
    f = two_body_diagonal(s)
    for j in range(g.dim):
        diff = (_slot_deriv(g, f, 1, j) - _slot_deriv(g, f, 0, j)).real
        out[j] = (0.5 * np.sum(Vm * diff, axis=1) * g.weight).reshape(g.shape)
    return out


def tensor_fields(s: HFBState, p: PotentialSpec) -> dict:
    """``rho, P, sigma, p, l, W`` for one snapshot."""
    sig, pres = stress_and_pressure(s, p)
    return dict(rho=density(s.gam), P=momentum_density(s.gam), sigma=sig, p=pres,
                l=interaction_force_l(s, p), W=interaction_density(s, p))


def continuity_residual(traj, p: PotentialSpec) -> tuple:
    """L2 residuals of the local number and momentum laws at interior snapshots.

    Time derivatives are centered differences, so the snapshots must be
    uniformly spaced. Returns ``(times, r_mass, r_momentum)``.
    """
    states = list(traj.states if hasattr(traj, "states") else traj)
    if len(states) < 3:
        raise ValueError("need at least three snapshots")
    t = np.array([s.t for s in states])
    dts = np.diff(t)
    if np.ptp(dts) > 1e-9 * dts.mean():
        raise ValueError("snapshots must be uniformly spaced")
    g = states[0].grid
    tf = [tensor_fields(s, p) for s in states]
    r_mass, r_mom = [], []
    for j in range(1, len(states) - 1):
        dt2 = t[j + 1] - t[j - 1]
        drho = (tf[j + 1]["rho"] - tf[j - 1]["rho"]) / dt2
        dP = (tf[j + 1]["P"] - tf[j - 1]["P"]) / dt2
        F = tf[j]
        div_p = sum(g.derivative(F["P"][k], k) for k in range(g.dim)).real
        rm = drho + 2.0 * div_p
        rv = np.empty_like(dP)
        for i in range(g.dim):
            div_sig = sum(g.derivative(F["sigma"][i, k], k) for k in range(g.dim)).real
            rv[i] = dP[i] + div_sig + g.derivative(F["p"], i).real + F["l"][i]
        r_mass.append(g.l2_norm(rm))
        r_mom.append(float(np.sqrt(sum(g.l2_norm(rv[i]) ** 2 for i in range(g.dim)))))
    return t[1:-1], np.array(r_mass), np.array(r_mom)


# ---------------------------------------------------------------------------
# Morawetz action

@dataclass(frozen=True)
class MorawetzWeight:
    """Derivatives of the mollified weight ``a = sqrt(|x|^2 + eps^2)`` on the torus.

    The weight is defined through its Fourier symbol
    ``a^(k) = -c_d (eps/|k|)^((d+1)/2) K_((d+1)/2)(eps |k|)``, the transform of
    ``sqrt(|x|^2+eps^2)`` away from ``k = 0``. All derivative tables are in FFT
    displacement order and use the Nyquist-free derivative symbol.
    """

    eps: float
    grad: np.ndarray
    hess: np.ndarray
    lap: np.ndarray
    bilap: np.ndarray


def bilaplacian_symbol(d: int, eps: float, k):
    """Fourier transform of ``-Delta Delta sqrt(|x|^2+eps^2)``: ``c_d eps^nu k^(4-nu) K_nu(eps k)``.

    At ``k = 0`` it equals ``c_d Gamma(nu) 2^(nu-1) k^(4-2nu)``, i.e. ``8 pi`` in d = 3.
    """
    k = np.atleast_1d(np.asarray(k, float))
    nu = 0.5 * (d + 1)
    cd = (2 * np.pi) ** (d / 2) * math.sqrt(2 / np.pi)
    kz = np.where(k > 0, k, 1.0)
    val = cd * eps ** nu * kz ** (4 - nu) * special.kv(nu, eps * kz)
    zero = cd * special.gamma(nu) * 2 ** (nu - 1) if d == 3 else 0.0
    return np.where(k > 0, val, zero)


def morawetz_weight(g: Grid, eps: float) -> MorawetzWeight:
    if eps < 2 * g.h - 1e-12:
        raise ValueError(f"mollification width {eps} below 2h = {2 * g.h}")
    d = g.dim
    nu = 0.5 * (d + 1)
    cd = (2 * np.pi) ** (d / 2) * math.sqrt(2 / np.pi)
    kk = np.sqrt(g.k2)
    kz = np.where(kk > 0, kk, 1.0)
    ahat = -cd * (eps / kz) ** nu * special.kv(nu, eps * kz)
    ahat = np.where(kk > 0, ahat, 0.0)
    D = g.deriv_symbols()
    inv = 1.0 / g.weight

    def tab(sym):
        return (np.fft.ifftn(sym * ahat) * inv).real

    grad = np.stack([tab(D[j]) for j in range(d)])
    hess = np.empty((d, d) + g.shape)
    for j in range(d):
        for k in range(j, d):
            hess[j, k] = hess[k, j] = tab(D[j] * D[k])
    lsym = sum(D[j] * D[j] for j in range(d))
    return MorawetzWeight(eps, grad, hess, tab(lsym), tab(lsym * lsym))


def _conv(g: Grid, table, f):
    """``sum_y table(x - y) f(y)`` (no quadrature weight)."""
    return np.fft.ifftn(np.fft.fftn(table) * np.fft.fftn(f)).real


def morawetz_action(s: HFBState, eps: float, weight: Optional[MorawetzWeight] = None) -> float:
    """``M = 2 int grad a(x-y) . [P(x) rho(y) - rho(x) P(y)] dx dy``."""
    g = s.grid
    W = weight or morawetz_weight(g, eps)
    rho = density(s.gam)
    P = momentum_density(s.gam)
    w2 = g.weight ** 2
    tot = 0.0
    for j in range(g.dim):
        tot += np.sum(P[j] * _conv(g, W.grad[j], rho)) - np.sum(rho * _conv(g, W.grad[j], P[j]))
    return float(2.0 * tot * w2)


def morawetz_bound(s: HFBState, eps: float, weight: Optional[MorawetzWeight] = None) -> float:
    """``4 sup|grad a| ||rho||_1 ||P||_1``, an upper bound for ``|M|``."""
    g = s.grid
    W = weight or morawetz_weight(g, eps)
    ga = float(np.max(np.sqrt(np.sum(W.grad ** 2, axis=0))))
    rho = density(s.gam)
    P = momentum_density(s.gam)
    pn = float(np.sum(np.sqrt(np.sum(P ** 2, axis=0))) * g.weight)
    return 4.0 * ga * float(np.sum(np.abs(rho)) * g.weight) * pn


def morawetz_rate_terms(s: HFBState, p: PotentialSpec, eps: float,
                        weight: Optional[MorawetzWeight] = None) -> tuple:
    """The four contributions to ``dM/dt``; see the module docs of :func:`morawetz_action`."""
    g = s.grid
    W = weight or morawetz_weight(g, eps)
    F = tensor_fields(s, p)
    rho, P, sig, l, Wd = F["rho"], F["P"], F["sigma"], F["l"], F["W"]
    w2 = g.weight ** 2
    d = g.dim
    t1 = 2.0 * np.sum(rho * _conv(g, -W.bilap, rho)) * w2
    t2 = 2.0 * np.sum(rho * _conv(g, W.lap, Wd)) * w2
    t3 = 0.0
    for j in range(d):
        for k in range(d):
            cr = _conv(g, W.hess[j, k], rho)
            t3 += 2.0 * np.sum(sig[j, k] * cr) - 4.0 * np.sum(P[j] * _conv(g, W.hess[j, k], P[k]))
    t3 *= 2.0 * w2
    t4 = 0.0
    for j in range(d):
        t4 += np.sum(rho * _conv(g, W.grad[j], l[j])) - np.sum(l[j] * _conv(g, W.grad[j], rho))
    t4 *= 2.0 * w2
    return float(t1), float(t2), float(t3), float(t4)


def bilaplacian_pairing(rho: Field, eps: float) -> float:
    """``int (-Delta Delta a_eps)(x-y) rho(x) rho(y) dx dy`` (one half of term1)."""
    g = rho.grid
    W = morawetz_weight(g, eps)
    r = rho.data.real
    return float(np.sum(r * _conv(g, -W.bilap, r)) * g.weight ** 2)


# ---------------------------------------------------------------------------
# pointwise bounds

def cauchy_schwarz_defect(s: HFBState) -> tuple:
    """``d0 = max(|Gamma(x,y)|^2 - rho(x) rho(y))`` and
    ``d1 = max(|grad_x Gamma(x,z)|^2 - E_k(x) rho(z))``."""
    g = s.grid
    G = s.gam.data
    rho = np.diag(G).real
    d0 = float(np.max(np.abs(G) ** 2 - np.outer(rho, rho)))
    grads = _first_slot_grads(s.gam)
    gsq = sum(np.abs(a) ** 2 for a in grads)
    ek = kinetic_density(s.gam).flat.real
    d1 = float(np.max(gsq - np.outer(ek, rho)))
    return d0, d1


# ---------------------------------------------------------------------------
# series container

@dataclass
class ObservableSeries:
    """Named channels of ``(t, value)`` records plus run metadata."""

    meta: dict = field(default_factory=dict)
    channels: dict = field(default_factory=dict)

    def add(self, name: str, t: float, value):
        if isinstance(value, Field):
            value = field_digest(value)
        self.channels.setdefault(name, []).append((float(t), value))

    def columns(self) -> dict:
        cols = {}
        for name, recs in self.channels.items():
            for t, v in recs:
                if isinstance(v, dict):
                    for k, x in v.items():
                        cols.setdefault(f"{name}.{k}", {})[t] = x
                else:
                    cols.setdefault(name, {})[t] = v
        return cols

    def to_csv(self, path):
        import csv

        cols = self.columns()
        times = sorted({t for c in cols.values() for t in c})
        names = sorted(cols)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + names)
            for t in times:
                wr.writerow([repr(t)] + [repr(float(cols[n][t])) if t in cols[n] else "" for n in names])

    def to_dict(self) -> dict:
        return dict(meta=self.meta, channels={k: [[t, v] for t, v in r] for k, r in self.channels.items()})


def field_digest(f: Field) -> dict:
    a = np.abs(f.data)
    w = f.grid.weight
    return dict(l1=float(a.sum() * w), l2=float(np.sqrt((a ** 2).sum() * w)), linf=float(a.max()))
