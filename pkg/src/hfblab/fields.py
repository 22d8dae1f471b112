"""One- and two-particle containers and kernel algebra.

A :class:`Kernel` stores its samples as an ``(M, M)`` matrix with
``M = n**d``; row index is the first variable. Composition, traces and
eigenvalues use the quadrature weight so that the matrix ``K * h**d`` is
the integral operator.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .grid import Grid

SYMMETRIC = "symmetric"
HERMITIAN = "hermitian"
NONE = "none"
_SYM_TAGS = (SYMMETRIC, HERMITIAN, NONE)
SYM_TOL = 1e-10


class GridMismatch(ValueError):
    pass


class PSDViolation(RuntimeError):
    pass


def _same_grid(a: Grid, b: Grid):
    if a != b:
        raise GridMismatch(f"grid mismatch: {a} vs {b}")


@dataclass(frozen=True, eq=False)
class Field:
    """Complex samples of a one-particle function on ``grid``."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=complex).reshape(self.grid.shape)
        if not np.all(np.isfinite(a)):
            raise ValueError("field has non-finite entries")
        object.__setattr__(self, "data", a)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def norm(self) -> float:
        return self.grid.l2_norm(self.data)

    def conj(self) -> "Field":
        return Field(self.grid, np.conj(self.data))


@dataclass(frozen=True, eq=False)
class Kernel:
    """Two-particle function ``K(x, y)`` with a symmetry tag.

    The tag is checked on construction (``check=True``); symmetric means
    ``K(x,y) = K(y,x)`` and hermitian means ``K(x,y) = conj K(y,x)``.
    """

    grid: Grid
    data: np.ndarray
    sym: str = NONE
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        M = self.grid.size
        a = np.asarray(self.data, dtype=complex).reshape(M, M)
        object.__setattr__(self, "data", a)
        if self.sym not in _SYM_TAGS:
            raise ValueError(f"unknown symmetry tag {self.sym!r}")
        if self.check:
            d = symmetry_defect(a, self.sym)
            if d > SYM_TOL * max(1.0, float(np.max(np.abs(a), initial=0.0))):
                raise ValueError(f"{self.sym} kernel violates its symmetry by {d:.3e}")

    @property
    def tensor(self) -> np.ndarray:
        """Samples reshaped to ``grid.shape * 2``."""
        return self.data.reshape(self.grid.shape * 2)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.data) ** 2)) * self.grid.weight)

    def with_data(self, a, sym=None, check=True) -> "Kernel":
        return Kernel(self.grid, a, self.sym if sym is None else sym, check)


def symmetry_defect(a: np.ndarray, sym: str) -> float:
    if sym == SYMMETRIC:
        return float(np.max(np.abs(a - a.T), initial=0.0))
    if sym == HERMITIAN:
        return max(float(np.max(np.abs(a - a.conj().T), initial=0.0)),
                   float(np.max(np.abs(np.diag(a).imag), initial=0.0)))
    return 0.0


def identity_kernel(g: Grid) -> Kernel:
    """Discrete delta ``delta_h``: ``1/h^d`` on the diagonal."""
    return Kernel(g, np.eye(g.size) / g.weight, HERMITIAN)


def outer(u: Field, v: Field, sym: str = NONE) -> Kernel:
    """``(u ⊗ v)(x, y) = u(x) v(y)``."""
    _same_grid(u.grid, v.grid)
    return Kernel(u.grid, np.outer(u.flat, v.flat), sym)


# ---------------------------------------------------------------------------
# kernel algebra

def kernel_compose(A: Kernel, B: Kernel) -> Kernel:
    """``C(x,y) = sum_z A(x,z) B(z,y) h^d``."""
    _same_grid(A.grid, B.grid)
    return Kernel(A.grid, (A.data @ B.data) * A.grid.weight, NONE)


def kernel_trace(K: Kernel) -> complex:
    return complex(np.trace(K.data) * K.grid.weight)


def kernel_diagonal(K: Kernel) -> Field:
    return Field(K.grid, np.diag(K.data).copy())


def hermitian_psd_defect(K: Kernel) -> tuple:
    """Hermiticity defect and smallest eigenvalue of the hermitized operator.

    Dense diagonalization for ``M <= 2048``; otherwise a Lanczos iteration
    (``scipy.sparse.linalg.eigsh``) on the operator.
    """
    a = K.data
    defect = float(np.max(np.abs(a - a.conj().T), initial=0.0))
    H = 0.5 * (a + a.conj().T) * K.grid.weight
    if H.shape[0] <= 2048:
        lam = float(np.linalg.eigvalsh(H)[0])
    else:
        from scipy.sparse.linalg import eigsh

        lam = float(eigsh(H, k=1, which="SA", return_eigenvectors=False)[0])
    return defect, lam


def check_psd(K: Kernel, tol_rel: float = 1e-8) -> float:
    """Raise :class:`PSDViolation` if the smallest eigenvalue is below ``-tol``.

    The tolerance is ``tol_rel`` times the trace scale of ``K``.
    """
    _, lam = hermitian_psd_defect(K)
    scale = max(abs(kernel_trace(K)), 1e-300)
    if lam < -tol_rel * scale:
        raise PSDViolation(f"min eigenvalue {lam:.3e} below -{tol_rel:g}*trace ({scale:.3e})")
    return lam


def kernel_svd(K: Kernel, r: int) -> tuple:
    """Truncated singular value decomposition in L2.

    Returns ``(factors, rel_err)`` where ``factors`` is a list of
    ``(sigma, u, v)`` with ``K(x,y) ≈ sum sigma u(x) v(y)``; the ``u`` and
    the ``v`` families are each L2-orthonormal. Sorted by descending sigma.
    """
    g = K.grid
    M = g.size
    if r < 1 or r > M:
        raise ValueError(f"rank must be in [1, {M}], got {r}")
    U, s, Vh = np.linalg.svd(K.data)
    w = g.weight
    out = []
    for i in range(r):
        out.append((float(s[i] * w), Field(g, U[:, i] / np.sqrt(w)), Field(g, Vh[i] / np.sqrt(w))))
    rec = sum(sig * np.outer(u.flat, v.flat) for sig, u, v in out)
    den = np.linalg.norm(K.data)
    err = float(np.linalg.norm(K.data - rec) / den) if den > 0 else 0.0
    return out, err


@lru_cache(maxsize=16)
def _shear_index(g: Grid) -> np.ndarray:
    """Flat source index of ``K`` for each entry of the sheared kernel."""
    n, d = g.n, g.dim
    idx = np.indices(g.shape).reshape(d, -1)  # multi-index of a flat position
    # for sheared entry (w, y) the source row is x = (y + w) mod n per axis
    x = (idx[:, :, None] + idx[:, None, :]) % n  # axes: (d, w, y)
    return np.ravel_multi_index(tuple(x), g.shape)


def shear_reindex(K: Kernel, direction: str = "forward") -> Kernel:
    """Map ``K(x, y)`` to ``K~(w, y) = K(y + w, y)`` (or back).

    The map is a permutation of samples, so every pure L2 quantity is kept
    exactly. The output carries no symmetry tag.
    """
    g = K.grid
    src = _shear_index(g)
    cols = np.broadcast_to(np.arange(g.size), src.shape)
    if direction == "forward":
        out = K.data[src, cols]
    elif direction == "inverse":
        out = np.empty_like(K.data)
        out[src, cols] = K.data
    else:
        raise ValueError("direction must be 'forward' or 'inverse'")
    return Kernel(g, out, NONE)


# ---------------------------------------------------------------------------
# HFB state

@dataclass(frozen=True, eq=False)
class HFBState:
    """The triple ``(phi, Lambda, Gamma)`` at time ``t`` with scaling ``(N, beta)``."""

    t: float
    phi: Field
    lam: Kernel
    gam: Kernel
    N: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        _same_grid(self.phi.grid, self.lam.grid)
        _same_grid(self.phi.grid, self.gam.grid)
        if self.lam.sym != SYMMETRIC:
            raise ValueError("Lambda must be tagged symmetric")
        if self.gam.sym != HERMITIAN:
            raise ValueError("Gamma must be tagged hermitian")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    def replace(self, **kw) -> "HFBState":
        d = dict(t=self.t, phi=self.phi, lam=self.lam, gam=self.gam, N=self.N, beta=self.beta)
        d.update(kw)
        return HFBState(**d)


def pure_condensate(phi: Field, N: float = 1.0, beta: float = 0.0, t: float = 0.0) -> HFBState:
    """``Lambda = phi ⊗ phi``, ``Gamma = conj(phi) ⊗ phi``."""
    p = phi.flat
    lam = Kernel(phi.grid, np.outer(p, p), SYMMETRIC)
    gam = Kernel(phi.grid, np.outer(p.conj(), p), HERMITIAN)
    return HFBState(t, phi, lam, gam, N, beta)


def pair_functions(k: Kernel) -> tuple:
    """Return the kernels ``sh(k)`` and ``ch(k)`` of a symmetric pair kernel.

    ``sh(k) = k ∘ sinh(s)/s`` and ``ch(k) = cosh(s)`` with
    ``s = sqrt(conj(k) ∘ k)``; ``ch`` includes the identity and is
    returned as an operator matrix (``I + ...``), ``sh`` as a kernel.
    """
    g = k.grid
    w = g.weight
    kop = k.data * w
    Mop = kop.conj() @ kop
    Mop = 0.5 * (Mop + Mop.conj().T)
    mu, Q = np.linalg.eigh(Mop)
    s = np.sqrt(np.clip(mu, 0.0, None))
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(s > 1e-8, np.sinh(s) / np.where(s > 0, s, 1.0), 1.0 + s * s / 6.0)
    f = (Q * sinc) @ Q.conj().T
    ch = (Q * np.cosh(s)) @ Q.conj().T
    sh_op = kop @ f
    return sh_op / w, ch


def state_from_pair(phi: Field, k: Kernel, N: float, beta: float = 0.0, t: float = 0.0) -> HFBState:
    """Build ``(phi, Lambda, Gamma)`` from a condensate and a symmetric pair kernel.

    ``Gamma = (1/N) conj(sh) ∘ sh + conj(phi) ⊗ phi`` and
    ``Lambda = (1/2N) sh(2k) + phi ⊗ phi`` with ``sh(2k) = 2 sh ∘ ch``.
    """
    _same_grid(phi.grid, k.grid)
    g = phi.grid
    w = g.weight
    sh, ch = pair_functions(k)
    shop = sh * w
    gc = (shop.conj() @ shop) / w / N
    gc = 0.5 * (gc + gc.conj().T)
    lc = (shop @ ch) / w / N
    lc = 0.5 * (lc + lc.T)
    p = phi.flat
    gam = Kernel(g, gc + np.outer(p.conj(), p), HERMITIAN)
    lam = Kernel(g, lc + np.outer(p, p), SYMMETRIC)
    return HFBState(t, phi, lam, gam, N, beta)


def gaussian_field(g: Grid, center=0.0, width=1.0, momentum=0.0, norm: Optional[float] = 1.0) -> Field:
    """Gaussian wave packet ``exp(-|x-c|^2/(2 w^2) + i p.x)``, L2-normalized to ``norm``."""
    c = np.broadcast_to(np.asarray(center, float), (g.dim,))
    p = np.broadcast_to(np.asarray(momentum, float), (g.dim,))
    X = g.coords()
    r2 = sum((X[j] - c[j]) ** 2 for j in range(g.dim))
    ph = sum(p[j] * X[j] for j in range(g.dim))
    f = np.exp(-0.5 * r2 / width ** 2 + 1j * ph)
    if norm is not None:
        f *= norm / g.l2_norm(f)
    return Field(g, f)


def gaussian_pair_kernel(g: Grid, amp: float, rel_width: float, cm_width: float, center=0.0) -> Kernel:
    """Symmetric Gaussian profile for the pair kernel ``k``.

    ``k(x,y) = amp * exp(-|x-y|^2/(2 a^2) - |(x+y)/2 - c|^2/(2 b^2))``.
    """
    c = np.broadcast_to(np.asarray(center, float), (g.dim,))
    X = [x.reshape(-1) for x in g.coords()]
    r2 = sum((X[j][:, None] - X[j][None, :]) ** 2 for j in range(g.dim))
    m2 = sum((0.5 * (X[j][:, None] + X[j][None, :]) - c[j]) ** 2 for j in range(g.dim))
    K = amp * np.exp(-0.5 * r2 / rel_width ** 2 - 0.5 * m2 / cm_width ** 2)
    return Kernel(g, 0.5 * (K + K.T), SYMMETRIC)


# ---------------------------------------------------------------------------
# snapshot format
#
# header (little endian, 48 bytes):
#   magic b"HFBS" | u32 version | u32 kind (0 field, 1 kernel) | u32 dim
#   u32 n | f64 L | u32 sym (0 none, 1 symmetric, 2 hermitian) | u32 pad
#   f64 time | u64 count
# followed by ``count`` complex128 values (little endian, C order).

_MAGIC = b"HFBS"
_HDR = struct.Struct("<4sIIIIdIIdQ")
_SYM_CODE = {NONE: 0, SYMMETRIC: 1, HERMITIAN: 2}
_CODE_SYM = {v: k for k, v in _SYM_CODE.items()}


def to_bytes(obj, t: float = 0.0) -> bytes:
    g = obj.grid
    if isinstance(obj, Field):
        kind, sym = 0, 0
    elif isinstance(obj, Kernel):
        kind, sym = 1, _SYM_CODE[obj.sym]
    else:
        raise TypeError("expected Field or Kernel")
    arr = np.ascontiguousarray(obj.data, dtype="<c16")
    hdr = _HDR.pack(_MAGIC, 1, kind, g.dim, g.n, g.L, sym, 0, float(t), arr.size)
    return hdr + arr.tobytes()


def from_bytes(buf: bytes):
    """Inverse of :func:`to_bytes`; returns ``(obj, t)``."""
    magic, ver, kind, dim, n, L, sym, _, t, count = _HDR.unpack_from(buf, 0)
    if magic != _MAGIC or ver != 1:
        raise ValueError("not a snapshot buffer")
    g = Grid(dim, n, L)
    arr = np.frombuffer(buf, dtype="<c16", count=count, offset=_HDR.size).astype(complex)
    if kind == 0:
        return Field(g, arr), t
    return Kernel(g, arr, _CODE_SYM[sym]), t


def write_snapshot(path, obj, t: float = 0.0):
    with open(path, "wb") as fh:
        fh.write(to_bytes(obj, t))


def read_snapshot(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
