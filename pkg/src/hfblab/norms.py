"""Mixed Lebesgue, Strichartz and Sobolev norms of pair kernels.

Frames
------
``plain-x``: outer norm over the first variable, inner L2 over the second.
``plain-y``: the same with the roles swapped.
``sheared``: outer norm over ``w = x - y`` (torus shear), inner L2 over ``y``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .fields import Kernel, shear_reindex

FRAMES = ("plain-x", "plain-y", "sheared")


def _check_q(q):
    if not (q == np.inf or (np.isfinite(q) and q >= 1)):
        raise ValueError(f"exponent must lie in [1, inf], got {q}")


def _lq(vals, q, w):
    if np.isinf(q):
        return float(np.max(vals))
    return float((np.sum(vals ** q) * w) ** (1.0 / q))


def _inner_l2(a, w, axis):
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=axis) * w)


def mixed_space_norm(K: Kernel, q: float, axis: str = "x") -> float:
    """``|| ||K||_{L2(other)} ||_{L^q(axis)}``."""
    _check_q(q)
    w = K.grid.weight
    if axis == "x":
        inner = _inner_l2(K.data, w, 1)
    elif axis == "y":
        inner = _inner_l2(K.data, w, 0)
    else:
        raise ValueError("axis must be 'x' or 'y'")
    return _lq(inner, q, w)


def rotated_mixed_norm(K: Kernel, q: float) -> float:
    """``L^q(d(x-y)) L2`` norm realized through the torus shear."""
    _check_q(q)
    return mixed_space_norm(shear_reindex(K, "forward"), q, "x")


def frame_norm(K: Kernel, q: float, frame: str) -> float:
    if frame == "plain-x":
        return mixed_space_norm(K, q, "x")
    if frame == "plain-y":
        return mixed_space_norm(K, q, "y")
    if frame == "sheared":
        return rotated_mixed_norm(K, q)
    raise ValueError(f"unknown frame {frame!r}")


def _series(traj):
    """Accept a Trajectory-like object, or a ``(times, kernels)`` pair."""
    if isinstance(traj, tuple) and len(traj) == 2:
        times, ks = traj
        return np.asarray(times, float), list(ks)
    states = traj.states if hasattr(traj, "states") else traj
    return np.array([s.t for s in states]), [s.lam for s in states]


def time_weights(times) -> np.ndarray:
    """Trapezoid weights on a uniform time grid."""
    times = np.asarray(times, float)
    if len(times) < 2:
        raise ValueError("need at least two snapshots for a time norm")
    dt = np.diff(times)
    if np.any(dt <= 0) or np.ptp(dt) > 1e-9 * dt.mean():
        raise ValueError("snapshots must be uniformly spaced")
    c = np.full(len(times), dt.mean())
    c[0] = c[-1] = 0.5 * dt.mean()
    return c


def _time_norm(vals, p, c):
    if np.isinf(p):
        return float(np.max(vals))
    return float(np.sum(c * vals ** p) ** (1.0 / p))


def spacetime_strichartz_norm(traj, p: float, q: float, frame: str = "plain-x") -> float:
    """``L^p(dt) L^q L2`` norm of a kernel time series in the given frame."""
    times, ks = _series(traj)
    c = time_weights(times)
    _check_q(p)
    vals = np.array([frame_norm(k, q, frame) for k in ks])
    return _time_norm(vals, p, c)


def admissible_pairs(d: int, p0: float = 2.0, count: int = 8) -> list:
    """Sample of the admissible line ``2/p + d/q = d/2`` with ``p >= p0``.

    Always contains ``(inf, 2)`` and the lower end of the segment; for d = 3
    and ``p0 = 2`` that end is ``(2, 6)``. When it lies inside the segment,
    ``(8/3, 4)`` replaces the nearest interior sample in d = 3. In d = 2 the
    forbidden endpoint is replaced by ``q = 32``.
    """
    if p0 < 2:
        raise ValueError("p0 must be >= 2")
    if count < 2:
        raise ValueError("count must be >= 2")
    th_max = {1: 0.5, 2: 1.0 - 2.0 / 32.0, 3: 1.0}[d]
    hi = min(th_max, 2.0 / p0)
    th = list(np.linspace(0.0, hi, count))
    if d == 3 and 0.0 < 0.75 < hi and count > 2:
        j = 1 + int(np.argmin([abs(x - 0.75) for x in th[1:-1]]))
        th[j] = 0.75
    out = []
    for t in th:
        p = np.inf if t == 0 else 2.0 / t
        den = d / 2.0 - t
        q = np.inf if den <= 1e-15 else d / den
        out.append((p, q))
    return out


def restricted_strichartz(traj, p0: float, count: int = 8) -> dict:
    """Sup over the admissible sample: plain frames with ``p >= p0``, sheared frame with ``p >= 2``.

    Returns a dict with ``value`` and the maximizing ``frame`` and ``pair``.
    """
    times, ks = _series(traj)
    d = ks[0].grid.dim
    c = time_weights(times)
    best = dict(value=-np.inf, frame=None, pair=None, sample="fixed-8" if count == 8 else f"fixed-{count}")
    cache = {}

    def norm(frame, p, q):
        key = (frame, q)
        if key not in cache:
            cache[key] = np.array([frame_norm(k, q, frame) for k in ks])
        return _time_norm(cache[key], p, c)

    for frame, pairs in (("plain-x", admissible_pairs(d, p0, count)),
                         ("plain-y", admissible_pairs(d, p0, count)),
                         ("sheared", admissible_pairs(d, 2.0, count))):
        for p, q in pairs:
            v = norm(frame, p, q)
            if v > best["value"]:
                best.update(value=v, frame=frame, pair=(p, q))
    return best


def dual_exponent(p: float) -> float:
    if np.isinf(p):
        return 1.0
    if p == 1:
        return np.inf
    return p / (p - 1.0)


def dual_strichartz(traj, p: float, q: float) -> tuple:
    """Min over frames of ``||F||_{L^{p'} L^{q'} L2}``; returns ``(value, frame, all)``."""
    pd, qd = dual_exponent(p), dual_exponent(q)
    vals = {f: spacetime_strichartz_norm(traj, pd, qd, f) for f in FRAMES}
    fr = min(vals, key=vals.get)
    return vals[fr], fr, vals


def mixed_sobolev(K: Kernel, s: float) -> float:
    """``|| |grad_x|^s |grad_y|^s K ||_{L2}`` via the double Fourier transform."""
    if s < 0:
        raise ValueError("order must be nonnegative")
    g = K.grid
    kh = np.fft.fftn(K.data.reshape(g.shape * 2))
    if s > 0:
        m = np.sqrt(g.k2) ** s
        kh = kh * m.reshape(g.shape + (1,) * g.dim) * m.reshape((1,) * g.dim + g.shape)
    return float(np.sqrt(np.sum(np.abs(kh) ** 2) / g.size ** 2) * g.weight)


def grad_grad_norm(K: Kernel) -> float:
    """``||grad_x grad_y K||_{L2}`` summed over all component pairs."""
    g = K.grid
    kh = np.fft.fftn(K.data.reshape(g.shape * 2))
    kv = g.wavevectors()
    tot = 0.0
    for a in range(g.dim):
        for b in range(g.dim):
            m = kv[a].reshape(g.shape + (1,) * g.dim) * kv[b].reshape((1,) * g.dim + g.shape)
            tot += np.sum(np.abs(m * kh) ** 2)
    return float(np.sqrt(tot / g.size ** 2) * g.weight)


# ---------------------------------------------------------------------------
# Bourgain interval splitting

def _rho_l2sq(rho_series):
    return np.array([float(np.sum(np.abs(r.data) ** 2) * r.grid.weight) for r in rho_series])


def bourgain_partition(times, rho_series: Sequence, N: float, exponent: float = 0.25,
                       eps: float = 1.0) -> list:
    """Greedy maximal intervals on which ``N^(1/2) ||rho||_{L2(dt)L2(dx)}^exponent <= eps``.

    Each interval starts where the previous ended and is extended one
    sample at a time while the windowed quantity stays below ``eps``.
    Time integrals use the trapezoid rule on the snapshot grid.

    Parameters
    ----------
    times : array_like
        Snapshot times.
    rho_series : sequence of Field
        Density snapshots ``rho(t, .)``.
    """
    times = np.asarray(times, float)
    if len(times) < 2:
        raise ValueError("need at least two snapshots")
    if eps <= 0:
        raise ValueError("eps must be positive")
    cum = _cumulative(times, _rho_l2sq(rho_series))
    out = []
    i = 0
    J = len(times) - 1
    while i < J:
        if window_quantity(cum, i, i + 1, N, exponent) > eps:
            raise ValueError(f"eps={eps:g} would force an interval shorter than one step at t={times[i]:g}")
        j = i + 1
        while j < J and window_quantity(cum, i, j + 1, N, exponent) <= eps:
            j += 1
        out.append((float(times[i]), float(times[j])))
        i = j
    return out


def _cumulative(times, vals):
    dt = np.diff(times)
    return np.concatenate([[0.0], np.cumsum(0.5 * dt * (vals[1:] + vals[:-1]))])


def window_quantity(cum, i, j, N, exponent=0.25) -> float:
    """``N^(1/2) (int_{t_i}^{t_j} ||rho||^2 dt)^(exponent/2)``."""
    return math.sqrt(N) * max(cum[j] - cum[i], 0.0) ** (0.5 * exponent)


def partition_is_maximal(times, rho_series, N, eps, intervals, exponent=0.25) -> bool:
    """Every interval is admissible and cannot be extended by one more step."""
    times = np.asarray(times, float)
    cum = _cumulative(times, _rho_l2sq(rho_series))
    idx = {float(t): i for i, t in enumerate(times)}
    J = len(times) - 1
    if intervals[0][0] != times[0] or intervals[-1][1] != times[-1]:
        return False
    for (a, b), nxt in zip(intervals, list(intervals[1:]) + [None]):
        i, j = idx[a], idx[b]
        if window_quantity(cum, i, j, N, exponent) > eps:
            return False
        if j < J and window_quantity(cum, i, j + 1, N, exponent) <= eps:
            return False
        if nxt is not None and nxt[0] != b:
            return False
    return True
