import numpy as np
import pytest

from hfblab.dynamics import (StabilityError, collision_bv, evolve, max_stable_dt, rhs_gamma,
                             rhs_lambda, rhs_phi, strang_step)
from hfblab.fields import (HERMITIAN, SYMMETRIC, Field, HFBState, Kernel, gaussian_field,
                           gaussian_pair_kernel, pure_condensate, state_from_pair)
from hfblab.grid import make_grid
from hfblab.observables import particle_number
from hfblab.potential import PotentialSpec, pair_matrix, sample_displacements

from conftest import random_state


def small_setup(rng, n=12, N=2.0, beta=0.5):
    g = make_grid(1, n, 6.0)
    p = PotentialSpec(amplitude=2.0, beta=beta, N=N, radius=3.0)
    s = random_state(g, rng, N=N, beta=beta, amp=0.4)
    Vm = pair_matrix(g, sample_displacements(g, p))
    return g, p, s, Vm


def loop_oracles(g, Vm, phi, lam, gam):
    """Term-by-term quadratures of the three right sides, one output entry at a time."""
    n, w = g.size, g.weight
    ys = range(n)
    rho = np.array([gam[y, y] for y in ys])
    rphi = np.zeros(n, complex)
    for a in range(n):
        rphi[a] = -sum(phi[a] * Vm[a, y] * rho[y] for y in ys) * w
        rphi[a] -= sum(Vm[a, y] * phi[y] * (gam[y, a] - phi[y].conj() * phi[a])
                       + Vm[a, y] * phi[y].conj() * (lam[a, y] - phi[a] * phi[y]) for y in ys) * w
    rlam = np.zeros((n, n), complex)
    rgbar = np.zeros((n, n), complex)
    for a in range(n):
        for b in range(n):
            acc = 0.0
            accg = 0.0
            for y in ys:
                plus = Vm[a, y] + Vm[b, y]
                minus = Vm[a, y] - Vm[b, y]
                acc += -plus * rho[y] * lam[a, b]
                acc += -plus * (lam[a, y] * gam[y, b] + gam[a, y].conj() * lam[y, b])
                acc += 2 * plus * abs(phi[y]) ** 2 * phi[a] * phi[b]
                accg += -minus * lam[a, y] * lam[y, b].conj()
                accg += -minus * (gam[a, y].conj() * gam[y, b].conj() + gam[y, y].conj() * gam[a, b].conj())
                accg += 2 * minus * abs(phi[y]) ** 2 * phi[a] * phi[b].conj()
            rlam[a, b] = acc * w
            rgbar[a, b] = accg * w
    return rphi, rlam, rgbar


def test_zero_potential_gives_zero(rng):
    g = make_grid(1, 16, 8.0)
    s = random_state(g, rng)
    p = PotentialSpec(amplitude=0.0)
    for f in (rhs_phi, rhs_lambda, rhs_gamma, collision_bv):
        assert np.max(np.abs(f(s, p).data)) == 0


def test_quadrature_oracles(rng):
    g, p, s, Vm = small_setup(rng)
    rphi, rlam, rgbar = loop_oracles(g, Vm, s.phi.flat, s.lam.data, s.gam.data)
    assert np.max(np.abs(rhs_phi(s, p).flat - rphi)) < 1e-10 * max(1, np.max(np.abs(rphi)))
    assert np.max(np.abs(rhs_lambda(s, p).data - rlam)) < 1e-10 * max(1, np.max(np.abs(rlam)))
    # Gamma is advanced through the conjugate of the Gamma-bar equation
    assert np.max(np.abs(rhs_gamma(s, p).data + rgbar.conj())) < 1e-10 * max(1, np.max(np.abs(rgbar)))


def test_lambda_with_zero_condensate(rng):
    g, p, s, Vm = small_setup(rng)
    s0 = s.replace(phi=Field(g, np.zeros(g.shape, complex)))
    _, rlam, _ = loop_oracles(g, Vm, s0.phi.flat, s0.lam.data, s0.gam.data)
    assert np.max(np.abs(rhs_lambda(s0, p).data - rlam)) < 1e-10


def test_pure_condensate_reductions(rng):
    g = make_grid(1, 32, 8.0)
    p = PotentialSpec(amplitude=2.0, beta=0.5, N=4.0, radius=3.0)
    phi = gaussian_field(g, width=1.0, momentum=0.5)
    s = pure_condensate(phi, N=4.0, beta=0.5)
    Vm = pair_matrix(g, sample_displacements(g, p))
    f = phi.flat
    vphi2 = Vm @ np.abs(f) ** 2 * g.weight
    assert np.max(np.abs(rhs_phi(s, p).flat + vphi2 * f)) < 1e-12
    # Lambda = phi x phi, Gamma = conj(phi) x phi: the Gamma terms cancel the phi forcing
    # except the exchange contributions, which reduce to the same tensor structure
    rl = rhs_lambda(s, p).data
    ref = -(vphi2[:, None] + vphi2[None, :]) * np.outer(f, f)
    assert np.max(np.abs(rl - ref)) < 1e-12
    # Gamma-bar right side for the pure condensate: -(v(x1) - v(x2)) conj(phi)(x1) phi(x2)... conjugated
    rg = rhs_gamma(s, p).data
    ref_g = (vphi2[:, None] - vphi2[None, :]) * np.outer(f.conj(), f)
    assert np.max(np.abs(rg - ref_g)) < 1e-12


def test_gamma_rhs_structure(rng):
    g, p, s, _ = small_setup(rng, n=16)
    r = rhs_gamma(s, p).data
    assert np.max(np.abs(r + r.conj().T)) < 1e-12
    assert np.max(np.abs(np.diag(r))) < 1e-12


def test_collision_matches_rhs_gamma(rng):
    g, p, s, _ = small_setup(rng, n=16)
    b = collision_bv(s, p).data
    assert np.max(np.abs(b - rhs_gamma(s, p).data)) < 1e-10
    assert np.max(np.abs(np.diag(b))) < 1e-12


def test_free_plane_wave_exact():
    g = make_grid(1, 32, 2 * np.pi)
    k = 3.0
    phi = Field(g, np.exp(1j * k * g.x1d) / np.sqrt(2 * np.pi))
    zero = Kernel(g, np.zeros((32, 32), complex), SYMMETRIC)
    s = HFBState(0.0, phi, zero, Kernel(g, np.zeros((32, 32), complex), HERMITIAN), 1.0, 0.0)
    p = PotentialSpec(amplitude=0.0)
    traj = evolve(s, p, T=1.0, dt=0.01, check=False)
    out = traj.states[-1].phi.data
    assert np.max(np.abs(out - phi.data * np.exp(-1j * k ** 2))) < 1e-10


def smooth_state(n=32, N=4.0, beta=0.5):
    g = make_grid(1, n, 12.0)
    phi = gaussian_field(g, width=1.0, momentum=0.5)
    k = gaussian_pair_kernel(g, amp=0.3, rel_width=0.8, cm_width=1.0)
    return state_from_pair(phi, k, N, beta), PotentialSpec(amplitude=2.0, beta=beta, N=N, radius=3.0)


def test_strang_second_order():
    s, p = smooth_state()
    T = 0.4

    def run(dt):
        st = evolve(s, p, T, dt, keep_states=False, check=False).states[-1]
        return np.concatenate([st.phi.flat, st.lam.data.ravel(), st.gam.data.ravel()])

    a, b, c = run(0.04), run(0.02), run(0.01)
    ratio = np.linalg.norm(a - b) / np.linalg.norm(b - c)
    assert ratio == pytest.approx(4.0, rel=0.2)


def test_time_reversal():
    s, p = smooth_state()
    errs = []
    for dt in (0.02, 0.01):
        back = strang_step(strang_step(s, p, dt), p, -dt)
        errs.append(np.linalg.norm(back.lam.data - s.lam.data) + np.linalg.norm(back.phi.flat - s.phi.flat))
    # at least O(dt^3)
    assert errs[1] < errs[0] / 7


def test_stability_guard():
    s, p = smooth_state()
    with pytest.raises(StabilityError):
        strang_step(s, p, 1.01 * max_stable_dt(s.grid))


def test_T_zero_single_snapshot():
    s, p = smooth_state()
    traj = evolve(s, p, 0.0, 0.01)
    assert len(traj) == 1 and traj.times[0] == 0.0


def test_free_unitarity():
    s, _ = smooth_state()
    s = s.replace(N=1.0, beta=0.0)
    traj = evolve(s, PotentialSpec(amplitude=0.0), 1.0, 0.02, cadence=10)
    norms = [st.lam.norm() for st in traj.states]
    assert np.ptp(norms) < 1e-10
    # trajectory invariants: strict times, symmetry of every snapshot
    assert np.all(np.diff(traj.times) > 0)


def test_number_conserved_short_run():
    s, p = smooth_state()
    traj = evolve(s, p, 0.5, 0.01, cadence=10)
    n = [particle_number(st) for st in traj.states]
    assert np.ptp(n) < 1e-10


def test_condensate_rank_one_defect_is_order_one_over_N():
    # beta = 0: the only N dependence is the (1/N) V Lambda term of the pair equation
    g = make_grid(1, 32, 12.0)
    phi = gaussian_field(g, width=1.0, momentum=0.5)
    defects = []
    for N in (4.0, 8.0, 16.0):
        p = PotentialSpec(amplitude=2.0, beta=0.0, N=N, radius=3.0)
        st = evolve(pure_condensate(phi, N=N, beta=0.0), p, 0.5, 0.01, keep_states=False).states[-1]
        f = st.phi.flat
        defects.append(np.linalg.norm(st.gam.data - np.outer(f.conj(), f)) * g.weight)
    assert defects[0] / defects[1] == pytest.approx(2.0, rel=0.1)
    assert defects[1] / defects[2] == pytest.approx(2.0, rel=0.1)


def test_state_scaling_mismatch(rng):
    g, p, s, _ = small_setup(rng)
    with pytest.raises(ValueError):
        strang_step(s.replace(N=2 * s.N), p, 0.01)
