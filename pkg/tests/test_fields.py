import numpy as np
import pytest
from scipy.linalg import coshm, sinhm

from hfblab.fields import (Field, GridMismatch, HERMITIAN, Kernel, NONE, PSDViolation, SYMMETRIC,
                           check_psd, gaussian_field, gaussian_pair_kernel, hermitian_psd_defect,
                           identity_kernel, kernel_compose, kernel_diagonal, kernel_svd, kernel_trace,
                           outer, pair_functions, pure_condensate, read_snapshot, shear_reindex,
                           state_from_pair, write_snapshot, from_bytes, to_bytes)
from hfblab.grid import make_grid

from conftest import random_state, smooth_field


def rand_kernel(g, rng, sym=NONE):
    a = rng.standard_normal((g.size, g.size)) + 1j * rng.standard_normal((g.size, g.size))
    if sym == HERMITIAN:
        a = a + a.conj().T
    elif sym == SYMMETRIC:
        a = a + a.T
    return Kernel(g, a, sym)


def test_symmetry_checked_on_construction(g1, rng):
    a = rng.standard_normal((16, 16))
    with pytest.raises(ValueError):
        Kernel(g1, a, SYMMETRIC)
    with pytest.raises(ValueError):
        Kernel(g1, a + 1j * np.eye(16), HERMITIAN)
    with pytest.raises(ValueError):
        Field(g1, np.full(16, np.nan))


def test_compose_identity_and_rank_one(g1, rng):
    B = rand_kernel(g1, rng)
    C = kernel_compose(identity_kernel(g1), B)
    assert np.max(np.abs(C.data - B.data)) < 1e-10
    u, v, w = (smooth_field(g1, rng) for _ in range(3))
    A = outer(u, v.conj())
    Bk = outer(v, w.conj())
    assert np.max(np.abs(kernel_compose(A, Bk).data - outer(u, w.conj()).data)) < 1e-12


def test_compose_triple_loop_oracle(rng):
    g = make_grid(1, 8, 3.0)
    A, B = rand_kernel(g, rng), rand_kernel(g, rng)
    ref = np.zeros((8, 8), complex)
    for x in range(8):
        for y in range(8):
            for z in range(8):
                ref[x, y] += A.data[x, z] * B.data[z, y] * g.h
    assert np.max(np.abs(kernel_compose(A, B).data - ref)) < 1e-12


def test_compose_associative_and_trace_cyclic(g1, rng):
    A, B, C = (rand_kernel(g1, rng) for _ in range(3))
    l = kernel_compose(kernel_compose(A, B), C).data
    r = kernel_compose(A, kernel_compose(B, C)).data
    assert np.max(np.abs(l - r)) < 1e-10 * np.max(np.abs(l))
    assert abs(kernel_trace(kernel_compose(A, B)) - kernel_trace(kernel_compose(B, A))) < 1e-10 * 100


def test_compose_grid_mismatch(g1, rng):
    g2 = make_grid(1, 16, 9.0)
    with pytest.raises(GridMismatch):
        kernel_compose(rand_kernel(g1, rng), Kernel(g2, np.eye(16)))


def test_trace_and_diagonal(g1, rng):
    assert kernel_trace(identity_kernel(g1)) == pytest.approx(16)
    phi = smooth_field(g1, rng)
    G = outer(phi.conj(), phi, HERMITIAN)
    assert kernel_trace(G) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(kernel_diagonal(G).data, np.abs(phi.data) ** 2, atol=1e-14)
    assert np.allclose(kernel_diagonal(identity_kernel(g1)).data, 1 / g1.h)
    H = rand_kernel(g1, rng, HERMITIAN)
    ev = np.linalg.eigvalsh(H.data * g1.weight)
    assert kernel_trace(H).real == pytest.approx(ev.sum(), abs=1e-10)
    K = rand_kernel(g1, rng)
    assert np.array_equal(kernel_diagonal(K).data, np.array([K.data[i, i] for i in range(16)]))


def test_psd_defect(g1, rng):
    phi = smooth_field(g1, rng)
    d, lam = hermitian_psd_defect(outer(phi.conj(), phi, HERMITIAN))
    assert d < 1e-14 and abs(lam) < 1e-10
    _, lam = hermitian_psd_defect(identity_kernel(g1))
    assert lam == pytest.approx(1.0)  # operator eigenvalue of delta_h is 1
    H = rand_kernel(g1, rng, HERMITIAN)
    c = 0.7
    _, l0 = hermitian_psd_defect(H)
    _, l1 = hermitian_psd_defect(H.with_data(H.data + c * identity_kernel(g1).data))
    assert l1 - l0 == pytest.approx(c, abs=1e-10)
    with pytest.raises(PSDViolation):
        check_psd(H.with_data(H.data - 100 * identity_kernel(g1).data))


def test_svd(g1, rng):
    u, v = smooth_field(g1, rng), smooth_field(g1, rng)
    fac, err = kernel_svd(outer(u, v), 1)
    assert err < 1e-12 and fac[0][0] == pytest.approx(1.0, abs=1e-12)
    # two orthogonal pairs
    e1 = Field(g1, np.exp(1j * 2 * np.pi * g1.x1d / g1.L) / np.sqrt(g1.L))
    e2 = Field(g1, np.exp(2j * 2 * np.pi * g1.x1d / g1.L) / np.sqrt(g1.L))
    K = Kernel(g1, 3 * outer(e1, e1).data + 2 * outer(e2, e2.conj()).data)
    fac, err = kernel_svd(K, 3)
    assert [round(f[0], 10) for f in fac[:2]] == [3.0, 2.0] and fac[2][0] < 1e-12
    R = rand_kernel(g1, rng)
    fac, err = kernel_svd(R, 16)
    assert err < 1e-10
    s_oracle = np.linalg.svd(R.data * g1.weight, compute_uv=False)
    assert np.allclose([f[0] for f in fac], s_oracle, rtol=1e-12)
    V = np.array([f[2].flat for f in fac])
    assert np.max(np.abs(np.conj(V) @ V.T * g1.weight - np.eye(16))) < 1e-10


def test_shear_properties(rng):
    g = make_grid(2, 4, 2.0)
    d = shear_reindex(identity_kernel(g)).data
    assert np.count_nonzero(d[1:]) == 0 and np.all(d[0] != 0)
    K = rand_kernel(g, rng)
    back = shear_reindex(shear_reindex(K), "inverse")
    assert np.array_equal(back.data, K.data)
    assert shear_reindex(K).norm() == K.norm()


def test_shear_maps_symmetry(rng):
    g = make_grid(1, 8, 2.0)
    S = rand_kernel(g, rng, SYMMETRIC)
    T = shear_reindex(S).data
    n = g.n
    for w in range(n):
        for y in range(n):
            assert T[w, y] == T[(-w) % n, (y + w) % n]


def test_shear_direct_loop(rng):
    g = make_grid(1, 8, 2.0)
    K = rand_kernel(g, rng)
    T = shear_reindex(K).data
    for w in range(8):
        for y in range(8):
            assert T[w, y] == K.data[(y + w) % 8, y]


def test_state_from_pair_matches_matrix_functions(g1):
    phi = gaussian_field(g1, 0.0, 1.2, 0.4, norm=0.9)
    k = gaussian_pair_kernel(g1, 0.4, 0.8, 1.5)
    N = 5.0
    s = state_from_pair(phi, k, N)
    w = g1.weight
    kop = k.data.real * w
    sh = sinhm(kop) / w
    ch = coshm(kop)
    p = phi.flat
    gam_ref = (sh.conj() @ sh) * w / N + np.outer(p.conj(), p)
    lam_ref = (sh @ ch) / N + np.outer(p, p)
    assert np.max(np.abs(s.gam.data - gam_ref)) < 1e-8
    assert np.max(np.abs(s.lam.data - lam_ref)) < 1e-8
    # particle number identity
    assert kernel_trace(s.gam).real == pytest.approx(phi.norm() ** 2 + np.sum(np.abs(sh) ** 2) * w * w / N, abs=1e-8)


def test_pure_state_identity(g1, rng):
    """ch^2 - sh conj(sh) = 1 gives Lc Lc* = (1/N) Gc + Gc Gc for the pair part."""
    k = gaussian_pair_kernel(g1, 0.4, 0.8, 1.5)
    N = 3.0
    z = Field(g1, np.zeros(16))
    s = state_from_pair(z, k, N)
    w = g1.weight
    L = s.lam.data * w
    G = s.gam.data * w
    lhs = L @ L.conj()
    rhs = (G.conj() / N + G.conj() @ G.conj())
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_pair_functions_zero_kernel(g1):
    sh, ch = pair_functions(Kernel(g1, np.zeros((16, 16)), SYMMETRIC))
    assert np.allclose(sh, 0) and np.allclose(ch, np.eye(16))


def test_snapshot_roundtrip(tmp_path, rng):
    g = make_grid(2, 4, 3.0)
    s = random_state(g, rng)
    for obj in (s.phi, s.lam, s.gam):
        p = tmp_path / "x.hfbs"
        write_snapshot(p, obj, 1.25)
        back, t = read_snapshot(p)
        assert t == 1.25 and back.grid == g and np.array_equal(back.data, obj.data)
        if isinstance(obj, Kernel):
            assert back.sym == obj.sym
    buf = to_bytes(s.phi)
    with pytest.raises(ValueError):
        from_bytes(b"XXXX" + buf[4:])


def test_pointwise_cauchy_schwarz_on_psd(g1, rng):
    s = random_state(g1, rng)
    G = s.gam.data
    d = np.real(np.diag(G))
    assert np.max(np.abs(G) ** 2 - np.outer(d, d)) <= 1e-9
