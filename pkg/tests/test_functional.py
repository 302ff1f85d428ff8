import math

import numpy as np
import pytest
import scipy.sparse.linalg as sla

from donaldson.bundle import _face_frames, dbar, harmonic_projection
from donaldson.errors import NumericalError
from donaldson.functional import (FunctionalState, evaluate_D, functional_parts, gradient_D, hessian_blocks,
                                  hessian_form, partial_minimize_eta, zero_state)

from conftest import bundle_at, mesh_at


def crandn(rng, n):
    return rng.normal(size=n) + 1j * rng.normal(size=n)


def random_state(rng, level=1, k=2, amp=0.3):
    b = bundle_at(level, k)
    m = b.mesh
    beta0, _ = harmonic_projection(b, crandn(rng, m.n_faces))
    return FunctionalState(b, amp * rng.normal(size=m.n_vertices), 0.1 * crandn(rng, m.n_vertices), beta0)


def dense_parts(state):
    """Oracle: per-face affine interpolation solved as a 3x3 system."""
    m = state.mesh
    k = state.k
    r = _face_frames(m)
    A_val = 0.0
    B_val = 0.0
    for f in range(m.n_faces):
        z = m.chart[f]
        s2 = m.face_area[f] / m.chart_area[f]
        X = np.column_stack([np.ones(3), z, np.conj(z)])
        uv = state.u[m.faces[f]]
        cu = np.linalg.solve(X, uv.astype(complex))
        # |grad u|^2 = 4 |du/dzbar|^2 for real u; Dirichlet form is conformally invariant
        A_val += 0.25 * 4 * abs(cu[2]) ** 2 * m.chart_area[f]
        ev = state.eta[m.faces[f]] * np.exp(1j * (k - 1) * r[f])
        ce = np.linalg.solve(X, ev)
        beta = state.beta0[f] + math.sqrt(2.0 / s2) * ce[2]
        B_val += m.face_area[f] * abs(beta) ** 2 * math.exp((k - 1) * uv.mean())
    A_val += float(np.sum(m.vertex_weight * (np.exp(state.u) - state.u)))
    return A_val, B_val


def test_trivial_value(mesh2):
    st = zero_state(bundle_at(2, 2))
    assert abs(evaluate_D(st) - 4 * math.pi) <= 1e-8
    gu, ge = gradient_D(st)
    assert np.all(gu == 0) and np.all(ge == 0)


@pytest.mark.parametrize("k", [2, 3])
def test_parts_match_dense_oracle(rng, k):
    st = random_state(rng, level=1, k=k)
    A, B = functional_parts(st)
    Ao, Bo = dense_parts(st)
    assert math.isclose(A, Ao, rel_tol=1e-12)
    assert math.isclose(B, Bo, rel_tol=1e-12)
    assert math.isclose(evaluate_D(st), A + 4 * B, rel_tol=1e-15)


def test_quadratic_homogeneity(rng):
    st = random_state(rng)
    t = 2.7
    s2 = FunctionalState(st.bundle, st.u, t * st.eta, t * st.beta0)
    assert math.isclose(functional_parts(s2)[1], t * t * functional_parts(st)[1], rel_tol=1e-13)


def test_cache_consistency(rng):
    st = random_state(rng, k=3)
    beta = st.beta0 + dbar(st.bundle, st.eta)
    w = np.exp(2 * st.u[st.mesh.faces].mean(axis=1))
    assert np.allclose(st.beta, beta, rtol=1e-14, atol=0)
    assert np.allclose(st.face_weight, w, rtol=1e-14, atol=0)


def fd_errors(st, v, l):
    m = st.mesh
    gu, ge = gradient_D(st)
    dd = float(np.sum(m.vertex_weight * gu * v) + np.real(np.sum(m.vertex_weight * np.conj(ge) * l)))
    hh = hessian_form(st, v, l, v, l)
    f = lambda s: evaluate_D(FunctionalState(st.bundle, st.u + s * v, st.eta + s * l, st.beta0))
    f0 = f(0.0)
    g_err, h_err = [], []
    for h in (1e-3, 1e-4, 1e-5, 1e-6):
        fp, fm = f(h), f(-h)
        g_err.append(abs((fp - fm) / (2 * h) - dd) / abs(dd))
        h_err.append(abs((fp - 2 * f0 + fm) / h ** 2 - hh) / abs(hh))
    return min(g_err), min(h_err)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_derivatives_match_finite_differences(rng, k):
    for _ in range(3):
        st = random_state(rng, level=1, k=k)
        g, h = fd_errors(st, rng.normal(size=st.mesh.n_vertices), crandn(rng, st.mesh.n_vertices))
        assert g <= 1e-6 and h <= 1e-5


def test_hessian_symmetry_and_blocks(rng):
    st = random_state(rng, k=3)
    V = st.mesh.n_vertices
    v1, v2 = rng.normal(size=V), rng.normal(size=V)
    l1, l2 = crandn(rng, V), crandn(rng, V)
    a, b = hessian_form(st, v1, l1, v2, l2), hessian_form(st, v2, l2, v1, l1)
    assert abs(a - b) <= 1e-13 * max(abs(a), 1.0)
    Huu, Hue, Hee = hessian_blocks(st)
    x1 = np.concatenate([l1.real, l1.imag])
    x2 = np.concatenate([l2.real, l2.imag])
    mat = v1 @ Huu @ v2 + v1 @ Hue @ x2 + v2 @ Hue @ x1 + x1 @ Hee @ x2
    assert math.isclose(mat, a, rel_tol=1e-11)


def test_eta_block_is_positive_definite(rng):
    for _ in range(3):
        st = random_state(rng, k=3, amp=1.0)
        Hee = hessian_blocks(st)[2]
        lam = sla.eigsh(Hee.tocsc(), k=1, sigma=-1.0, return_eigenvectors=False, v0=np.ones(Hee.shape[0]))
        assert lam[0] > 0


def test_partial_minimization_trivial_cases(rng):
    b = bundle_at(1, 3)
    m = b.mesh
    V, F = m.n_vertices, m.n_faces
    assert np.all(partial_minimize_eta(m, b, rng.normal(size=V), np.zeros(F)) == 0)
    beta0, _ = harmonic_projection(b, crandn(rng, F))
    eta = partial_minimize_eta(m, b, np.zeros(V), beta0)
    assert np.abs(eta).max() <= 1e-10


def test_partial_minimization_is_critical(rng):
    st = random_state(rng, level=1, k=3, amp=0.8)
    m, b = st.mesh, st.bundle
    eta = partial_minimize_eta(m, b, st.u, st.beta0)
    s2 = FunctionalState(b, st.u, eta, st.beta0)
    w = s2.face_weight
    for _ in range(50):
        l = crandn(rng, m.n_vertices)
        Dl = dbar(b, l)
        pair = np.sum(m.face_area * w * np.conj(s2.beta) * Dl)
        norms = math.sqrt(np.sum(m.face_area * w * abs(s2.beta) ** 2) * np.sum(m.face_area * w * abs(Dl) ** 2))
        assert abs(pair) <= 1e-9 * norms
    assert np.abs(gradient_D(s2)[1]).max() <= 1e-9 * np.abs(gradient_D(st)[1]).max()
    eta_cg = partial_minimize_eta(m, b, st.u, st.beta0, method="cg")
    assert np.abs(eta_cg - eta).max() <= 1e-9 * np.abs(eta).max()


def test_monotone_elimination_and_lower_bound(rng):
    b = bundle_at(1, 2)
    m = b.mesh
    beta0, _ = harmonic_projection(b, crandn(rng, m.n_faces))
    for _ in range(100):
        u = rng.normal(size=m.n_vertices)
        st = FunctionalState(b, u, crandn(rng, m.n_vertices), beta0)
        opt = FunctionalState(b, u, partial_minimize_eta(m, b, u, beta0), beta0)
        assert evaluate_D(st) >= evaluate_D(opt)
        assert evaluate_D(opt) >= 4 * math.pi - 1e-6


def test_eta_depends_continuously_on_u(rng):
    b = bundle_at(1, 2)
    m = b.mesh
    beta0, _ = harmonic_projection(b, crandn(rng, m.n_faces))
    u, v = rng.normal(size=m.n_vertices), rng.normal(size=m.n_vertices)
    e0 = partial_minimize_eta(m, b, u, beta0)
    diffs = [np.abs(partial_minimize_eta(m, b, u + d * v, beta0) - e0).max() for d in (1e-2, 1e-3, 1e-4)]
    assert 8 < diffs[0] / diffs[1] < 12 and 8 < diffs[1] / diffs[2] < 12


def test_overflow_is_reported(rng):
    b = bundle_at(1, 2)
    m = b.mesh
    st = FunctionalState(b, np.full(m.n_vertices, 400.0), np.zeros(m.n_vertices), np.zeros(m.n_faces))
    with pytest.raises(NumericalError):
        evaluate_D(st)
