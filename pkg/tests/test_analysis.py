import dataclasses
import json
import math

import numpy as np
import pytest

from donaldson.analysis import (HES1_TOL, SLACK, certify_bochner, certify_el_equivalence,
                                certify_second_variation, decomposition_terms, smallest_hessian_eigenvalue)
from donaldson.errors import CertificationError
from donaldson.functional import FunctionalState
from donaldson.solver import solve

from conftest import bundle_at, mesh_at, solved


def test_trivial_solution_certifies(mesh2):
    sol = solve(mesh2, 2, np.zeros(mesh2.n_faces))
    rep = certify_second_variation(sol, n_samples=20)
    assert rep.failures(2) == []
    assert rep.hes1_identity_error <= HES1_TOL
    # at u = 0, beta = 0 the Hessian is L/2 + M on v and 4 dbar* dbar on l
    assert rep.sigma > 0.99


@pytest.mark.parametrize("k", [2, 3])
def test_generic_solution_inequalities(k):
    sol = solved(2, k)
    rep = certify_second_variation(sol, n_samples=40)
    assert rep.sigma > 0 and rep.eigen_converged
    assert rep.remainder_margin >= -SLACK
    assert rep.weighted_poincare_margin >= -SLACK
    assert rep.local_min_violations == 0
    assert rep.criticality_residual <= 1e-9
    json.loads(rep.to_json())


def test_decomposition_is_exact_for_pure_directions(rng):
    # v alone: the cross terms vanish and T1 + T2 equals the direct form to roundoff
    sol = solved(2, 2)
    st = sol.state()
    V = sol.mesh.n_vertices
    t = decomposition_terms(st, rng.normal(size=V), np.zeros(V, complex))
    assert math.isclose(t["direct"], t["T1"] + t["T2"] + t["R"], rel_tol=1e-12)


def test_decomposition_defect_shrinks_under_refinement(rng):
    errs = []
    for level in (2, 3):
        rep = certify_second_variation(solved(level, 2), n_samples=20, deltas=())
        errs.append(rep.hes1_identity_error)
    assert errs[1] < errs[0]


def test_smallest_eigenvalue_detects_indefinite(rng):
    sol = solved(2, 2)
    st = sol.state()
    bad = FunctionalState(st.bundle, st.u - 6.0, st.eta, st.beta0)
    sigma, _ = smallest_hessian_eigenvalue(bad)
    good, _ = smallest_hessian_eigenvalue(st)
    assert good > 0
    assert sigma < good


def test_negative_control_fails(rng):
    sol = solved(2, 3)
    bad = dataclasses.replace(sol, u=sol.u + 0.5 * rng.normal(size=sol.u.size))
    rep = certify_second_variation(bad, n_samples=20)
    fails = rep.failures(3)
    assert "criticality" in fails and "hes1_identity" in fails


def test_unconverged_solution_rejected():
    bad = dataclasses.replace(solved(2, 2), converged=False)
    with pytest.raises(ValueError):
        certify_second_variation(bad)


def test_bochner_certificate(mesh3):
    for k in (2, 3):
        assert certify_bochner(mesh3, k, bundle_at(3, k)) >= (k - 1) * (1 - SLACK)


def test_bochner_failure_raises(monkeypatch, mesh3):
    import donaldson.analysis as an
    monkeypatch.setattr(an, "bochner_constant", lambda b: 0.5)
    with pytest.raises(CertificationError, match="k=2"):
        an.certify_bochner(mesh3, 2, bundle_at(3, 2))


def test_el_equivalence(rng):
    assert certify_el_equivalence(solved(2, 2)) <= 1e-8
    m = mesh_at(2)
    zero = solve(m, 2, np.zeros(m.n_faces))
    assert certify_el_equivalence(zero) == 0.0
    noisy = dataclasses.replace(solved(2, 2), eta=solved(2, 2).eta
                                + 0.3 * (rng.normal(size=m.n_vertices) + 1j * rng.normal(size=m.n_vertices)))
    assert certify_el_equivalence(noisy) > 1e-3
