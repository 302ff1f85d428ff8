"""Second-order certification of converged solutions.

The second variation at a critical point is compared with a completed-square
decomposition

    D'' = T1 + T2 + R
    T1  = int e^u v^2 + 4 int ||(k-1) v beta + dbar l||^2 e
    T2  = int || 4(k-1) e ||l|| beta - dbar v (x) l / ||l|| ||^2
    R   = 4 int ||dbar l||^2 e - 16 (k-1)^2 int ||beta||^2 e^2 ||l||^2

with e = e^{(k-1)u}.  The coefficients follow the scalar normalization
||dbar v||^2 = |grad v|^2 / 2 used throughout the package.  The remainder
checked against the lower bound 2(k-1) int e ||l||^2 is

    R0  = 4 int ||dbar l||^2 e - 8 (k-1)^2 int ||beta||^2 e^2 ||l||^2 .
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .bundle import bochner_constant, dbar_matrix, transport_to_faces, weak_dbar_residual
from .errors import CertificationError, NumericalError
from .functional import (FunctionalState, block_mass, evaluate_D, first_equation_residual,
                         hessian_form, hessian_matrix, weighted_laplacian)
from .solver import Solution

SLACK = 0.05
HES1_TOL = 1e-10


@dataclass
class CertificationReport:
    sigma: float
    hes1_identity_error: float
    remainder_margin: float
    weighted_poincare_margin: float
    local_min_violations: int
    bochner_value: float
    criticality_residual: float = 0.0
    n_samples: int = 0
    eigen_converged: bool = True
    notes: list = field(default_factory=list)

    def checks(self, k: int) -> dict:
        """Named pass/fail results."""
        return {
            "sigma_positive": self.sigma > 0,
            "hes1_identity": self.hes1_identity_error <= HES1_TOL,
            "remainder_bound": self.remainder_margin >= -SLACK,
            "weighted_poincare": self.weighted_poincare_margin >= -SLACK,
            "strict_local_min": self.local_min_violations == 0,
            "bochner": self.bochner_value >= (k - 1) * (1 - SLACK),
            "criticality": self.criticality_residual <= 1e-6,
        }

    def failures(self, k: int) -> list[str]:
        return [name for name, ok in self.checks(k).items() if not ok]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def _smooth_modes(K, M, n, rng, count):
    """Random combinations of the ``count`` lowest generalized eigenvectors."""
    vals, vecs = sla.eigsh(K, k=count, M=M, sigma=-1e-2, which="LM", v0=np.ones(K.shape[0]))
    coef = rng.normal(size=(count, n))
    if np.iscomplexobj(vecs):
        coef = coef + 1j * rng.normal(size=(count, n))
    return vecs @ coef


def draw_samples(solution: Solution, n: int, rng, n_modes: int = 12):
    """Pairs (v, l): alternately rough (iid) and smooth (low-mode) fields."""
    m = solution.mesh
    st = solution.state()
    V = m.n_vertices
    M = m.mass.tocsc()
    Kv = (m.stiffness + 1e-3 * m.mass).tocsc()
    Kl = weighted_laplacian(solution.bundle, st.face_weight)
    modes = min(n_modes, V - 2)
    half = n // 2
    vs = np.empty((V, n))
    ls = np.empty((V, n), complex)
    vs[:, :half] = rng.normal(size=(V, half))
    ls[:, :half] = rng.normal(size=(V, half)) + 1j * rng.normal(size=(V, half))
    vs[:, half:] = _smooth_modes(Kv, M, n - half, rng, modes).real
    ls[:, half:] = _smooth_modes(Kl, M, n - half, rng, modes)
    return vs, ls


def decomposition_terms(state: FunctionalState, v, l) -> dict:
    """Direct second variation and the three decomposed terms for one sample."""
    m = state.mesh
    k = state.k
    beta = state.beta
    w = state.face_weight
    A = m.face_area
    Dl = state.bundle.D @ l
    vbar = v[m.faces].mean(axis=1)
    dv = dbar_matrix(m, 0) @ v
    lf = transport_to_faces(m, l, k - 1)
    nl = np.abs(lf)
    safe = np.where(nl > 0, nl, 1.0)
    G = dv * lf
    T1 = float(np.sum(m.vertex_weight * state.exp_u * v * v)
               + 4 * np.sum(A * w * np.abs((k - 1) * vbar * beta + Dl) ** 2))
    sq = np.where(nl > 0, np.abs(4 * (k - 1) * w * nl * beta - G / safe) ** 2, np.abs(dv) ** 2)
    T2 = float(np.sum(A * sq))
    grad_l = float(np.sum(A * w * np.abs(Dl) ** 2))
    cross = float(np.sum(A * np.abs(beta) ** 2 * w ** 2 * nl ** 2))
    R = 4 * grad_l - 16 * (k - 1) ** 2 * cross
    R0 = 4 * grad_l - 8 * (k - 1) ** 2 * cross
    el = float(np.sum(m.vertex_weight * np.exp((k - 1) * state.u) * np.abs(l) ** 2))
    return {"direct": hessian_form(state, v, l, v, l), "T1": T1, "T2": T2, "R": R, "R0": R0,
            "grad_l": grad_l, "cross": cross, "l_norm": el}


def smallest_hessian_eigenvalue(state: FunctionalState, tol: float = 1e-8):
    """Smallest eigenvalue of the full Hessian relative to the block mass.

    Returns (sigma, converged).  Positive definiteness is read off the LDL
    pivots of a symmetric-mode factorization; when it holds, shift-invert at
    zero gives the smallest eigenvalue.
    """
    H = hessian_matrix(state).tocsc()
    Mb = block_mass(state.mesh).tocsc()
    n_neg = _negative_pivots(H)
    try:
        if n_neg == 0:
            vals = sla.eigsh(H, k=1, M=Mb, sigma=0.0, which="LM", tol=tol,
                             return_eigenvectors=False, v0=np.ones(H.shape[0]))
        else:
            vals = sla.eigsh(H, k=1, M=Mb, which="SA", tol=tol, maxiter=20000,
                             return_eigenvectors=False, v0=np.ones(H.shape[0]))
        return float(vals.min()), True
    except sla.ArpackNoConvergence as exc:
        ev = exc.eigenvalues
        return (float(ev.min()) if len(ev) else (-math.inf if n_neg else math.nan)), False


def _negative_pivots(H) -> int:
    try:
        lu = sla.splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                      options={"SymmetricMode": True})
    except RuntimeError:
        return 1
    if np.any(lu.perm_r != lu.perm_c):
        return -1  # off-diagonal pivots: inertia unknown
    return int(np.sum(lu.U.diagonal() < 0))


def certify_second_variation(solution: Solution, n_samples: int = 100, seed: int = 0,
                             deltas=(1e-3, 1e-2)) -> CertificationReport:
    if not solution.converged:
        raise ValueError("certification needs a converged solution")
    rng = np.random.default_rng(seed)
    st = solution.state()
    k = solution.k
    m = solution.mesh
    notes = []
    sigma, ok = smallest_hessian_eigenvalue(st)
    if not ok:
        notes.append("Hessian eigen-iteration did not converge; sigma is a partial estimate")

    vs, ls = draw_samples(solution, n_samples, rng)
    hes1 = 0.0
    rem = math.inf
    poi = math.inf
    for i in range(n_samples):
        t = decomposition_terms(st, vs[:, i], ls[:, i])
        d = t["direct"]
        hes1 = max(hes1, abs(d - (t["T1"] + t["T2"] + t["R"])) / max(abs(d), 1e-300))
        bound = 2 * (k - 1) * t["l_norm"]
        rem = min(rem, (t["R0"] - bound) / bound)
        rhs = 2 * (k - 1) ** 2 * t["cross"] + 0.5 * (k - 1) * t["l_norm"]
        poi = min(poi, (t["grad_l"] - rhs) / rhs)

    D0 = evaluate_D(st)
    viol = 0
    pv, pl = draw_samples(solution, n_samples, rng)
    for delta in deltas:
        for i in range(n_samples):
            v = pv[:, i] / np.abs(pv[:, i]).max()
            l = pl[:, i] / np.abs(pl[:, i]).max()
            try:
                Dp = evaluate_D(FunctionalState(st.bundle, st.u + delta * v, st.eta + delta * l, st.beta0))
            except NumericalError:
                continue
            if not Dp > D0:
                viol += 1
    crit = float(np.max(np.abs(first_equation_residual(st))))
    return CertificationReport(sigma=sigma, hes1_identity_error=hes1, remainder_margin=rem,
                               weighted_poincare_margin=poi, local_min_violations=viol,
                               bochner_value=bochner_constant(solution.bundle),
                               criticality_residual=crit, n_samples=n_samples,
                               eigen_converged=ok, notes=notes)


def certify_bochner(mesh, k: int, bundle=None) -> float:
    from .bundle import build_bundle
    b = bundle or build_bundle(mesh, k)
    val = bochner_constant(b)
    level = mesh.meta.get("level")
    if level is not None and level >= 3 and val < (k - 1) * (1 - SLACK):
        raise CertificationError(f"Bochner constant {val:.6f} below {(k - 1) * (1 - SLACK):.4f} "
                                 f"(k={k}, level {level}, {mesh.n_vertices} vertices)")
    return val


def pairing_residual(state: FunctionalState, n_samples: int, rng) -> float:
    """max over random l of |int e <beta, dbar l>| / (||e beta|| ||dbar l||)."""
    m = state.mesh
    aw = m.face_area * state.face_weight
    wb = aw * state.beta
    nb = math.sqrt(float(np.sum(aw * state.face_weight * np.abs(state.beta) ** 2)))
    if nb == 0:
        return 0.0
    worst = 0.0
    for _ in range(n_samples):
        l = rng.normal(size=m.n_vertices) + 1j * rng.normal(size=m.n_vertices)
        Dl = state.bundle.D @ l
        nd = math.sqrt(float(np.sum(m.face_area * np.abs(Dl) ** 2)))
        worst = max(worst, abs(np.sum(np.conj(wb) * Dl)) / (nb * nd))
    return worst


def certify_el_equivalence(solution: Solution, n_samples: int = 20, seed: int = 0) -> float:
    """Max of the pairing-form and weak-dbar-of-q residuals."""
    st = solution.state()
    rng = np.random.default_rng(seed)
    a = pairing_residual(st, n_samples, rng)
    q = st.face_weight * 1j * np.conj(st.beta)
    b = weak_dbar_residual(solution.bundle, q)
    return float(max(a, b))
