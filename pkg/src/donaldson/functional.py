"""The Donaldson functional D(u, eta) and its derivatives.

    D(u, eta) = A(u) + 4 B(u, eta)
    A(u)      = int 1/4 |grad u|^2 - u + e^u
    B(u, eta) = int ||beta0 + dbar eta||^2 e^{(k-1) u}

A uses the P1 stiffness form and lumped vertex quadrature.  B uses one point
per face with u replaced by its face mean, so D, its gradient and its
Hessian are exact derivatives of one another.

Real coordinates for the Hessian are x = [v, Re l, Im l] (3V entries).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .bundle import BundleData
from .errors import NumericalError

EXP_LIMIT = 300.0


def _safe_exp(x, what):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or x.max(initial=-np.inf) > EXP_LIMIT:
        raise NumericalError(f"overflow in exp({what}); damp the line search")
    return np.exp(x)


@dataclass(eq=False)
class FunctionalState:
    bundle: BundleData
    u: np.ndarray
    eta: np.ndarray
    beta0: np.ndarray

    def __post_init__(self):
        m = self.bundle.mesh
        self.u = np.asarray(self.u, dtype=float)
        self.eta = np.asarray(self.eta, dtype=complex)
        self.beta0 = np.asarray(self.beta0, dtype=complex)
        if self.u.shape != (m.n_vertices,) or self.eta.shape != (m.n_vertices,):
            raise ValueError("u and eta must be vertex fields")
        if self.beta0.shape != (m.n_faces,):
            raise ValueError("beta0 must be a face field")

    @property
    def k(self) -> int:
        return self.bundle.k

    @property
    def mesh(self):
        return self.bundle.mesh

    @cached_property
    def beta(self) -> np.ndarray:
        return self.beta0 + self.bundle.D @ self.eta

    @cached_property
    def ubar(self) -> np.ndarray:
        return self.u[self.mesh.faces].mean(axis=1)

    @cached_property
    def face_weight(self) -> np.ndarray:
        return _safe_exp((self.k - 1) * self.ubar, "(k-1)u")

    @cached_property
    def exp_u(self) -> np.ndarray:
        return _safe_exp(self.u, "u")


def zero_state(bundle: BundleData, beta0=None) -> FunctionalState:
    m = bundle.mesh
    b0 = np.zeros(m.n_faces, complex) if beta0 is None else beta0
    return FunctionalState(bundle, np.zeros(m.n_vertices), np.zeros(m.n_vertices, complex), b0)


def functional_parts(state: FunctionalState) -> tuple[float, float]:
    """(A, B) with D = A + 4B."""
    m = state.mesh
    u = state.u
    A = 0.25 * float(u @ (m.stiffness @ u)) + float(np.sum(m.vertex_weight * (state.exp_u - u)))
    with np.errstate(over="ignore", invalid="ignore"):
        B = float(np.sum(m.face_area * state.face_weight * np.abs(state.beta) ** 2))
    if not (math.isfinite(A) and math.isfinite(B)):
        raise NumericalError("non-finite functional value")
    return A, B


def evaluate_D(state: FunctionalState) -> float:
    A, B = functional_parts(state)
    return A + 4.0 * B


def partial_u(state: FunctionalState) -> np.ndarray:
    """Plain partial derivatives dD/du_i (a covector)."""
    m = state.mesh
    k = state.k
    dens = m.face_area * state.face_weight * np.abs(state.beta) ** 2
    return (0.5 * (m.stiffness @ state.u) + m.vertex_weight * (state.exp_u - 1.0)
            + (4.0 * (k - 1) / 3.0) * (m.incidence.T @ dens))


def gradient_D(state: FunctionalState) -> tuple[np.ndarray, np.ndarray]:
    """Mass-normalized gradients (g_u, g_eta).

    dD[v, l] = sum(m * g_u * v) + Re sum(m * conj(g_eta) * l).
    """
    m = state.mesh
    g_u = partial_u(state) / m.vertex_weight
    g_eta = 8.0 * (state.bundle.DH @ (m.face_area * state.face_weight * state.beta)) / m.vertex_weight
    return g_u, g_eta


def first_equation_residual(state: FunctionalState) -> np.ndarray:
    """Pointwise residual of  Delta u + 2 - 2e^u - 8(k-1)||beta||^2 e^{(k-1)u}."""
    return -2.0 * gradient_D(state)[0]


def hessian_form(state: FunctionalState, v1, l1, v2, l2) -> float:
    m = state.mesh
    k = state.k
    D = state.bundle.D
    v1 = np.asarray(v1, float)
    v2 = np.asarray(v2, float)
    d1, d2 = D @ np.asarray(l1, complex), D @ np.asarray(l2, complex)
    vb1, vb2 = v1[m.faces].mean(axis=1), v2[m.faces].mean(axis=1)
    beta = state.beta
    aw = m.face_area * state.face_weight
    A2 = 0.5 * float(v1 @ (m.stiffness @ v2)) + float(np.sum(m.vertex_weight * state.exp_u * v1 * v2))
    B2 = np.sum(aw * ((k - 1) ** 2 * vb1 * vb2 * np.abs(beta) ** 2
                      + 2.0 * np.real(np.conj(d1) * d2)
                      + 2.0 * (k - 1) * (vb1 * np.real(np.conj(beta) * d2)
                                         + vb2 * np.real(np.conj(beta) * d1))))
    return A2 + 4.0 * float(B2)


# ----------------------------------------------------------------------
# sparse blocks

def real_dbar(bundle: BundleData) -> sp.csr_matrix:
    """Real (2F x 2V) form of d-bar acting on [Re l, Im l]."""
    D = bundle.D
    Dr, Di = D.real, D.imag
    return sp.bmat([[Dr, -Di], [Di, Dr]], format="csr")


def hessian_blocks(state: FunctionalState):
    """(H_uu, H_ue, H_ee) of D in real coordinates."""
    m = state.mesh
    k = state.k
    S3 = m.incidence / 3.0
    aw = m.face_area * state.face_weight
    beta = state.beta
    RD = real_dbar(state.bundle)
    Huu = (0.5 * m.stiffness + sp.diags(m.vertex_weight * state.exp_u)
           + 4.0 * (k - 1) ** 2 * (S3.T @ sp.diags(aw * np.abs(beta) ** 2) @ S3))
    Hue = 8.0 * (k - 1) * (S3.T @ sp.hstack([sp.diags(aw * beta.real), sp.diags(aw * beta.imag)]) @ RD)
    Hee = 8.0 * (RD.T @ sp.diags(np.concatenate([aw, aw])) @ RD)
    return Huu.tocsr(), Hue.tocsr(), Hee.tocsr()


def hessian_matrix(state: FunctionalState) -> sp.csr_matrix:
    Huu, Hue, Hee = hessian_blocks(state)
    return sp.bmat([[Huu, Hue], [Hue.T, Hee]], format="csr")


def block_mass(mesh) -> sp.dia_matrix:
    w = mesh.vertex_weight
    return sp.diags(np.concatenate([w, w, w]))


# ----------------------------------------------------------------------
# partial minimization in eta

def weighted_laplacian(bundle: BundleData, face_weight) -> sp.csc_matrix:
    m = bundle.mesh
    return (bundle.DH @ sp.diags(m.face_area * face_weight) @ bundle.D).tocsc()


def partial_minimize_eta(mesh, bundle: BundleData, u, beta0, *, method: str = "direct",
                         rtol: float = 1e-11) -> np.ndarray:
    """Unique minimizer of eta -> D(u, eta).

    Solves dbar^*_w (w (beta0 + dbar eta)) = 0 with w = e^{(k-1) ubar}.
    """
    if mesh is not bundle.mesh:
        raise ValueError("bundle was built on a different mesh")
    u = np.asarray(u, float)
    w = _safe_exp((bundle.k - 1) * u[mesh.faces].mean(axis=1), "(k-1)u")
    K = weighted_laplacian(bundle, w)
    rhs = -(bundle.DH @ (mesh.face_area * w * np.asarray(beta0, complex)))
    scale = np.linalg.norm(rhs)
    if scale == 0:
        return np.zeros(mesh.n_vertices, complex)
    if method == "direct":
        eta = sla.splu(K).solve(rhs)
    elif method == "cg":
        d = K.diagonal().real
        P = sla.LinearOperator(K.shape, matvec=lambda x: x / d, dtype=complex)
        eta, info = sla.cg(K, rhs, rtol=rtol * 1e-2, atol=0.0, M=P, maxiter=20 * mesh.n_vertices)
        if info != 0:
            raise NumericalError(f"CG breakdown (info={info})")
    else:
        raise ValueError(f"unknown method {method!r}")
    res = np.linalg.norm(K @ eta - rhs) / scale
    if not np.isfinite(res) or res > rtol:
        cond = w.max() / w.min()
        raise NumericalError(f"eta solve residual {res:.3e}; weight spread {cond:.3e}")
    return eta


def eta_residual(state: FunctionalState) -> float:
    """Relative residual of the second equation in weak form."""
    m = state.mesh
    aw = m.face_area * state.face_weight
    r = state.bundle.DH @ (aw * state.beta)
    scale = np.linalg.norm(state.bundle.DH @ (aw * state.beta0))
    scale = max(scale, np.linalg.norm(abs(state.bundle.DH) @ (aw * np.abs(state.beta))))
    return 0.0 if scale == 0 else float(np.linalg.norm(r) / scale)


def reduced_state(bundle: BundleData, u, beta0, **kw) -> FunctionalState:
    eta = partial_minimize_eta(bundle.mesh, bundle, u, beta0, **kw)
    return FunctionalState(bundle, u, eta, beta0)


def lower_bound(mesh) -> float:
    return 4 * math.pi * (mesh.genus - 1)
