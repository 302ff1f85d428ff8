"""Geometric read-outs of solutions and the fixed-differential problem.

Normalizations.  A solution yields the differential q_hat = e^{(k-1)u} * beta
per face (``extract_k_differential``).  For k = 2 the second fundamental
form differential entering the Gauss equation

    Delta u + 2 - 2(1 - c^2) e^u - 2 ||q||^2 e^{-u} = 0

is q = 2 alpha with alpha = (1 - c^2)^{-1/2} q_hat in the shifted variable
ubar = u + log(1 - c^2).  For k = 3 the structural equation uses q_hat
itself (coefficient 16 = 8(k-1)).  The fixed-differential solver is written
for general k in terms of q_hat:

    Delta u + 2 - 2 e^u - 8(k-1) t^2 ||q_hat||^2 e^{-(k-1)u} = 0 .
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .analysis import _negative_pivots
from .bundle import build_bundle, weak_dbar_residual
from .errors import NumericalError
from .functional import EXP_LIMIT
from .solver import Solution, SolveOptions, k_differential, solve

GAUSS_C_TOL = 1e-7
FIXED_Q_TOL = 1e-10


def extract_k_differential(solution: Solution) -> np.ndarray:
    return k_differential(solution.state())


def holomorphicity_residual(solution: Solution) -> float:
    q = extract_k_differential(solution)
    return weak_dbar_residual(solution.bundle, q)


# ----------------------------------------------------------------------
# immersions (k = 2)

@dataclass
class ImmersionData:
    c: float
    lambda1: np.ndarray
    lambda2: np.ndarray
    q: np.ndarray
    u: np.ndarray
    gauss_residual: float = math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["face", "lambda1", "lambda2", "q_re", "q_im"])
        for f, (a, b, z) in enumerate(zip(self.lambda1, self.lambda2, self.q)):
            w.writerow([f, repr(float(a)), repr(float(b)), repr(float(z.real)), repr(float(z.imag))])
        return buf.getvalue()


def _lambda(c):
    if not abs(c) < 1:
        raise ValueError(f"mean curvature must satisfy c^2 < 1, got c={c}")
    return 1.0 - c * c


def minimal_surface_data(solution: Solution, c: float = 0.0) -> ImmersionData:
    """Principal curvatures of the immersion attached to a k = 2 solution.

    For c != 0 the solution is read in the shifted variable ubar (as
    returned by ``cmc_solve``).
    """
    if solution.k != 2:
        raise ValueError("immersion data needs k = 2")
    Lam = _lambda(c)
    m = solution.mesh
    u = solution.u - math.log(Lam)
    q = 2.0 * extract_k_differential(solution) / math.sqrt(Lam)
    e = np.exp(-u[m.faces].mean(axis=1))
    spread = np.abs(q) * e
    lam1 = c - spread
    lam2 = c + spread
    return ImmersionData(c=c, lambda1=lam1, lambda2=lam2, q=q, u=u,
                         gauss_residual=gauss_c_residual(m, u, q, c))


def discrete_laplace(mesh, u) -> np.ndarray:
    return -(mesh.stiffness @ u) / mesh.vertex_weight


def gauss_c_residual(mesh, u, q, c: float) -> float:
    """Sup-norm residual of the CMC Gauss equation in the package's quadrature."""
    Lam = _lambda(c)
    uf = u[mesh.faces].mean(axis=1)
    dens = mesh.face_area * np.abs(q) ** 2 * np.exp(-uf)
    N = (mesh.incidence.T @ dens) / (3 * mesh.vertex_weight)
    r = discrete_laplace(mesh, u) + 2 - 2 * Lam * np.exp(u) - 2 * N
    return float(np.max(np.abs(r)))


def gauss_consistency(mesh, data: ImmersionData) -> float:
    """Max over faces of |(-1 + l1 l2) - e^{-u}(-Delta u / 2 - 1)|."""
    lap = discrete_laplace(mesh, data.u)
    rhs_v = np.exp(-data.u) * (-0.5 * lap - 1.0)
    rhs = rhs_v[mesh.faces].mean(axis=1)
    return float(np.max(np.abs(-1 + data.lambda1 * data.lambda2 - rhs)))


def cmc_solve(mesh, beta_input, c: float, opts: SolveOptions | None = None):
    """Solve the k = 2 system in ubar and recover the CMC-c immersion data."""
    _lambda(c)
    sol = solve(mesh, 2, beta_input, opts)
    return sol, minimal_surface_data(sol, c)


# ----------------------------------------------------------------------
# fixed differential

@dataclass
class FixedQResult:
    t_grid: list
    u_branch: list
    fold_t: float | None
    status: list
    residuals: list = field(default_factory=list)
    min_eigenvalues: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "status", "sup_u", "min_u", "residual", "min_eig"])
        for t, s, u, r, e in zip(self.t_grid, self.status, self.u_branch, self.residuals,
                                 self.min_eigenvalues):
            su = repr(float(u.max())) if u is not None else "nan"
            mu = repr(float(u.min())) if u is not None else "nan"
            w.writerow([repr(float(t)), s, su, mu, repr(float(r)), repr(float(e))])
        return buf.getvalue()


class _FixedQProblem:
    """Discrete fixed-differential equation as the gradient of I_{tq}."""

    def __init__(self, mesh, k, q):
        self.mesh = mesh
        self.k = k
        self.aq = mesh.face_area * np.abs(np.asarray(q)) ** 2
        self.S = mesh.incidence.tocsr()

    def _face_exp(self, u):
        x = -(self.k - 1) * u[self.mesh.faces].mean(axis=1)
        if x.max() > EXP_LIMIT or u.max() > EXP_LIMIT:
            raise NumericalError("overflow in fixed-q Newton iterate")
        return np.exp(x)

    def gradient(self, u, t):
        m, k = self.mesh, self.k
        c = self.aq * self._face_exp(u)
        return (0.5 * (m.stiffness @ u) + m.vertex_weight * (np.exp(u) - 1)
                + (4 * t * t * (k - 1) / 3) * (self.S.T @ c))

    def d_dt(self, u, t):
        c = self.aq * self._face_exp(u)
        return (8 * t * (self.k - 1) / 3) * (self.S.T @ c)

    def hessian(self, u, t):
        m, k = self.mesh, self.k
        c = self.aq * self._face_exp(u)
        return (0.5 * m.stiffness + sp.diags(m.vertex_weight * np.exp(u))
                - (4 * t * t * (k - 1) ** 2 / 9) * (self.S.T @ sp.diags(c) @ self.S)).tocsc()

    def residual(self, u, t):
        return float(np.max(np.abs(2 * self.gradient(u, t) / self.mesh.vertex_weight)))

    def newton(self, u, t, tol=FIXED_Q_TOL, maxit=40):
        u = u.copy()
        r = self.residual(u, t)
        for _ in range(maxit):
            if r <= tol:
                return u, r, True
            du = sla.spsolve(self.hessian(u, t), -self.gradient(u, t))
            if not np.all(np.isfinite(du)):
                return u, r, False
            a = 1.0
            while a > 1e-6:
                try:
                    rn = self.residual(u + a * du, t)
                except NumericalError:
                    rn = math.inf
                if rn < r or rn <= tol:
                    break
                a *= 0.5
            else:
                return u, r, False
            u = u + a * du
            r = rn
        return u, r, r <= tol

    def min_eigenvalue(self, u, t):
        H = self.hessian(u, t)
        M = self.mesh.mass.tocsc()
        vals = sla.eigsh(H, k=1, M=M, sigma=0.0, which="LM", return_eigenvectors=False,
                         v0=np.ones(H.shape[0]), tol=1e-10)
        return float(vals[0])

    def stable(self, u, t):
        return _negative_pivots(self.hessian(u, t)) == 0

    def step(self, u_prev, t_prev, t):
        """Predictor along the branch tangent, then Newton."""
        pred = u_prev
        try:
            tangent = sla.spsolve(self.hessian(u_prev, t_prev), -self.d_dt(u_prev, t_prev))
            if np.all(np.isfinite(tangent)):
                pred = u_prev + (t - t_prev) * tangent
        except (RuntimeError, NumericalError):
            pass
        try:
            u, r, ok = self.newton(pred, t)
            if not ok:
                u, r, ok = self.newton(u_prev, t)
        except NumericalError:
            return u_prev, math.inf, False
        return u, r, ok and self.stable(u, t)


def fixed_q_solve(mesh, k: int, q, t_grid, opts: SolveOptions | None = None, *,
                  fold_rtol: float = 1e-3) -> FixedQResult:
    """Continue the stable branch of the fixed-q equation from u = 0 at t = 0."""
    t_grid = [float(t) for t in t_grid]
    if any(t < 0 for t in t_grid) or any(b <= a for a, b in zip(t_grid, t_grid[1:])):
        raise ValueError("t_grid must be nonnegative and increasing")
    prob = _FixedQProblem(mesh, k, q)
    u_prev, t_prev = np.zeros(mesh.n_vertices), 0.0
    branch, status, res, eigs = [], [], [], []
    fold = None
    for t in t_grid:
        if fold is not None:
            branch.append(None); status.append("no-solution-found"); res.append(math.nan); eigs.append(math.nan)
            continue
        u, r, ok = prob.step(u_prev, t_prev, t) if t > t_prev else (u_prev, prob.residual(u_prev, t), True)
        if ok:
            branch.append(u); status.append("ok"); res.append(r); eigs.append(prob.min_eigenvalue(u, t))
            u_prev, t_prev = u, t
            continue
        lo, hi, u_lo = t_prev, t, u_prev
        while hi - lo > fold_rtol * hi:
            mid = 0.5 * (lo + hi)
            um, rm, okm = prob.step(u_lo, lo, mid)
            if okm:
                lo, u_lo = mid, um
            else:
                hi = mid
        fold = 0.5 * (lo + hi)
        branch.append(None); status.append("no-solution-found"); res.append(math.nan); eigs.append(math.nan)
    return FixedQResult(t_grid=t_grid, u_branch=branch, fold_t=fold, status=status,
                        residuals=res, min_eigenvalues=eigs)


def crosscheck_formulations(mesh, k: int, q, t: float, opts: SolveOptions | None = None,
                            n_steps: int = 8) -> float:
    """Distance between the fixed-q solution and the solution for its class."""
    q = np.asarray(q, complex)
    if t == 0:
        return 0.0
    fq = fixed_q_solve(mesh, k, q, np.linspace(0, t, n_steps + 1)[1:])
    if fq.status[-1] != "ok":
        raise NumericalError(f"t={t} lies beyond the fixed-q fold (fold_t={fq.fold_t})")
    u_q = fq.u_branch[-1]
    w = np.exp(-(k - 1) * u_q[mesh.faces].mean(axis=1))
    beta = t * w * 1j * np.conj(q)
    bundle = build_bundle(mesh, k)
    sol = solve(mesh, k, beta, opts, u0=u_q, bundle=bundle)
    q_ex = extract_k_differential(sol)
    scale = max(1.0, float(np.abs(u_q).max()), float(np.abs(t * q).max()))
    return float(max(np.abs(sol.u - u_q).max(), np.abs(q_ex - t * q).max()) / scale)
