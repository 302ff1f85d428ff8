"""Global minimization of the reduced functional J(u) = D(u, eta(u)).

Each outer iteration eliminates eta exactly (one sparse Hermitian solve),
takes a Newton step on u with the Schur complement of the full Hessian, and
backtracks until the Armijo condition holds on J.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .bundle import BundleData, build_bundle, harmonic_projection
from .errors import ConvergenceError, NumericalError
from .functional import (FunctionalState, evaluate_D, eta_residual, first_equation_residual,
                         hessian_blocks, partial_u, reduced_state)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["t", "D", "sup_u", "res_u", "res_eta", "iters", "converged"]
ETA_TOL = 1e-9


@dataclass
class SolveOptions:
    grad_tol: float = 1e-9
    max_outer: int = 200
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    newton_regularization: float = 0.0
    seed: int = 0
    deterministic: bool = True
    eta_method: str = "direct"
    max_backtracks: int = 60

    def __post_init__(self):
        if not (self.grad_tol > 0 and self.max_outer > 0):
            raise ValueError("tolerances and iteration limits must be positive")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if not 0 < self.armijo_shrink < 1:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if self.newton_regularization < 0:
            raise ValueError("newton_regularization must be nonnegative")


def k_differential(state: FunctionalState) -> np.ndarray:
    """q = e^{(k-1)u} * star(beta0 + dbar eta), per face."""
    return state.face_weight * 1j * np.conj(state.beta)


@dataclass(eq=False)
class Solution:
    u: np.ndarray
    eta: np.ndarray
    D_value: float
    residual_u: float
    residual_eta: float
    iterations: int
    converged: bool
    bundle: BundleData = field(repr=False)
    beta0: np.ndarray = field(repr=False)
    history: list = field(default_factory=list, repr=False)
    initial_D: float = math.nan

    @property
    def k(self) -> int:
        return self.bundle.k

    @property
    def mesh(self):
        return self.bundle.mesh

    def state(self) -> FunctionalState:
        return FunctionalState(self.bundle, self.u, self.eta, self.beta0)

    def q(self) -> np.ndarray:
        return k_differential(self.state())

    def summary(self) -> dict:
        return {"D": self.D_value, "sup_u": float(np.max(self.u)), "res_u": self.residual_u,
                "res_eta": self.residual_eta, "iters": self.iterations, "converged": self.converged}

    def to_dict(self) -> dict:
        c = lambda a: [[float(x.real), float(x.imag)] for x in np.asarray(a, complex)]
        return {"k": self.k, "mesh_hash": self.mesh.hash(), "u": [float(x) for x in self.u],
                "eta": c(self.eta), "beta0": c(self.beta0), "D": self.D_value,
                "residual_u": self.residual_u, "residual_eta": self.residual_eta,
                "iterations": self.iterations, "converged": self.converged}

    @classmethod
    def from_dict(cls, data: dict, mesh) -> "Solution":
        if data["mesh_hash"] != mesh.hash():
            raise ValueError("solution was written for a different mesh")
        c = lambda a: np.asarray(a, float).reshape(-1, 2) @ np.array([1, 1j])
        bundle = build_bundle(mesh, int(data["k"]))
        return cls(u=np.asarray(data["u"], float), eta=c(data["eta"]), D_value=float(data["D"]),
                   residual_u=float(data["residual_u"]), residual_eta=float(data["residual_eta"]),
                   iterations=int(data["iterations"]), converged=bool(data["converged"]),
                   bundle=bundle, beta0=c(data["beta0"]))


def _residuals(state):
    return float(np.max(np.abs(first_equation_residual(state)))), eta_residual(state)


def _make_solution(state, J, it, converged, history, D0):
    ru, re = _residuals(state)
    return Solution(u=state.u.copy(), eta=state.eta.copy(), D_value=J, residual_u=ru,
                    residual_eta=re, iterations=it, converged=converged, bundle=state.bundle,
                    beta0=state.beta0, history=history, initial_D=D0)


def newton_direction(state: FunctionalState, g: np.ndarray, lam0: float = 0.0):
    """Newton direction for J from the full Hessian, regularized until descent."""
    m = state.mesh
    Huu, Hue, Hee = hessian_blocks(state)
    Mv = sp.diags(m.vertex_weight)
    lam = lam0
    rhs = np.concatenate([-g, np.zeros(Hee.shape[0])])
    for _ in range(80):
        H = sp.bmat([[Huu + lam * Mv, Hue], [Hue.T, Hee]], format="csc")
        try:
            du = sla.splu(H).solve(rhs)[: m.n_vertices]
        except RuntimeError:
            du = None
        if du is not None and np.all(np.isfinite(du)) and g @ du < 0:
            return du, lam
        lam = max(2 * lam, 1e-10)
    raise NumericalError("could not regularize the Newton system into a descent direction")


def solve(mesh, k: int, beta_input, opts: SolveOptions | None = None, *, u0=None, eta0=None,
          bundle: BundleData | None = None, project: bool = True) -> Solution:
    """Critical point (u, eta) of D for the class of ``beta_input``."""
    opts = opts or SolveOptions()
    bundle = bundle or build_bundle(mesh, k)
    if bundle.mesh is not mesh or bundle.k != k:
        raise ValueError("bundle does not match (mesh, k)")
    beta_input = np.asarray(beta_input, complex)
    beta0 = harmonic_projection(bundle, beta_input)[0] if project else beta_input
    u = np.zeros(mesh.n_vertices) if u0 is None else np.array(u0, float)
    D0 = math.nan
    if eta0 is not None:
        D0 = evaluate_D(FunctionalState(bundle, u, eta0, beta0))
    state = reduced_state(bundle, u, beta0, method=opts.eta_method)
    J = evaluate_D(state)
    if math.isnan(D0):
        D0 = J
    history = [J]
    best = (J, state)
    lam = opts.newton_regularization
    for it in range(opts.max_outer + 1):
        g = partial_u(state)
        res = 2.0 * float(np.max(np.abs(g / mesh.vertex_weight)))
        if res <= opts.grad_tol:
            sol = _make_solution(state, J, it, True, history, D0)
            if sol.residual_eta <= ETA_TOL:
                return sol
        if it == opts.max_outer:
            break
        du, lam_used = newton_direction(state, g, lam)
        lam = lam_used / 4 if lam_used > 0 else opts.newton_regularization
        slope = float(g @ du)
        alpha = 1.0
        floor = 1e-13 * (abs(J) + 1.0)
        for _ in range(opts.max_backtracks):
            try:
                trial = reduced_state(bundle, state.u + alpha * du, beta0, method=opts.eta_method)
                Jt = evaluate_D(trial)
            except NumericalError:
                alpha *= opts.armijo_shrink
                lam = max(2 * lam, 1e-10)
                continue
            if Jt <= J + opts.armijo_c * alpha * slope or (abs(alpha * slope) < floor and Jt <= J + floor):
                break
            alpha *= opts.armijo_shrink
        else:
            raise ConvergenceError("line search failed", best=_make_solution(state, J, it, False, history, D0))
        state, J = trial, Jt
        history.append(J)
        if J < best[0]:
            best = (J, state)
        log.debug("iter %d J=%.15g res_u=%.3e alpha=%.3g lam=%.1e", it, J, res, alpha, lam_used)
    raise ConvergenceError(f"no convergence in {opts.max_outer} outer iterations",
                           best=_make_solution(best[1], best[0], opts.max_outer, False, history, D0))


# ----------------------------------------------------------------------
# uniqueness and sweeps

@dataclass
class UniquenessReport:
    n_starts: int
    converged: list
    D_values: list
    max_distance: float
    max_distance_eta: float
    scale: float
    unique: bool
    failures: list


def solution_distance(a: Solution, b: Solution) -> float:
    """Gauge-invariant distance of (u, q), relative to the solution size."""
    qa, qb = a.q(), b.q()
    scale = max(1.0, np.abs(a.u).max(), np.abs(qa).max())
    return float(max(np.abs(a.u - b.u).max(), np.abs(qa - qb).max()) / scale)


def multistart_uniqueness(mesh, k, beta_input, n_starts: int = 10, spread: float = 3.0,
                          opts: SolveOptions | None = None, tol: float = 1e-6) -> UniquenessReport:
    if n_starts < 2:
        raise ValueError("need at least two starts")
    opts = opts or SolveOptions()
    rng = np.random.default_rng(opts.seed)
    bundle = build_bundle(mesh, k)
    V = mesh.n_vertices
    sols, conv, Ds, fails = [], [], [], []
    for i in range(n_starts):
        u0 = rng.uniform(-spread, spread, V)
        r = rng.uniform(0, spread, V)
        eta0 = r * np.exp(2j * np.pi * rng.uniform(size=V))
        try:
            s = solve(mesh, k, beta_input, opts, u0=u0, eta0=eta0, bundle=bundle)
            sols.append(s)
            conv.append(True)
            Ds.append(s.D_value)
        except (ConvergenceError, NumericalError) as exc:
            conv.append(False)
            Ds.append(math.nan)
            fails.append(f"start {i}: {exc}")
    dist = dist_eta = 0.0
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            dist = max(dist, solution_distance(sols[i], sols[j]))
            ne = max(1.0, np.abs(sols[i].eta).max())
            dist_eta = max(dist_eta, float(np.abs(sols[i].eta - sols[j].eta).max() / ne))
    scale = max([1.0] + [float(np.abs(s.u).max()) for s in sols])
    return UniquenessReport(n_starts=n_starts, converged=conv, D_values=Ds, max_distance=dist,
                            max_distance_eta=dist_eta, scale=scale,
                            unique=len(sols) >= 2 and dist <= tol, failures=fails)


@dataclass
class SweepPoint:
    t: float
    D: float
    sup_u: float
    res_u: float
    res_eta: float
    iters: int
    converged: bool
    q_sup: float = math.nan
    error: str = ""

    def row(self) -> list:
        return [self.t, self.D, self.sup_u, self.res_u, self.res_eta, self.iters, int(self.converged)]


def sweep_ray(mesh, k, beta0, t_grid, opts: SolveOptions | None = None, *, warm: bool = True,
              keep_solutions: bool = False):
    """Solve along the ray t [beta0], warm-starting from the previous point."""
    t_grid = [float(t) for t in t_grid]
    if any(t < 0 for t in t_grid) or any(b <= a for a, b in zip(t_grid, t_grid[1:])):
        raise ValueError("t_grid must be nonnegative and increasing")
    opts = opts or SolveOptions()
    bundle = build_bundle(mesh, k)
    beta0 = harmonic_projection(bundle, np.asarray(beta0, complex))[0]
    out, sols = [], []
    u_prev = None
    for t in t_grid:
        try:
            s = solve(mesh, k, t * beta0, opts, u0=u_prev if warm else None, bundle=bundle,
                      project=False)
            out.append(SweepPoint(t, s.D_value, float(s.u.max()), s.residual_u, s.residual_eta,
                                  s.iterations, s.converged, float(np.abs(s.q()).max())))
            sols.append(s)
            u_prev = s.u
        except (ConvergenceError, NumericalError) as exc:
            out.append(SweepPoint(t, math.nan, math.nan, math.nan, math.nan, 0, False, error=str(exc)))
            sols.append(None)
    return (out, sols) if keep_solutions else out


def sweep_to_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in points:
        w.writerow([repr(x) if isinstance(x, float) else x for x in p.row()])
    return buf.getvalue()


def sweep_from_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    conv = {"t": float, "D": float, "sup_u": float, "res_u": float, "res_eta": float,
            "iters": int, "converged": lambda s: bool(int(s))}
    return [{c: conv[c](r[c]) for c in CSV_COLUMNS} for r in rows]


def sweep_to_json(points) -> str:
    return json.dumps([asdict(p) for p in points], indent=1)
