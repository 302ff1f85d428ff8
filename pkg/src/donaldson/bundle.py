"""Line bundles E = (T^{1,0})^{k-1} over a hyperbolic mesh.

Coefficients are stored in metric-orthonormal frames, so pointwise norms are
plain moduli:

* ``Section``      complex array over vertices (vertex frames of E)
* ``FormE``        complex array over faces (face frames of Lambda^{0,1} x E)
* ``KDifferential`` complex array over faces (face frames of E* x K)

A vertex frame of T^{1,0} is the unit tangent direction fixed by
``mesh.vertex_frame``; a tensor power of weight n rotates by ``exp(i n r)``
when the frame is carried into a face chart.  Weight n = k-1 is E and
weight n = -k is L = K^k, the bundle whose holomorphic sections are the
k-differentials.

Inner products are Hermitian and antilinear in the first slot:
``<a, b> = sum(w * conj(a) * b)`` with vertex weights for sections and
hyperbolic face areas for forms.  The scalar convention is
``||dz_bar||^2 = 2 / g``, under which the Bochner constant of E is k-1.
"""
from __future__ import annotations

import json
import math
import weakref
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import DiscretizationError, NumericalError
from .mesh import HyperbolicMesh

FRAME_VERSION = 1
DEFAULT_GAP = 5.0   # singular-value gap accepted by holomorphic_basis by default
TARGET_GAP = 1e3    # gap the kernel detection aims for on fine meshes


def wrap_angle(x):
    """Reduce angles to (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    return x - 2 * np.pi * np.ceil((x - np.pi) / (2 * np.pi))


def _face_frames(mesh: HyperbolicMesh) -> np.ndarray:
    """Rotation r[f, j] taking the frame at corner j into the face chart.

    The chart direction of halfedge j -> j+1 minus its direction in the
    vertex frame, corrected by half the gap between Euclidean chart angle
    and hyperbolic corner angle so the residual twist is spread evenly.
    """
    z = mesh.chart
    psi = np.angle(z[:, [1, 2, 0]] - z)
    phi = mesh.vertex_frame.reshape(-1, 3)
    return psi - phi + 0.5 * (mesh.chart_angles - mesh.corner_angles)


_DBAR_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def dbar_matrix(mesh: HyperbolicMesh, weight: int) -> sp.csr_matrix:
    """Sparse (F x V) d-bar operator on sections of (T^{1,0})^weight.

    Row f holds the antilinear Wirtinger coefficient of the affine
    interpolant of the transported corner values, expressed in the
    orthonormal face frame.
    """
    cache = _DBAR_CACHE.setdefault(mesh, {})
    if weight in cache:
        return cache[weight]
    z = mesh.chart
    A = mesh.chart_area
    s = np.sqrt(mesh.face_area / A)
    r = _face_frames(mesh)
    e = z[:, [2, 0, 1]] - z[:, [1, 2, 0]]
    vals = (math.sqrt(2) / s)[:, None] * (1j * e / (4 * A[:, None])) * np.exp(1j * weight * r)
    F = mesh.n_faces
    D = sp.csr_matrix((vals.ravel(), (np.repeat(np.arange(F), 3), mesh.faces.ravel())),
                      shape=(F, mesh.n_vertices))
    D.sum_duplicates()
    cache[weight] = D
    return D


@dataclass(eq=False)
class BundleData:
    """E = (T^{1,0})^{k-1} with its discrete Chern connection."""

    mesh: HyperbolicMesh
    k: int
    transport: np.ndarray = field(repr=False)
    face_frame: np.ndarray = field(repr=False)

    @property
    def weight(self) -> int:
        return self.k - 1

    @cached_property
    def D(self) -> sp.csr_matrix:
        return dbar_matrix(self.mesh, self.weight)

    @cached_property
    def DH(self) -> sp.csr_matrix:
        return self.D.conj().T.tocsr()

    @cached_property
    def laplacian(self) -> sp.csc_matrix:
        """Unit-weight d-bar Laplacian D^H A D (Hermitian positive definite)."""
        return (self.DH @ sp.diags(self.mesh.face_area) @ self.D).tocsc()

    @cached_property
    def _laplacian_lu(self):
        return sla.splu(self.laplacian)

    def face_holonomy(self, weight: int | None = None) -> np.ndarray:
        """Holonomy angle of each face loop, summed before wrapping."""
        w = self.weight if weight is None else weight
        t1 = self.transport_weight(1).reshape(-1, 3).sum(axis=1)
        return wrap_angle(w * t1)

    def transport_weight(self, weight: int) -> np.ndarray:
        """Transport angles of (T^{1,0})^weight along every halfedge."""
        base = _unit_transport(self.mesh)
        return _antisymmetric_wrap(self.mesh, weight * base)

    def total_holonomy(self) -> float:
        return float(self.face_holonomy().sum())


def _unit_transport(mesh: HyperbolicMesh) -> np.ndarray:
    twin = mesh.twin
    phi = mesh.vertex_frame
    return phi[twin] + np.pi - phi


def _antisymmetric_wrap(mesh: HyperbolicMesh, t: np.ndarray) -> np.ndarray:
    twin = mesh.twin
    h = np.arange(len(t))
    canon = h < twin
    out = np.empty_like(t)
    out[canon] = wrap_angle(t[canon])
    out[twin[canon]] = -out[canon]
    return out


def build_bundle(mesh: HyperbolicMesh, k: int) -> BundleData:
    if int(k) != k or k < 2:
        raise ValueError(f"k must be an integer >= 2, got {k}")
    k = int(k)
    transport = _antisymmetric_wrap(mesh, (k - 1) * _unit_transport(mesh))
    return BundleData(mesh=mesh, k=k, transport=transport, face_frame=_face_frames(mesh))


# ----------------------------------------------------------------------
# operators

def _check(arr, n, what):
    arr = np.asarray(arr, dtype=complex)
    if arr.shape != (n,):
        raise ValueError(f"{what} must have shape ({n},), got {arr.shape}")
    return arr


def dbar(bundle: BundleData, eta) -> np.ndarray:
    eta = _check(eta, bundle.mesh.n_vertices, "section")
    return bundle.D @ eta


def dbar_adjoint(bundle: BundleData, beta, weight=None) -> np.ndarray:
    """Section zeta with <beta, dbar l>_weighted = <zeta, l> for every l."""
    mesh = bundle.mesh
    beta = _check(beta, mesh.n_faces, "form")
    a = mesh.face_area if weight is None else mesh.face_area * np.asarray(weight, dtype=float)
    return (bundle.DH @ (a * beta)) / mesh.vertex_weight


def section_inner(mesh: HyperbolicMesh, a, b) -> complex:
    return complex(np.sum(mesh.vertex_weight * np.conj(a) * b))


def form_inner(mesh: HyperbolicMesh, a, b, weight=None) -> complex:
    w = mesh.face_area if weight is None else mesh.face_area * weight
    return complex(np.sum(w * np.conj(a) * b))


def form_norm(mesh: HyperbolicMesh, a, weight=None) -> float:
    return math.sqrt(max(form_inner(mesh, a, a, weight).real, 0.0))


def section_norm(mesh: HyperbolicMesh, a) -> float:
    return math.sqrt(max(section_inner(mesh, a, a).real, 0.0))


def hodge_star_E(bundle: BundleData, beta) -> np.ndarray:
    """Conjugate-linear isometry Lambda^{0,1} x E -> K x E*.

    In orthonormal frames the coefficient map is b -> i conj(b); it is its
    own inverse, so the same function realizes the inverse star.
    """
    return 1j * np.conj(np.asarray(beta, dtype=complex))


hodge_star_E_inv = hodge_star_E


def wedge_pairing(mesh: HyperbolicMesh, q, beta) -> complex:
    """Integral of q ^ beta for q in K x E* and beta in Lambda^{0,1} x E.

    The unit (1,0) and (0,1) coframes wedge to -i dA.
    """
    return complex(np.sum(mesh.face_area * np.asarray(q) * np.asarray(beta)) * (-1j))


def harmonic_projection(bundle: BundleData, beta, *, rtol: float = 1e-10):
    """Split beta = beta0 + dbar(eta0) with dbar^* beta0 = 0."""
    mesh = bundle.mesh
    beta = _check(beta, mesh.n_faces, "form")
    rhs = bundle.DH @ (mesh.face_area * beta)
    eta0 = bundle._laplacian_lu.solve(rhs)
    res = np.linalg.norm(bundle.laplacian @ eta0 - rhs)
    scale = np.linalg.norm(rhs)
    if scale > 0 and res > rtol * scale:
        raise NumericalError(f"harmonic projection solve residual {res / scale:.3e} (relative)")
    beta0 = beta - bundle.D @ eta0
    return beta0, eta0


def bochner_constant(bundle: BundleData) -> float:
    """Smallest eigenvalue of dbar^* dbar with respect to the vertex mass."""
    M = bundle.mesh.mass.tocsc()
    try:
        vals = sla.eigsh(bundle.laplacian, k=1, M=M, sigma=0.0, which="LM", v0=np.ones(M.shape[0]),
                         return_eigenvectors=False, tol=1e-12)
    except sla.ArpackNoConvergence as exc:
        raise NumericalError("Bochner eigen-iteration did not converge") from exc
    return float(np.real(vals).min())


# ----------------------------------------------------------------------
# holomorphic k-differentials

@dataclass
class HolomorphicBasis:
    """Orthonormal basis of discrete holomorphic k-differentials.

    ``elements`` are face coefficients (KDifferential); ``sections`` are
    the underlying near-kernel vectors of d-bar on K^k over vertices.
    ``singular_values`` is the low end of the d-bar spectrum, ``gap`` the
    ratio sigma_{d+1} / sigma_d at the detected rank d.
    """

    k: int
    elements: list
    sections: np.ndarray
    singular_values: np.ndarray
    gap: float

    def __len__(self):
        return len(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    def __iter__(self):
        return iter(self.elements)

    def coefficients(self, mesh: HyperbolicMesh, q) -> np.ndarray:
        """Coordinates of q in the (face-orthonormal) basis."""
        S = np.column_stack(self.elements)
        return S.conj().T @ (mesh.face_area * np.asarray(q))

    def projection_defect(self, mesh: HyperbolicMesh, q) -> float:
        q = np.asarray(q, dtype=complex)
        nq = form_norm(mesh, q)
        if nq == 0:
            return 0.0
        S = np.column_stack(self.elements)
        r = q - S @ self.coefficients(mesh, q)
        return form_norm(mesh, r) / nq


def transport_to_faces(mesh: HyperbolicMesh, x, weight: int) -> np.ndarray:
    """Average the three transported corner values of a vertex field."""
    r = _face_frames(mesh)
    return (np.asarray(x)[mesh.faces] * np.exp(1j * weight * r)).mean(axis=1)


def holomorphic_basis(mesh: HyperbolicMesh, k: int, *, min_gap: float = DEFAULT_GAP,
                      n_extra: int = 4) -> HolomorphicBasis:
    """Numerical kernel of d-bar on K^k, moved to faces and orthonormalized.

    The rank is read off from the largest jump in the lowest singular values
    of d-bar (relative to the vertex mass) and must exceed ``min_gap``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    expected = (2 * k - 1) * (mesh.genus - 1)
    n_eig = min(expected + n_extra, mesh.n_vertices - 2)
    D = dbar_matrix(mesh, -k)
    K = (D.conj().T @ sp.diags(mesh.face_area) @ D).tocsc()
    M = mesh.mass.tocsc()
    v0 = np.ones(mesh.n_vertices)
    vals, vecs = sla.eigsh(K, k=n_eig, M=M, sigma=-1e-3, which="LM", v0=v0, tol=1e-12)
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    sv = np.sqrt(np.maximum(vals, 0.0))
    ratios = sv[1:] / np.maximum(sv[:-1], 1e-300)
    d = int(np.argmax(ratios)) + 1
    gap = float(ratios[d - 1])
    if gap < min_gap:
        raise DiscretizationError(
            f"no singular-value gap >= {min_gap:g} for k={k}: lowest values {np.array2string(sv, precision=4)}",
            spectrum=sv)
    X = vecs[:, :d]
    Sf = np.column_stack([transport_to_faces(mesh, X[:, i], -k) for i in range(d)])
    G = Sf.conj().T @ (mesh.face_area[:, None] * Sf)
    C = la.cholesky(G, lower=False)
    Sf = la.solve_triangular(C, Sf.T, trans="T", lower=False).T
    X = la.solve_triangular(C, X.T, trans="T", lower=False).T
    # fix the phase of each element for reproducibility
    for i in range(d):
        j = int(np.argmax(np.abs(Sf[:, i])))
        ph = np.conj(Sf[j, i]) / abs(Sf[j, i])
        Sf[:, i] *= ph
        X[:, i] *= ph
    return HolomorphicBasis(k=k, elements=[Sf[:, i].copy() for i in range(d)], sections=X,
                            singular_values=sv, gap=gap)


def harmonic_dimension(mesh: HyperbolicMesh, k: int, **kw) -> int:
    """Dimension of the harmonic E-valued (0,1)-forms.

    Computed through the pairing of harmonic forms with holomorphic
    k-differentials, which identifies the two spaces.
    """
    return len(holomorphic_basis(mesh, k, **kw))


def pairing_defect(mesh: HyperbolicMesh, k: int, s) -> float:
    """sup over sections eta of |int s ^ dbar eta| / (||s|| ||eta||)."""
    D = dbar_matrix(mesh, k - 1)
    b = hodge_star_E_inv(None, s)
    z = D.conj().T @ (mesh.face_area * b)
    return float(np.sqrt(np.sum(np.abs(z) ** 2 / mesh.vertex_weight)) / form_norm(mesh, s))


def weak_dbar_residual(bundle: BundleData, q) -> float:
    """Relative size of the weak d-bar of a differential q in K x E*.

    Measures the functional l -> integral of q ^ dbar(l) against the same
    expression with all phases aligned, so holomorphic q give ~0 and
    generic q give O(1).
    """
    mesh = bundle.mesh
    b = hodge_star_E_inv(bundle, q)
    num = np.abs(bundle.DH @ (mesh.face_area * b))
    den = abs(bundle.DH) @ (mesh.face_area * np.abs(b))
    scale = np.linalg.norm(den)
    return 0.0 if scale == 0 else float(np.linalg.norm(num) / scale)


# ----------------------------------------------------------------------
# serialization

def field_to_dict(mesh: HyperbolicMesh, k: int, kind: str, coef) -> dict:
    coef = np.asarray(coef, dtype=complex)
    return {"kind": kind, "mesh_hash": mesh.hash(), "k": int(k), "frame_version": FRAME_VERSION,
            "data": [[float(c.real), float(c.imag)] for c in coef]}


def field_from_dict(data: dict, mesh: HyperbolicMesh | None = None, k: int | None = None):
    if data.get("frame_version") != FRAME_VERSION:
        raise ValueError(f"unsupported frame version {data.get('frame_version')}")
    if mesh is not None and data["mesh_hash"] != mesh.hash():
        raise ValueError("field was written for a different mesh")
    if k is not None and data["k"] != k:
        raise ValueError(f"field has k={data['k']}, expected {k}")
    arr = np.asarray(data["data"], dtype=float).reshape(-1, 2)
    return arr[:, 0] + 1j * arr[:, 1]


def save_field(path, mesh, k, kind, coef) -> None:
    Path(path).write_text(json.dumps(field_to_dict(mesh, k, kind, coef)))


def load_field(path, mesh=None, k=None) -> np.ndarray:
    return field_from_dict(json.loads(Path(path).read_text()), mesh, k)
