"""Triangulated closed hyperbolic surfaces.

A mesh is purely intrinsic: combinatorics plus one hyperbolic length per
edge.  Everything else (corner angles, face areas, lumped vertex weights,
vertex tangent frames) is derived from those lengths.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MAX_LEVEL = 7
MESH_ANGLE_TOL = 1e-9
LOADED_ANGLE_WARN = 1e-3
LOADED_ANGLE_REJECT = 1e-1
MESH_AREA_TOL = 1e-8


class MeshError(ValueError):
    """Structural or geometric defect that makes a mesh unusable."""


class MeshWarning(UserWarning):
    pass


@dataclass(eq=False)
class HyperbolicMesh:
    """Closed triangulated surface with hyperbolic edge lengths.

    ``faces[f]`` lists three vertex indices counter-clockwise and
    ``lengths[f, j]`` is the length of the edge opposite corner ``j``.
    ``disk`` optionally holds Poincare-disk positions of the face corners
    in the generator's fundamental domain (used only for plotting and for
    pushing test functions onto the mesh).
    """

    n_vertices: int
    faces: np.ndarray
    lengths: np.ndarray
    genus: int
    disk: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.lengths = np.ascontiguousarray(self.lengths, dtype=float)
        for arr in (self.faces, self.lengths):
            arr.setflags(write=False)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be an (F, 3) array")
        if self.lengths.shape != self.faces.shape:
            raise MeshError("lengths must match faces")

    # ------------------------------------------------------------------
    # combinatorics
    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def halfedges(self) -> tuple[np.ndarray, np.ndarray]:
        """Tail and head vertex of halfedge ``3 f + j`` (corner j -> j+1)."""
        tail = self.faces.reshape(-1)
        head = self.faces[:, [1, 2, 0]].reshape(-1)
        return tail, head

    @cached_property
    def twin(self) -> np.ndarray:
        tail, head = self.halfedges
        index = {}
        for h, (a, b) in enumerate(zip(tail.tolist(), head.tolist())):
            if a == b:
                raise MeshError(f"degenerate halfedge {h} in face {h // 3}")
            if (a, b) in index:
                raise MeshError(f"non-manifold: edge ({a}, {b}) oriented twice the same way "
                                f"(faces {index[(a, b)] // 3}, {h // 3})")
            index[(a, b)] = h
        twin = np.empty(len(tail), dtype=np.int64)
        missing = []
        for h, (a, b) in enumerate(zip(tail.tolist(), head.tolist())):
            t = index.get((b, a))
            if t is None:
                missing.append((a, b))
            else:
                twin[h] = t
        if missing:
            raise MeshError(f"boundary or non-manifold edges: {missing[:10]}")
        return twin

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs (E, 2)."""
        tail, head = self.halfedges
        e = np.sort(np.stack([tail, head], axis=1), axis=1)
        return np.unique(e, axis=0)

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_faces

    # ------------------------------------------------------------------
    # metric quantities
    @cached_property
    def corner_angles(self) -> np.ndarray:
        """Hyperbolic interior angles, ``[f, j]`` at corner j."""
        return _hyperbolic_angles(self.lengths)

    @cached_property
    def chart_angles(self) -> np.ndarray:
        """Angles of the Euclidean triangle with the same side lengths."""
        a, b, c = (self.lengths[:, j] for j in range(3))
        out = np.empty_like(self.lengths)
        for j, (x, y, z) in enumerate([(a, b, c), (b, c, a), (c, a, b)]):
            out[:, j] = np.arccos(np.clip((y * y + z * z - x * x) / (2 * y * z), -1, 1))
        return out

    @cached_property
    def face_area(self) -> np.ndarray:
        return math.pi - self.corner_angles.sum(axis=1)

    @cached_property
    def chart_area(self) -> np.ndarray:
        l = self.lengths
        s = 0.5 * l.sum(axis=1)
        return np.sqrt(np.maximum(s * (s - l[:, 0]) * (s - l[:, 1]) * (s - l[:, 2]), 0.0))

    @cached_property
    def vertex_weight(self) -> np.ndarray:
        w = np.zeros(self.n_vertices)
        np.add.at(w, self.faces, np.repeat(self.face_area[:, None] / 3.0, 3, axis=1))
        return w

    @cached_property
    def angle_sum(self) -> np.ndarray:
        s = np.zeros(self.n_vertices)
        np.add.at(s, self.faces, self.corner_angles)
        return s

    @property
    def total_area(self) -> float:
        return float(self.face_area.sum())

    @cached_property
    def max_edge_length(self) -> float:
        return float(self.lengths.max())

    @cached_property
    def chart(self) -> np.ndarray:
        """Corner positions (complex) of each face's flat chart.

        Corner 0 at the origin, corner 1 on the positive real axis.
        """
        l = self.lengths
        ang = self.chart_angles
        z = np.zeros(self.faces.shape, dtype=complex)
        z[:, 1] = l[:, 2]
        z[:, 2] = l[:, 1] * np.exp(1j * ang[:, 0])
        return z

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Face-vertex incidence S with S[f, v] = 1 for corners."""
        F = self.n_faces
        rows = np.repeat(np.arange(F), 3)
        return sp.csr_matrix((np.ones(3 * F), (rows, self.faces.reshape(-1))),
                             shape=(F, self.n_vertices))

    @cached_property
    def vertex_frame(self) -> np.ndarray:
        """Direction of every halfedge in its tail vertex's tangent frame.

        Angles accumulate hyperbolic corner angles counter-clockwise from a
        reference halfedge, rescaled so each vertex closes at 2 pi.
        """
        twin = self.twin
        nh = 3 * self.n_faces
        tail, _ = self.halfedges
        phi = np.full(nh, np.nan)
        first = {}
        for h in range(nh):
            first.setdefault(int(tail[h]), h)
        ang = self.corner_angles.reshape(-1)
        for v, h0 in first.items():
            h = h0
            acc = 0.0
            ring = []
            while True:
                ring.append((h, acc))
                acc += ang[h]
                f, j = divmod(h, 3)
                h = int(twin[3 * f + (j + 2) % 3])
                if h == h0:
                    break
                if len(ring) > nh:
                    raise MeshError(f"vertex {v} has a non-disk link")
            scale = 2 * math.pi / acc
            for hh, a in ring:
                phi[hh] = a * scale
        if np.isnan(phi).any():
            raise MeshError("vertex links do not cover every halfedge")
        return phi

    @cached_property
    def vertex_rings(self) -> list[int]:
        """Number of halfedges in each vertex's link (a manifold check)."""
        counts = np.bincount(self.faces.reshape(-1), minlength=self.n_vertices)
        return counts.tolist()

    # ------------------------------------------------------------------
    # scalar operators
    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Matrix L with v^T L w = integral of grad v . grad w (P1 elements)."""
        cot = 1.0 / np.tan(self.chart_angles)
        if not np.all(np.isfinite(cot)):
            raise MeshError("degenerate triangle in stiffness assembly")
        f = self.faces
        rows, cols, vals = [], [], []
        for j in range(3):
            a, b = f[:, (j + 1) % 3], f[:, (j + 2) % 3]
            w = 0.5 * cot[:, j]
            rows += [a, b, a, b]
            cols += [b, a, a, b]
            vals += [-w, -w, w, w]
        n = self.n_vertices
        L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
        L.sum_duplicates()
        return L

    @cached_property
    def mass(self) -> sp.dia_matrix:
        return sp.diags(self.vertex_weight)

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.genus).tobytes())
        h.update(np.int64(self.n_vertices).tobytes())
        h.update(self.faces.tobytes())
        h.update(np.round(self.lengths, 12).tobytes())
        return h.hexdigest()[:16]


def _hyperbolic_angles(lengths: np.ndarray) -> np.ndarray:
    ch = np.cosh(lengths)
    sh = np.sinh(lengths)
    out = np.empty_like(lengths)
    for j in range(3):
        b, c = (j + 1) % 3, (j + 2) % 3
        cosang = (ch[:, b] * ch[:, c] - ch[:, j]) / (sh[:, b] * sh[:, c])
        out[:, j] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return out


# ----------------------------------------------------------------------
# Poincare disk helpers

def disk_distance(z, w):
    z = np.asarray(z)
    w = np.asarray(w)
    num = 2 * np.abs(z - w) ** 2
    den = (1 - np.abs(z) ** 2) * (1 - np.abs(w) ** 2)
    return np.arccosh(1 + num / den)


def disk_midpoint(z: complex, w: complex) -> complex:
    """Hyperbolic midpoint of the geodesic segment [z, w]."""
    zz = (z - w) / (1 - np.conj(w) * z)
    d = disk_distance(z, w)
    if d == 0:
        return z
    m = math.tanh(d / 4) * zz / abs(zz)
    return (m + w) / (1 + np.conj(w) * m)


def octagon_corners() -> np.ndarray:
    """Corners of the regular hyperbolic octagon with interior angles pi/4."""
    R = math.acosh(1.0 / math.tan(math.pi / 8) ** 2)
    r = math.tanh(R / 2)
    return r * np.exp(1j * (math.pi / 8 + 2 * math.pi * np.arange(8) / 8))


def generate_genus2_mesh(level: int) -> HyperbolicMesh:
    """Triangulate the Bolza surface (regular octagon, opposite sides paired).

    The octagon is fanned from its centre and the eight fan triangles are
    split 1-to-4 at hyperbolic midpoints ``level + 2`` times; two initial
    splits make even ``level=0`` a simplicial complex.
    """
    level = int(level)
    if level < 0:
        raise ValueError("level must be nonnegative")
    if level > MAX_LEVEL:
        raise MemoryError(f"level {level} exceeds the resource guard (max {MAX_LEVEL})")

    corners = octagon_corners()
    pos: list[complex] = [0j]
    side: list[dict] = [{}]
    for j in range(8):
        pos.append(complex(corners[j]))
        side.append({j: Fraction(0), (j - 1) % 8: Fraction(1)})
    tris = [(0, 1 + j, 1 + (j + 1) % 8) for j in range(8)]

    mid_cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        m = mid_cache.get(key)
        if m is None:
            pos.append(complex(disk_midpoint(pos[a], pos[b])))
            common = set(side[a]) & set(side[b])
            side.append({s: (side[a][s] + side[b][s]) / 2 for s in common})
            m = len(pos) - 1
            mid_cache[key] = m
        return m

    for _ in range(level + 2):
        new = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        tris = new

    # identify opposite sides: side j at parameter s <-> side j+4 at 1-s
    canon: dict = {}
    vid = np.empty(len(pos), dtype=np.int64)
    for i, sd in enumerate(side):
        if not sd:
            key = ("interior", i)
        elif any(s in (0, 1) for s in sd.values()):
            key = ("corner",)
        else:
            (j, s), = sd.items()
            key = ("side", j, s) if j < 4 else ("side", j - 4, 1 - s)
        vid[i] = canon.setdefault(key, len(canon))

    local = np.array(tris, dtype=np.int64)
    faces = vid[local]
    disk = np.array(pos)[local]
    lengths = np.empty(faces.shape)
    for j in range(3):
        lengths[:, j] = disk_distance(disk[:, (j + 1) % 3], disk[:, (j + 2) % 3])
    lengths = _symmetrize_lengths(faces, lengths)
    return HyperbolicMesh(len(canon), faces, lengths, genus=2, disk=disk,
                          meta={"generator": "bolza-octagon", "level": level})


def _symmetrize_lengths(faces: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Average the copies of each edge length (identified sides)."""
    a = faces[:, [1, 2, 0]].reshape(-1)
    b = faces[:, [2, 0, 1]].reshape(-1)
    key = np.minimum(a, b) * (faces.max() + 1) + np.maximum(a, b)
    uniq, inv = np.unique(key, return_inverse=True)
    tot = np.bincount(inv, weights=lengths.reshape(-1), minlength=len(uniq))
    cnt = np.bincount(inv, minlength=len(uniq))
    return (tot / cnt)[inv].reshape(lengths.shape)


# ----------------------------------------------------------------------
# validation

@dataclass
class MeshReport:
    euler_characteristic: int
    expected_euler: int
    worst_angle_defect: float
    area_mismatch: float
    min_face_area: float
    triangle_inequality_ok: bool
    angle_tol: float
    checks: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def validate_mesh(mesh: HyperbolicMesh, *, loaded: bool = False,
                  angle_tol: float | None = None,
                  area_tol: float = MESH_AREA_TOL) -> MeshReport:
    """Check the invariants of a hyperbolic mesh.

    Combinatorial defects raise :class:`MeshError`; metric defects are
    reported.  For ``loaded`` meshes an angle defect up to 1e-3 passes
    silently, up to 1e-1 passes with a warning, and beyond that fails.
    """
    _ = mesh.twin  # raises on non-manifold input
    for v, n in enumerate(mesh.vertex_rings):
        if n == 0:
            raise MeshError(f"isolated vertex {v}")
    l = mesh.lengths
    tri_ok = bool(np.all(l > 0) and np.all(l[:, 0] < l[:, 1] + l[:, 2])
                  and np.all(l[:, 1] < l[:, 2] + l[:, 0])
                  and np.all(l[:, 2] < l[:, 0] + l[:, 1]))
    chi = mesh.euler_characteristic
    expected = 2 - 2 * mesh.genus
    defect = float(np.max(np.abs(mesh.angle_sum - 2 * math.pi))) if tri_ok else math.inf
    area = mesh.face_area
    total = float(area.sum())
    area_mismatch = abs(total - 4 * math.pi * (mesh.genus - 1))
    weights_mismatch = abs(total - float(mesh.vertex_weight.sum()))

    msgs = []
    if angle_tol is None:
        angle_tol = LOADED_ANGLE_WARN if loaded else MESH_ANGLE_TOL
    angle_ok = defect <= angle_tol
    if loaded and not angle_ok and defect <= LOADED_ANGLE_REJECT:
        msgs.append(f"angle-sum defect {defect:.3e} exceeds {angle_tol:g}; accepted with warning")
        warnings.warn(msgs[-1], MeshWarning, stacklevel=2)
        angle_ok = True
    if loaded:
        # cone defects shift Gauss-Bonnet; scale the area tolerance with them
        area_tol = max(area_tol, defect * mesh.n_vertices)

    checks = {
        "euler_characteristic": chi == expected,
        "triangle_inequality": tri_ok,
        "positive_area": bool(tri_ok and np.all(area > 0)),
        "angle_sum": bool(angle_ok),
        "gauss_bonnet": bool(area_mismatch <= area_tol),
        "area_consistency": bool(weights_mismatch <= 1e-10 * max(total, 1.0)),
        "genus": mesh.genus >= 2,
    }
    return MeshReport(chi, expected, defect, area_mismatch,
                      float(area.min()) if tri_ok else math.nan,
                      tri_ok, angle_tol, checks, msgs)


# ----------------------------------------------------------------------
# quadrature and the Dirichlet form

def _check_field(mesh: HyperbolicMesh, f) -> np.ndarray:
    f = np.asarray(f)
    if f.shape != (mesh.n_vertices,):
        raise ValueError(f"field of shape {f.shape} does not match {mesh.n_vertices} vertices")
    if not np.all(np.isfinite(f)):
        raise ValueError("field has non-finite entries")
    return f


def laplacian_quadratic_form(mesh: HyperbolicMesh, v1, v2) -> float:
    """Discrete Dirichlet pairing  integral of grad v1 . grad v2 dA."""
    v1 = _check_field(mesh, v1)
    v2 = _check_field(mesh, v2)
    return float(v1 @ (mesh.stiffness @ v2))


def integrate(mesh: HyperbolicMesh, f) -> float:
    """Lumped vertex quadrature  sum_v weight_v f_v."""
    f = _check_field(mesh, f)
    return float(mesh.vertex_weight @ f)


def integrate_faces(mesh: HyperbolicMesh, g) -> float:
    """Face quadrature of a per-face quantity."""
    return float(mesh.face_area @ np.asarray(g))


# ----------------------------------------------------------------------
# file format

def mesh_to_dict(mesh: HyperbolicMesh) -> dict:
    edge_len: dict[str, float] = {}
    for f in range(mesh.n_faces):
        for j in range(3):
            a, b = sorted((int(mesh.faces[f, (j + 1) % 3]), int(mesh.faces[f, (j + 2) % 3])))
            edge_len[f"{a},{b}"] = float(mesh.lengths[f, j])
    return {
        "genus": int(mesh.genus),
        "vertices": int(mesh.n_vertices),
        "faces": mesh.faces.tolist(),
        "edge_lengths": edge_len,
    }


def mesh_from_dict(data: dict) -> HyperbolicMesh:
    try:
        genus = int(data["genus"])
        nv = int(data["vertices"])
        faces = np.asarray(data["faces"], dtype=np.int64)
        table = data["edge_lengths"]
    except KeyError as exc:
        raise MeshError(f"mesh file is missing key {exc}") from None
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshError("faces must be triples of vertex indices")
    if faces.min() < 0 or faces.max() >= nv:
        raise MeshError("face refers to a vertex outside 0..vertices-1")
    lengths = np.empty(faces.shape)
    for f, tri in enumerate(faces.tolist()):
        for j in range(3):
            a, b = sorted((tri[(j + 1) % 3], tri[(j + 2) % 3]))
            try:
                lengths[f, j] = float(table[f"{a},{b}"])
            except KeyError:
                raise MeshError(f"no edge length for edge ({a}, {b})") from None
    return HyperbolicMesh(nv, faces, lengths, genus=genus, meta={"source": "file"})


def save_mesh(mesh: HyperbolicMesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)))


def load_mesh(path, *, validate: bool = True) -> HyperbolicMesh:
    mesh = mesh_from_dict(json.loads(Path(path).read_text()))
    if validate:
        report = validate_mesh(mesh, loaded=True)
        if not report.ok:
            failed = [k for k, v in report.checks.items() if not v]
            raise MeshError(f"mesh {path} failed checks: {failed} "
                            f"(angle defect {report.worst_angle_defect:.3e})")
    return mesh
