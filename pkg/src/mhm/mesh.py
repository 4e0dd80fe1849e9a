"""Coarse triangulations of the unit square and per-element submeshes.

The coarse mesh is a structured ``n x n`` grid where each cell is cut by its
lower-left to upper-right diagonal.  Faces (edges) are globally indexed and
carry one unit normal each; on the boundary that normal points out of the
domain.  Submeshes are produced by uniform red refinement of a single coarse
element and are stored on the integer barycentric lattice of the parent, which
makes node deduplication and point location exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPairError, InvalidParameterError, ResourceLimitError

MAX_REFINEMENT = 8

# local face i of a triangle joins local vertices (i, i+1 mod 3)
LOCAL_FACES = ((0, 1), (1, 2), (2, 0))


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Coarse triangulation with an indexed face skeleton.

    Attributes
    ----------
    vertices : (V, 2) float array
    elements : (T, 3) int array, counter-clockwise vertex triples
    faces : (E, 2) int array, vertex pairs stored as (lower, higher)
    element_faces : (T, 3) int array, global face of each local face
    face_elements : (E, 2) int array, incident elements (-1 if absent)
    face_normals : (E, 2) float array of unit normals
    element_face_signs : (T, 3) int array, +1 where the element's outward
        normal agrees with the global face normal
    H : float, maximum element diameter
    """

    vertices: np.ndarray
    elements: np.ndarray
    faces: np.ndarray
    element_faces: np.ndarray
    face_elements: np.ndarray
    face_normals: np.ndarray
    element_face_signs: np.ndarray
    H: float

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_boundary_face(self, e: int) -> bool:
        return self.face_elements[e, 1] < 0

    def face_length(self, e: int) -> float:
        a, b = self.vertices[self.faces[e]]
        return float(np.hypot(*(b - a)))

    def face_lengths(self) -> np.ndarray:
        d = self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def local_face_index(self, t: int, e: int) -> int:
        hits = np.flatnonzero(self.element_faces[t] == e)
        if len(hits) == 0:
            raise InvalidPairError(f"face {e} is not a face of element {t}")
        return int(hits[0])


def _build_topology(vertices, elements):
    edges = np.concatenate([elements[:, [i, j]] for i, j in LOCAL_FACES])
    keys = np.sort(edges, axis=1)
    faces, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_t = len(elements)
    element_faces = inverse.reshape(3, n_t).T.copy()

    face_elements = -np.ones((len(faces), 2), dtype=np.int64)
    for t in range(n_t):
        for e in element_faces[t]:
            slot = 0 if face_elements[e, 0] < 0 else 1
            face_elements[e, slot] = t

    d = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    normals = np.stack([-d[:, 1], d[:, 0]], axis=1)
    normals /= np.hypot(normals[:, 0], normals[:, 1])[:, None]

    centroids = vertices[elements].mean(axis=1)
    mids = 0.5 * (vertices[faces[:, 0]] + vertices[faces[:, 1]])
    boundary = face_elements[:, 1] < 0
    owner = face_elements[:, 0]
    outward = np.einsum("ij,ij->i", normals, mids - centroids[owner])
    flip = boundary & (outward < 0)
    normals[flip] *= -1.0

    signs = np.empty((n_t, 3), dtype=np.int64)
    for t in range(n_t):
        for i in range(3):
            e = element_faces[t, i]
            s = float(np.dot(normals[e], mids[e] - centroids[t]))
            signs[t, i] = 1 if s > 0 else -1
    return faces, element_faces, face_elements, normals, signs


def _diameters(vertices, elements):
    p = vertices[elements]
    lengths = [np.linalg.norm(p[:, j] - p[:, i], axis=1) for i, j in LOCAL_FACES]
    return np.max(lengths, axis=0)


def build_structured_mesh(n: int) -> Mesh:
    """Uniform ``n x n`` triangulation of the unit square (2 n^2 triangles)."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidParameterError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    elements = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            elements.append((a, b, c))
            elements.append((a, c, d))
    elements = np.array(elements, dtype=np.int64)

    faces, element_faces, face_elements, normals, signs = _build_topology(vertices, elements)
    H = float(_diameters(vertices, elements).max())
    return Mesh(
        vertices=_frozen(vertices),
        elements=_frozen(elements),
        faces=_frozen(faces),
        element_faces=_frozen(element_faces),
        face_elements=_frozen(face_elements),
        face_normals=_frozen(normals),
        element_face_signs=_frozen(signs),
        H=H,
    )


def face_orientation_sign(mesh: Mesh, t: int, e: int) -> int:
    """+1 if element ``t``'s outward normal on face ``e`` equals the face normal."""
    if not 0 <= t < mesh.n_elements:
        raise InvalidPairError(f"element {t} out of range")
    i = mesh.local_face_index(t, e)
    return int(mesh.element_face_signs[t, i])


@dataclass(frozen=True)
class SubEdge:
    """A piece of a parent face: owning sub-triangle and its face-parameter span."""

    triangle: int
    s0: float
    s1: float


@dataclass(frozen=True, eq=False)
class Submesh:
    """Uniform red refinement of one coarse element.

    ``lattice`` holds integer coordinates ``(a, b)`` of each vertex on the
    parent lattice of resolution ``2**level``: a vertex sits at
    ``P0 + a/N (P1 - P0) + b/N (P2 - P0)``.  ``trace[i]`` lists the sub-edges on
    parent local face ``i``, ordered by the global face parameter (which runs
    from the lower to the higher global vertex index).
    """

    parent: int
    level: int
    parent_vertices: np.ndarray
    parent_faces: np.ndarray
    face_reversed: tuple
    vertices: np.ndarray
    lattice: np.ndarray
    triangles: np.ndarray
    h: float
    trace: tuple
    _up: np.ndarray = field(repr=False)
    _down: np.ndarray = field(repr=False)

    @property
    def divisions(self) -> int:
        return 2 ** self.level

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def area(self) -> float:
        p0, p1, p2 = self.parent_vertices
        d1, d2 = p1 - p0, p2 - p0
        return 0.5 * float(d1[0] * d2[1] - d1[1] * d2[0])

    def face_endpoints(self, i: int):
        """Physical endpoints of parent local face ``i`` in global orientation."""
        a, b = LOCAL_FACES[i]
        pa, pb = self.parent_vertices[a], self.parent_vertices[b]
        return (pb, pa) if self.face_reversed[i] else (pa, pb)

    def to_parent_coords(self, points) -> np.ndarray:
        """Affine coordinates of ``points`` w.r.t. the parent (P1-P0, P2-P0)."""
        p0, p1, p2 = self.parent_vertices
        J = np.column_stack([p1 - p0, p2 - p0])
        return np.linalg.solve(J, (np.atleast_2d(points) - p0).T).T

    def locate(self, points):
        """Sub-triangle index and reference coordinates for each point.

        Points are assumed to lie in the (closed) parent element; points
        slightly outside are clamped onto the nearest lattice cell.
        """
        lam = self.to_parent_coords(points)
        N = self.divisions
        x, y = N * lam[:, 0], N * lam[:, 1]
        j = np.clip(np.floor(y).astype(np.int64), 0, N - 1)
        i = np.clip(np.floor(x).astype(np.int64), 0, N - 1 - j)
        fx, fy = x - i, y - j
        down = (fx + fy > 1.0) & (i + j <= N - 2)
        tri = np.where(down, self._down[j, np.minimum(i, N - 2)], self._up[j, i])
        # up (i,j): V0=(i,j), edges (1,0), (0,1)
        # down (i,j): V0=(i+1,j), edges (0,1), (-1,1)
        xi = np.where(down, fx + fy - 1.0, fx)
        eta = np.where(down, 1.0 - fx, fy)
        return tri, np.stack([xi, eta], axis=1)


def refine_element(mesh: Mesh, t: int, r: int) -> Submesh:
    """Red-refine coarse element ``t`` ``r`` times (``4**r`` sub-triangles)."""
    if not 0 <= t < mesh.n_elements:
        raise InvalidParameterError(f"element {t} out of range")
    if r < 0:
        raise InvalidParameterError(f"refinement level must be >= 0, got {r}")
    if r > MAX_REFINEMENT:
        raise ResourceLimitError(f"refinement level {r} exceeds limit {MAX_REFINEMENT}")
    N = 2 ** r
    verts_idx = mesh.elements[t]
    p0, p1, p2 = mesh.vertices[verts_idx]

    lattice = np.array([(a, b) for b in range(N + 1) for a in range(N + 1 - b)], dtype=np.int64)
    index = -np.ones((N + 1, N + 1), dtype=np.int64)
    index[lattice[:, 0], lattice[:, 1]] = np.arange(len(lattice))
    vertices = p0 + np.outer(lattice[:, 0] / N, p1 - p0) + np.outer(lattice[:, 1] / N, p2 - p0)

    tris = []
    up = -np.ones((N, N), dtype=np.int64)
    down = -np.ones((N, N), dtype=np.int64)
    for j in range(N):
        for i in range(N - j):
            up[j, i] = len(tris)
            tris.append((index[i, j], index[i + 1, j], index[i, j + 1]))
    for j in range(N - 1):
        for i in range(N - 1 - j):
            down[j, i] = len(tris)
            tris.append((index[i + 1, j], index[i + 1, j + 1], index[i, j + 1]))
    triangles = np.array(tris, dtype=np.int64)

    h = float(_diameters(vertices, triangles).max())

    reversed_ = tuple(bool(verts_idx[a] > verts_idx[b]) for a, b in LOCAL_FACES)
    trace = []
    for f in range(3):
        pieces = []
        for a in range(N):
            if f == 0:
                owner = up[0, a]
            elif f == 1:
                owner = up[a, N - a - 1]
            else:
                owner = up[N - a - 1, 0]
            s0, s1 = a / N, (a + 1) / N
            if reversed_[f]:
                s0, s1 = 1.0 - s1, 1.0 - s0
            pieces.append(SubEdge(int(owner), s0, s1))
        pieces.sort(key=lambda se: se.s0)
        trace.append(tuple(pieces))

    return Submesh(
        parent=int(t),
        level=int(r),
        parent_vertices=_frozen(np.array([p0, p1, p2])),
        parent_faces=_frozen(mesh.element_faces[t].copy()),
        face_reversed=reversed_,
        vertices=_frozen(vertices),
        lattice=_frozen(lattice),
        triangles=_frozen(triangles),
        h=h,
        trace=tuple(trace),
        _up=_frozen(up),
        _down=_frozen(down),
    )


def write_vtk_mesh(mesh: Mesh, path, cell_data: dict | None = None) -> None:
    """Legacy ASCII VTK unstructured grid of the coarse mesh."""
    lines = ["# vtk DataFile Version 3.0", "mhm coarse mesh", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {mesh.n_elements} {4 * mesh.n_elements}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += ["5"] * mesh.n_elements
    if cell_data:
        lines.append(f"CELL_DATA {mesh.n_elements}")
        for name, values in cell_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [f"{v:.17g}" for v in np.asarray(values, dtype=float)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
