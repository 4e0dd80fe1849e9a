"""Multiplier space on the mesh skeleton and the piecewise-constant space.

Each face is split into ``m`` equal sub-intervals carrying L2-orthonormal
Legendre polynomials of degree <= ``l``.  The face parameter ``s`` runs from
the lower to the higher global vertex index, so the basis does not depend on
which element looks at the face.  DoFs are ordered by face, then
sub-interval, then degree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre

from .errors import InvalidParameterError
from .mesh import Mesh


class MultiplierBasisFunction:
    """Orthonormal Legendre polynomial on one sub-interval of one face."""

    def __init__(self, face: int, interval: int, degree: int, m: int, length: float):
        self.face = face
        self.interval = interval
        self.degree = degree
        self.m = m
        self.length = length
        self.support = (interval / m, (interval + 1) / m)
        self._scale = np.sqrt((2 * degree + 1) * m / length)
        self._coef = np.zeros(degree + 1)
        self._coef[degree] = 1.0

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        lo, hi = self.support
        t = 2.0 * (s * self.m - self.interval) - 1.0
        inside = (s >= lo) & (s <= hi)
        return np.where(inside, self._scale * legendre.legval(t, self._coef), 0.0)

    def __repr__(self):
        return f"psi(face={self.face}, interval={self.interval}, degree={self.degree})"


@dataclass(frozen=True, eq=False)
class SkeletonSpace:
    l: int
    m: int
    face_lengths: np.ndarray
    offsets: np.ndarray

    @property
    def per_face(self) -> int:
        return self.m * (self.l + 1)

    @property
    def dimension(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_faces(self) -> int:
        return len(self.face_lengths)

    def face_dofs(self, e: int) -> np.ndarray:
        return np.arange(self.offsets[e], self.offsets[e + 1])

    def locate(self, i: int):
        """(face, sub-interval, degree) of global DoF ``i``."""
        e = int(np.searchsorted(self.offsets, i, side="right") - 1)
        r = i - int(self.offsets[e])
        return e, r // (self.l + 1), r % (self.l + 1)

    def basis(self, i: int) -> MultiplierBasisFunction:
        e, q, p = self.locate(i)
        return MultiplierBasisFunction(e, q, p, self.m, float(self.face_lengths[e]))

    def evaluate(self, coeffs, e: int, s) -> np.ndarray:
        """Multiplier field with DoF vector ``coeffs`` on face ``e`` at parameters ``s``."""
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        for i in self.face_dofs(e):
            out = out + coeffs[i] * self.basis(i)(s)
        return out


@dataclass(frozen=True)
class V0Space:
    """Piecewise constants: basis function t is the indicator of element t."""

    n_elements: int

    @property
    def dimension(self) -> int:
        return self.n_elements


@dataclass(frozen=True, eq=False)
class LocalMultipliers:
    """Multiplier DoFs seen from one element, in local face order."""

    element: int
    dofs: np.ndarray
    signs: np.ndarray
    faces: np.ndarray

    @property
    def count(self) -> int:
        return len(self.dofs)


def build_skeleton_space(mesh: Mesh, l: int, m: int) -> SkeletonSpace:
    if l < 0:
        raise InvalidParameterError(f"multiplier degree l must be >= 0, got {l}")
    if m < 1:
        raise InvalidParameterError(f"face partition m must be >= 1, got {m}")
    per_face = m * (l + 1)
    offsets = np.arange(mesh.n_faces + 1, dtype=np.int64) * per_face
    lengths = mesh.face_lengths()
    lengths.setflags(write=False)
    offsets.setflags(write=False)
    return SkeletonSpace(int(l), int(m), lengths, offsets)


def build_v0_space(mesh: Mesh) -> V0Space:
    return V0Space(mesh.n_elements)


def count_local_multipliers(mesh: Mesh, space: SkeletonSpace, t: int) -> LocalMultipliers:
    """Global DoFs, orientation signs and owning faces for element ``t``.

    The count is ``3 * m * (l + 1)``.
    """
    dofs, signs, faces = [], [], []
    for i in range(3):
        e = int(mesh.element_faces[t, i])
        d = space.face_dofs(e)
        dofs.append(d)
        signs.append(np.full(len(d), mesh.element_face_signs[t, i], dtype=np.int64))
        faces.append(np.full(len(d), e, dtype=np.int64))
    return LocalMultipliers(int(t), np.concatenate(dofs), np.concatenate(signs), np.concatenate(faces))
