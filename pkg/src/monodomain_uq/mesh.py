"""Structured tetrahedral meshes on boxes, space-time hierarchies and transfers.

Every box cell is split into the six Kuhn tetrahedra that share the cell's
main diagonal. All cells use the same split, so halving the cell size
refines each tetrahedron into eight children and the P1 spaces nest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import ArgumentError, ConfigurationError, GeometryError

LOCATE_TOL = 1e-10


@dataclass(frozen=True)
class BoxDomain:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ConfigurationError("box corners must be 3-vectors")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ConfigurationError(f"box lo {lo} must be below hi {hi} componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self):
        return np.array(self.hi) - np.array(self.lo)

    @property
    def volume(self):
        return float(np.prod(self.extent))

    @property
    def center(self):
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    def contains(self, x, tol=LOCATE_TOL):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.array(self.lo) - tol) and np.all(x <= np.array(self.hi) + tol))


def _kuhn_cell_tets():
    """Local corner indices (bit i = offset along axis i) of the 6 Kuhn tets."""
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = 0
        path = [corner]
        for axis in perm:
            corner |= 1 << axis
            path.append(corner)
        tets.append(path)
    return np.array(tets)


_CELL_TETS = _kuhn_cell_tets()


def structured_tets(domain: BoxDomain, cells):
    """Vertices and positively oriented Kuhn tetrahedra of a box grid."""
    nx, ny, nz = cells
    axes = [np.linspace(domain.lo[d], domain.hi[d], c + 1) for d, c in enumerate(cells)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ci, cj, ck = (a.transpose(2, 1, 0).ravel() for a in (ci, cj, ck))
    corners = np.empty((len(ci), 8), dtype=np.int64)
    for bits in range(8):
        a, b, c = bits & 1, (bits >> 1) & 1, (bits >> 2) & 1
        corners[:, bits] = (ci + a) + (nx + 1) * ((cj + b) + (ny + 1) * (ck + c))
    tets = corners[:, _CELL_TETS].reshape(-1, 4)

    x = vertices[tets]
    det = np.linalg.det(np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2))
    flip = det < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return vertices, tets


def nested_dissection(grid, leaf=8):
    """Nested-dissection permutation of the indices stored in ``grid``."""
    out = []
    stack = [(np.asarray(grid), False)]
    while stack:
        block, emit = stack.pop()
        if emit or block.size <= leaf:
            out.append(block.ravel())
            continue
        ax = int(np.argmax(block.shape))
        mid = block.shape[ax] // 2
        a, s, b = np.split(block, [mid, mid + 1], axis=ax)
        # popped in order a, b, separator
        stack.extend([(s, True), (b, False), (a, False)])
    return np.concatenate(out).astype(np.int64)


@dataclass(eq=False)
class MeshLevel:
    """One spatial mesh with its uniform time grid on ``[0, T]``."""

    level: int
    vertices: np.ndarray
    tets: np.ndarray
    h: float
    m: int
    dt: float
    T: float
    domain: BoxDomain
    cells: tuple = field(default=(0, 0, 0))

    def __post_init__(self):
        if self.m < 2:
            raise ConfigurationError("a level needs at least two time nodes")
        if not np.isclose(self.dt, self.T / (self.m - 1), rtol=1e-12):
            raise ConfigurationError("dt must equal T/(m-1)")
        if np.any(self.volumes <= 0):
            raise GeometryError("mesh has non-positive tetrahedron volumes")

    @property
    def n(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.tets)

    @property
    def dofs(self):
        return self.n * self.m

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.m)

    @cached_property
    def _jacobians(self):
        x = self.vertices[self.tets]
        return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)

    @cached_property
    def volumes(self):
        return np.linalg.det(self._jacobians) / 6.0

    @cached_property
    def inverse_maps(self):
        """Per tet, the 3x3 matrix mapping ``x - x0`` to barycentrics 1..3."""
        return np.ascontiguousarray(np.linalg.inv(self._jacobians))

    @cached_property
    def gradients(self):
        """Constant gradients of the four barycentric basis functions, (k, 4, 3)."""
        inv = self.inverse_maps
        return np.ascontiguousarray(np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1))

    @cached_property
    def barycenters(self):
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def _boxes(self):
        x = self.vertices[self.tets]
        pad = 10 * LOCATE_TOL * max(1.0, float(np.abs(self.vertices).max()))
        return (np.ascontiguousarray(x.min(axis=1) - pad),
                np.ascontiguousarray(x.max(axis=1) + pad))

    @cached_property
    def fill_ordering(self):
        """Geometric nested-dissection ordering of the grid vertices.

        Recursively splits the vertex lattice along its longest axis and
        numbers the separator plane last, which keeps LU fill of 3D
        stencils far below generic minimum-degree orderings. ``None`` for
        meshes that are not structured boxes.
        """
        if min(self.cells) < 1:
            return None
        nx, ny, nz = (c + 1 for c in self.cells)
        if nx * ny * nz != self.n:
            return None
        return nested_dissection(np.arange(self.n).reshape(nz, ny, nx))

    def locate(self, points):
        """Containing element and barycentric weights for each point.

        Brute-force scan; points on shared faces go to the lowest element
        index. Returns element index ``-1`` for points outside the mesh.
        """
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        lo, hi = self._boxes
        origin = np.ascontiguousarray(self.vertices[self.tets[:, 0]])
        return kernels.locate_points(points, self.inverse_maps, origin, lo, hi, LOCATE_TOL)


@dataclass(frozen=True)
class TransferOperator:
    from_level: int
    to_level: int
    space_matrix: sp.csr_matrix
    time_matrix: sp.csr_matrix


@dataclass(eq=False)
class MeshHierarchy:
    domain: BoxDomain
    levels: list
    nested: bool
    T: float
    _transfers: dict = field(default_factory=dict, repr=False)

    @property
    def L(self):
        """Index of the finest level."""
        return len(self.levels) - 1

    def __getitem__(self, l):
        return self.levels[l]

    def __len__(self):
        return len(self.levels)

    def transfer(self, from_level, to_level):
        key = (from_level, to_level)
        if key not in self._transfers:
            self._transfers[key] = transfer_operator(self.levels[from_level], self.levels[to_level])
        return self._transfers[key]


def _divisions(length, step, what):
    ratio = length / step
    count = int(round(ratio))
    if count < 1 or abs(ratio - count) > 1e-9 * max(1.0, ratio):
        raise ConfigurationError(f"{what} {step} does not divide {length}")
    return count


def _make_level(domain, level, cells, h, dt, T):
    vertices, tets = structured_tets(domain, cells)
    m = _divisions(T, dt, "time step") + 1
    return MeshLevel(level=level, vertices=vertices, tets=tets, h=h, m=m, dt=T / (m - 1),
                     T=T, domain=domain, cells=tuple(cells))


def build_nested_hierarchy(domain: BoxDomain, L: int, h0: float, dt0: float, T: float) -> MeshHierarchy:
    """``L`` nested levels; level ``l`` has ``h0 / 2**l`` and ``dt0 / 2**l``."""
    if L < 1:
        raise ConfigurationError("a hierarchy needs at least one level")
    base = [_divisions(e, h0, "mesh size") for e in domain.extent]
    _divisions(T, dt0, "time step")
    levels = []
    for l in range(L):
        cells = tuple(c * 2**l for c in base)
        levels.append(_make_level(domain, l, cells, h0 / 2**l, dt0 / 2**l, T))
    return MeshHierarchy(domain=domain, levels=levels, nested=True, T=T)


def build_nonnested_hierarchy(domain: BoxDomain, resolutions, T: float) -> MeshHierarchy:
    """Independent structured meshes, one per ``(h, dt)`` pair.

    The cell count per axis is ``ceil(edge / h)``, so ``h`` need not divide
    the box; the nominal ``h`` is what the level records.
    """
    resolutions = [(float(h), float(dt)) for h, dt in resolutions]
    if not resolutions:
        raise ConfigurationError("empty resolution list")
    hs = [h for h, _ in resolutions]
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise ConfigurationError(f"mesh sizes must decrease strictly, got {hs}")
    levels = []
    for l, (h, dt) in enumerate(resolutions):
        cells = tuple(int(np.ceil(e / h - 1e-9)) for e in domain.extent)
        levels.append(_make_level(domain, l, cells, h, dt, T))
    return MeshHierarchy(domain=domain, levels=levels, nested=False, T=T)


def _weights_matrix(rows, elem, bary, tets, shape):
    w = np.clip(bary, 0.0, 1.0)
    w /= w.sum(axis=1, keepdims=True)
    cols = tets[elem]
    mat = sp.csr_matrix((w.ravel(), (np.repeat(rows, 4), cols.ravel())), shape=shape)
    mat.eliminate_zeros()
    return mat


def space_interpolation(coarse: MeshLevel, fine: MeshLevel) -> sp.csr_matrix:
    """P1 interpolation of coarse nodal fields onto the fine vertices, ``n_f x n_c``."""
    elem, bary = coarse.locate(fine.vertices)
    if np.any(elem < 0):
        bad = fine.vertices[np.argmax(elem < 0)]
        raise GeometryError(f"fine vertex {bad} lies outside the coarse mesh")
    return _weights_matrix(np.arange(fine.n), elem, bary, coarse.tets, (fine.n, coarse.n))


def time_interpolation(t_from, t_to) -> sp.csr_matrix:
    """Piecewise-linear interpolation from the ``t_from`` grid onto ``t_to``."""
    t_from = np.asarray(t_from, dtype=float)
    t_to = np.asarray(t_to, dtype=float)
    k = np.clip(np.searchsorted(t_from, t_to, side="right") - 1, 0, len(t_from) - 2)
    w = (t_to - t_from[k]) / (t_from[k + 1] - t_from[k])
    w = np.clip(w, 0.0, 1.0)
    rows = np.repeat(np.arange(len(t_to)), 2)
    cols = np.column_stack([k, k + 1]).ravel()
    vals = np.column_stack([1.0 - w, w]).ravel()
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(len(t_to), len(t_from)))
    mat.eliminate_zeros()
    return mat


def transfer_operator(source: MeshLevel, target: MeshLevel) -> TransferOperator:
    return TransferOperator(
        from_level=source.level,
        to_level=target.level,
        space_matrix=space_interpolation(source, target),
        time_matrix=time_interpolation(source.times, target.times),
    )


def spacetime_prolong(q, op: TransferOperator):
    """Apply ``space ⊗ time`` to an ``n x m`` nodal array."""
    q = np.asarray(q, dtype=float)
    S, Tm = op.space_matrix, op.time_matrix
    if q.shape != (S.shape[1], Tm.shape[1]):
        raise ArgumentError(f"expected shape {(S.shape[1], Tm.shape[1])}, got {q.shape}")
    return np.asarray(Tm @ (S @ q).T).T


def time_prolong(series, op: TransferOperator):
    series = np.asarray(series, dtype=float)
    if series.shape[0] != op.time_matrix.shape[1]:
        raise ArgumentError("time series length does not match the source grid")
    return op.time_matrix @ series


def midpoint_map(coarse: MeshLevel, fine: MeshLevel):
    """For each coarse element, the fine element containing its barycenter."""
    elem, _ = fine.locate(coarse.barycenters)
    if np.any(elem < 0):
        raise GeometryError("a coarse barycenter lies in no fine element")
    return elem


_MIDPOINT_CACHE: dict = {}


def midpoint_downsample(fine_field, coarse: MeshLevel, fine: MeshLevel):
    """Per-element values on ``coarse`` by the midpoint rule."""
    fine_field = np.asarray(fine_field)
    if fine_field.shape[0] != fine.n_elements:
        raise ArgumentError("field must have one value per fine element")
    if coarse is fine:
        return fine_field.copy()
    key = (id(coarse), id(fine))
    hit = _MIDPOINT_CACHE.get(key)
    if hit is None or hit[0] is not coarse or hit[1] is not fine:
        hit = (coarse, fine, midpoint_map(coarse, fine))
        _MIDPOINT_CACHE[key] = hit
    return fine_field[hit[2]]


def evaluate_p1(level: MeshLevel, nodal, x0):
    """P1 interpolant of ``nodal`` (shape ``(n,)`` or ``(n, k)``) at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (3,) or not level.domain.contains(x0):
        raise ArgumentError(f"point {x0} is outside the domain")
    elem, bary = level.locate(x0[None, :])
    if elem[0] < 0:
        raise ArgumentError(f"point {x0} is outside the mesh")
    nodal = np.asarray(nodal)
    vals = nodal[level.tets[elem[0]]]
    return np.tensordot(bary[0], vals, axes=(0, 0))


def probe_matrix(level: MeshLevel, points) -> sp.csr_matrix:
    """Rows of P1 weights evaluating nodal fields at ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    for x in points:
        if not level.domain.contains(x):
            raise ArgumentError(f"point {x} is outside the domain")
    elem, bary = level.locate(points)
    if np.any(elem < 0):
        raise ArgumentError("probe point outside the mesh")
    return _weights_matrix(np.arange(len(points)), elem, bary, level.tets, (len(points), level.n))


def write_vtk(path, level: MeshLevel, point_data=None, cell_data=None, title="monodomain_uq mesh"):
    """Legacy ASCII VTK unstructured grid (cell type 10 = tetra)."""
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {level.n} double"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in level.vertices]
    k = level.n_elements
    lines.append(f"CELLS {k} {5 * k}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in level.tets]
    lines.append(f"CELL_TYPES {k}")
    lines += ["10"] * k
    for section, count, data in (("POINT_DATA", level.n, point_data), ("CELL_DATA", k, cell_data)):
        if not data:
            continue
        lines.append(f"{section} {count}")
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 2 and values.shape[1] == 3:
                lines.append(f"VECTORS {name} double")
                lines += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in values]
            else:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines += [f"{v:.17g}" for v in values.ravel()]
    path.write_text("\n".join(lines) + "\n")
    return path
