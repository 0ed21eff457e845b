"""P1 assembly and the Crank-Nicolson space-time operator.

A space-time block holds the ``p`` time nodes that follow a known initial
state ``u_init``; arrays are ``n x p`` with one column per time node. The
block operator is lower bidiagonal with ``A`` on the diagonal and ``B``
below it, and the initial coupling ``B u_init`` is moved into the first
block row of the residual.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import ArgumentError, AssemblyError, ConfigurationError, FactorizationError
from .mesh import MeshLevel, write_vtk

IMPLICIT = "implicit"
CRANK_NICOLSON = "crank_nicolson"
TRAPEZOID = "trapezoid"
EXACT = "exact"


@dataclass(frozen=True)
class IonicParams:
    """FitzHugh-Nagumo cubic ``alpha (u - u_rest)(u - u_th)(u - u_peak)``."""

    alpha: float = 1.4e-3
    u_rest: float = 0.0
    u_th: float = 28.0
    u_peak: float = 115.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigurationError("alpha must be non-negative")
        if not self.u_rest < self.u_th < self.u_peak:
            raise ConfigurationError("need u_rest < u_th < u_peak")


def ionic(u, p: IonicParams):
    u = np.asarray(u, dtype=float)
    return p.alpha * (u - p.u_rest) * (u - p.u_th) * (u - p.u_peak)


def ionic_deriv(u, p: IonicParams):
    u = np.asarray(u, dtype=float)
    a, b, c = p.u_rest, p.u_th, p.u_peak
    return p.alpha * ((u - b) * (u - c) + (u - a) * (u - c) + (u - a) * (u - b))


@dataclass(frozen=True)
class StimulusParams:
    """Gaussian stimulus switched on over ``[0, t1)``.

    ``time_rule`` picks how the indicator is integrated over a step:
    ``"trapezoid"`` uses ``dt/2 (chi(t_a) + chi(t_b))``; ``"exact"`` uses the
    length of ``[t_a, t_b] ∩ [0, t1)``, which stays second-order when ``t1``
    falls on a time node.
    """

    x0: tuple
    sigma: float
    t1: float
    time_rule: str = TRAPEZOID

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError("stimulus sigma must be positive")
        if not self.t1 > 0:
            raise ConfigurationError("stimulus t1 must be positive")
        if self.time_rule not in (TRAPEZOID, EXACT):
            raise ConfigurationError(f"unknown stimulus time rule {self.time_rule!r}")

    def profile(self, x, p: IonicParams):
        r2 = np.sum((np.asarray(x, dtype=float) - np.asarray(self.x0, dtype=float)) ** 2, axis=-1)
        return p.u_rest + p.u_peak * np.exp(-r2 / self.sigma**2)

    def time_weight(self, t_a, t_b):
        if self.time_rule == EXACT:
            return max(0.0, min(t_b, self.t1) - max(t_a, 0.0))
        chi = lambda t: 1.0 if 0.0 <= t < self.t1 else 0.0
        return 0.5 * (t_b - t_a) * (chi(t_a) + chi(t_b))


# -- sparse assembly ----------------------------------------------------------

class _Scatter:
    """Maps the ``k*16`` local entries of a level onto one CSR pattern."""

    def __init__(self, mesh: MeshLevel):
        n = mesh.n
        rows = np.repeat(mesh.tets, 4, axis=1).ravel()
        cols = np.tile(mesh.tets, (1, 4)).ravel()
        keys = rows.astype(np.int64) * n + cols
        uniq, pos = np.unique(keys, return_inverse=True)
        self.indices = (uniq % n).astype(np.int32)
        urows = uniq // n
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(urows, minlength=n))]).astype(np.int32)
        self.op = sp.csr_matrix((np.ones(len(keys)), (pos, np.arange(len(keys)))),
                                shape=(len(uniq), len(keys)))
        self.n = n

    def assemble(self, local):
        data = self.op @ np.ascontiguousarray(local).ravel()
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


_SCATTER = weakref.WeakKeyDictionary()
_UNIT = weakref.WeakKeyDictionary()


def _scatter(mesh):
    s = _SCATTER.get(mesh)
    if s is None:
        s = _SCATTER[mesh] = _Scatter(mesh)
    return s


def _unit_local(mesh):
    """Per-element Laplacian stiffness ``vol * grad grad^T``, (k, 4, 4)."""
    loc = _UNIT.get(mesh)
    if loc is None:
        g = mesh.gradients
        loc = _UNIT[mesh] = mesh.volumes[:, None, None] * np.einsum("eia,eja->eij", g, g)
    return loc


_REF_MASS = (np.ones((4, 4)) + np.eye(4)) / 20.0


def assemble_mass(mesh: MeshLevel) -> sp.csr_matrix:
    """Consistent P1 mass matrix."""
    local = mesh.volumes[:, None, None] * _REF_MASS
    return _scatter(mesh).assemble(local)


def assemble_stiffness(mesh: MeshLevel, tensors=None) -> sp.csr_matrix:
    """P1 stiffness with a piecewise-constant coefficient.

    ``tensors`` is a :class:`~monodomain_uq.randfield.ConductivitySample`, a
    ``(k, 3, 3)`` array, a ``(k,)`` array of isotropic scalars, or ``None``
    for the identity.
    """
    scalar = None
    if tensors is None:
        scalar = np.ones(mesh.n_elements)
    elif hasattr(tensors, "tensors"):
        scalar = tensors.scalar
        tensors = tensors.tensors
    elif np.ndim(tensors) == 1:
        scalar = np.asarray(tensors, dtype=float)

    if scalar is not None:
        if scalar.shape != (mesh.n_elements,):
            raise ArgumentError("need one coefficient per element")
        if np.any(scalar <= 0):
            raise AssemblyError("non-positive isotropic conductivity")
        local = scalar[:, None, None] * _unit_local(mesh)
    else:
        tensors = np.ascontiguousarray(tensors, dtype=float)
        if tensors.shape != (mesh.n_elements, 3, 3):
            raise ArgumentError("need one 3x3 tensor per element")
        if not np.allclose(tensors, tensors.transpose(0, 2, 1), rtol=1e-12, atol=0):
            raise AssemblyError("conductivity tensor is not symmetric")
        if np.linalg.eigvalsh(tensors).min() <= 0:
            raise AssemblyError("conductivity tensor is not positive definite")
        local = kernels.element_stiffness(mesh.gradients, np.ascontiguousarray(mesh.volumes), tensors)
    return _scatter(mesh).assemble(local)


def assemble_stimulus(mesh: MeshLevel, stim: StimulusParams, ionic_params: IonicParams,
                      t_a: float, t_b: float, mass=None):
    """Time-integrated load ``w(t_a, t_b) * M s`` with ``s`` the nodal Gaussian."""
    if not t_a < t_b:
        raise ArgumentError("need t_a < t_b")
    w = stim.time_weight(t_a, t_b)
    if w == 0.0:
        return np.zeros(mesh.n)
    mass = assemble_mass(mesh) if mass is None else mass
    return w * (mass @ stim.profile(mesh.vertices, ionic_params))


def stimulus_rhs(mesh: MeshLevel, stim: StimulusParams, ionic_params: IonicParams, mass=None):
    """Loads for all steps, ``n x (m-1)``; column ``k`` covers ``[t_k, t_{k+1}]``."""
    mass = assemble_mass(mesh) if mass is None else mass
    t = mesh.times
    w = np.array([stim.time_weight(a, b) for a, b in zip(t[:-1], t[1:])])
    return np.outer(mass @ stim.profile(mesh.vertices, ionic_params), w)


# -- space-time operator ------------------------------------------------------

class _PermutedLU:
    """LU of a symmetric positive definite matrix under a fixed ordering."""

    def __init__(self, A, perm):
        self.perm = np.asarray(perm)
        Ap = A.tocsr()[self.perm][:, self.perm].tocsc()
        # SPD: no pivoting needed, so the ordering is kept as given
        self._lu = spla.splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                             options=dict(SymmetricMode=True))
        self.nnz = self._lu.L.nnz + self._lu.U.nnz

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        x = np.empty_like(b)
        x[self.perm] = self._lu.solve(np.asfortranarray(b[self.perm]))
        return x


@dataclass(eq=False)
class AssembledLevel:
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    dt: float
    m: int
    reaction: str = IMPLICIT
    ordering: np.ndarray | None = None
    A: sp.csr_matrix = field(init=False)
    B: sp.csr_matrix = field(init=False)
    _lu: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.reaction not in (IMPLICIT, CRANK_NICOLSON):
            raise ConfigurationError(f"unknown reaction weighting {self.reaction!r}")
        half = 0.5 * self.dt * self.stiffness
        self.A = (self.mass + half).tocsr()
        self.B = (-self.mass + half).tocsr()

    @property
    def n(self):
        return self.mass.shape[0]

    @property
    def lu(self):
        """Sparse LU of ``A``, computed on first use."""
        if self._lu is None:
            try:
                if self.ordering is None:
                    self._lu = spla.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A",
                                         options=dict(SymmetricMode=True))
                else:
                    self._lu = _PermutedLU(self.A, self.ordering)
            except RuntimeError as exc:
                raise FactorizationError(f"LU of the diagonal block failed: {exc}") from exc
        return self._lu


def assemble_level(mesh: MeshLevel, tensors=None, mass=None, reaction=IMPLICIT) -> AssembledLevel:
    mass = assemble_mass(mesh) if mass is None else mass
    return AssembledLevel(mass=mass, stiffness=assemble_stiffness(mesh, tensors),
                          dt=mesh.dt, m=mesh.m, reaction=reaction, ordering=mesh.fill_ordering)


def _check(lvl, u):
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] != lvl.n:
        raise ArgumentError(f"space-time array must be {lvl.n} x p, got {u.shape}")
    return u


def spacetime_apply(lvl: AssembledLevel, u):
    """Matrix-free product with the block lower-bidiagonal operator."""
    u = _check(lvl, u)
    out = lvl.A @ u
    if u.shape[1] > 1:
        out[:, 1:] += lvl.B @ u[:, :-1]
    return out


def _previous(u, u_init):
    return np.column_stack([u_init, u[:, :-1]])


def residual(lvl: AssembledLevel, p: IonicParams, u, rhs, u_init):
    """``C u + r(u) - rhs`` with the initial coupling ``B u_init`` in row one."""
    u = _check(lvl, u)
    rhs = _check(lvl, rhs)
    if rhs.shape != u.shape:
        raise ArgumentError("rhs and state shapes differ")
    u_init = np.asarray(u_init, dtype=float)
    F = spacetime_apply(lvl, u) - rhs
    F[:, 0] += lvl.B @ u_init
    if lvl.reaction == IMPLICIT:
        F += lvl.dt * (lvl.mass @ ionic(u, p))
    else:
        I = ionic(u, p)
        F += 0.5 * lvl.dt * (lvl.mass @ (I + _previous(I, ionic(u_init, p))))
    return F


def jacobian_apply(lvl: AssembledLevel, p: IonicParams, u, v):
    """Directional derivative of :func:`residual` at ``u`` along ``v``."""
    u = _check(lvl, u)
    v = _check(lvl, v)
    if u.shape != v.shape:
        raise ArgumentError("state and direction shapes differ")
    out = spacetime_apply(lvl, v)
    dv = ionic_deriv(u, p) * v
    if lvl.reaction == IMPLICIT:
        out += lvl.dt * (lvl.mass @ dv)
    else:
        out += 0.5 * lvl.dt * (lvl.mass @ (dv + _previous(dv, np.zeros(lvl.n))))
    return out


# -- export -------------------------------------------------------------------

def write_matrix_coo(path, matrix):
    """``row col value`` lines, zero-based, preceded by a shape header."""
    coo = sp.coo_matrix(matrix)
    lines = [f"% {coo.shape[0]} {coo.shape[1]} {coo.nnz}"]
    lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(coo.row, coo.col, coo.data)]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_spacetime_vtk(directory, mesh: MeshLevel, u, name="u", prefix="state"):
    """One legacy VTK file per time node with ``u[:, k]`` as point data."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    u = np.asarray(u)
    paths = []
    for k in range(u.shape[1]):
        paths.append(write_vtk(directory / f"{prefix}_{k:04d}.vtk", mesh, point_data={name: u[:, k]},
                               title=f"{name} at t={mesh.times[k]:.6g}"))
    return paths
