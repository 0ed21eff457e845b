"""Discrete Karhunen-Loève expansion of random conductivity fields.

The covariance matrix of the nodal field is never formed. Its low-rank
factor comes from a pivoted Cholesky decomposition that requests single
columns from a kernel accessor. The eigenproblem with the block-diagonal
mass matrix is then reduced to a small dense one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (ArgumentError, ConfigurationError, DegenerateFiberError,
                     EllipticityError, NumericalError)
from .mesh import MeshLevel, midpoint_downsample

ISOTROPIC = "isotropic"
ANISOTROPIC = "anisotropic"


@dataclass(frozen=True)
class CovarianceSpec:
    """Squared-exponential covariance ``theta^2 exp(-|x - x'|^2 / sigma_kl)``.

    ``amplitude`` scales the unit-diagonal kernel to field units before the
    expansion is built. ``None`` picks the largest amplitude for which every
    ``omega`` in ``[-1, 1]^M`` keeps the field inside the ellipticity band as
    long as ``theta <= 1``, so ``theta`` is the knob that guarantees
    ellipticity. ``mean`` is a scalar
    (isotropic) or a 3-vector (anisotropic), or a callable of the vertex
    array returning nodal values.
    """

    theta: float
    sigma_kl: float
    mode: str = ISOTROPIC
    mean: object = 3.325e-3
    g: float | None = None
    eps: float = 1e-2
    amplitude: float | None = None
    b_min: float | None = None
    b_max: float | None = None

    def __post_init__(self):
        if self.mode not in (ISOTROPIC, ANISOTROPIC):
            raise ConfigurationError(f"unknown covariance mode {self.mode!r}")
        if not self.theta > 0:
            raise ConfigurationError("theta must be positive")
        if not self.sigma_kl > 0:
            raise ConfigurationError("sigma_kl must be positive")
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")
        if self.mode == ANISOTROPIC and not (self.g is not None and self.g > 0):
            raise ConfigurationError("anisotropic mode needs g > 0")
        if self.amplitude is not None and not self.amplitude > 0:
            raise ConfigurationError("amplitude must be positive")

    @property
    def d(self):
        return 1 if self.mode == ISOTROPIC else 3

    def mean_field(self, vertices):
        if callable(self.mean):
            values = np.asarray(self.mean(vertices), dtype=float)
        else:
            mean = np.asarray(self.mean, dtype=float)
            if mean.ndim == 0 or mean.shape == (self.d,):
                values = np.broadcast_to(mean, (len(vertices),) if self.d == 1 else (len(vertices), 3)).copy()
            else:
                values = mean
        expected = (len(vertices),) if self.d == 1 else (len(vertices), 3)
        if values.shape != expected:
            raise ConfigurationError(f"mean field has shape {values.shape}, expected {expected}")
        return values

    def bounds(self, mean_values):
        """Admissible eigenvalue band ``(b_min, b_max)`` for sampled tensors."""
        mag = np.abs(mean_values) if self.d == 1 else np.linalg.norm(mean_values, axis=1)
        lo, hi = float(mag.min()), float(mag.max())
        if self.g is not None and self.mode == ANISOTROPIC:
            lo, hi = min(lo, self.g), max(hi, self.g)
        b_min = self.b_min if self.b_min is not None else 0.1 * lo
        b_max = self.b_max if self.b_max is not None else 10.0 * hi
        return b_min, b_max


def cov_entry(spec: CovarianceSpec, xi, xj, ci=0, cj=0):
    if spec.mode == ANISOTROPIC and ci != cj:
        return 0.0
    r2 = float(np.sum((np.asarray(xi, float) - np.asarray(xj, float)) ** 2))
    return spec.theta**2 * np.exp(-r2 / spec.sigma_kl)


class DenseAccessor:
    """Column access to an explicit symmetric matrix."""

    def __init__(self, C):
        self.C = np.asarray(C, dtype=float)
        self.size = self.C.shape[0]

    def diagonal(self):
        return np.diag(self.C).copy()

    def column(self, j):
        return self.C[:, j]


class KernelAccessor:
    """Columns of the ``d*n`` nodal covariance matrix, computed on demand.

    Index ``c*n + i`` is component ``c`` at vertex ``i``, matching the
    block-diagonal mass matrix ordering. Components are uncorrelated.
    """

    def __init__(self, points, sigma_kl, d=1, variance=1.0):
        self.points = np.asarray(points, dtype=float)
        self.n = len(self.points)
        self.d = d
        self.sigma_kl = sigma_kl
        self.variance = variance
        self.size = d * self.n

    def diagonal(self):
        return np.full(self.size, self.variance)

    def column(self, j):
        c, i = divmod(int(j), self.n)
        r2 = np.sum((self.points - self.points[i]) ** 2, axis=1)
        col = np.zeros(self.size)
        col[c * self.n:(c + 1) * self.n] = self.variance * np.exp(-r2 / self.sigma_kl)
        return col


@dataclass
class LowRankFactor:
    columns: np.ndarray  # (size, M)
    pivots: np.ndarray
    trace_residual: float
    initial_trace: float

    @property
    def rank(self):
        return self.columns.shape[1]


def pivoted_cholesky(cov, size: int, eps: float, max_rank: int | None = None) -> LowRankFactor:
    """Greedy low-rank factor ``C ≈ L L^T`` with a relative trace stopping rule.

    Stops once the trace of the residual ``C - L L^T`` drops to
    ``eps * trace(C)``.
    """
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    max_rank = size if max_rank is None else min(size, max_rank)
    d = np.array(cov.diagonal(), dtype=float)
    if d.shape != (size,):
        raise ArgumentError("accessor diagonal has the wrong size")
    trace0 = float(d.sum())
    floor = -1e-12 * max(1.0, float(np.abs(d).max()))
    if d.min() < floor:
        raise NumericalError("covariance has a negative diagonal entry")
    L = np.zeros((size, min(max_rank, 16)))
    pivots = []
    k = 0
    while k < max_rank and d.sum() > eps * trace0:
        j = int(np.argmax(d))
        pivot = d[j]
        if pivot <= 0:
            break
        if k == L.shape[1]:
            L = np.hstack([L, np.zeros((size, min(L.shape[1], max_rank - k)))])
        col = np.array(cov.column(j), dtype=float) - L[:, :k] @ L[j, :k]
        col /= np.sqrt(pivot)
        L[:, k] = col
        d -= col**2
        d[j] = 0.0
        if d.min() < floor:
            raise NumericalError(f"negative residual diagonal {d.min():.3e}: covariance is not SPD")
        np.maximum(d, 0.0, out=d)
        pivots.append(j)
        k += 1
    return LowRankFactor(columns=L[:, :k].copy(), pivots=np.array(pivots, dtype=np.int64),
                         trace_residual=float(d.sum()), initial_trace=trace0)


def _blockdiag_apply(mass, X, d):
    n = mass.shape[0]
    X = np.asarray(X)
    return np.vstack([mass @ X[c * n:(c + 1) * n] for c in range(d)])


def reduced_eig(factor: LowRankFactor | np.ndarray, mass, d: int = 1):
    """Eigenpairs of ``L^T (blockdiag M) L``, lifted back by ``v = L v~``.

    Returns ``(lambdas, V)`` sorted descending; columns of ``V`` satisfy
    ``v_i^T (blockdiag M) v_j = lambda_i delta_ij``. Eigenvalues at or
    below ``1e-14 * lambda_max`` are dropped.
    """
    L = factor.columns if isinstance(factor, LowRankFactor) else np.asarray(factor, dtype=float)
    if L.shape[1] == 0:
        return np.zeros(0), np.zeros((L.shape[0], 0))
    S = L.T @ _blockdiag_apply(mass, L, d)
    S = 0.5 * (S + S.T)
    lam, vt = np.linalg.eigh(S)
    order = np.argsort(lam)[::-1]
    lam, vt = lam[order], vt[:, order]
    keep = lam > 1e-14 * lam[0]
    lam, vt = lam[keep], vt[:, keep]
    return lam, L @ vt


@dataclass
class KLExpansion:
    """``field(ω) = mean + θ Σ_k σ_k ω_k c_k`` on the vertices of ``mesh``.

    ``coeffs[k]`` is the mass-orthonormal mode ``v_k / sqrt(λ_k)`` flattened
    component-major; ``sigmas = sqrt(3 λ_k)`` for uniform ``ω_k ∈ [-1, 1]``.
    """

    mean: np.ndarray
    lambdas: np.ndarray
    coeffs: np.ndarray
    theta: float
    d: int
    mesh: MeshLevel | None = None

    @property
    def M(self):
        return len(self.lambdas)

    @property
    def n(self):
        return self.mean.shape[0]

    @property
    def sigmas(self):
        return np.sqrt(3.0 * self.lambdas)

    def mode_field(self, k):
        """``θ σ_k c_k`` reshaped like the mean."""
        c = self.theta * self.sigmas[k] * self.coeffs[k]
        return c if self.d == 1 else c.reshape(self.d, self.n).T


def safe_amplitude(spec: CovarianceSpec, mean, sigmas, coeffs):
    """Largest kernel amplitude keeping the field elliptic for ``theta <= 1``.

    ``sigmas`` and ``coeffs`` belong to the unit-variance expansion. The
    worst case over the parameter box is ``sum_k sigma_k |c_k(x)|`` per node,
    and element values are averages of nodal ones, so the bound carries over
    to every mesh level.
    """
    n = len(mean)
    terms = np.abs(sigmas[:, None] * coeffs).reshape(len(sigmas), spec.d, n)
    if spec.d == 1:
        worst = terms[:, 0].sum(axis=0)
        mag = np.abs(mean)
    else:
        # triangle inequality on the fiber vector norm
        worst = np.sqrt((terms.sum(axis=0) ** 2).sum(axis=0))
        mag = np.linalg.norm(mean, axis=1)
    b_min, b_max = spec.bounds(mean)
    room = np.minimum(mag - b_min, b_max - mag)
    if np.any(room <= 0):
        raise EllipticityError("mean field lies outside the ellipticity band")
    return float(np.min(room / np.maximum(worst, 1e-300)))


def build_kl(spec: CovarianceSpec, mesh: MeshLevel, mass) -> KLExpansion:
    """KL expansion on ``mesh`` (the finest level of the hierarchy)."""
    mean = spec.mean_field(mesh.vertices)
    # theta multiplies the expansion once, so the factorized kernel excludes it;
    # the kernel is factorized at unit variance and the amplitude applied after
    acc = KernelAccessor(mesh.vertices, spec.sigma_kl, d=spec.d, variance=1.0)
    factor = pivoted_cholesky(acc, acc.size, spec.eps)
    lam, V = reduced_eig(factor, mass, spec.d)
    coeffs = (V / np.sqrt(lam)).T.copy()
    if spec.amplitude is not None:
        amp = spec.amplitude
    else:
        amp = safe_amplitude(spec, mean, np.sqrt(3.0 * lam), coeffs)
    lam = lam * amp**2
    return KLExpansion(mean=mean, lambdas=lam, coeffs=coeffs, theta=spec.theta, d=spec.d, mesh=mesh)


def evaluate_kl(kl: KLExpansion, omega):
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (kl.M,):
        raise ArgumentError(f"omega must have length {kl.M}, got shape {omega.shape}")
    flat = (kl.theta * kl.sigmas * omega) @ kl.coeffs
    if kl.d == 1:
        return kl.mean + flat
    return kl.mean + flat.reshape(kl.d, kl.n).T


def conductivity_tensor(v, g):
    """``g I + (|v| - g) v v^T / v^T v``."""
    return conductivity_tensors(np.asarray(v, dtype=float)[None, :], g)[0]


def conductivity_tensors(V, g):
    V = np.asarray(V, dtype=float)
    nv2 = np.einsum("ei,ei->e", V, V)
    if np.any(nv2 <= 1e-28):
        raise DegenerateFiberError("fiber vector with norm <= 1e-14")
    nv = np.sqrt(nv2)
    G = ((nv - g) / nv2)[:, None, None] * np.einsum("ei,ej->eij", V, V)
    G[:, [0, 1, 2], [0, 1, 2]] += g
    return G


@dataclass
class ConductivitySample:
    """Per-element conductivity on one level.

    ``scalar`` is set in isotropic mode (``G = s I``) and lets the stiffness
    assembly skip the tensor contraction.
    """

    tensors: np.ndarray
    level: int
    scalar: np.ndarray | None = None
    eigen_range: tuple = (np.nan, np.nan)


def element_values(kl: KLExpansion, nodal):
    """Field at element barycenters of the KL mesh (mean of vertex values)."""
    return nodal[kl.mesh.tets].mean(axis=1)


def sample_conductivity(kl: KLExpansion, omega, target: MeshLevel, spec: CovarianceSpec,
                        bounds=None) -> ConductivitySample:
    """Conductivity tensors on ``target`` for parameter ``omega``.

    The field is evaluated on the KL (finest) mesh, averaged to barycenters
    and transferred element-wise by the midpoint rule. Raises
    :class:`EllipticityError` when an eigenvalue leaves the admissible band.
    """
    if kl.mesh is None:
        raise ConfigurationError("KL expansion has no mesh attached")
    b_min, b_max = bounds if bounds is not None else spec.bounds(kl.mean)
    per_elem = midpoint_downsample(element_values(kl, evaluate_kl(kl, omega)), target, kl.mesh)
    if spec.mode == ISOTROPIC:
        lo, hi = float(per_elem.min()), float(per_elem.max())
        tensors = per_elem[:, None, None] * np.eye(3)
        scalar = per_elem
    else:
        norms = np.linalg.norm(per_elem, axis=1)
        lo = float(min(norms.min(), spec.g))
        hi = float(max(norms.max(), spec.g))
        tensors = conductivity_tensors(per_elem, spec.g)
        scalar = None
    if lo < b_min or hi > b_max:
        raise EllipticityError(
            f"conductivity eigenvalues span [{lo:.4g}, {hi:.4g}] outside [{b_min:.4g}, {b_max:.4g}]")
    return ConductivitySample(tensors=tensors, level=target.level, scalar=scalar, eigen_range=(lo, hi))


_MAGIC = b"KLX1"


def save_kl(path, kl: KLExpansion):
    """Write the KLX1 container.

    Layout (little-endian): magic ``KLX1``; uint32 ``M``, ``d``, ``n``;
    float64 ``theta``; float64 ``mean[n*d]`` (component-major);
    float64 ``lambdas[M]``; float64 ``coeffs[M*d*n]`` (mode-major).
    """
    mean = kl.mean if kl.d == 1 else kl.mean.T
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIId", kl.M, kl.d, kl.n, kl.theta))
        fh.write(np.ascontiguousarray(mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(kl.lambdas, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(kl.coeffs, dtype="<f8").tobytes())
    return Path(path)


def load_kl(path, mesh: MeshLevel | None = None) -> KLExpansion:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigurationError(f"{path} is not a KLX1 file")
    M, d, n, theta = struct.unpack_from("<IIId", raw, 4)
    offset = 4 + struct.calcsize("<IIId")
    data = np.frombuffer(raw, dtype="<f8", offset=offset)
    if data.size != n * d + M + M * d * n:
        raise ConfigurationError(f"{path}: truncated or corrupt KLX1 payload")
    mean = data[:n * d].copy()
    lam = data[n * d:n * d + M].copy()
    coeffs = data[n * d + M:].reshape(M, d * n).copy()
    if d > 1:
        mean = mean.reshape(d, n).T.copy()
    if mesh is not None and mesh.n != n:
        raise ConfigurationError(f"KLX1 file has n={n}, mesh has {mesh.n} vertices")
    return KLExpansion(mean=mean, lambdas=lam, coeffs=coeffs, theta=theta, d=d, mesh=mesh)


def blockdiag_mass(mass, d):
    return sp.block_diag([mass] * d, format="csr")
