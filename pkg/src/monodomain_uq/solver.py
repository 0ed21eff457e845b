"""Newton-GMRES for the all-at-once space-time monodomain system.

Every Newton correction is a linear solve with the space-time Jacobian,
done matrix-free by restarted GMRES that is right-preconditioned with
block Jacobi (``A^{-1}`` on every time node, ``A`` factorized once per
sample). Long time intervals can be cut into sequential time blocks.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ArgumentError, ConfigurationError, NewtonDivergenceError, NonConvergenceError
from .fem import AssembledLevel, IonicParams, IMPLICIT, ionic, ionic_deriv, jacobian_apply, residual

DM, MTB, LNIG, GNIG = "DM", "MTB", "LNIG", "GNIG"
STRATEGIES = (DM, MTB, LNIG, GNIG)


@dataclass(frozen=True)
class NewtonConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_iters: int = 25
    strategy: str = DM
    num_blocks: int | None = None
    block_steps: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown Newton strategy {self.strategy!r}")
        if not (self.rel_tol > 0 and self.abs_tol > 0 and self.max_iters > 0):
            raise ConfigurationError("Newton tolerances and iteration cap must be positive")
        if self.num_blocks is not None and self.num_blocks < 1:
            raise ConfigurationError("num_blocks must be >= 1")
        if self.block_steps is not None and self.block_steps < 1:
            raise ConfigurationError("block_steps must be >= 1")
        if self.num_blocks is not None and self.block_steps is not None:
            raise ConfigurationError("give either num_blocks or block_steps, not both")

    def blocks(self, steps=None):
        """Number of time blocks; ``block_steps`` fixes the block length instead."""
        if self.strategy in (DM, GNIG):
            return 1
        if self.block_steps is not None:
            if steps is None:
                raise ArgumentError("block_steps needs the number of time steps")
            if steps % self.block_steps:
                raise ConfigurationError(
                    f"{steps} time steps cannot be cut into blocks of {self.block_steps}")
            return steps // self.block_steps
        return 6 if self.num_blocks is None else self.num_blocks


@dataclass(frozen=True)
class GmresConfig:
    rel_tol: float = 1e-10
    restart: int = 50
    max_iters: int = 500

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.restart > 0 and self.max_iters > 0):
            raise ConfigurationError("GMRES settings must be positive")


@dataclass
class SolveStats:
    newton_iters: list = field(default_factory=list)
    gmres_iters: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    histories: list = field(default_factory=list)
    wall_time: float = 0.0
    strategy: str = DM

    @property
    def newton_total(self):
        return int(sum(self.newton_iters))

    @property
    def gmres_total(self):
        return int(sum(self.gmres_iters))

    def csv_row(self, level, sample_index):
        return [level, sample_index, self.strategy, self.newton_total, self.gmres_total,
                f"{self.wall_time:.6f}"]


SOLVE_STATS_HEADER = ["level", "sample_index", "strategy", "newton_iters_total",
                      "gmres_iters_total", "wall_s"]


def block_jacobi_precond(lvl: AssembledLevel, r):
    """``A^{-1}`` applied to every time-node block (column) of ``r``."""
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != lvl.n:
        raise ArgumentError(f"expected an {lvl.n} x p array, got {r.shape}")
    return lvl.lu.solve(np.asfortranarray(r))


def gmres(apply, precond, b, cfg: GmresConfig = GmresConfig(), x0=None, history=None):
    """Right-preconditioned restarted GMRES.

    ``apply`` and ``precond`` act on arrays shaped like ``b``. Returns
    ``(x, iterations)`` with ``|b - apply(x)| <= rel_tol |b|`` checked on the
    true residual. The Givens residual estimates of every inner step are
    appended to ``history`` when a list is given.
    """
    b = np.asarray(b, dtype=float)
    shape = b.shape
    bvec = b.ravel()
    bnorm = np.linalg.norm(bvec)
    x = np.zeros_like(bvec) if x0 is None else np.array(x0, dtype=float).ravel()
    if bnorm == 0.0:
        return x.reshape(shape), 0
    A = lambda v: np.asarray(apply(v.reshape(shape)), dtype=float).ravel()
    P = lambda v: np.asarray(precond(v.reshape(shape)), dtype=float).ravel()
    tol = cfg.rel_tol * bnorm
    r = bvec - A(x) if x0 is not None else bvec.copy()
    beta = np.linalg.norm(r)
    total = 0
    m = cfg.restart
    while True:
        if beta <= tol:
            return x.reshape(shape), total
        if total >= cfg.max_iters:
            raise NonConvergenceError(
                f"GMRES stopped after {total} iterations with residual {beta:.3e} > {tol:.3e}",
                best=x.reshape(shape), residual=beta)
        V = np.empty((m + 1, bvec.size))
        Z = np.empty((m, bvec.size))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        for j in range(m):
            Z[j] = P(V[j])
            w = A(Z[j]).copy()  # the operator may hand back its input
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            hnext = np.linalg.norm(w)
            H[j + 1, j] = hnext
            for i in range(j):
                hij = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = hij
            rho = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = H[j, j] / rho, H[j + 1, j] / rho
            H[j, j] = rho
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            total += 1
            if history is not None:
                history.append(abs(g[j + 1]))
            if abs(g[j + 1]) <= tol or total >= cfg.max_iters or hnext <= 1e-14 * bnorm:
                break
            V[j + 1] = w / hnext
        y = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
        x = x + y @ Z[:k]
        r = bvec - A(x)
        beta = np.linalg.norm(r)


def _newton_scale(lvl, rhs, u_init):
    """Problem-size residual scale: norm of the residual at the zero state."""
    first = rhs[:, 0] - lvl.B @ u_init
    return np.sqrt(np.linalg.norm(first) ** 2 + np.linalg.norm(rhs[:, 1:]) ** 2)


def newton_block(lvl: AssembledLevel, p: IonicParams, rhs, u_init, u_guess,
                 newton_cfg: NewtonConfig = NewtonConfig(), gmres_cfg: GmresConfig = GmresConfig()):
    """Newton on one time block; returns ``(u, stats)`` for the block's nodes.

    Converged when ``|F(u)| <= rel_tol * max(|F(u_guess)|, |F_0|) + abs_tol``
    where ``F_0`` is the residual at the zero state, which keeps an exact
    initial guess from demanding a residual below round-off.
    """
    u = np.array(u_guess, dtype=float)
    if u.shape != rhs.shape:
        raise ArgumentError(f"guess shape {u.shape} does not match rhs {rhs.shape}")
    stats = SolveStats()
    precond = lambda r: block_jacobi_precond(lvl, r)
    F = residual(lvl, p, u, rhs, u_init)
    fnorm = np.linalg.norm(F)
    target = newton_cfg.rel_tol * max(fnorm, _newton_scale(lvl, rhs, u_init)) + newton_cfg.abs_tol
    history = [fnorm]
    it = 0
    while fnorm > target:
        if it >= newton_cfg.max_iters:
            raise NewtonDivergenceError(
                f"Newton did not converge in {it} iterations (|F| = {fnorm:.3e})", history)
        dI = ionic_deriv(u, p)
        jac = lambda v: jacobian_apply(lvl, p, u, v) if lvl.reaction != IMPLICIT else _jac_implicit(lvl, dI, v)
        # no point solving the linear system far below what Newton still needs
        eta = max(gmres_cfg.rel_tol, min(1e-2, 0.1 * target / fnorm))
        delta, k = gmres(jac, precond, -F, dataclasses.replace(gmres_cfg, rel_tol=eta))
        stats.gmres_iters.append(k)
        u += delta
        F = residual(lvl, p, u, rhs, u_init)
        fnorm = np.linalg.norm(F)
        history.append(fnorm)
        it += 1
        if not np.isfinite(fnorm):
            raise NewtonDivergenceError("Newton produced a non-finite residual", history)
    stats.newton_iters.append(it)
    stats.residual_norms.append(fnorm)
    stats.histories.append(history)
    return u, stats


def _jac_implicit(lvl, dI, v):
    out = lvl.A @ v
    if v.shape[1] > 1:
        out[:, 1:] += lvl.B @ v[:, :-1]
    out += lvl.dt * (lvl.mass @ (dI * v))
    return out


def solve_monodomain(lvl: AssembledLevel, p: IonicParams, rhs, cfg: NewtonConfig = NewtonConfig(),
                     gmres_cfg: GmresConfig = GmresConfig(), u_init=None, reference=None):
    """Solve all time steps of one sample.

    ``rhs`` holds the step loads, ``n x (m-1)``. Returns the full ``n x m``
    state including the initial column, and the merged :class:`SolveStats`.
    ``reference`` (``n x m``) is the unperturbed solution used as the initial
    guess by LNIG and GNIG.
    """
    t0 = time.perf_counter()
    rhs = np.asarray(rhs, dtype=float)
    n, steps = rhs.shape
    if n != lvl.n or steps != lvl.m - 1:
        raise ArgumentError(f"rhs must be {lvl.n} x {lvl.m - 1}, got {rhs.shape}")
    u_init = np.zeros(n) if u_init is None else np.asarray(u_init, dtype=float)
    K = cfg.blocks(steps)
    if steps % K:
        raise ConfigurationError(f"{steps} time steps cannot be split into {K} blocks")
    if cfg.strategy in (LNIG, GNIG):
        if reference is None:
            raise ConfigurationError(f"strategy {cfg.strategy} needs a reference solution")
        reference = np.asarray(reference, dtype=float)
        if reference.shape != (n, lvl.m):
            raise ArgumentError("reference solution has the wrong shape")
    width = steps // K
    u = np.empty((n, lvl.m))
    u[:, 0] = u_init
    stats = SolveStats(strategy=cfg.strategy)
    for b in range(K):
        lo, hi = 1 + b * width, 1 + (b + 1) * width
        start = u[:, lo - 1]
        if cfg.strategy in (DM, MTB):
            guess = np.repeat(start[:, None], width, axis=1)
        else:
            guess = reference[:, lo:hi].copy()
        ub, bs = newton_block(lvl, p, rhs[:, lo - 1:hi - 1], start, guess, cfg, gmres_cfg)
        u[:, lo:hi] = ub
        stats.newton_iters += bs.newton_iters
        stats.gmres_iters += bs.gmres_iters
        stats.residual_norms += bs.residual_norms
        stats.histories += bs.histories
    stats.wall_time = time.perf_counter() - t0
    return u, stats


def solve_sequential(lvl: AssembledLevel, p: IonicParams, rhs, u_init=None, tol=1e-13, max_iters=50):
    """Classical time stepping with a sparse direct Newton solve per step.

    Independent of the space-time machinery; used as the oracle for it.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = lvl.n
    u = np.zeros((n, rhs.shape[1] + 1))
    if u_init is not None:
        u[:, 0] = u_init
    w = lvl.dt if lvl.reaction == IMPLICIT else 0.5 * lvl.dt
    for k in range(rhs.shape[1]):
        prev = u[:, k]
        const = lvl.B @ prev - rhs[:, k]
        if lvl.reaction != IMPLICIT:
            const = const + w * (lvl.mass @ ionic(prev, p))
        x = prev.copy()
        scale = max(np.linalg.norm(const), 1e-300)
        for _ in range(max_iters):
            F = lvl.A @ x + w * (lvl.mass @ ionic(x, p)) + const
            if np.linalg.norm(F) <= tol * scale:
                break
            J = lvl.A + w * lvl.mass.multiply(ionic_deriv(x, p)[None, :])
            x = x - spla.spsolve(J.tocsc(), F)
        else:
            raise NewtonDivergenceError(f"sequential Newton failed at step {k}")
        u[:, k + 1] = x
    return u
