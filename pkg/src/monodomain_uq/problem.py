"""One random monodomain problem on a mesh hierarchy.

Bundles the hierarchy, the KL expansion on its finest level and the model
parameters, and caches everything that does not depend on the sample:
mass matrices, stimulus loads and the unperturbed reference solutions.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigurationError
from .fem import IMPLICIT, IonicParams, StimulusParams, assemble_level, assemble_mass, stimulus_rhs
from .mesh import MeshHierarchy
from .randfield import CovarianceSpec, KLExpansion, build_kl, sample_conductivity
from .qoi import QoISet, extract
from .solver import GNIG, LNIG, DM, GmresConfig, NewtonConfig, solve_monodomain


class MonodomainProblem:
    def __init__(self, hierarchy: MeshHierarchy, cov: CovarianceSpec, ionic: IonicParams,
                 stimulus: StimulusParams, newton: NewtonConfig = NewtonConfig(),
                 gmres: GmresConfig = GmresConfig(), reaction: str = IMPLICIT,
                 kl: KLExpansion | None = None):
        self.hierarchy = hierarchy
        self.cov = cov
        self.ionic = ionic
        self.stimulus = stimulus
        self.newton = newton
        self.gmres = gmres
        self.reaction = reaction
        self._mass = {}
        self._rhs = {}
        self._reference = {}
        self._kl = kl
        if kl is not None:
            if kl.mesh is None:
                kl.mesh = hierarchy[hierarchy.L]
            elif kl.mesh is not hierarchy[hierarchy.L]:
                raise ConfigurationError("KL expansion must live on the finest level")
        self._bounds = None

    @property
    def kl(self) -> KLExpansion:
        if self._kl is None:
            fine = self.hierarchy[self.hierarchy.L]
            self._kl = build_kl(self.cov, fine, self.mass(self.hierarchy.L))
        return self._kl

    @property
    def M(self):
        return self.kl.M

    @property
    def bounds(self):
        if self._bounds is None:
            self._bounds = self.cov.bounds(self.kl.mean)
        return self._bounds

    def mass(self, l):
        if l not in self._mass:
            self._mass[l] = assemble_mass(self.hierarchy[l])
        return self._mass[l]

    def rhs(self, l):
        if l not in self._rhs:
            self._rhs[l] = stimulus_rhs(self.hierarchy[l], self.stimulus, self.ionic, self.mass(l))
        return self._rhs[l]

    def conductivity(self, omega, l):
        return sample_conductivity(self.kl, omega, self.hierarchy[l], self.cov, bounds=self.bounds)

    def assemble(self, omega, l):
        return assemble_level(self.hierarchy[l], self.conductivity(omega, l), mass=self.mass(l),
                              reaction=self.reaction)

    def reference_solution(self, l):
        """Solution at ``omega = 0`` on level ``l``, computed once."""
        if l not in self._reference:
            cfg = self.newton
            if cfg.strategy in (LNIG, GNIG):
                cfg = dataclasses.replace(cfg, strategy=DM, num_blocks=None)
            u, _ = solve_monodomain(self.assemble(np.zeros(self.M), l), self.ionic, self.rhs(l),
                                    cfg, self.gmres)
            u.setflags(write=False)
            self._reference[l] = u
        return self._reference[l]

    def solve(self, omega, l, newton: NewtonConfig | None = None):
        cfg = self.newton if newton is None else newton
        ref = self.reference_solution(l) if cfg.strategy in (LNIG, GNIG) else None
        return solve_monodomain(self.assemble(omega, l), self.ionic, self.rhs(l), cfg, self.gmres,
                                reference=ref)


class ProblemSampler:
    """``(omega, level) -> QoISet`` for the estimators: one solve, all QoIs."""

    def __init__(self, problem: MonodomainProblem, kinds):
        self.problem = problem
        self.kinds = tuple(kinds)
        if not self.kinds:
            raise ConfigurationError("need at least one quantity of interest")

    def __call__(self, omega, level):
        u, _ = self.problem.solve(omega, level)
        mesh = self.problem.hierarchy[level]
        return QoISet(extract(k, u, mesh, self.problem.ionic) for k in self.kinds)
