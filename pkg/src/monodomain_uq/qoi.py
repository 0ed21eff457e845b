"""Quantities of interest and the error norms used to measure them.

Three functionals of a space-time solution are supported: the whole
transmembrane field, the action potential (time series) at a point and the
activation time at a point. Values carry the mesh level they live on so
estimators can move them to a common level before combining them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ArgumentError
from .fem import IonicParams, assemble_mass, assemble_stiffness
from .mesh import MeshHierarchy, MeshLevel, TransferOperator, evaluate_p1, spacetime_prolong, time_prolong

NOT_ACTIVATED = -1.0

FIELD, SERIES, SCALAR = "field", "series", "scalar"


@dataclass(frozen=True)
class TransmembraneField:
    """The potential itself on the whole space-time grid."""

    shape = FIELD

    @property
    def label(self):
        return "field"


@dataclass(frozen=True)
class ActionPotential:
    """Potential over time at the point ``x0``."""

    x0: tuple
    shape = SERIES

    @property
    def label(self):
        return "action_potential@" + ",".join(f"{c:g}" for c in self.x0)


@dataclass(frozen=True)
class ActivationTime:
    """First time the potential at ``x0`` reaches the ionic threshold."""

    x0: tuple
    shape = SCALAR

    @property
    def label(self):
        return "activation_time@" + ",".join(f"{c:g}" for c in self.x0)


QoIKind = TransmembraneField | ActionPotential | ActivationTime


def parse_kind(text: str) -> QoIKind:
    """``field``, ``action_potential@x,y,z`` or ``activation_time@x,y,z``."""
    name, _, rest = text.strip().partition("@")
    if name == "field" and not rest:
        return TransmembraneField()
    if name in ("action_potential", "activation_time") and rest:
        try:
            x0 = tuple(float(c) for c in rest.split(","))
        except ValueError as exc:
            raise ArgumentError(f"bad probe point in {text!r}") from exc
        if len(x0) != 3:
            raise ArgumentError(f"probe point in {text!r} needs three coordinates")
        return ActionPotential(x0) if name == "action_potential" else ActivationTime(x0)
    raise ArgumentError(f"unknown quantity of interest {text!r}")


@dataclass(eq=False)
class QoIValue:
    """A field (``n x m``), a series (``m``) or a scalar on one level."""

    kind: QoIKind
    data: np.ndarray
    level: MeshLevel

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        expected = {FIELD: (self.level.n, self.level.m), SERIES: (self.level.m,), SCALAR: ()}[self.kind.shape]
        if self.data.shape != expected:
            raise ArgumentError(f"{self.kind.label} on level {self.level.level} must have shape "
                                f"{expected}, got {self.data.shape}")

    def _other(self, other):
        if not isinstance(other, QoIValue):
            raise ArgumentError("can only combine two QoI values")
        if other.kind != self.kind:
            raise ArgumentError(f"mismatched QoI kinds {self.kind.label} and {other.kind.label}")
        if other.level is not self.level:
            raise ArgumentError("QoI values live on different levels; prolong first")
        return other.data

    def __add__(self, other):
        return QoIValue(self.kind, self.data + self._other(other), self.level)

    def __sub__(self, other):
        return QoIValue(self.kind, self.data - self._other(other), self.level)

    def __mul__(self, c):
        return QoIValue(self.kind, self.data * float(c), self.level)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return QoIValue(self.kind, self.data / float(c), self.level)

    def prolong(self, op: TransferOperator | None, target: MeshLevel) -> "QoIValue":
        """Move to ``target``; fields use space x time, series time only."""
        if target is self.level:
            return self
        if op is None or op.from_level != self.level.level or op.to_level != target.level:
            raise ArgumentError("transfer operator does not connect the two levels")
        if self.kind.shape == FIELD:
            data = spacetime_prolong(self.data, op)
        elif self.kind.shape == SERIES:
            data = time_prolong(self.data, op)
        else:
            data = self.data
        return QoIValue(self.kind, data, target)

    def to_level(self, hierarchy: MeshHierarchy, target: int) -> "QoIValue":
        if self.level.level == target:
            return self
        return self.prolong(hierarchy.transfer(self.level.level, target), hierarchy[target])

    @classmethod
    def zeros(cls, kind: QoIKind, level: MeshLevel):
        shape = {FIELD: (level.n, level.m), SERIES: (level.m,), SCALAR: ()}[kind.shape]
        return cls(kind, np.zeros(shape), level)


@dataclass
class ErrorReport:
    errors: list
    q: int
    repetitions: int

    def __post_init__(self):
        if any(e < 0 for e in self.errors):
            raise ArgumentError("errors must be non-negative")


def activation_times(series, times, threshold):
    """First threshold crossing per row of ``series`` (``p x m``).

    Linear interpolation between the bracketing time nodes; rows that never
    reach the threshold get :data:`NOT_ACTIVATED`.
    """
    series = np.ascontiguousarray(np.atleast_2d(series), dtype=float)
    times = np.asarray(times, dtype=float)
    idx = np.asarray(kernels.first_crossing(series, float(threshold)))
    out = np.full(len(series), NOT_ACTIVATED)
    hit = idx >= 0
    k = idx[hit]
    rows = np.nonzero(hit)[0]
    at_start = k == 0
    out[rows[at_start]] = times[0]
    r, k = rows[~at_start], k[~at_start]
    lo, hi = series[r, k - 1], series[r, k]
    frac = (threshold - lo) / (hi - lo)
    out[r] = times[k - 1] + frac * (times[k] - times[k - 1])
    return out


def extract(kind: QoIKind, u, level: MeshLevel, ionic: IonicParams = IonicParams()) -> QoIValue:
    u = np.asarray(u, dtype=float)
    if u.shape != (level.n, level.m):
        raise ArgumentError(f"solution must be {level.n} x {level.m}, got {u.shape}")
    if isinstance(kind, TransmembraneField):
        return QoIValue(kind, u, level)
    series = evaluate_p1(level, u, kind.x0)
    if isinstance(kind, ActionPotential):
        return QoIValue(kind, series, level)
    return QoIValue(kind, activation_times(series[None, :], level.times, ionic.u_th)[0], level)


def _trapezoid_weights(m, dt):
    w = np.full(m, float(dt))
    if m > 1:
        w[0] = w[-1] = 0.5 * dt
    return w


def norm_spacetime(v, mass, stiffness_unit=None, q=0, dt=None):
    """``L^2((0,T); H^q)`` norm of a nodal space-time array.

    Trapezoid rule in time; the spatial part is ``v^T (M + q K) v`` with the
    unit-coefficient stiffness ``K``. ``v`` may be a :class:`QoIValue`, in
    which case ``dt`` is taken from its level.
    """
    if isinstance(v, QoIValue):
        dt = v.level.dt if dt is None else dt
        v = v.data
    if dt is None:
        raise ArgumentError("dt is required for a plain array")
    if q not in (0, 1):
        raise ArgumentError("q must be 0 or 1")
    v = np.asarray(v, dtype=float)
    energy = np.einsum("ij,ij->j", v, mass @ v)
    if q == 1:
        if stiffness_unit is None:
            raise ArgumentError("the H1 norm needs the unit stiffness matrix")
        energy = energy + np.einsum("ij,ij->j", v, stiffness_unit @ v)
    return float(np.sqrt(max(np.dot(_trapezoid_weights(v.shape[1], dt), energy), 0.0)))


def norm_time_series(s, dt, q=0):
    """``H^q(0, T)`` norm of a nodal time series on a uniform grid."""
    if q not in (0, 1):
        raise ArgumentError("q must be 0 or 1")
    s = np.asarray(s, dtype=float)
    total = np.dot(_trapezoid_weights(len(s), dt), s * s)
    if q == 1:
        total += np.sum(np.diff(s) ** 2) / dt
    return float(np.sqrt(total))


class ErrorNorm:
    """Norm of the given QoI kind on one (fine) level, matrices cached."""

    def __init__(self, level: MeshLevel, q=0):
        if q not in (0, 1):
            raise ArgumentError("q must be 0 or 1")
        self.level = level
        self.q = q
        self._mass = None
        self._stiff = None

    def __call__(self, value: QoIValue):
        if value.level is not self.level:
            raise ArgumentError("value is not on the norm's level")
        shape = value.kind.shape
        if shape == SCALAR:
            return abs(float(value.data))
        if shape == SERIES:
            return norm_time_series(value.data, self.level.dt, self.q)
        if self._mass is None:
            self._mass = assemble_mass(self.level)
        if self.q == 1 and self._stiff is None:
            self._stiff = assemble_stiffness(self.level, None)
        return norm_spacetime(value.data, self._mass, self._stiff, self.q, self.level.dt)


def rmse(values, reference: QoIValue, transfer: TransferOperator | None = None, q=0,
         norm: ErrorNorm | None = None):
    """Root mean square error of repeated estimates against ``reference``.

    ``values`` all live on one level and are prolonged with ``transfer`` to
    the reference level first. For activation times, repetitions where both
    the estimate and the reference are :data:`NOT_ACTIVATED` are left out.
    """
    values = list(values)
    if not values:
        raise ArgumentError("need at least one repetition")
    norm = ErrorNorm(reference.level, q) if norm is None else norm
    if norm.q != q or norm.level is not reference.level:
        raise ArgumentError("norm does not match q or the reference level")
    squares = []
    for v in values:
        if v.kind != reference.kind:
            raise ArgumentError(f"mismatched QoI kinds {v.kind.label} and {reference.kind.label}")
        if v.level is not values[0].level:
            raise ArgumentError("all repetitions must live on one level")
        if v.kind.shape == SCALAR and float(v.data) == NOT_ACTIVATED == float(reference.data):
            continue
        fine = v.prolong(transfer, reference.level)
        squares.append(norm(fine - reference) ** 2)
    if not squares:
        return 0.0
    return float(np.sqrt(np.mean(squares)))


class QoISet:
    """Several QoI values from one solve, combined element by element."""

    def __init__(self, values):
        self.values = tuple(values)

    def _zip(self, other):
        if not isinstance(other, QoISet) or len(other.values) != len(self.values):
            raise ArgumentError("QoI sets do not match")
        return zip(self.values, other.values)

    def __add__(self, other):
        return QoISet(a + b for a, b in self._zip(other))

    def __sub__(self, other):
        return QoISet(a - b for a, b in self._zip(other))

    def __mul__(self, c):
        return QoISet(v * c for v in self.values)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return QoISet(v / c for v in self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def to_level(self, hierarchy: MeshHierarchy, target: int) -> "QoISet":
        return QoISet(v.to_level(hierarchy, target) for v in self.values)
