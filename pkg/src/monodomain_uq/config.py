"""Experiment configuration: sectioned ``key = value`` files.

Every key has a default, so a file only needs what differs from the cube
setup. Unknown sections and keys are rejected, and every validation error
names the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError, MonodomainUQError
from .fem import CRANK_NICOLSON, EXACT, IMPLICIT, TRAPEZOID, IonicParams, StimulusParams
from .mesh import BoxDomain, MeshHierarchy, build_nested_hierarchy, build_nonnested_hierarchy
from .qoi import parse_kind
from .quadrature import METHODS
from .randfield import ANISOTROPIC, ISOTROPIC, CovarianceSpec
from .solver import STRATEGIES, GmresConfig, NewtonConfig


def _floats(text, count=None):
    vals = tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    if count is not None and len(vals) != count:
        raise ValueError(f"expected {count} comma-separated numbers")
    return vals


def _optional(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    return parse


def _list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _qoi_list(text):
    # probe coordinates use commas, so quantities are split on blanks or ';'
    return tuple(v for v in text.replace(";", " ").split() if v)


def _scalar_or_vector(text):
    vals = _floats(text)
    if len(vals) == 1:
        return vals[0]
    if len(vals) == 3:
        return vals
    raise ValueError("expected one or three numbers")


# section -> key -> (parser, default)
SCHEMA = {
    "geometry": {
        "lo": (lambda t: _floats(t, 3), (-0.5, -0.5, -0.5)),
        "hi": (lambda t: _floats(t, 3), (0.5, 0.5, 0.5)),
    },
    "hierarchy": {
        "type": (str, "nested"),
        "levels": (int, 4),
        "h0": (float, 0.5),
        "dt0": (float, 0.16),
        "T": (float, 0.32),
        "h": (_optional(_floats), None),
    },
    "kl": {
        "theta": (float, 0.3),
        "sigma_kl": (float, 0.25),
        "eps": (float, 1e-2),
        "mode": (str, ISOTROPIC),
        "mean": (_scalar_or_vector, 3.325e-3),
        "g": (_optional(float), None),
        "amplitude": (_optional(float), None),
        "b_min": (_optional(float), None),
        "b_max": (_optional(float), None),
    },
    "ionic": {
        "alpha": (float, 1.4e-3),
        "u_rest": (float, 0.0),
        "u_th": (float, 28.0),
        "u_peak": (float, 115.0),
    },
    "stimulus": {
        "x0": (_optional(lambda t: _floats(t, 3)), None),
        "sigma": (float, 0.2),
        "t1": (_optional(float), None),
        "time_rule": (str, EXACT),
    },
    "solver": {
        "strategy": (str, "LNIG"),
        "num_blocks": (_optional(int), None),
        "block_steps": (_optional(int), 2),
        "newton_rel_tol": (float, 1e-8),
        "newton_abs_tol": (float, 1e-12),
        "newton_max_iters": (int, 25),
        "gmres_rel_tol": (float, 1e-10),
        "gmres_restart": (int, 50),
        "gmres_max_iters": (int, 500),
        "reaction": (str, IMPLICIT),
    },
    "qoi": {
        "quantities": (_qoi_list, ("field",)),
    },
    "quadrature": {
        "methods": (_list, METHODS),
        "q": (int, 0),
        "repetitions": (int, 5),
        "n_ref": (int, 1024),
        "seed": (int, 0),
        "halton_offset": (int, 0),
        "ml_form": (str, "auto"),
        "gamma": (float, 1.0),
    },
    "run": {
        "workers": (int, 1),
        "out": (str, "results"),
    },
}


@dataclass
class ExperimentConfig:
    """Validated settings; ``values`` mirrors :data:`SCHEMA` section by section."""

    values: dict
    source: str = "<defaults>"
    _hierarchy: object = field(default=None, repr=False, compare=False)

    def __getitem__(self, section):
        return self.values[section]

    # -- derived objects -------------------------------------------------
    @property
    def domain(self):
        g = self.values["geometry"]
        return BoxDomain(g["lo"], g["hi"])

    @property
    def levels(self):
        h = self.values["hierarchy"]
        return h["levels"] if h["type"] == "nested" else len(h["h"])

    @property
    def finest(self):
        return self.levels - 1

    def hierarchy(self) -> MeshHierarchy:
        if self._hierarchy is None:
            h = self.values["hierarchy"]
            if h["type"] == "nested":
                self._hierarchy = build_nested_hierarchy(self.domain, h["levels"], h["h0"], h["dt0"], h["T"])
            else:
                dts = [h["dt0"] * 2.0**-l for l in range(len(h["h"]))]
                self._hierarchy = build_nonnested_hierarchy(self.domain, list(zip(h["h"], dts)), h["T"])
        return self._hierarchy

    def covariance(self) -> CovarianceSpec:
        k = self.values["kl"]
        return CovarianceSpec(theta=k["theta"], sigma_kl=k["sigma_kl"], mode=k["mode"], mean=k["mean"],
                              g=k["g"], eps=k["eps"], amplitude=k["amplitude"], b_min=k["b_min"],
                              b_max=k["b_max"])

    def ionic(self) -> IonicParams:
        i = self.values["ionic"]
        return IonicParams(alpha=i["alpha"], u_rest=i["u_rest"], u_th=i["u_th"], u_peak=i["u_peak"])

    def stimulus(self) -> StimulusParams:
        s = self.values["stimulus"]
        x0 = s["x0"] if s["x0"] is not None else tuple(float(c) for c in self.domain.center)
        t1 = s["t1"] if s["t1"] is not None else self.values["hierarchy"]["dt0"]
        return StimulusParams(x0=x0, sigma=s["sigma"], t1=t1, time_rule=s["time_rule"])

    def newton(self) -> NewtonConfig:
        s = self.values["solver"]
        return NewtonConfig(rel_tol=s["newton_rel_tol"], abs_tol=s["newton_abs_tol"],
                            max_iters=s["newton_max_iters"], strategy=s["strategy"],
                            num_blocks=s["num_blocks"], block_steps=s["block_steps"])

    def gmres(self) -> GmresConfig:
        s = self.values["solver"]
        return GmresConfig(rel_tol=s["gmres_rel_tol"], restart=s["gmres_restart"], max_iters=s["gmres_max_iters"])

    def quantities(self):
        return [parse_kind(t) for t in self.values["qoi"]["quantities"]]

    def problem(self, kl=None):
        from .problem import MonodomainProblem
        return MonodomainProblem(self.hierarchy(), self.covariance(), self.ionic(), self.stimulus(),
                                 self.newton(), self.gmres(), self.values["solver"]["reaction"], kl=kl)

    # -- identity ----------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, default=list)

    def digest(self, *extra) -> str:
        h = hashlib.sha256(self.canonical().encode())
        for e in extra:
            h.update(json.dumps(e, sort_keys=True, default=str).encode())
        return h.hexdigest()

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for key, val in keys.items():
                if val is None:
                    text = "none"
                elif isinstance(val, (tuple, list)):
                    text = ("; " if section == "qoi" else ", ").join(str(v) for v in val)
                else:
                    text = str(val)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **sections):
        """Copy with ``section={key: value}`` replacements, revalidated."""
        values = json.loads(json.dumps(self.values, default=list))
        for section, keys in sections.items():
            for key, val in keys.items():
                if section not in values or key not in values[section]:
                    raise ConfigurationError(f"unknown key {section}.{key}")
                values[section][key] = val
        return _validate(values, self.source)


def default_config() -> ExperimentConfig:
    return _validate({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}, "<defaults>")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (T)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"{source}: unknown key {section}.{key}")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigurationError(f"{source}: invalid value for {section}.{key}: {raw!r} ({exc})") from exc
    return _validate(values, source)


def _check(cond, key, msg, source):
    if not cond:
        raise ConfigurationError(f"{source}: {key}: {msg}")


def _validate(values, source) -> ExperimentConfig:
    h, k, s, quad, run = (values[x] for x in ("hierarchy", "kl", "solver", "quadrature", "run"))
    _check(h["type"] in ("nested", "nonnested"), "hierarchy.type", "must be nested or nonnested", source)
    if h["type"] == "nested":
        _check(h["levels"] >= 1, "hierarchy.levels", "must be >= 1", source)
    else:
        _check(h["h"] is not None and len(h["h"]) >= 1, "hierarchy.h", "nonnested needs a list of h", source)
        hs = h["h"]
        _check(all(a > b for a, b in zip(hs, hs[1:])), "hierarchy.h", "must be strictly decreasing", source)
    for key in ("h0", "dt0", "T"):
        _check(h[key] > 0, f"hierarchy.{key}", "must be positive", source)
    _check(k["theta"] > 0, "kl.theta", "must be positive", source)
    _check(k["sigma_kl"] > 0, "kl.sigma_kl", "must be positive", source)
    _check(k["eps"] > 0, "kl.eps", "must be positive", source)
    _check(k["mode"] in (ISOTROPIC, ANISOTROPIC), "kl.mode", "must be isotropic or anisotropic", source)
    _check(values["stimulus"]["time_rule"] in (TRAPEZOID, EXACT), "stimulus.time_rule",
           "must be trapezoid or exact", source)
    _check(s["strategy"] in STRATEGIES, "solver.strategy", f"must be one of {STRATEGIES}", source)
    if s["num_blocks"] is not None:
        s["block_steps"] = None
    _check(s["reaction"] in (IMPLICIT, CRANK_NICOLSON), "solver.reaction",
           "must be implicit or crank_nicolson", source)
    _check(all(m in METHODS for m in quad["methods"]) and quad["methods"], "quadrature.methods",
           f"must be a subset of {METHODS}", source)
    _check(quad["q"] in (0, 1), "quadrature.q", "must be 0 or 1", source)
    _check(quad["repetitions"] >= 1, "quadrature.repetitions", "must be >= 1", source)
    _check(quad["n_ref"] >= 1, "quadrature.n_ref", "must be >= 1", source)
    _check(0 <= quad["seed"] < 2**64, "quadrature.seed", "must be an unsigned 64-bit integer", source)
    _check(quad["halton_offset"] >= 0, "quadrature.halton_offset", "must be >= 0", source)
    _check(quad["ml_form"] in ("auto", "standard", "nonnested"), "quadrature.ml_form",
           "must be auto, standard or nonnested", source)
    _check(quad["gamma"] > 0, "quadrature.gamma", "must be positive", source)
    _check(run["workers"] >= 1, "run.workers", "must be >= 1", source)
    cfg = ExperimentConfig(values, source)
    # build the cheap objects now so their own checks report the key path
    for key, build in (("geometry", lambda: cfg.domain), ("kl", cfg.covariance), ("ionic", cfg.ionic),
                       ("stimulus", cfg.stimulus), ("solver", cfg.newton), ("solver", cfg.gmres),
                       ("qoi.quantities", cfg.quantities), ("hierarchy", cfg.hierarchy)):
        try:
            build()
        except MonodomainUQError as exc:
            raise ConfigurationError(f"{source}: {key}: {exc}") from exc
    return cfg


__all__ = ["SCHEMA", "ExperimentConfig", "default_config", "parse_config", "parse_config_text"]
