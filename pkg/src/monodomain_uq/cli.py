"""Command line driver for the KL, reference, estimator and study stages.

Every command writes into ``--out`` and records its artifacts in
``manifest.json``; ``--resume`` skips a stage whose inputs hash is
unchanged and whose outputs still exist. Long studies also checkpoint each
estimator run, so an interrupted ``convergence`` picks up where it stopped.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import logging
import sys
import time
import zipfile
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, default_config, parse_config
from .errors import ConfigurationError, MonodomainUQError
from .fem import assemble_mass, write_spacetime_vtk
from .mesh import write_vtk
from .problem import ProblemSampler
from .qoi import SCALAR, ActionPotential, ErrorNorm, QoISet, QoIValue, activation_times, extract, rmse
from .quadrature import (METHODS, MLMC, MLQMC, Evaluator, HaltonRule, WorkModel, estimate_sl, halton,
                         run_method, schedule, work_closed_form)
from .randfield import build_kl, load_kl, save_kl

log = logging.getLogger("monodomain_uq")


# -- output plumbing ------------------------------------------------------------

def csv_schema():
    text = resources.files("monodomain_uq").joinpath("data/csv_schema.json").read_text()
    return json.loads(text)["files"]


def write_csv(path: Path, rows, schema_name=None):
    columns = list(csv_schema()[schema_name or path.name]["columns"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise MonodomainUQError(f"{path.name}: row has {len(row)} fields, expected {len(columns)}")
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def save_arrays(path: Path, arrays: dict, meta: dict):
    """Byte-reproducible ``.npz``: fixed member timestamps and order."""
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)),
                    json.dumps(meta, sort_keys=True))
    tmp.replace(path)
    return path


def load_arrays(path: Path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {n[:-4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                  for n in zf.namelist() if n.endswith(".npy")}
    return arrays, meta


def save_qoiset(path, qset: QoISet, meta: dict):
    arrays = {f"q{i}": v.data for i, v in enumerate(qset.values)}
    meta = dict(meta, labels=[v.kind.label for v in qset.values], level=qset.values[0].level.level)
    return save_arrays(Path(path), arrays, meta)


def load_qoiset(path, hierarchy, kinds):
    arrays, meta = load_arrays(Path(path))
    labels = [k.label for k in kinds]
    if meta.get("labels") != labels:
        raise ConfigurationError(f"{path} holds {meta.get('labels')}, expected {labels}")
    level = hierarchy[meta["level"]]
    return QoISet(QoIValue(k, arrays[f"q{i}"], level) for i, k in enumerate(kinds)), meta


class RunManifest:
    """``manifest.json``: config hash, timestamps and outputs per stage."""

    def __init__(self, out: Path, config_hash: str):
        self.out = out
        self.path = out / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"created": _now(), "stages": {}}
        self.data["config_hash"] = config_hash

    def is_done(self, stage, digest):
        entry = self.data["stages"].get(stage)
        if not entry or entry.get("hash") != digest or "finished" not in entry:
            return False
        return all((self.out / p).exists() for p in entry["outputs"])

    def start(self, stage, digest):
        self.data["stages"][stage] = {"hash": digest, "started": _now(), "outputs": []}
        self._write()

    def finish(self, stage, outputs):
        entry = self.data["stages"][stage]
        entry["outputs"] = sorted(str(Path(p).relative_to(self.out)) for p in outputs)
        entry["finished"] = _now()
        self._write()

    def outputs(self, stage):
        return [self.out / p for p in self.data["stages"][stage]["outputs"]]

    def _write(self):
        self.data["updated"] = _now()
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        tmp.replace(self.path)


# -- stage context ------------------------------------------------------------

class Context:
    def __init__(self, cfg: ExperimentConfig, resume=False):
        self.cfg = cfg
        self.out = Path(cfg["run"]["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.resume = resume
        self.manifest = RunManifest(self.out, cfg.digest())
        (self.out / "config.ini").write_text(cfg.to_ini())
        self._problem = None

    def digest(self, stage):
        v = self.cfg.values
        sections = {
            "kl-build": ("geometry", "hierarchy", "kl"),
            "reference": ("geometry", "hierarchy", "kl", "ionic", "stimulus", "solver", "qoi"),
        }.get(stage, ("geometry", "hierarchy", "kl", "ionic", "stimulus", "solver", "qoi", "quadrature"))
        picked = {s: v[s] for s in sections}
        q = v["quadrature"]
        if stage == "reference":
            picked["quadrature"] = {k: q[k] for k in ("n_ref", "halton_offset", "q")}
        elif stage == "run":
            # one estimator run does not depend on which other runs the study holds
            picked["quadrature"] = {k: q[k] for k in ("q", "seed", "halton_offset", "ml_form")}
        return self.cfg.digest(stage, picked)

    def stage(self, name, run, requested=True, extra=None):
        """Run ``run() -> outputs`` unless an up-to-date result exists."""
        digest = self.digest(name) if extra is None else self.cfg.digest(self.digest(name), extra)
        if self.manifest.is_done(name, digest) and (self.resume or not requested):
            log.info("%s: up to date, skipped", name)
            return self.manifest.outputs(name)
        self.manifest.start(name, digest)
        t0 = time.perf_counter()
        outputs = run()
        self.manifest.finish(name, outputs)
        log.info("%s: done in %.1f s", name, time.perf_counter() - t0)
        return outputs

    @property
    def kl_path(self):
        return self.out / "kl.klx"

    def problem(self):
        if self._problem is None:
            self.stage("kl-build", lambda: cmd_kl_build(self), requested=False)
            hierarchy = self.cfg.hierarchy()
            kl = load_kl(self.kl_path, mesh=hierarchy[hierarchy.L])
            self._problem = self.cfg.problem(kl=kl)
        return self._problem

    def evaluator(self):
        problem = self.problem()
        kinds = self.cfg.quantities()
        if problem.newton.strategy in ("LNIG", "GNIG"):
            for l in range(len(problem.hierarchy)):  # warm before any fork
                problem.reference_solution(l)
        return Evaluator(ProblemSampler(problem, kinds), self.cfg["run"]["workers"])


def _summary(value, q):
    if value.kind.shape == SCALAR:
        return float(value.data)
    return ErrorNorm(value.level, q)(value)


# -- commands -------------------------------------------------------------------

def cmd_kl_build(ctx: Context):
    cfg = ctx.cfg
    hierarchy = cfg.hierarchy()
    fine = hierarchy[hierarchy.L]
    kl = build_kl(cfg.covariance(), fine, assemble_mass(fine))
    save_kl(ctx.kl_path, kl)
    rows = [[k + 1, lam, s] for k, (lam, s) in enumerate(zip(kl.lambdas, kl.sigmas))]
    spectrum = write_csv(ctx.out / "kl_spectrum.csv", rows)
    log.info("kl-build: M = %d on level %d (%d vertices)", kl.M, fine.level, fine.n)
    return [ctx.kl_path, spectrum]


def _reference_path(ctx):
    return ctx.out / "reference.npz"


def cmd_reference(ctx: Context):
    cfg = ctx.cfg
    problem = ctx.problem()
    quad = cfg["quadrature"]
    with ctx.evaluator() as ev:
        res = estimate_sl(cfg.finest, quad["n_ref"], HaltonRule(quad["halton_offset"]), dim=problem.M,
                          evaluator=ev)
    path = save_qoiset(_reference_path(ctx), res.estimate,
                       {"n_ref": quad["n_ref"], "halton_offset": quad["halton_offset"]})
    rows = [[v.kind.label, cfg.finest, quad["n_ref"], _summary(v, quad["q"]), res.total_cost]
            for v in res.estimate.values]
    return [path, write_csv(ctx.out / "reference.csv", rows)]


def _load_reference(ctx):
    ctx.stage("reference", lambda: cmd_reference(ctx), requested=False)
    ref, _ = load_qoiset(_reference_path(ctx), ctx.cfg.hierarchy(), ctx.cfg.quantities())
    return ref


def _one_run(ctx, ev, method, levels, rep):
    """One estimator run, checkpointed under ``runs/``."""
    cfg = ctx.cfg
    quad = cfg["quadrature"]
    path = ctx.out / "runs" / f"{method}_L{levels}_r{rep}.npz"
    digest = ctx.digest("run")
    hierarchy = cfg.hierarchy()
    if ctx.resume and path.exists():
        try:
            est, meta = load_qoiset(path, hierarchy, cfg.quantities())
            if meta.get("hash") == digest:
                log.info("run %s L'=%d rep %d: checkpoint reused", method, levels, rep)
                return est, meta["evaluations"], meta["costs"]
        except (MonodomainUQError, KeyError, zipfile.BadZipFile):
            pass
    t0 = time.perf_counter()
    res = run_method(method, levels - 1, quad["q"], dim=ctx.problem().M, hierarchy=hierarchy,
                     seed=quad["seed"], repetition=rep, offset=quad["halton_offset"], evaluator=ev,
                     ml_form=quad["ml_form"])
    path.parent.mkdir(exist_ok=True)
    save_qoiset(path, res.estimate, {"hash": digest, "evaluations": res.evaluations, "costs": res.costs})
    log.info("run %s L'=%d rep %d: %d solves, %.1f s", method, levels, rep, sum(res.evaluations),
             time.perf_counter() - t0)
    return res.estimate, res.evaluations, res.costs


def fit_rate(levels, errors):
    """Slope of ``-log2(error)`` against the level count; ``nan`` if undefined."""
    levels = np.asarray(levels, dtype=float)
    errors = np.asarray(errors, dtype=float)
    ok = errors > 0
    if ok.sum() < 2:
        return float("nan")
    return float(-np.polyfit(levels[ok], np.log2(errors[ok]), 1)[0])


def fit_levels(total_levels):
    """Levels entering the rate fit.

    The reference lives on the finest level, so the error at ``L' = L`` is
    pure sampling error; it is left out whenever at least two levels remain.
    """
    if total_levels >= 3:
        return list(range(1, total_levels))
    return list(range(1, total_levels + 1))


def cmd_convergence(ctx: Context):
    cfg = ctx.cfg
    quad = cfg["quadrature"]
    hierarchy = cfg.hierarchy()
    ref = _load_reference(ctx)
    kinds = cfg.quantities()
    norms = [ErrorNorm(ref[i].level, quad["q"]) for i in range(len(kinds))]
    conv_rows, timing_rows, rate_rows = [], [], []
    with ctx.evaluator() as ev:
        for method in quad["methods"]:
            reps = quad["repetitions"] if method in ("MC", MLMC) else 1
            per_level = {}
            for levels in range(1, cfg.levels + 1):
                ests = []
                for rep in range(reps):
                    est, evals, costs = _one_run(ctx, ev, method, levels, rep)
                    ests.append(est)
                    for l, (n, c) in enumerate(zip(evals, costs)):
                        timing_rows.append([method, levels, rep, l, n, c])
                per_level[levels] = ests
            for i, kind in enumerate(kinds):
                errs, ses = [], []
                for levels in range(1, cfg.levels + 1):
                    values = [e[i] for e in per_level[levels]]
                    src = values[0].level.level
                    op = None if src == cfg.finest else hierarchy.transfer(src, cfg.finest)
                    e = rmse(values, ref[i], op, quad["q"], norm=norms[i])
                    sq = [rmse([v], ref[i], op, quad["q"], norm=norms[i]) ** 2 for v in values]
                    se = float(np.std(sq, ddof=1) / (2 * e * np.sqrt(len(sq)))) if len(sq) > 1 and e > 0 else 0.0
                    errs.append(e)
                    ses.append(se)
                used = fit_levels(cfg.levels)
                rate = fit_rate(used, [errs[l - 1] for l in used])
                rate_rows.append([method, kind.label, quad["q"], rate, " ".join(map(str, used))])
                for levels, (e, se) in enumerate(zip(errs, ses), start=1):
                    conv_rows.append([method, levels, kind.label, quad["q"], e, se, reps, rate])
    return [write_csv(ctx.out / "convergence.csv", conv_rows), write_csv(ctx.out / "rates.csv", rate_rows),
            write_csv(ctx.out / "timing.csv", timing_rows)]


def cmd_estimate(ctx: Context, methods=None):
    cfg = ctx.cfg
    quad = cfg["quadrature"]
    methods = methods or quad["methods"]
    rows, outputs = [], []
    with ctx.evaluator() as ev:
        for method in methods:
            res = run_method(method, cfg.finest, quad["q"], dim=ctx.problem().M, hierarchy=cfg.hierarchy(),
                             seed=quad["seed"], offset=quad["halton_offset"], evaluator=ev,
                             ml_form=quad["ml_form"])
            outputs.append(save_qoiset(ctx.out / f"estimate_{method}.npz", res.estimate, {"method": method}))
            sched = schedule(cfg.finest, quad["q"], method)
            for l in range(cfg.finest + 1):
                if method in (MLMC, MLQMC):
                    n_l = sched[cfg.finest - l]
                else:
                    n_l = sched[cfg.finest] if l == cfg.finest else 0
                for v in res.estimate.values:
                    rows.append([method, cfg.levels, l, n_l, res.evaluations[l], res.costs[l], v.kind.label,
                                 _summary(v, quad["q"])])
    outputs.append(write_csv(ctx.out / "estimate.csv", rows))
    return outputs


def cmd_work(ctx: Context):
    cfg = ctx.cfg
    quad = cfg["quadrature"]
    ctx.stage("convergence", lambda: cmd_convergence(ctx), requested=False)
    timing = read_csv(ctx.out / "timing.csv")
    rows = []
    for method in quad["methods"]:
        for levels in range(1, cfg.levels + 1):
            sel = [r for r in timing if r["method"] == method and int(r["levels"]) == levels]
            reps = sorted({int(r["repetition"]) for r in sel})
            if not reps:
                raise ConfigurationError(f"no timing data for {method} with {levels} levels")
            totals = [sum(float(r["cost_s"]) for r in sel if int(r["repetition"]) == k) for k in reps]
            solves = [sum(int(r["evaluations"]) for r in sel if int(r["repetition"]) == k) for k in reps]
            total, n = float(np.mean(totals)), float(np.mean(solves))
            analytic = work_closed_form(WorkModel(quad["gamma"], 4, levels - 1), method)
            rows.append([method, levels, total, total / n if n else 0.0, n, analytic, quad["gamma"]])
    return [write_csv(ctx.out / "work.csv", rows)]


def cmd_solve_one(ctx: Context, level=None, index=0):
    cfg = ctx.cfg
    problem = ctx.problem()
    hierarchy = cfg.hierarchy()
    level = cfg.finest if level is None else level
    if not 0 <= level <= cfg.finest:
        raise ConfigurationError(f"level must be in 0..{cfg.finest}")
    omega = np.zeros(problem.M) if index == 0 else halton(index, problem.M)
    mesh = hierarchy[level]
    u, stats = problem.solve(omega, level)
    target = ctx.out / "solve_one"
    target.mkdir(exist_ok=True)
    outputs = write_spacetime_vtk(target, mesh, u, name="potential")
    act = activation_times(u, mesh.times, problem.ionic.u_th)
    cond = problem.conductivity(omega, level)
    outputs.append(write_vtk(target / "activation.vtk", mesh, point_data={"activation_time": act},
                             cell_data={"conductivity": cond.scalar if cond.scalar is not None
                                        else np.trace(cond.tensors, axis1=1, axis2=2) / 3.0}))
    for i, kind in enumerate(cfg.quantities()):
        if isinstance(kind, ActionPotential):
            series = extract(kind, u, mesh, problem.ionic).data
            outputs.append(write_csv(target / f"action_potential_{i}.csv", zip(mesh.times, series),
                                     schema_name="action_potential_*.csv"))
    outputs.append(write_csv(target / "solve_stats.csv", [stats.csv_row(level, index)]))
    log.info("solve-one: level %d, %d Newton / %d GMRES iterations, %.2f s", level, stats.newton_total,
             stats.gmres_total, stats.wall_time)
    return outputs


# -- entry point ------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (sectioned key = value)")
    common.add_argument("--workers", type=int, help="worker processes for sample solves")
    common.add_argument("--seed", type=int, help="base seed for Monte Carlo rules (unsigned 64-bit)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--resume", action="store_true", help="skip stages and runs that are up to date")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="monodomain-uq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("kl-build", parents=[common], help="factorize the covariance and store the KL expansion")
    sub.add_parser("reference", parents=[common], help="Halton reference estimate on the finest level")
    est = sub.add_parser("estimate", parents=[common], help="one estimate per configured method")
    est.add_argument("--method", choices=METHODS, action="append", help="restrict to this method (repeatable)")
    sub.add_parser("convergence", parents=[common], help="controlled convergence study")
    sub.add_parser("work", parents=[common], help="measured and analytic work per method")
    one = sub.add_parser("solve-one", parents=[common], help="single sample with VTK export")
    one.add_argument("--level", type=int, help="mesh level (default: finest)")
    one.add_argument("--index", type=int, default=0, help="Halton index of the sample, 0 = mean field")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    overrides = {}
    if args.seed is not None:
        overrides.setdefault("quadrature", {})["seed"] = args.seed
    if args.workers is not None:
        overrides.setdefault("run", {})["workers"] = args.workers
    if args.out is not None:
        overrides.setdefault("run", {})["out"] = str(args.out)
    return cfg.with_overrides(**overrides) if overrides else cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        ctx = Context(cfg, resume=args.resume)
        if args.command == "kl-build":
            ctx.stage("kl-build", lambda: cmd_kl_build(ctx))
        elif args.command == "reference":
            ctx.stage("reference", lambda: cmd_reference(ctx))
        elif args.command == "estimate":
            ctx.stage("estimate", lambda: cmd_estimate(ctx, args.method), extra=args.method)
        elif args.command == "convergence":
            ctx.stage("convergence", lambda: cmd_convergence(ctx))
        elif args.command == "work":
            ctx.stage("work", lambda: cmd_work(ctx))
        elif args.command == "solve-one":
            ctx.stage("solve-one", lambda: cmd_solve_one(ctx, args.level, args.index),
                      extra=[args.level, args.index])
    except MonodomainUQError as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
