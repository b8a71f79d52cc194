"""Command-line experiment runner.

Usage::

    hyperns COMMAND CONFIG [--key value ...] [--workers N] [--timings]

The configuration is an INI file; section names are for readability only and
all keys share one namespace.  Every key can be overridden as ``--key value``.
Mode lists are written ``k|value ; k|value`` where ``k`` is an integer (d=1)
or ``k1,k2`` (d=2) and ``value`` is a Python complex literal.  In d=2 a scalar
value is taken along the solenoidal direction ``k_perp/|k|``; a vector
``a,b`` is Leray-projected.

Results go to ``OUTPUT_DIR/COMMAND.jsonl`` (one JSON record per line, sorted
keys) and ``OUTPUT_DIR/COMMAND_summary.csv``.  Exit status: 0 when every check
passes, 1 when a check fails, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
from typing import Optional

import numpy as np

from . import acceptance
from .estimators import (
    TestFunctional,
    coupling_residual,
    estimate_gradient,
    eta_identity_error,
    fd_gradient_crn,
    girsanov_checks,
    ou_gradient_oracle,
)
from .inequalities import CSV_HEADER, HarnessError, csv_row, inequality_suite
from .integrator import DivergenceError, EnergyObserver, Integrator, IntegratorConfig, NoiseStream, energy_residuals_batch
from .model import Model
from .montecarlo import derive_seed, params_hash
from .nonlinearity import AssumptionViolation, check_assumptions
from .spectral import LatticeMismatchError, ParameterError

REQUIRED = ("dimension", "cutoff", "lambda0", "delta", "sigma", "theta")
DEFAULTS = {
    "t_final": "0.5",
    "steps": "200",
    "samples": "10000",
    "seed": "0",
    "scheme": "exponential_euler",
    "nonlinearity": "on",
    "functional": "bounded_tanh",
    "functional_direction": "",
    "x0": "",
    "h": "",
    "alpha": "2.0",
    "epsilon_fd": "1e-3",
    "epsilon_girsanov": "0.05",
    "delta_entropy": "auto",
    "output_dir": "results",
}
KEYS = REQUIRED + tuple(DEFAULTS)
COMMANDS = ("check-assumptions", "simulate", "bismut", "coupling", "inequalities", "accept")
ASSUMPTION_SAMPLES = 1000
COUPLING_PATHS = 10
ENERGY_PATHS = 100


class ConfigError(ValueError):
    pass


def load_config(path: str, overrides: dict) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    flat = dict(DEFAULTS)
    for section in parser.sections():
        for key, value in parser.items(section):
            if key not in KEYS:
                raise ConfigError(f"unknown parameter: {key}")
            flat[key] = value
    flat.update({k: v for k, v in overrides.items() if v is not None})
    for key in REQUIRED:
        if key not in flat:
            raise ConfigError(f"missing parameter: {key}")
    return flat


def _number(conf: dict, key: str, kind=float):
    try:
        value = kind(conf[key])
    except ValueError as exc:
        raise ConfigError(f"parameter {key} must be {kind.__name__}, got {conf[key]!r}") from exc
    return value


def _switch(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {value!r}")


def parse_modes(text: str, model: Model) -> np.ndarray:
    sp = model.space
    modes = {}
    for item in filter(None, (s.strip() for s in text.split(";"))):
        if "|" not in item:
            raise ConfigError(f"mode entry {item!r} must look like k|value")
        key, val = (s.strip() for s in item.split("|", 1))
        try:
            k = tuple(int(c) for c in key.split(","))
            comps = [complex(c.strip().replace(" ", "")) for c in val.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad mode entry {item!r}") from exc
        if len(k) != sp.d:
            raise ConfigError(f"mode {key!r} needs {sp.d} component(s)")
        if len(comps) == 1 and sp.d == 2:
            kv = np.array(k, dtype=float)
            comps = list(comps[0] * np.array([-kv[1], kv[0]]) / np.linalg.norm(kv))
        elif len(comps) not in (1, sp.d):
            raise ConfigError(f"mode value {val!r} needs 1 or {sp.d} component(s)")
        try:
            sp.lattice.index_of(k)
        except (KeyError, ValueError, LatticeMismatchError) as exc:
            raise ConfigError(f"mode {key!r} is not on the truncated lattice") from exc
        modes[k] = comps if sp.d > 1 else comps[0]
    return sp.field_from_modes(modes)


class Run:
    """Parsed configuration bound to a model."""

    def __init__(self, conf: dict, workers: int, timings: bool):
        self.conf = conf
        self.workers = workers
        self.timings = timings
        n = lambda k, kind=float: _number(conf, k, kind)  # noqa: E731
        self.model = Model.build(n("dimension", int), n("cutoff", int), n("lambda0"), n("delta"), n("sigma"), n("theta"))
        sp = self.model.space
        self.cfg = IntegratorConfig(n("t_final"), n("steps", int), conf["scheme"], _switch(conf["nonlinearity"]))
        self.samples = n("samples", int)
        if self.samples < 2:
            raise ConfigError("samples must be at least 2")
        self.seed = n("seed", int)
        self.alpha = n("alpha")
        self.eps_fd = n("epsilon_fd")
        self.eps_g = n("epsilon_girsanov")
        de = conf["delta_entropy"].strip().lower()
        self.delta_entropy = None if de in ("", "auto") else n("delta_entropy")
        self.x0 = parse_modes(conf["x0"], self.model)
        self.h = parse_modes(conf["h"], self.model) if conf["h"].strip() else sp.basis_direction(0)
        if not float(sp.norm(self.h, "H")) > 0:
            raise ConfigError("direction h must be nonzero")
        self.f = self._functional(conf)
        self.output_dir = conf["output_dir"]
        self.hash = params_hash({k: conf[k] for k in KEYS if k != "output_dir"})

    def _functional(self, conf: dict) -> TestFunctional:
        parts = conf["functional"].split()
        if not parts:
            raise ConfigError("functional must name a test function")
        kw = {}
        for tok in parts[1:]:
            key, _, val = tok.partition("=")
            if key not in ("gain", "level"):
                raise ConfigError(f"unknown functional parameter {key!r}")
            kw[key] = float(val)
        text = conf["functional_direction"]
        direction = parse_modes(text, self.model) if text.strip() else self.h
        return TestFunctional(parts[0], direction=direction, **kw)

    def record(self, op: str, *parts: dict, **fields) -> dict:
        rec = {"op": op, "params_hash": self.hash, "seed": self.seed}
        for part in parts:
            rec.update(part)
        rec.update(fields)
        return rec


def _summary(check, variant, run: Run, lhs, stderr, rhs, passed, samples=None) -> dict:
    return {
        "check": check, "variant": variant, "params": {
            "d": run.model.lattice.dimension, "N": run.model.lattice.cutoff, "t": run.cfg.t_final,
            "samples": run.samples if samples is None else samples,
        }, "seed": run.seed, "lhs_mean": lhs, "lhs_stderr": stderr, "rhs": rhs, "pass": bool(passed),
    }


def cmd_check_assumptions(run: Run):
    m = run.model
    try:
        recs = check_assumptions(m.space, m.constants, ASSUMPTION_SAMPLES, run.seed)
    except AssumptionViolation as exc:
        rec = run.record("check-assumptions", inequality=exc.inequality, worst_ratio=exc.ratio, witness=exc.witness, **{"pass": False})
        return [rec], [_summary(exc.inequality, "", run, exc.ratio, "", 1.0, False, ASSUMPTION_SAMPLES)]
    records = [run.record("check-assumptions", constants=m.constants.as_dict(), **{"pass": True})]
    rows = []
    for r in recs:
        records.append(run.record("check-assumptions", r, {"pass": True}))
        rows.append(_summary(r["inequality"], "", run, r["worst_ratio"], "", r["limit"], True, ASSUMPTION_SAMPLES))
    return records, rows


def cmd_simulate(run: Run):
    m, cfg = run.model, run.cfg
    os.makedirs(run.output_dir, exist_ok=True)
    noise = NoiseStream(m.space, cfg, run.seed)
    path = Integrator(m.space, cfg, m.conv).simulate(run.x0, noise, 0)
    path.dump_csv(os.path.join(run.output_dir, "path_0.csv"))
    n_paths = min(run.samples, ENERGY_PATHS)
    med = {}
    for steps in (cfg.n_steps, 2 * cfg.n_steps):
        c = IntegratorConfig(cfg.t_final, steps, cfg.scheme, cfg.nonlinearity)
        res = energy_residuals_batch(Integrator(m.space, c, m.conv), run.x0, NoiseStream(m.space, c, run.seed), range(n_paths), m.constants)
        med[steps] = float(np.median(np.abs(res)))
    ratio = med[cfg.n_steps] / med[2 * cfg.n_steps]
    rec = run.record(
        "simulate", path_file="path_0.csv", final_energy=float(m.space.norm_sq(path.states[-1], "H")),
        v_integral=path.v_integral, energy_paths=n_paths, median_residual=med[cfg.n_steps],
        median_residual_refined=med[2 * cfg.n_steps], refinement_ratio=ratio, **{"pass": bool(ratio >= 1.5)},
    )
    return [rec], [_summary("energy_identity", "refinement", run, ratio, "", 1.5, ratio >= 1.5, n_paths)]


def cmd_bismut(run: Run):
    m, cfg = run.model, run.cfg
    b = estimate_gradient(m, run.x0, run.h, run.f, cfg, run.samples, derive_seed(run.seed, 30), run.workers)
    fd = fd_gradient_crn(m, run.x0, run.h, run.f, cfg, run.samples, derive_seed(run.seed, 31), run.eps_fd, run.workers)
    tol = 3 * float(np.hypot(b.stderr, fd.stderr))
    ok_fd = abs(b.mean - fd.mean) <= tol
    records = [
        b.record("bismut", run.hash, run.seed, run.timings),
        fd.record("fd_crn", run.hash, run.seed, run.timings, epsilon=run.eps_fd),
        run.record("bismut_vs_fd", gap=abs(b.mean - fd.mean), tol=tol, **{"pass": bool(ok_fd)}),
    ]
    rows = [_summary("bismut_vs_fd", "crn", run, b.mean, b.stderr, fd.mean, ok_fd)]
    if not cfg.nonlinearity and run.f.kind == "linear":
        exact = ou_gradient_oracle(m, run.h, run.f.direction, cfg.t_final)
        ok_ou = abs(b.mean - exact) <= 3 * b.stderr
        records.append(run.record("ou_oracle", oracle=exact, z=(b.mean - exact) / b.stderr, **{"pass": bool(ok_ou)}))
        rows.append(_summary("bismut_vs_ou", "closed_form", run, b.mean, b.stderr, exact, ok_ou))
    return records, rows


def cmd_coupling(run: Run):
    m, cfg, eps = run.model, run.cfg, run.eps_g
    h_v = float(m.space.norm(run.h, "V"))
    res = {}
    for steps in (cfg.n_steps, 2 * cfg.n_steps):
        c = IntegratorConfig(cfg.t_final, steps, cfg.scheme, cfg.nonlinearity)
        noise = NoiseStream(m.space, c, derive_seed(run.seed, 40))
        res[steps] = max(coupling_residual(m, run.x0, run.h, eps, c, noise, i) for i in range(COUPLING_PATHS))
    coarse, fine = res[cfg.n_steps], res[2 * cfg.n_steps]
    bound = 10 * cfg.dt * eps * h_v
    if cfg.scheme == "semi_implicit_euler":
        refine_ok, variant = coarse / fine >= 1.5, "refinement"
    else:
        refine_ok, variant = max(coarse, fine) <= 1e-12, "exact"
    c_ok = coarse <= bound and refine_ok
    records = [run.record("coupling", scheme=cfg.scheme, residual=coarse, residual_refined=fine, bound=bound, **{"pass": bool(c_ok)})]
    rows = [_summary("coupling", variant, run, coarse, "", bound, c_ok, COUPLING_PATHS)]

    g = girsanov_checks(m, run.x0, run.h, eps, run.f, cfg, run.samples, derive_seed(run.seed, 50), run.workers)
    if not run.timings:
        g.pop("elapsed", None)
    path = Integrator(m.space, cfg, m.conv).simulate(run.x0, NoiseStream(m.space, cfg, derive_seed(run.seed, 51)))
    eta_err = eta_identity_error(m, path, run.h, eps, cfg.nonlinearity)
    records.append(run.record("girsanov", g))
    records.append(run.record("eta_identity", relative_error=eta_err, **{"pass": bool(eta_err <= 1e-10)}))
    rows += [
        _summary("girsanov", "martingale", run, g["mean_R"], g["stderr_R"], 1.0, g["martingale_pass"]),
        _summary("girsanov", "identity", run, g["mean_Rf"], g["stderr_Rf"], g["mean_f_shifted"], g["identity_pass"]),
        _summary("eta_identity", "relative", run, eta_err, "", 1e-10, eta_err <= 1e-10, 1),
    ]
    return records, rows


def cmd_inequalities(run: Run):
    reports = inequality_suite(
        run.model, run.x0, run.h, run.f, run.alpha, run.cfg, run.samples, run.seed, run.workers, run.delta_entropy
    )
    return [run.record("inequality", r) for r in reports], reports


def cmd_accept(run: Run, criteria=None, quiet=False):
    records, rows = [], []
    for k in criteria or sorted(acceptance.CRITERIA):
        rec = acceptance.run_criterion(k, seed=run.seed, workers=run.workers, timings=run.timings)
        if not quiet:
            print(acceptance.status_line(rec), flush=True)
        records.append(rec)
        rows.append(_summary(f"criterion_{k}", rec["title"], run, "", "", "", rec["pass"]))
    return records, rows


def cmd_sample_longrun(run: Run):
    m, cfg = run.model, run.cfg
    obs = EnergyObserver(m.space, cfg.dt)
    energies = []
    integ = Integrator(m.space, cfg, m.conv)
    noise = NoiseStream(m.space, cfg, run.seed)
    track = lambda n, s, x, dw: energies.append(float(m.space.norm_sq(x, "H")[0]))  # noqa: E731
    integ.run(run.x0, noise, [0], [obs, track])
    rec = run.record("sample-longrun", energies=energies, v_integral=float(obs.v_integral[0]), **{"pass": True})
    return [rec], []


HANDLERS = {
    "check-assumptions": cmd_check_assumptions,
    "simulate": cmd_simulate,
    "bismut": cmd_bismut,
    "coupling": cmd_coupling,
    "inequalities": cmd_inequalities,
    "accept": cmd_accept,
    "sample-longrun": cmd_sample_longrun,
}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_outputs(out_dir: str, command: str, records: list, rows: list) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    jpath = os.path.join(out_dir, f"{command}.jsonl")
    cpath = os.path.join(out_dir, f"{command}_summary.csv")
    with open(jpath, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in csv_row(r)])
    return jpath, cpath


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyperns", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS + ("sample-longrun",), metavar="command", help=", ".join(COMMANDS))
    ap.add_argument("config", help="INI configuration file")
    for key in KEYS:
        ap.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    ap.add_argument("--workers", type=int, default=1, help="worker processes (does not change results)")
    ap.add_argument("--timings", action="store_true", help="include wall-clock times in the JSON records")
    ap.add_argument("--criteria", default=None, help="accept only: comma-separated criterion numbers")
    ap.add_argument("--quiet", action="store_true", help="suppress status lines")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in KEYS}
    try:
        conf = load_config(args.config, overrides)
        run = Run(conf, max(1, args.workers), args.timings)
        criteria = None
        if args.criteria:
            criteria = [int(c) for c in args.criteria.split(",")]
            if not set(criteria) <= set(acceptance.CRITERIA):
                raise ConfigError(f"unknown criterion in {args.criteria!r}")
    except (ConfigError, ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "accept":
            records, rows = cmd_accept(run, criteria, args.quiet)
        else:
            records, rows = HANDLERS[args.command](run)
    except (HarnessError, ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    jpath, _ = write_outputs(run.output_dir, args.command, records, rows)
    failed = [r for r in rows if not r["pass"]] or [r for r in records if r.get("pass") is False]
    if failed:
        for r in failed:
            print(f"check failed: {r.get('check', r.get('op'))} {r.get('variant', '')} (report: {jpath})".rstrip(), file=sys.stderr)
        return 1
    if not args.quiet and args.command != "accept":
        print(f"all checks passed; report: {jpath}")
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
