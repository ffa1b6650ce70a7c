"""Command-line front-end.

    sobolev-diffeo {flow,distance,register,karcher,landmarks,selfcheck}
                   [--config PATH] [--seed INT] [--out DIR] [--threads INT]
                   [--grid n[,n]] [--order s]

Exit codes: 0 success, 2 configuration or admissibility error,
3 non-convergence, 4 degenerate flow, 1 anything else.  Every failure writes
``error.csv`` into the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field

import numpy as np

from . import io as sio
from . import plotting
from .flow import (
    DegenerateFlowError,
    Diffeo,
    FlowOptions,
    NoConvergenceError,
    TimeVelocity,
    integrate_flow,
    jacobian_min,
)
from .geodesic import DEFAULT_PENALTIES, DistanceConfig, distance_estimate
from .matching import (
    Kernel,
    LandmarkIntegrationError,
    RegistrationProblem,
    karcher_mean,
    landmark_match,
    register_images,
)
from .metric import path_energy
from .rng import stream
from .selfcheck import run_selfcheck
from .spectral import GridSpec, InvalidInputError, MetricSpec, ScalarField, random_field

log = logging.getLogger("sobolev_diffeo")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_DEGENERATE = 0, 1, 2, 3, 4
SUBCOMMANDS = ("flow", "distance", "register", "karcher", "landmarks", "selfcheck")

# section -> key -> default (strings, parsed on use)
SCHEMA = {
    "run": {"seed": "0", "out": "out", "threads": "1"},
    "grid": {"n": "64", "length": repr(2 * math.pi)},
    "metric": {"order": "2"},
    "solver": {
        "steps": "8",
        "penalties": ",".join(repr(p) for p in DEFAULT_PENALTIES),
        "residual_tol": "1e-3",
        "max_iter": "500",
        "method": "lbfgs",
        "substeps": "2",
        "interp": "spline",
        "random_init": "false",
    },
    "flow": {"velocity": "zero", "t": "1", "steps": "1", "substeps": "4", "scheme": "rk4", "mass_cap": "0.25",
             "interp": "spline"},
    "distance": {"start": "identity", "target": "translation:0.5"},
    "register": {"source": "bump:2.8,2.8:0.5", "target": "bump:3.5,3.5:0.5", "sigma_s": "auto", "steps": "4",
                 "weights": "1,10,100", "max_iter": "200"},
    "karcher": {"images": "bump:2.9:0.4 bump:3.7:0.4", "reference": "first", "damping": "0.5", "rtol": "1e-3",
                "max_sweeps": "20", "steps": "4", "max_iter": "200"},
    "landmarks": {"source": "", "target": "", "kernel": "gaussian", "sigma": "1", "steps": "40", "max_iter": "500"},
    "selfcheck": {"only": ""},
}


class ConfigError(InvalidInputError):
    def __init__(self, message, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


@dataclass
class RunConfig:
    subcommand: str
    values: dict
    locations: dict = field(default_factory=dict)
    base_dir: str = "."

    def raw(self, section, key):
        return self.values[section][key]

    def _fail(self, section, key, message):
        line, col = self.locations.get((section, key), (None, None))
        raise ConfigError(f"[{section}] {key}: {message}", line, col)

    def get(self, section, key, kind=str):
        text = self.raw(section, key).strip()
        try:
            if kind is bool:
                return text.lower() in ("1", "true", "yes", "on")
            return kind(text)
        except ValueError:
            self._fail(section, key, f"cannot parse {text!r} as {kind.__name__}")

    def floats(self, section, key):
        text = self.raw(section, key)
        try:
            return tuple(float(t) for t in text.split(",") if t.strip())
        except ValueError:
            self._fail(section, key, f"expected a comma-separated list of numbers, got {text!r}")

    def path(self, text):
        return text if os.path.isabs(text) else os.path.join(self.base_dir, text)

    @property
    def grid(self) -> GridSpec:
        sizes = self.floats("grid", "n")
        if any(s != int(s) for s in sizes):
            self._fail("grid", "n", "grid sizes must be integers")
        lengths = self.floats("grid", "length")
        if len(lengths) == 1:
            lengths = lengths * len(sizes)
        if len(lengths) != len(sizes):
            self._fail("grid", "length", f"{len(lengths)} lengths for {len(sizes)} axes")
        try:
            return GridSpec(tuple(int(s) for s in sizes), lengths)
        except InvalidInputError as exc:
            self._fail("grid", "n", str(exc))

    @property
    def metric(self) -> MetricSpec:
        return MetricSpec(self.grid, self.get("metric", "order", float))

    @property
    def out(self):
        return self.raw("run", "out")


_KEY_RE = re.compile(r"^\s*([^=:\s][^=:]*?)\s*[=:]\s*")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _locate(text):
    """``(section, key) -> (line, column of the value)``, both 1-based."""
    where = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = (lineno, m.end() + 1)
    return where


def parse_config_text(text, subcommand, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno, 1) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, 1) from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, 1) from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0]
        line = text.splitlines()[lineno - 1].strip() if lineno <= len(text.splitlines()) else ""
        raise ConfigError(f"cannot parse {line!r}, expected 'key = value'", lineno, 1) from exc
    locations = _locate(text)
    values = {sec: dict(keys) for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            line = next((i for i, ln in enumerate(text.splitlines(), 1) if _SECTION_RE.match(ln)
                         and _SECTION_RE.match(ln).group(1).strip() == sec), None)
            raise ConfigError(f"unknown section [{sec}]", line, 2)
        for key, val in parser.items(sec):
            if key not in SCHEMA[sec]:
                line, col = locations.get((sec, key), (None, None))
                raise ConfigError(f"unknown key {key!r} in [{sec}]", line, 1 if line else None)
            values[sec][key] = val
    return RunConfig(subcommand, values, locations, base_dir)


def load_config(args) -> RunConfig:
    text, base = "", "."
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        base = os.path.dirname(os.path.abspath(args.config))
    cfg = parse_config_text(text, args.command, base)
    # command-line flags override file values
    if args.seed is not None:
        cfg.values["run"]["seed"] = str(args.seed)
    if args.out is not None:
        cfg.values["run"]["out"] = args.out
        cfg.locations.pop(("run", "out"), None)
    elif args.config and not os.path.isabs(cfg.values["run"]["out"]):
        cfg.values["run"]["out"] = os.path.join(base, cfg.values["run"]["out"])
    if args.threads is not None:
        cfg.values["run"]["threads"] = str(args.threads)
    if args.grid is not None:
        cfg.values["grid"]["n"] = args.grid
        cfg.locations.pop(("grid", "n"), None)
    if args.order is not None:
        cfg.values["metric"]["order"] = str(args.order)
    # admissibility is checked before any work starts
    cfg.metric
    return cfg


# ---------------------------------------------------------------------------
# fixtures given as short specs in the config
# ---------------------------------------------------------------------------


def _numbers(text, cfg, section, key):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        cfg._fail(section, key, f"bad numbers in {text!r}")


def diffeo_spec(cfg, section, key, metric) -> Diffeo:
    spec = cfg.raw(section, key).strip()
    grid = metric.grid
    kind, _, arg = spec.partition(":")
    if kind == "identity":
        return Diffeo.identity(grid)
    if kind == "translation":
        c = _numbers(arg, cfg, section, key)
        if len(c) == 1:
            c = c * grid.dim
        if len(c) != grid.dim:
            cfg._fail(section, key, f"translation needs {grid.dim} components")
        return Diffeo.translation(grid, c)
    if kind == "sine":
        (a,) = _numbers(arg, cfg, section, key)
        vals = np.zeros((grid.dim,) + grid.shape)
        vals[0] = a * np.sin(grid.coords[0])
        return integrate_flow(TimeVelocity.stationary(vals, metric), 1.0)
    phi = sio.load_diffeo(cfg.path(spec))
    if phi.grid != grid:
        cfg._fail(section, key, f"{spec} lives on {phi.grid}, run grid is {grid}")
    return phi


def image_spec(cfg, section, key, grid, text=None) -> ScalarField:
    spec = (cfg.raw(section, key) if text is None else text).strip()
    kind, _, arg = spec.partition(":")
    if kind == "bump":
        centre, _, width = arg.partition(":")
        c = _numbers(centre, cfg, section, key)
        if len(c) == 1:
            c = c * grid.dim
        sigma = float(_numbers(width, cfg, section, key)[0]) if width else 0.5
        r2 = sum((grid.coords[i] - c[i]) ** 2 for i in range(grid.dim))
        return ScalarField(grid, np.exp(-r2 / (2 * sigma**2)))
    path = cfg.path(spec)
    im = sio.read_field_csv(path) if path.endswith(".csv") else sio.load_field(path)
    if not isinstance(im, ScalarField) or im.grid != grid:
        cfg._fail(section, key, f"{spec} is not a scalar image on the run grid {grid}")
    return im


def velocity_spec(cfg, metric) -> TimeVelocity:
    spec = cfg.raw("flow", "velocity").strip()
    grid = metric.grid
    steps = cfg.get("flow", "steps", int)
    kind, _, arg = spec.partition(":")
    shape = (steps, grid.dim) + grid.shape
    if kind == "zero":
        return TimeVelocity(np.linspace(0, 1, steps + 1), np.zeros(shape), metric)
    if kind == "sine":
        (a,) = _numbers(arg, cfg, "flow", "velocity")
        vals = np.zeros(shape)
        vals[:, 0] = a * np.sin(grid.coords[0])
        return TimeVelocity(np.linspace(0, 1, steps + 1), vals, metric)
    if kind == "constant":
        c = _numbers(arg, cfg, "flow", "velocity")
        if len(c) == 1:
            c = c * grid.dim
        vals = np.broadcast_to(np.asarray(c).reshape((1, grid.dim) + (1,) * grid.dim), shape).copy()
        return TimeVelocity(np.linspace(0, 1, steps + 1), vals, metric)
    if kind == "random":
        amp = _numbers(arg, cfg, "flow", "velocity")[0] if arg else 0.3
        rng = stream(cfg.get("run", "seed", int), "flow-random")
        vals = np.stack([random_field(grid, rng, kmax=3, amplitude=amp) for _ in range(steps)])
        return TimeVelocity(np.linspace(0, 1, steps + 1), vals, metric)
    u = sio.load_velocity(cfg.path(spec), metric.order)
    if u.grid != grid:
        cfg._fail("flow", "velocity", f"{spec} lives on {u.grid}, run grid is {grid}")
    return u


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


class NonConvergence(Exception):
    """Raised after all artifacts are written when a solver flagged non-convergence."""


def _summary(out, rows):
    sio.write_csv(os.path.join(out, "summary.csv"), ["key", "value"], rows)


def cmd_flow(cfg, out):
    metric = cfg.metric
    u = velocity_spec(cfg, metric)
    opts = FlowOptions(cfg.get("flow", "substeps", int), cfg.get("flow", "scheme"),
                       cfg.get("flow", "mass_cap", float), cfg.get("flow", "interp"))
    t = cfg.get("flow", "t", float)
    phi = integrate_flow(u, t, opts)
    rep = path_energy(u)
    sio.save_diffeo(os.path.join(out, "diffeo.sgf"), phi)
    sio.save_velocity(os.path.join(out, "velocity.tvel"), u)
    sio.atomic_write(os.path.join(out, "displacement.csv"), sio.field_csv(phi.displacement), mode="w")
    sio.atomic_write(os.path.join(out, "energy.csv"), rep.to_csv(), mode="w")
    plotting.plot_deformation(phi, os.path.join(out, "deformation.png"), title=f"Fl_{t:g}(u)")
    _summary(out, [("t", t), ("min_jacobian", jacobian_min(phi)), ("l1_norm", u.l1_norm()),
                   ("energy", rep.energy), ("length", rep.length),
                   ("max_displacement", float(np.max(np.abs(phi.displacement.values))))])


def _distance_config(cfg):
    return DistanceConfig(
        steps=cfg.get("solver", "steps", int),
        penalties=cfg.floats("solver", "penalties"),
        residual_tol=cfg.get("solver", "residual_tol", float),
        max_iter=cfg.get("solver", "max_iter", int),
        method=cfg.get("solver", "method"),
        substeps=cfg.get("solver", "substeps", int),
        interp=cfg.get("solver", "interp"),
        seed=cfg.get("run", "seed", int) if cfg.get("solver", "random_init", bool) else None,
    )


def cmd_distance(cfg, out):
    metric = cfg.metric
    phi = diffeo_spec(cfg, "distance", "start", metric)
    psi = diffeo_spec(cfg, "distance", "target", metric)
    dist, res = distance_estimate(phi, psi, metric, _distance_config(cfg), full=True)
    sio.save_geodesic_result(out, res)
    rep = path_energy(res.velocity)
    sio.atomic_write(os.path.join(out, "energy.csv"), rep.to_csv(), mode="w")
    _summary(out, [("distance", dist)] + res.summary_rows())
    plotting.plot_trace(res.trace, os.path.join(out, "trace.png"), res.stage_ends)
    plotting.plot_speed(rep, os.path.join(out, "speed.png"))
    plotting.plot_deformation(psi, os.path.join(out, "target.png"), title="target")
    if not res.converged:
        raise NonConvergence(f"endpoint residual {res.endpoint_residual:.3g} above tolerance")


def _sigma_s(cfg, section):
    text = cfg.raw(section, "sigma_s").strip() if "sigma_s" in cfg.values[section] else "auto"
    return None if text == "auto" else cfg.get(section, "sigma_s", float)


def cmd_register(cfg, out):
    metric = cfg.metric
    grid = metric.grid
    source = image_spec(cfg, "register", "source", grid)
    target = image_spec(cfg, "register", "target", grid)
    problem = RegistrationProblem(source, target, metric, sigma_s=_sigma_s(cfg, "register"),
                                  steps=cfg.get("register", "steps", int),
                                  weight_schedule=cfg.floats("register", "weights"),
                                  max_iter=cfg.get("register", "max_iter", int),
                                  method=cfg.get("solver", "method"), interp=cfg.get("solver", "interp"))
    res = register_images(problem, seed=cfg.get("run", "seed", int))
    sio.save_geodesic_result(out, res.geodesic)
    sio.save_field(os.path.join(out, "warped.sgf"), res.warped)
    sio.atomic_write(os.path.join(out, "warped.csv"), sio.field_csv(res.warped), mode="w")
    phi = integrate_flow(res.geodesic.velocity, 1.0, FlowOptions(problem.substeps, "rk4", math.inf))
    sio.save_diffeo(os.path.join(out, "diffeo.sgf"), phi)
    _summary(out, [("mismatch", res.mismatch), ("initial_mismatch", res.initial_mismatch),
                   ("mismatch_ratio", res.mismatch / res.initial_mismatch if res.initial_mismatch > 0 else 0.0),
                   ("similarity", res.similarity), ("sigma_s", res.sigma_s), ("min_jacobian", res.min_jacobian)]
             + res.geodesic.summary_rows())
    plotting.plot_images([source, target, res.warped], ["source", "target", "warped"],
                         os.path.join(out, "images.png"))
    plotting.plot_deformation(phi, os.path.join(out, "deformation.png"))
    plotting.plot_trace(res.geodesic.trace, os.path.join(out, "trace.png"), res.geodesic.stage_ends)
    if not res.geodesic.converged:
        raise NonConvergence("registration hit the iteration limit")


def cmd_karcher(cfg, out):
    metric = cfg.metric
    grid = metric.grid
    specs = cfg.raw("karcher", "images").split()
    images = [image_spec(cfg, "karcher", "images", grid, text=s) for s in specs]
    ref_text = cfg.raw("karcher", "reference").strip()
    reference = None if ref_text == "first" else image_spec(cfg, "karcher", "reference", grid)
    res = karcher_mean(images, reference,
                       {"metric": metric, "steps": cfg.get("karcher", "steps", int),
                        "max_iter": cfg.get("karcher", "max_iter", int), "method": cfg.get("solver", "method")},
                       damping=cfg.get("karcher", "damping", float), rtol=cfg.get("karcher", "rtol", float),
                       max_sweeps=cfg.get("karcher", "max_sweeps", int), threads=cfg.get("run", "threads", int))
    sio.save_field(os.path.join(out, "mean.sgf"), res.mean)
    sio.atomic_write(os.path.join(out, "mean.csv"), sio.field_csv(res.mean), mode="w")
    sio.write_csv(os.path.join(out, "distances.csv"), ["image", "distance", "flagged"],
                  [(i, float(d), int(i in res.flagged)) for i, d in enumerate(res.distances)])
    sio.write_csv(os.path.join(out, "sweeps.csv"), ["sweep", "sum_sq_distance"],
                  [(i, float(v)) for i, v in enumerate(res.sweeps)])
    _summary(out, [("objective", res.objective), ("sweeps", len(res.sweeps) - 1),
                   ("converged", int(res.converged)), ("flagged", len(res.flagged))])
    plotting.plot_images(images + [res.mean], [f"I{i}" for i in range(len(images))] + ["mean"],
                         os.path.join(out, "images.png"))
    plotting.plot_trace(res.sweeps, os.path.join(out, "sweeps.png"), title="sum of squared distances")
    if res.flagged or not res.converged:
        raise NonConvergence(f"karcher mean not converged (flagged registrations: {res.flagged})")


def cmd_landmarks(cfg, out):
    src, tgt = cfg.raw("landmarks", "source").strip(), cfg.raw("landmarks", "target").strip()
    if not src or not tgt:
        cfg._fail("landmarks", "source" if not src else "target", "a landmark CSV path is required")
    ids, q0, _ = sio.read_landmarks(cfg.path(src))
    _, q1, _ = sio.read_landmarks(cfg.path(tgt))
    if q0.shape != q1.shape:
        raise InvalidInputError(f"source has {q0.shape} landmarks, target {q1.shape}")
    kind = cfg.get("landmarks", "kernel")
    if kind == "gaussian":
        kern = Kernel.gaussian(cfg.get("landmarks", "sigma", float), q0.shape[1])
    elif kind == "sobolev":
        kern = Kernel.sobolev(cfg.metric)
    else:
        cfg._fail("landmarks", "kernel", f"unknown kernel {kind!r}; use gaussian or sobolev")
    res = landmark_match(kern, q0, q1, penalties=cfg.floats("solver", "penalties"),
                         steps=cfg.get("landmarks", "steps", int), max_iter=cfg.get("landmarks", "max_iter", int),
                         method=cfg.get("solver", "method"))
    sio.write_landmarks(os.path.join(out, "momenta.csv"), q0, res.momenta, ids)
    sio.write_landmarks(os.path.join(out, "endpoint.csv"), res.trajectory.q[-1], ids=ids)
    sio.write_csv(os.path.join(out, "trace.csv"), ["step", "objective"], [(i, float(v)) for i, v in enumerate(res.trace)])
    _summary(out, [("distance", res.distance), ("residual", res.residual), ("landmarks", len(q0))])
    plotting.plot_landmarks(res.trajectory, os.path.join(out, "landmarks.png"), target=q1)
    if res.residual > cfg.get("solver", "residual_tol", float):
        raise NonConvergence(f"landmark endpoint residual {res.residual:.3g}")


def cmd_selfcheck(cfg, out):
    grid = cfg.grid
    only = [s.strip() for s in cfg.raw("selfcheck", "only").split(",") if s.strip()] or None
    results = run_selfcheck(grid, cfg.get("metric", "order", float), cfg.get("run", "seed", int), only)
    sio.write_csv(os.path.join(out, "selfcheck.csv"), ["check", "measured", "tolerance", "passed"],
                  [(r.name, r.measured, r.tolerance, int(r.passed)) for r in results])
    margins = [math.log10(r.tolerance / max(r.measured, 1e-300)) if r.measured > 0 else 16.0 for r in results]
    plotting.plot_selfcheck([r.name for r in results], np.clip(margins, -16, 16), [r.passed for r in results],
                            os.path.join(out, "selfcheck.png"))
    failed = [r.name for r in results if not r.passed]
    _summary(out, [("checks", len(results)), ("failed", len(failed))])
    if failed:
        raise NonConvergence(f"selfcheck failures: {', '.join(failed)}")


COMMANDS = {"flow": cmd_flow, "distance": cmd_distance, "register": cmd_register, "karcher": cmd_karcher,
            "landmarks": cmd_landmarks, "selfcheck": cmd_selfcheck}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sobolev-diffeo", description="Sobolev geometry on diffeomorphism groups")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("--grid", help="grid sizes n or n,n")
    p.add_argument("--order", type=float, help="Sobolev order s")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _write_error(out, kind, exc, code):
    line = getattr(exc, "line", None)
    col = getattr(exc, "column", None)
    extra = []
    if isinstance(exc, DegenerateFlowError):
        extra = [("time", exc.time), ("location", exc.location), ("value", exc.value)]
    rows = [(kind, str(exc), "" if line is None else line, "" if col is None else col, code)]
    header = ["kind", "message", "line", "column", "exit_code"]
    for k, v in extra:
        header.append(k)
        rows[0] = rows[0] + ("" if v is None else str(v),)
    try:
        sio.write_csv(os.path.join(out, "error.csv"), header, rows)
    except OSError:
        pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or "out"
    try:
        cfg = load_config(args)
        out = cfg.out
        os.makedirs(out, exist_ok=True)
        err = os.path.join(out, "error.csv")
        if os.path.exists(err):
            os.unlink(err)
        COMMANDS[args.command](cfg, out)
    except NonConvergence as exc:
        return _fail(out, "non_convergence", exc, EXIT_NONCONVERGENCE)
    except NoConvergenceError as exc:
        return _fail(out, "non_convergence", exc, EXIT_NONCONVERGENCE)
    except (DegenerateFlowError, LandmarkIntegrationError) as exc:
        return _fail(out, "degenerate_flow", exc, EXIT_DEGENERATE)
    except InvalidInputError as exc:
        return _fail(out, "config", exc, EXIT_CONFIG)
    except OSError as exc:
        return _fail(out, "io", exc, EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        return _fail(out, "internal", exc, EXIT_FAILURE)
    return EXIT_OK


def _fail(out, kind, exc, code):
    print(f"sobolev-diffeo: {kind}: {exc}", file=sys.stderr)
    _write_error(out, kind, exc, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
