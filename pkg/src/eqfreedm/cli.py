"""Command-line pipeline: ``eqfreedm <command> [--config run.toml] [options]``.

Every command writes its data files plus ``<command>.manifest.json`` into
the output directory. Exit status is 0 on success, 1 on a numerical failure
and 2 on a configuration or input error.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, dataset, dmap, eqfree, model, operators, twcont
from ._backend import BACKEND
from .continuation import ContinuationSettings, NewtonFailure

log = logging.getLogger("eqfreedm")


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "rng_seed": 20211220,
    "output_dir": ".",
    "threads": 0,
    "model": {"n_cars": 30, "road_length": 60.0, "inv_tau": 1.7, "safety_distance": 2.4,
              "v0": 1.0},
    "simulate": {"amplitude": 2.0, "t_end": 1000.0, "dt": 1.0},
    "sampling": {"n_samples": 1000, "amplitude_range": [0.0, 4.5], "v0_range": [0.96, 1.1],
                 "stop_time_mean": 700.0, "stop_time_shift": 200.0},
    "align": {"anchor_index": 10},
    "downsample": {"dimension": 1, "target": 1000, "radial_target": 2000},
    "dmap": {"epsilon": None, "max_candidates": 20, "threshold": 0.5, "fit_epsilon": None,
             "dimension": None},
    "operators": {"lift_k": None, "tol": 1e-10, "max_evaluations": 2000,
                  "warn_threshold": 1e-6, "lift_targets": 0},
    "coarse": {"t_skip": 300.0, "delta": 240.0, "window": None},
    "continuation": {"dimension": 1, "v0_start": 1.05, "step_size": 0.01,
                     "newton_tol": None, "newton_max_iter": 12, "fd_step": None,
                     "fd_step_period": 1e-3, "max_steps": 200, "nu": 7,
                     "section_direction": [1.0, 0.0], "v0_bounds": [0.96, 1.1],
                     "sigma_min": 0.02},
    "micro": {"v0_start": 1.0, "step_size": 0.01, "newton_tol": 1e-10, "max_steps": 400,
              "v0_bounds": [0.9, 1.1], "n_grid": None, "stability": True},
    "floquet": {"v0": None, "zero_tol": 1e-5},
}

# Macro Newton tolerance and difference step sit above the noise floor of
# the coarse residual at desk scale (one entry per embedding dimension).
MACRO_NEWTON_TOL = {1: 1e-6, 2: 3e-4}
MACRO_FD_STEP = {1: 2e-3, 2: 5e-3}


def _coerce(value, default, where):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} numbers")
        return [_coerce(v, d, where) for v, d in zip(value, default)]
    return value


def merge_config(user: dict) -> dict:
    """Defaults overlaid with ``user``; unknown keys raise :class:`ConfigError`."""
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a table")
            for sub, v in value.items():
                if sub not in cfg[key]:
                    raise ConfigError(f"unknown config key '{key}.{sub}'")
                cfg[key][sub] = _coerce(v, DEFAULTS[key][sub], f"{key}.{sub}")
        else:
            cfg[key] = _coerce(value, DEFAULTS[key], key)
    return cfg


def load_config(path) -> dict:
    if path is None:
        return merge_config({})
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return merge_config(user)


def _set(cfg, dotted, value):
    if value is None:
        return
    *head, last = dotted.split(".")
    node = cfg
    for h in head:
        node = node[h]
    default = DEFAULTS
    for h in head:
        default = default[h]
    node[last] = _coerce(value, default[last], dotted)


def model_params(cfg) -> model.ModelParams:
    try:
        return model.ModelParams(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def sampling_config(cfg) -> dataset.SamplingConfig:
    s = cfg["sampling"]
    try:
        return dataset.SamplingConfig(
            n_samples=s["n_samples"], amplitude_range=tuple(s["amplitude_range"]),
            v0_range=tuple(s["v0_range"]), stop_time_mean=s["stop_time_mean"],
            stop_time_shift=s["stop_time_shift"], rng_seed=cfg["rng_seed"])
    except ValueError as exc:
        raise ConfigError(f"sampling: {exc}") from exc


def _hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_dataset(path) -> dataset.Dataset:
    if path is None:
        raise ConfigError("an input dataset is required (--input)")
    if not Path(path).exists():
        raise ConfigError(f"input dataset {path} does not exist")
    try:
        return dataset.load(path)
    except dataset.DatasetFormatError as exc:
        raise ConfigError(str(exc)) from exc


class Run:
    """Output directory, timing and manifest of one command."""

    def __init__(self, command, cfg, inputs=()):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {str(p): _hash(p) for p in inputs if p is not None}
        self.outputs: list[str] = []
        self.results: dict = {}
        self.t0 = time.perf_counter()

    def path(self, name) -> Path:
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def finish(self):
        eqfree.write_manifest(self.out / f"{self.command}.manifest.json", {
            "command": self.command,
            "version": __version__,
            "backend": BACKEND,
            "config": self.cfg,
            "rng_seed": self.cfg["rng_seed"],
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": self.results,
            "wall_time_s": time.perf_counter() - self.t0,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        })


def _threads(cfg):
    return cfg["threads"] or dataset.default_threads()


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(x if isinstance(x, str) else
                              (str(x) if isinstance(x, (int, np.integer)) else f"{x:.17g}")
                              for x in r) + "\n")


# commands

def cmd_simulate(cfg, args):
    p = model_params(cfg)
    s = cfg["simulate"]
    if not (s["t_end"] > 0 and s["dt"] > 0):
        raise ConfigError("simulate: t_end and dt must be positive")
    run = Run("simulate", cfg)
    times = np.arange(0.0, s["t_end"] + 0.5 * s["dt"], s["dt"])
    states = model.trajectory(dataset.initial_state(p, s["amplitude"]), times, p)
    H = np.array([model.headways(st, p) for st in states])
    sig = model.sigma(H)
    _write_rows(run.path("headways.csv"), ["t"] + [f"u{n + 1}" for n in range(p.n_cars)],
                [[t, *h] for t, h in zip(times, H)])
    _write_rows(run.path("sigma.csv"), ["t", "sigma"], zip(times, sig))
    run.results = {"final_sigma": float(sig[-1])}
    run.finish()


def cmd_generate(cfg, args):
    p, sc = model_params(cfg), sampling_config(cfg)
    run = Run("generate", cfg)
    data = dataset.generate(p, sc, threads=_threads(cfg))
    out = run.path(args.output or "dataset.csv")
    dataset.save(data, out)
    run.outputs.append(str(out.with_suffix(".json")))
    run.results = {"n_rows": len(data)}
    run.finish()


def cmd_align(cfg, args):
    data = _load_dataset(args.input)
    run = Run("align", cfg, [args.input])
    try:
        aligned = dataset.align_all(data, cfg["align"]["anchor_index"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = run.path(args.output or "aligned.csv")
    dataset.save(aligned, out)
    run.finish()


def _embed(cfg, data, dimension=None):
    o = cfg["dmap"]
    return dmap.embed(data, epsilon=o["epsilon"], max_candidates=o["max_candidates"],
                      threshold=o["threshold"], fit_epsilon=o["fit_epsilon"],
                      dimension=dimension if dimension is not None else o["dimension"])


def cmd_downsample(cfg, args):
    data = _load_dataset(args.input)
    o = cfg["downsample"]
    run = Run("downsample", cfg, [args.input])
    dm, _ = _embed(cfg, data, dimension=o["dimension"])
    try:
        if o["dimension"] == 1:
            sub = dataset.downsample_1d(data, dm.eigenvectors[:, 0], o["target"])
        elif o["dimension"] == 2:
            sub = dataset.downsample_2d(data, dm.eigenvectors, o["radial_target"], o["target"])
        else:
            raise ConfigError("downsample.dimension must be 1 or 2")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = run.path(args.output or "downsampled.csv")
    dataset.save(sub, out)
    run.results = {"n_rows": len(sub)}
    run.finish()


def cmd_embed(cfg, args):
    data = _load_dataset(args.input)
    run = Run("embed", cfg, [args.input])
    dm, rep = _embed(cfg, data)
    dmap.save(dm, rep, run.path(args.output or "embedding.csv"))
    _write_rows(run.path("selection.csv"), ["j", "r_j", "selected"],
                [[j + 1, r, int(j + 1 in rep.selected)] for j, r in enumerate(rep.residuals)])
    run.results = {"dimension": rep.dim, "selected": list(rep.selected),
                   "epsilon": dm.epsilon, "residuals": rep.residuals.tolist()}
    run.finish()


def _operators(cfg, data, dimension=None):
    o = cfg["operators"]
    dm, _ = _embed(cfg, data, dimension)
    settings = operators.LiftSettings(tol=o["tol"], max_evaluations=o["max_evaluations"],
                                      warn_threshold=o["warn_threshold"])
    try:
        return operators.OperatorPair(dm, data, o["lift_k"], settings)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_validate_ops(cfg, args):
    data = _load_dataset(args.input)
    run = Run("validate-ops", cfg, [args.input])
    ops = _operators(cfg, data)
    loo = operators.validate_restriction_loo(data, ops.dmap, threads=_threads(cfg))
    loo.write_csv(run.path("restriction_loo.csv"))
    n = cfg["operators"]["lift_targets"]
    targets = ops.embedding if not n else ops.embedding[:n]
    lift_rep, results = operators.validate_lift_identity(ops, targets)
    lift_rep.write_csv(run.path("lift_identity.csv"))
    run.results = {
        "dimension": ops.dim, "lift_k": ops.lift_k,
        "restriction_mean_rel_error": loo.mean_rel, "restriction_max_abs_error": loo.max_abs,
        "lift_mean_rel_error": lift_rep.mean_rel,
        "lift_degraded": int(sum(r.degraded for r in results)),
    }
    run.finish()


def continuation_config(cfg, dimension) -> eqfree.ContinuationConfig:
    c = cfg["continuation"]
    try:
        return eqfree.ContinuationConfig(
            step_size=c["step_size"],
            newton_tol=c["newton_tol"] if c["newton_tol"] is not None
            else MACRO_NEWTON_TOL[dimension],
            newton_max_iter=c["newton_max_iter"],
            fd_step=c["fd_step"] if c["fd_step"] is not None else MACRO_FD_STEP[dimension],
            fd_step_period=c["fd_step_period"], max_steps=c["max_steps"], nu=c["nu"],
            section_direction=tuple(c["section_direction"]), v0_bounds=tuple(c["v0_bounds"]),
            sigma_min=c["sigma_min"])
    except ValueError as exc:
        raise ConfigError(f"continuation: {exc}") from exc


def cmd_continue_macro(cfg, args):
    data = _load_dataset(args.input)
    dim = cfg["continuation"]["dimension"]
    if dim not in (1, 2):
        raise ConfigError("continuation.dimension must be 1 or 2")
    if (dim == 1) != data.aligned:
        raise ConfigError("dimension 1 needs an aligned dataset, dimension 2 an unaligned one")
    run = Run("continue-macro", cfg, [args.input])
    ops = _operators(cfg, data, dimension=dim)
    c = cfg["coarse"]
    try:
        stepper = eqfree.CoarseStepperConfig(ops, model_params(cfg), c["t_skip"], c["delta"],
                                             c["window"])
    except ValueError as exc:
        raise ConfigError(f"coarse: {exc}") from exc
    cont = continuation_config(cfg, dim)
    v0 = cfg["continuation"]["v0_start"]
    if dim == 1:
        branch = eqfree.fixed_point_branch(stepper, cont, v0)
        eqfree.write_branch_csv(branch, run.path("macro_branch.csv"), ["phi1"])
    else:
        branch = eqfree.periodic_orbit_branch(stepper, cont, v0)
        eqfree.write_branch_csv(branch, run.path("macro_branch.csv"), ["r", "T"], periodic=True)
    run.results = eqfree.branch_summary(branch)
    run.finish()


def cmd_continue_micro(cfg, args):
    p = model_params(cfg)
    m = cfg["micro"]
    run = Run("continue-micro", cfg)
    settings = ContinuationSettings(step_size=m["step_size"], newton_tol=m["newton_tol"],
                                    max_steps=m["max_steps"], v0_bounds=tuple(m["v0_bounds"]))
    branch = twcont.micro_branch(p, settings, v0_start=m["v0_start"], n_grid=m["n_grid"],
                                 stability=m["stability"], v0_bounds=tuple(m["v0_bounds"]))
    rows = []
    for i, pt in enumerate(branch.points):
        w = pt.extra["wave"]
        rows.append([i, pt.v0, w.c, w.d, pt.sigma,
                     "" if pt.stable is None else int(pt.stable), pt.newton_residual,
                     int(pt.fold)])
    _write_rows(run.path("micro_branch.csv"),
                ["index", "v0", "c", "d", "sigma", "stable", "residual", "fold"], rows)
    run.results = eqfree.branch_summary(branch)
    run.finish()


def cmd_floquet(cfg, args):
    p = model_params(cfg)
    f = cfg["floquet"]
    run = Run("floquet", cfg)
    v0 = f["v0"] if f["v0"] is not None else p.v0
    q = p.with_v0(v0)
    wave = twcont.solve_wave(twcont.wave_from_simulation(q), q)
    rep = twcont.floquet_spectrum(wave, q, zero_tol=f["zero_tol"])
    _write_rows(run.path("floquet.csv"), ["re", "im", "abs_multiplier"],
                [[e.real, e.imag, abs(mu)] for e, mu in zip(rep.exponents, rep.multipliers)])
    run.results = {"v0": v0, "c": wave.c, "sigma": twcont.wave_sigma(wave, p.n_cars),
                   "zero_multiplicity": rep.zero_multiplicity, "gap": rep.gap,
                   "slow_exponent": rep.slow_exponent, "period": rep.period,
                   "stable": twcont.is_stable(rep)}
    run.finish()


COMMANDS = {
    "simulate": (cmd_simulate, "headway waterfall and sigma(t) of one run"),
    "generate": (cmd_generate, "sample a dataset of end-state headway profiles"),
    "align": (cmd_align, "rotate every profile so its peak sits at the anchor"),
    "downsample": (cmd_downsample, "thin a dataset uniformly in its embedding"),
    "embed": (cmd_embed, "diffusion map and eigenvector selection"),
    "validate-ops": (cmd_validate_ops, "leave-one-out restriction and lifting tests"),
    "continue-macro": (cmd_continue_macro, "coarse fixed points (D=1) or periodic orbits (D=2)"),
    "continue-micro": (cmd_continue_micro, "traveling-wave branch of the ring system"),
    "floquet": (cmd_floquet, "Floquet exponents of one traveling wave"),
}

# (flag, config key, type)
FLAGS = {
    "simulate": [("--amplitude", "simulate.amplitude", float), ("--t-end", "simulate.t_end", float),
                 ("--dt", "simulate.dt", float), ("--v0", "model.v0", float)],
    "generate": [("--n-samples", "sampling.n_samples", int), ("--seed", "rng_seed", int)],
    "align": [("--anchor", "align.anchor_index", int)],
    "downsample": [("--dimension", "downsample.dimension", int),
                   ("--target", "downsample.target", int),
                   ("--radial-target", "downsample.radial_target", int)],
    "embed": [("--threshold", "dmap.threshold", float), ("--epsilon", "dmap.epsilon", float),
              ("--dimension", "dmap.dimension", int)],
    "validate-ops": [("--dimension", "dmap.dimension", int),
                     ("--lift-k", "operators.lift_k", int),
                     ("--lift-targets", "operators.lift_targets", int)],
    "continue-macro": [("--dimension", "continuation.dimension", int),
                       ("--v0-start", "continuation.v0_start", float),
                       ("--step-size", "continuation.step_size", float)],
    "continue-micro": [("--v0-start", "micro.v0_start", float),
                       ("--step-size", "micro.step_size", float),
                       ("--n-cars", "model.n_cars", int),
                       ("--safety-distance", "model.safety_distance", float)],
    "floquet": [("--v0", "floquet.v0", float), ("--n-cars", "model.n_cars", int),
                ("--safety-distance", "model.safety_distance", float)],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqfreedm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--output-dir", help="directory for outputs")
        sp.add_argument("--threads", type=int, help="worker threads (default: EQFREE_THREADS)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name not in ("simulate", "generate", "continue-micro", "floquet"):
            sp.add_argument("--input", "-i", help="input dataset CSV")
        if name in ("generate", "align", "downsample", "embed"):
            sp.add_argument("--output", "-o", help="output file name")
        for flag, key, typ in FLAGS.get(name, []):
            sp.add_argument(flag, type=typ, dest=key.replace(".", "__"), help=key)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        _set(cfg, "output_dir", args.output_dir)
        _set(cfg, "threads", args.threads)
        for _, key, _typ in FLAGS.get(args.command, []):
            _set(cfg, key, getattr(args, key.replace(".", "__")))
        if cfg["threads"]:
            os.environ.setdefault("EQFREE_THREADS", str(cfg["threads"]))
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"eqfreedm: config error: {exc}", file=sys.stderr)
        return 2
    except (NewtonFailure, model.IntegrationError, operators.OutOfSupportError,
            dmap.DegenerateDataError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"eqfreedm: numerical failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
