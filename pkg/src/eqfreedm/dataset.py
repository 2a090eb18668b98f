"""Sampled end-state headway profiles of the ring system, and their files.

Each row starts from a sinusoidally perturbed free-flow state with random
amplitude ``A`` and parameter ``v0`` and is integrated to a random stopping
time. Only headways are recorded.

Random numbers come from one Philox stream per row keyed by
``SeedSequence(rng_seed, spawn_key=(row,))``: a row's draws depend only on
the seed and its index, so generation order and threading do not matter.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model
from .model import ModelParams

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed, truncated or inconsistent dataset file."""


@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 1000
    amplitude_range: tuple[float, float] = (0.0, 4.5)
    v0_range: tuple[float, float] = (0.96, 1.1)
    stop_time_mean: float = 700.0
    stop_time_shift: float = 200.0
    rng_seed: int = 20211220

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        for name in ("amplitude_range", "v0_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must satisfy lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not self.stop_time_mean > 0:
            raise ValueError("stop_time_mean must be positive")
        if self.stop_time_shift < 0:
            raise ValueError("stop_time_shift must be nonnegative")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")


@dataclass
class Dataset:
    profiles: np.ndarray  # (M, N) headways
    amplitude: np.ndarray
    v0: np.ndarray
    t_stop: np.ndarray
    params: ModelParams
    config: SamplingConfig
    aligned: bool = False
    anchor_index: int = 10
    row_ids: np.ndarray = field(default=None)  # rows of the originally generated set

    def __post_init__(self):
        self.profiles = np.atleast_2d(np.asarray(self.profiles, dtype=float))
        M = self.profiles.shape[0]
        if self.profiles.shape[1] != self.params.n_cars:
            raise ValueError("profile length does not match params.n_cars")
        if self.row_ids is None:
            self.row_ids = np.arange(M)
        for name in ("amplitude", "v0", "t_stop", "row_ids"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (M,):
                raise ValueError(f"{name} must have one entry per row")
            setattr(self, name, arr)

    def __len__(self):
        return self.profiles.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return model.sigma(self.profiles)

    @property
    def peak_index(self) -> np.ndarray:
        """0-based index of each row's largest headway."""
        return np.argmax(self.profiles, axis=1)

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows, dtype=int)
        return dataclasses.replace(
            self, profiles=self.profiles[rows].copy(), amplitude=self.amplitude[rows],
            v0=self.v0[rows], t_stop=self.t_stop[rows], row_ids=self.row_ids[rows])

    def equals(self, other: Dataset) -> bool:
        return (self.params == other.params and self.config == other.config
                and self.aligned == other.aligned and self.anchor_index == other.anchor_index
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("profiles", "amplitude", "v0", "t_stop", "row_ids")))


def row_draws(config: SamplingConfig, row: int) -> tuple[float, float, float]:
    """(A, v0, t_stop) for one row."""
    ss = np.random.SeedSequence(int(config.rng_seed), spawn_key=(row,))
    u = np.random.Generator(np.random.Philox(ss)).random(3)
    a_lo, a_hi = config.amplitude_range
    v_lo, v_hi = config.v0_range
    A = a_lo + (a_hi - a_lo) * u[0]
    v0 = v_lo + (v_hi - v_lo) * u[1]
    t_stop = config.stop_time_shift - config.stop_time_mean * math.log1p(-u[2])
    return float(A), float(v0), float(t_stop)


def initial_state(params: ModelParams, amplitude: float) -> model.MicroState:
    N, L = params.n_cars, params.road_length
    n = np.arange(1, N + 1)
    x = L * (n - 1) / N + amplitude * np.sin(2 * np.pi * n / N)
    y = np.full(N, model.optimal_velocity(L / N, params))
    return model.MicroState(np.mod(x, L), y)


def _one_row(params, config, row):
    A, v0, t_stop = row_draws(config, row)
    p = params.with_v0(v0)
    try:
        end = model.evolve(initial_state(p, A), t_stop, p)
    except model.IntegrationError as exc:
        raise model.IntegrationError(
            f"row {row} (A={A!r}, v0={v0!r}, t_stop={t_stop!r}): {exc}", exc.t_reached) from exc
    return model.headways(end, p), A, v0, t_stop


def default_threads() -> int:
    return int(os.environ.get("EQFREE_THREADS", "0")) or (os.cpu_count() or 1)


def generate(params: ModelParams, config: SamplingConfig, threads: int | None = None,
             progress=None) -> Dataset:
    """Simulate ``config.n_samples`` trajectories and collect end-state headways."""
    M = config.n_samples
    threads = threads or default_threads()
    out = np.empty((M, params.n_cars))
    meta = np.empty((M, 3))

    def work(row):
        u, *m = _one_row(params, config, row)
        out[row] = u
        meta[row] = m
        if progress is not None:
            progress(row)

    if threads == 1:
        for row in range(M):
            work(row)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(M)))
    return Dataset(out, meta[:, 0], meta[:, 1], meta[:, 2], params, config)


def align_all(data: Dataset, anchor_index: int = 10) -> Dataset:
    """Rotate every row so its largest headway sits at ``anchor_index`` (1-based)."""
    if data.aligned:
        raise ValueError("dataset is already aligned")
    rows = np.array([model.align(u, anchor_index) for u in data.profiles])
    return dataclasses.replace(data, profiles=rows, aligned=True, anchor_index=anchor_index)


def uniform_rank_selection(values, target: int) -> np.ndarray:
    """Row indices at uniformly spaced ranks of ``values`` (ties by index)."""
    values = np.asarray(values, dtype=float)
    M = len(values)
    if target < 2:
        raise ValueError("target must be at least 2")
    if target > M:
        raise ValueError(f"target={target} exceeds the number of rows {M}")
    order = np.argsort(values, kind="stable")
    wanted = np.floor(np.arange(target) * (M - 1) / (target - 1) + 0.5).astype(int)
    used: set[int] = set()
    for r in map(int, wanted):
        if r in used:  # backfill with the nearest unused rank, lower rank first
            r = min((k for k in range(M) if k not in used), key=lambda k: (abs(k - r), k))
        used.add(r)
    return order[np.array(sorted(used))]


def downsample_1d(data: Dataset, embedding, target: int) -> Dataset:
    embedding = np.asarray(embedding, dtype=float)
    if embedding.shape != (len(data),):
        raise ValueError("embedding must have one value per row")
    return data.subset(uniform_rank_selection(embedding, target))


def polar(embedding: np.ndarray):
    """Radius and angle in [0, 2 pi) about the centroid of a planar embedding."""
    e = np.asarray(embedding, dtype=float)
    d = e - e.mean(axis=0)
    return np.hypot(d[:, 0], d[:, 1]), np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)


def downsample_2d(data: Dataset, embedding, radial_target: int, final_target: int) -> Dataset:
    embedding = np.asarray(embedding, dtype=float)
    if embedding.shape != (len(data), 2):
        raise ValueError("embedding must be an (M, 2) array")
    if not final_target <= radial_target <= len(data):
        raise ValueError("need final_target <= radial_target <= M")
    radius, angle = polar(embedding)
    first = uniform_rank_selection(radius, radial_target)
    second = uniform_rank_selection(angle[first], final_target)
    return data.subset(first[second])


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save(data: Dataset, path) -> None:
    """Write ``path`` (CSV headways) and ``path`` with a ``.json`` suffix."""
    path = Path(path)
    np.savetxt(path, data.profiles, fmt="%.17g", delimiter=",")
    p, c = data.params, data.config
    meta = {
        "format_version": FORMAT_VERSION,
        "n_cars": p.n_cars,
        "road_length": p.road_length,
        "inv_tau": p.inv_tau,
        "safety_distance": p.safety_distance,
        "v0_range": list(c.v0_range),
        "amplitude_range": list(c.amplitude_range),
        "stop_time_mean": c.stop_time_mean,
        "stop_time_shift": c.stop_time_shift,
        "rng_seed": int(c.rng_seed),
        "n_samples": c.n_samples,
        "n_rows": len(data),
        "aligned": data.aligned,
        "anchor_index": data.anchor_index,
        "per_row": [
            {"A": float(a), "v0": float(v), "t_stop": float(t), "row_id": int(r)}
            for a, v, t, r in zip(data.amplitude, data.v0, data.t_stop, data.row_ids)
        ],
    }
    _sidecar(path).write_text(json.dumps(meta, indent=1))


def load(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read metadata {_sidecar(path)}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"format version {meta.get('format_version')!r} != {FORMAT_VERSION}")
    try:
        params = ModelParams(n_cars=int(meta["n_cars"]), road_length=meta["road_length"],
                             inv_tau=meta["inv_tau"], safety_distance=meta["safety_distance"])
        config = SamplingConfig(
            n_samples=int(meta["n_samples"]), amplitude_range=tuple(meta["amplitude_range"]),
            v0_range=tuple(meta["v0_range"]), stop_time_mean=meta["stop_time_mean"],
            stop_time_shift=meta["stop_time_shift"], rng_seed=int(meta["rng_seed"]))
        rows = meta["per_row"]
        n_rows = int(meta["n_rows"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad metadata: {exc}") from exc
    try:
        text = path.read_text()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        profiles = np.array([[float(v) for v in ln.split(",")] for ln in lines], ndmin=2)
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"cannot parse {path}: {exc}") from exc
    if profiles.ndim != 2 or profiles.shape[0] != n_rows or len(rows) != n_rows:
        raise DatasetFormatError(
            f"{path}: expected {n_rows} rows, found {profiles.shape[0] if profiles.size else 0}")
    if profiles.shape[1] != params.n_cars:
        raise DatasetFormatError(
            f"{path}: rows have {profiles.shape[1]} columns but n_cars={params.n_cars}")
    return Dataset(
        profiles,
        np.array([r["A"] for r in rows]), np.array([r["v0"] for r in rows]),
        np.array([r["t_stop"] for r in rows]), params, config,
        aligned=bool(meta["aligned"]), anchor_index=int(meta.get("anchor_index", 10)),
        row_ids=np.array([r["row_id"] for r in rows], dtype=int))
