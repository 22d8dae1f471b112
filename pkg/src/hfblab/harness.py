"""Experiment configuration, orchestration and persistence.

A run is described by a JSON document (see :data:`CONFIG_SCHEMA`); missing
fields take the values in :data:`DEFAULTS`. ``run_experiment`` validates the
config and every guard it can check up front, executes the pipeline for
the requested kind, and writes ``series.csv``, ``summary.json`` and
``manifest.json`` (plus snapshot binaries) into the output directory.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import multiprocessing
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .dispersive import (ProductFactors, decay_slope, dispersive_ratio_series, gaussian_mixture,
                         hermite_family, ratio_spread)
from .duhamel import random_forcing, resolvent_identity_residual
from .dynamics import evolve, max_stable_dt, rhs_lambda
from .fields import (Field, Kernel, gaussian_field, gaussian_pair_kernel, pure_condensate,
                     state_from_pair, write_snapshot)
from .grid import make_grid
from .norms import (admissible_pairs, bourgain_partition, dual_strichartz, grad_grad_norm, mixed_sobolev,
                    partition_is_maximal, restricted_strichartz, spacetime_strichartz_norm)
from .observables import (ObservableSeries, cauchy_schwarz_defect, density, morawetz_action,
                          morawetz_rate_terms, morawetz_weight, particle_number, total_energy)
from .potential import PotentialSpec, check_resolution

KINDS = ("evolve", "conservation", "morawetz", "strichartz", "dispersive",
         "duhamel-identities", "sobolev-tracking")
OUT_ENV = "HFBLAB_OUT"

DEFAULTS = {
    "kind": "evolve",
    "seed": 0,
    "out": "run",
    "snapshots": True,
    "grid": {"dim": 1, "n": 64, "L": 16.0},
    "potential": {"profile": "bump", "amplitude": 1.0, "radius": 3.0, "beta": 0.5, "N": 8.0},
    "data": {"family": "condensate+pair", "width": 1.5, "momentum": 0.5, "center": 0.0,
             "pair_amp": 0.3, "pair_rel_width": 0.8, "pair_cm_width": 1.5},
    "time": {"T": 0.1, "dt": 1e-3, "cadence": 10},
    "norms": {"p0": 8.0 / 3.0, "count": 8, "sobolev_eps": 0.1, "bourgain_eps": None},
    "sweep": {"N": [4.0, 8.0, 16.0]},
    "morawetz": {"eps": None},
    "dispersive": {"family": "gaussian", "t_min": 1.0, "t_max": 10.0, "count": 9,
                   "width": 2.5, "terms": 1, "sup_mode": "dense", "stride": 4},
    "duhamel": {"T": 0.5, "samples": 101, "modes": 3},
    "guards": {"tol_psd": 1e-8, "wrap_tol": 1e-3, "cs_tol": 1e-9,
               "number_tol": 1e-7, "energy_tol": 1e-5, "sweep_factor": 2.0},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nullable_pos = {"anyOf": [{"type": "null"}, _pos]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(KINDS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "out": {"type": "string"},
        "snapshots": {"type": "boolean"},
        "grid": {"type": "object", "additionalProperties": False, "properties": {
            "dim": {"enum": [1, 2, 3]},
            "n": {"type": "integer", "minimum": 4, "multipleOf": 2},
            "L": _pos}},
        "potential": {"type": "object", "additionalProperties": False, "properties": {
            "profile": {"type": "string"}, "amplitude": {"type": "number", "minimum": 0},
            "radius": _pos, "beta": {"type": "number", "minimum": 0, "maximum": 1},
            "N": {"type": "number", "minimum": 1}}},
        "data": {"type": "object", "additionalProperties": False, "properties": {
            "family": {"enum": ["condensate", "condensate+pair"]},
            "width": _pos, "momentum": {"anyOf": [_num, {"type": "array", "items": _num}]},
            "center": {"anyOf": [_num, {"type": "array", "items": _num}]},
            "pair_amp": {"type": "number", "minimum": 0}, "pair_rel_width": _pos, "pair_cm_width": _pos}},
        "time": {"type": "object", "additionalProperties": False, "properties": {
            "T": {"type": "number", "minimum": 0}, "dt": _pos,
            "cadence": {"type": "integer", "minimum": 1}}},
        "norms": {"type": "object", "additionalProperties": False, "properties": {
            "p0": {"type": "number", "minimum": 2}, "count": {"type": "integer", "minimum": 2},
            "sobolev_eps": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
            "bourgain_eps": _nullable_pos}},
        "sweep": {"type": "object", "additionalProperties": False, "properties": {
            "N": {"type": "array", "items": {"type": "number", "minimum": 1}, "minItems": 1}}},
        "morawetz": {"type": "object", "additionalProperties": False, "properties": {"eps": _nullable_pos}},
        "dispersive": {"type": "object", "additionalProperties": False, "properties": {
            "family": {"enum": ["gaussian", "mixture"]}, "t_min": _pos, "t_max": _pos,
            "count": {"type": "integer", "minimum": 2}, "width": _pos,
            "terms": {"type": "integer", "minimum": 1}, "sup_mode": {"enum": ["dense", "sampled"]},
            "stride": {"type": "integer", "minimum": 1}}},
        "duhamel": {"type": "object", "additionalProperties": False, "properties": {
            "T": _pos, "samples": {"type": "integer", "minimum": 3}, "modes": {"type": "integer", "minimum": 1}}},
        "guards": {"type": "object", "additionalProperties": False, "properties": {
            k: _pos for k in DEFAULTS["guards"]}},
    },
}


class ConfigError(ValueError):
    pass


class GuardFailure(RuntimeError):
    """A module guard stopped the run; ``guard`` names it."""

    def __init__(self, guard: str, message: str):
        super().__init__(f"{guard}: {message}")
        self.guard = guard


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` holds the merged JSON document."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"{path}: {e.message}") from None
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def __getattr__(self, name):
        raw = self.__dict__.get("raw", {})
        if name in raw:
            return raw[name]
        raise AttributeError(name)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def grid(self, dim=None):
        g = self.raw["grid"]
        return make_grid(dim or g["dim"], g["n"], g["L"])

    def potential(self, N=None) -> PotentialSpec:
        p = self.raw["potential"]
        return PotentialSpec(profile=p["profile"], amplitude=p["amplitude"], beta=p["beta"],
                             N=p["N"] if N is None else N, radius=p["radius"])

    def validate(self):
        """Check every guard that does not need a computation."""
        r = self.raw
        try:
            g = self.grid()
        except ValueError as e:
            raise ConfigError(f"grid: {e}") from None
        kind = r["kind"]
        if kind == "dispersive":
            d = r["dispersive"]
            if d["t_max"] <= d["t_min"]:
                raise ConfigError("dispersive: t_max must exceed t_min")
            return
        Ns = r["sweep"]["N"] if kind == "sobolev-tracking" else [r["potential"]["N"]]
        for N in Ns:
            try:
                check_resolution(g, self.potential(N))
            except ValueError as e:
                raise ConfigError(f"potential: {e}") from None
        if kind == "duhamel-identities":
            return
        tm = r["time"]
        if tm["dt"] > max_stable_dt(g):
            raise ConfigError(f"time.dt={tm['dt']:g} exceeds the stability bound {max_stable_dt(g):g}")
        steps = tm["T"] / tm["dt"]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("time.T must be an integer multiple of time.dt")
        if kind in ("conservation", "strichartz", "morawetz", "sobolev-tracking") and round(steps) < 2 * tm["cadence"]:
            raise ConfigError("need at least two recorded intervals (T >= 2 * cadence * dt)")


# ---------------------------------------------------------------------------
# initial data

def initial_state(cfg: ExperimentConfig, N=None):
    """Condensate (optionally with a pair kernel) rescaled to unit trace."""
    g = cfg.grid()
    dc = cfg.raw["data"]
    pc = cfg.raw["potential"]
    N = pc["N"] if N is None else N
    phi = gaussian_field(g, dc["center"], dc["width"], dc["momentum"])
    if dc["family"] == "condensate" or dc["pair_amp"] == 0:
        return pure_condensate(phi, N, pc["beta"])
    k = gaussian_pair_kernel(g, dc["pair_amp"], dc["pair_rel_width"], dc["pair_cm_width"], dc["center"])
    s = state_from_pair(phi, k, N, pc["beta"])
    extra = particle_number(s) - 1.0
    if extra >= 1.0:
        raise GuardFailure("pair-trace", f"pair part carries trace {extra:g} >= 1")
    phi = Field(g, phi.data * math.sqrt(1.0 - extra))
    return state_from_pair(phi, k, N, pc["beta"])


# ---------------------------------------------------------------------------
# pipelines

def _snapshot_dt(cfg):
    return cfg.raw["time"]["dt"] * cfg.raw["time"]["cadence"]


def _run_traj(cfg, hooks, N=None, keep_states=True):
    s0 = initial_state(cfg, N)
    p = cfg.potential(N)
    tm = cfg.raw["time"]
    return s0, p, evolve(s0, p, tm["T"], tm["dt"], tm["cadence"], hooks=hooks,
                         tol_psd=cfg.raw["guards"]["tol_psd"], keep_states=keep_states)


def _cs_hook(s):
    return max(cauchy_schwarz_defect(s))


def _evolve_like(cfg, series, summary, strict_energy):
    gd = cfg.raw["guards"]
    box = {}

    def energy(s):
        return total_energy(s, box["p"])

    box["p"] = cfg.potential()
    hooks = {"number": particle_number, "energy": energy, "cs_defect": _cs_hook}
    s0, p, traj = _run_traj(cfg, hooks)
    for name, recs in traj.observations.items():
        for t, v in recs:
            series.add(name, t, v)
    num = np.array([v for _, v in traj.observations["number"]])
    en = np.array([v for _, v in traj.observations["energy"]])
    cs = np.array([v for _, v in traj.observations["cs_defect"]])
    ndrift = float(np.max(np.abs(num - num[0])))
    edrift = float(np.max(np.abs(en - en[0])) / max(abs(en[0]), 1e-300))
    summary["metrics"].update(number_drift=ndrift, energy_rel_drift=edrift, cs_defect_max=float(cs.max()))
    summary["suites"]["psd_and_symmetry"] = True
    summary["suites"]["pointwise_bounds"] = bool(cs.max() <= gd["cs_tol"])
    if p.is_zero() or strict_energy:
        summary["suites"]["number_conservation"] = bool(ndrift <= gd["number_tol"])
    if strict_energy:
        summary["suites"]["energy_conservation"] = bool(edrift <= gd["energy_tol"])
    if p.is_zero():
        l2 = [s.lam.norm() for s in traj.states]
        summary["suites"]["unitarity"] = bool(np.ptp(l2) <= 1e-10 * max(l2))
    return traj


def _pipe_evolve(cfg, series, summary, outdir):
    return _evolve_like(cfg, series, summary, False)


def _pipe_conservation(cfg, series, summary, outdir):
    return _evolve_like(cfg, series, summary, True)


def _pipe_morawetz(cfg, series, summary, outdir):
    g = cfg.grid()
    eps = cfg.raw["morawetz"]["eps"] or 2.0 * g.h
    Wt = morawetz_weight(g, eps)
    s0, p, traj = _run_traj(cfg, {"cs_defect": _cs_hook})
    st = traj.states
    M = np.array([morawetz_action(s, eps, Wt) for s in st])
    dts = _snapshot_dt(cfg)
    rows = []
    for j in range(1, len(st) - 1):
        terms = morawetz_rate_terms(st[j], p, eps, Wt)
        dM = (M[j + 1] - M[j - 1]) / (2 * dts)
        rows.append((st[j].t, dM, terms))
        for name, v in zip(("term1", "term2", "term3", "term4"), terms):
            series.add(name, st[j].t, v)
        series.add("dM_dt", st[j].t, dM)
    for s, m in zip(st, M):
        series.add("morawetz_action", s.t, m)
    scale = max(abs(sum(r[2])) for r in rows)
    ident = max(abs(r[1] - sum(r[2])) / abs(sum(r[2])) for r in rows)
    t = np.array([s.t for s in st])
    rho2 = np.array([float(np.sum(density(s.gam) ** 2) * g.weight) for s in st])
    int_rho2 = float(np.trapezoid(rho2, t))
    summary["metrics"].update(eps=eps, identity_rel=ident, scale=scale, int_rho2=int_rho2,
                              dM_total=float(M[-1] - M[0]))
    cs_ok = max(v for _, v in traj.observations["cs_defect"]) <= cfg.raw["guards"]["cs_tol"]
    summary["suites"].update(identity=bool(ident <= 1e-3), pointwise_bounds=bool(cs_ok))
    if g.dim == 3:
        # the positivity lemmas and the 8 pi bound are three-dimensional statements
        summary["suites"].update(
            term1_nonneg=all(r[2][0] >= 0 for r in rows),
            term2_nonneg=all(r[2][1] >= 0 for r in rows),
            term2_plus_term4=all(r[2][1] + r[2][3] >= -1e-6 * scale for r in rows),
            term3_nonneg=all(r[2][2] >= -1e-6 * scale for r in rows),
            action_nondecreasing=bool(np.all(np.diff(M) >= -1e-6 * scale * dts)),
            rho_squared_bound=bool(int_rho2 <= (M[-1] - M[0]) / (8 * np.pi) * 1.05),
        )
    return traj


def _pipe_strichartz(cfg, series, summary, outdir):
    nc = cfg.raw["norms"]
    s0, p, traj = _run_traj(cfg, {"cs_defect": _cs_hook})
    lam = (traj.times, [s.lam for s in traj.states])
    res = restricted_strichartz(lam, nc["p0"], nc["count"])
    res2 = restricted_strichartz(lam, 2.0, nc["count"])
    l2 = {f: spacetime_strichartz_norm(lam, 2.0, 2.0, f) for f in ("plain-x", "plain-y", "sheared")}
    F = (traj.times, [Kernel(s.grid, rhs_lambda(s, p).data, "none", check=False) for s in traj.states])
    dpair = admissible_pairs(s0.grid.dim, nc["p0"], nc["count"])[-1]
    dval, dframe, dall = dual_strichartz(F, *dpair)
    rho = [Field(s.grid, density(s.gam)) for s in traj.states]
    beps = nc["bourgain_eps"]
    if beps is None:
        cum = float(np.trapezoid([np.sum(r.data.real ** 2) * r.grid.weight for r in rho], traj.times))
        # about six intervals for a roughly uniform density
        beps = 0.8 * math.sqrt(p.N) * cum ** 0.125
    parts = bourgain_partition(traj.times, rho, p.N, 0.25, beps)
    for s in traj.states:
        series.add("lambda_l2", s.t, s.lam.norm())
    summary["metrics"].update(restricted=res["value"], restricted_frame=res["frame"],
                              restricted_pair=[_jnum(x) for x in res["pair"]], restricted_p2=res2["value"],
                              l2l2=l2, dual=dval, dual_pair=[_jnum(x) for x in dpair], dual_frame=dframe, dual_all=dall,
                              bourgain_eps=beps, bourgain_count=len(parts),
                              admissible_sample=f"endpoints + {nc['count'] - 2} interior")
    spread = max(l2.values()) - min(l2.values())
    summary["suites"].update(
        frame_consistency=bool(spread <= 1e-12 * max(l2.values())),
        restricted_monotone_in_p0=bool(res["value"] <= res2["value"] * (1 + 1e-12)),
        bourgain_maximal=partition_is_maximal(traj.times, rho, p.N, beps, parts, 0.25),
    )
    return traj


def _jnum(x):
    return "inf" if np.isinf(x) else float(x)


def _dispersive_factors(cfg):
    g = cfg.grid()
    dc = cfg.raw["dispersive"]
    rng = np.random.default_rng(cfg.raw["seed"])
    if dc["family"] == "gaussian":
        g1 = make_grid(1, g.n, g.L)
        u = gaussian_field(g1, 0.0, dc["width"])
        return ProductFactors([(u, u) for _ in range(g.dim)]) if g.dim > 1 else [(u, u)]
    if g.dim == 1 or dc["terms"] > 1:
        vs = hermite_family(g, dc["terms"], dc["width"])
        us = [gaussian_mixture(g, rng, 3, (dc["width"], 1.5 * dc["width"]), dc["width"]) for _ in vs]
        return list(zip(us, vs))
    g1 = make_grid(1, g.n, g.L)
    ax = []
    for _ in range(g.dim):
        ax.append((gaussian_mixture(g1, rng, 3, (dc["width"], 1.5 * dc["width"]), dc["width"]),
                   hermite_family(g1, 1, dc["width"])[0]))
    return ProductFactors(ax)


def _pipe_dispersive(cfg, series, summary, outdir):
    dc = cfg.raw["dispersive"]
    fac = _dispersive_factors(cfg)
    ts = np.geomspace(dc["t_min"], dc["t_max"], dc["count"])
    try:
        ser = dispersive_ratio_series(fac, ts, dc["sup_mode"], dc["stride"], cfg.raw["guards"]["wrap_tol"])
    except RuntimeError as e:
        raise GuardFailure("wrap-around", str(e)) from None
    for t, ratio, wrap, sup in ser:
        series.add("ratio", t, ratio)
        series.add("wrap", t, wrap)
        series.add("fiber_sup", t, sup)
    d = cfg.raw["grid"]["dim"]
    slope = decay_slope(ser)
    spread = ratio_spread(ser)
    summary["metrics"].update(slope=slope, expected_slope=-0.5 * d, spread=spread,
                              empirical_constant=max(r[1] for r in ser),
                              sup_mode=dc["sup_mode"] + (" (lower bound)" if dc["sup_mode"] == "sampled" else ""),
                              decades=float(math.log10(dc["t_max"] / dc["t_min"])))
    summary["suites"].update(ratio_bounded=bool(spread <= 1.5))
    if dc["family"] == "gaussian":
        summary["suites"]["decay_exponent"] = bool(abs(slope + 0.5 * d) <= 0.1)
    return None


def _pipe_duhamel(cfg, series, summary, outdir):
    g = cfg.grid()
    if g.dim != 1:
        raise ConfigError("duhamel-identities runs at d = 1")
    p = cfg.potential()
    dh = cfg.raw["duhamel"]
    out = {}
    for tag, m in (("reference", dh["samples"]), ("doubled", 2 * dh["samples"] - 1)):
        times = np.linspace(0.0, dh["T"], m)
        F = random_forcing(g, times, np.random.default_rng(cfg.raw["seed"]), dh["modes"])
        out[tag] = resolvent_identity_residual(F, times, p, g)
        series.add("r1", m, out[tag][0])
        series.add("r2", m, out[tag][1])
        series.add("cross", m, out[tag][2])
    r1, r2, _ = out["reference"]
    q1, q2, _ = out["doubled"]
    summary["metrics"].update(r1=r1, r2=r2, r1_doubled=q1, r2_doubled=q2)
    summary["suites"].update(pot1=bool(r1 <= 1e-3), pot2=bool(r2 <= 1e-3),
                             cadence_shrink=bool(r1 >= 3 * q1 and r2 >= 3 * q2))
    return None


def _worker_init():
    # one BLAS thread per worker; the pool itself supplies the parallelism
    from threadpoolctl import threadpool_limits
    threadpool_limits(1)


def _sobolev_worker(args):
    raw, N = args
    cfg = ExperimentConfig(raw)
    s_half = 0.5 + cfg.raw["norms"]["sobolev_eps"]
    hooks = {"sobolev_half": lambda s: mixed_sobolev(s.lam, s_half),
             "sobolev_one": lambda s: grad_grad_norm(s.lam)}
    _, _, traj = _run_traj(cfg, hooks, N=N, keep_states=False)
    return N, traj.observations


def sobolev_tracking(cfg: ExperimentConfig, workers: int = 1):
    """Track both mixed Sobolev channels for every ``N`` in the sweep.

    Returns ``(series, table)`` where ``table[N]`` holds the sup over time
    of each channel.
    """
    series = ObservableSeries(meta={"kind": "sobolev-tracking"})
    jobs = [(cfg.raw, float(N)) for N in cfg.raw["sweep"]["N"]]
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx,
                                 initializer=_worker_init) as ex:
            results = list(ex.map(_sobolev_worker, jobs))
    else:
        results = [_sobolev_worker(j) for j in jobs]
    table = {}
    for N, obs in sorted(results):
        tag = f"N={N:g}"
        row = {}
        for ch, recs in obs.items():
            run = -np.inf
            for t, v in recs:
                run = max(run, v)
                series.add(f"{ch}[{tag}]", t, v)
                series.add(f"{ch}_sup[{tag}]", t, run)
            row[ch] = float(run)
        table[tag] = row
    return series, table


def _pipe_sobolev(cfg, series, summary, outdir):
    s, table = sobolev_tracking(cfg, summary.get("_workers", 1))
    series.channels.update(s.channels)
    half = [r["sobolev_half"] for r in table.values()]
    fac = max(half) / min(half)
    summary["metrics"].update(sup_table=table, half_channel_factor=fac)
    summary["suites"]["uniform_in_N"] = bool(fac <= cfg.raw["guards"]["sweep_factor"])
    return None


PIPELINES = {
    "evolve": _pipe_evolve, "conservation": _pipe_conservation, "morawetz": _pipe_morawetz,
    "strichartz": _pipe_strichartz, "dispersive": _pipe_dispersive,
    "duhamel-identities": _pipe_duhamel, "sobolev-tracking": _pipe_sobolev,
}


# ---------------------------------------------------------------------------
# persistence

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_out(out: str) -> Path:
    p = Path(out)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _guard_name(e: Exception) -> str:
    return getattr(e, "guard", type(e).__name__)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Execute ``cfg`` and persist its outputs; returns the summary dict.

    Module guard failures are re-raised as :class:`GuardFailure` carrying
    the guard name; nothing but the manifest stub is written in that case.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.from_dict(cfg)
    outdir = resolve_out(cfg.raw["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    series = ObservableSeries(meta={"kind": cfg.kind})
    summary = {"kind": cfg.kind, "suites": {}, "metrics": {}, "_workers": workers}
    t0 = time.perf_counter()
    try:
        traj = PIPELINES[cfg.kind](cfg, series, summary, outdir)
    except (GuardFailure, ConfigError):
        raise
    except (ValueError, RuntimeError) as e:
        raise GuardFailure(_guard_name(e), str(e)) from e
    wall = time.perf_counter() - t0
    summary.pop("_workers", None)
    summary["passed"] = all(summary["suites"].values())
    files = {}
    series.to_csv(outdir / "series.csv")
    files["series.csv"] = _sha256(outdir / "series.csv")
    if traj is not None and cfg.raw["snapshots"]:
        sd = outdir / "snapshots"
        sd.mkdir(exist_ok=True)
        s = traj.states[-1]
        for name, obj in (("phi", s.phi), ("lambda", s.lam), ("gamma", s.gam)):
            path = sd / f"{name}_final.hfbs"
            write_snapshot(path, obj, s.t)
            files[f"snapshots/{path.name}"] = _sha256(path)
        summary["metrics"]["snapshot_times"] = [float(x) for x in traj.times]
    with open(outdir / "summary.json", "w") as fh:
        json.dump(_clean(summary), fh, indent=2, sort_keys=True)
    files["summary.json"] = _sha256(outdir / "summary.json")
    manifest = {
        "config": cfg.raw,
        "versions": {"hfblab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "checksums": files,
        "wall_clock_s": wall,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(_clean(manifest), fh, indent=2, sort_keys=True)
    summary["out"] = str(outdir)
    return summary


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        return "inf" if np.isinf(o) else float(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


# ---------------------------------------------------------------------------
# CLI

def _parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def _set_path(d: dict, path: str, value):
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hfblab", description="HFB spectral simulator and numerical lab")
    sub = ap.add_subparsers(dest="kind", required=True)
    for k in KINDS:
        sp = sub.add_parser(k, help=f"run a {k} experiment")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="RNG seed (u64)")
        sp.add_argument("--out", help=f"output directory (relative paths go under ${OUT_ENV})")
        sp.add_argument("--threads", type=int, default=1, help="worker processes / BLAS threads")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. grid.n=128")
    return ap


def config_from_args(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    raw["kind"] = args.kind
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(raw, k, _parse_value(v))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=max(1, args.threads)):
            summary = run_experiment(cfg, workers=max(1, args.threads))
    except GuardFailure as e:
        print(f"guard failure [{e.guard}]: {e}", file=sys.stderr)
        return 3
    print(json.dumps(_clean({k: summary[k] for k in ("kind", "passed", "suites", "out")}), indent=2))
    return 0 if summary["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
