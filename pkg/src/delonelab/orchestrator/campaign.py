"""Campaign execution, result persistence and plot-data views."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..assembly import CouplingDensity, DeloneAndersonModel, SingleSitePotential, derived_seed
from ..diagnostics import ilse_probability, wegner_trial
from ..geometry import (
    Box,
    find_zero_ribbon,
    generate_hardcore_fill,
    generate_perturbed_lattice,
    validate_delone,
)
from ..spectral import eigendecompose
from ..topology_spectrum import band_edge_scan, hall_constancy_scan
from ..transport import EnergyFilter, annealed_exponent, moment_ensemble, quenched_probe
from .config import ExperimentConfig, validate_config


class UnknownView(ValueError):
    pass


class CampaignFailure(RuntimeError):
    def __init__(self, message, manifest):
        super().__init__(message)
        self.manifest = manifest


@dataclass
class CampaignResult:
    config_hash: str
    kind: str
    directory: Path
    outputs: dict
    version: str
    cached: bool = False
    timing: dict = field(default_factory=dict)

    def path(self, name):
        return self.directory / self.outputs[name]


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_delone(cfg: ExperimentConfig, seed=None):
    g = cfg.geometry
    region = Box(*g.region)
    s = g.seed if seed is None else seed
    if g.generator == "perturbed_lattice":
        return generate_perturbed_lattice(g.spacing, g.max_displacement, region, s)
    return generate_hardcore_fill(g.r, g.R, region, s)


def build_model(cfg: ExperimentConfig, dset=None):
    dset = dset if dset is not None else build_delone(cfg)
    m = cfg.model
    u = SingleSitePotential(cfg.potential.radius, cfg.potential.profile, dset.dim)
    density = CouplingDensity(cfg.density.kind, cfg.density.lo, cfg.density.hi)
    B = 2 * math.pi * m.flux_per_area if m.background == "landau" else None
    return DeloneAndersonModel(dset, u, density, m.lam, m.background, m.a, m.boundary, B, m.gauge)


def _seeds(cfg, n):
    return [derived_seed(cfg.seed, i) for i in range(n)]


class _SeededModel:
    """Wraps a model so ``couplings(i)`` uses the campaign-derived seed ``i``."""

    def __init__(self, model, master):
        self._m, self._master = model, master

    def __getattr__(self, name):
        return getattr(self._m, name)

    def couplings(self, i):
        return self._m.couplings(derived_seed(self._master, int(i)))


# ---------------------------------------------------------------- tasks


def _run_geometry(cfg, out, threads):
    t = cfg.task_spec
    rows = []
    for i in range(t.n_sets):
        seed = int(derived_seed(cfg.seed, i).generate_state(1)[0])
        ds = build_delone(cfg, seed)
        rep = validate_delone(ds)
        row = {"set": i, "seed": seed, "n_points": len(ds), "r": ds.r, "R": ds.R, "valid": rep.valid,
               "close_pairs": len(rep.close_pairs), "empty_cube_witnesses": len(rep.empty_cube_witnesses)}
        if t.ribbon_L is not None:
            try:
                rib = find_zero_ribbon(ds, t.ribbon_L, u_support_radius=cfg.potential.radius)
                row["ribbon_half_width"] = rib.half_width
            except Exception as err:  # recorded per set, not fatal
                row["ribbon_half_width"] = None
                row["ribbon_error"] = type(err).__name__
        rows.append(row)
    with open(out / "sets.csv", "w", newline="") as fh:
        keys = ["set", "seed", "n_points", "r", "R", "valid", "close_pairs", "empty_cube_witnesses"]
        wr = csv.writer(fh)
        wr.writerow(keys)
        for r in rows:
            wr.writerow([r[k] for k in keys])
    _dump_json(out / "result.json", {"sets": rows, "all_valid": all(r["valid"] for r in rows)})
    return {"result": "result.json", "sets": "sets.csv"}


def _run_wegner(cfg, out, threads):
    t = cfg.task_spec
    model = build_model(cfg)
    rep = wegner_trial(model, t.centers, t.L, t.deltas, t.n_real, cfg.seed, threads=threads,
                       landau_level_energy=t.landau_level_energy, Q_n=t.Q_n, config=cfg.model_dump(mode="json"))
    rep.to_json(out / "result.json")
    rep.to_csv(out / "traces.csv")
    return {"result": "result.json", "traces": "traces.csv"}


def _run_ilse(cfg, out, threads):
    t = cfg.task_spec
    model = build_model(cfg)
    ens = ilse_probability(model, t.E, t.theta, t.L, t.centers, t.n_real, cfg.seed, threads=threads)
    _dump_json(out / "result.json", dict(ens.to_dict(), config=cfg.model_dump(mode="json")))
    return {"result": "result.json"}


def _run_transport(cfg, out, threads):
    t = cfg.task_spec
    model = build_model(cfg)
    X = EnergyFilter(t.filter_support, t.filter_plateau)

    def build(i):
        omega = model.couplings(derived_seed(cfg.seed, i))
        return eigendecompose(model.hamiltonian(t.center, t.L, omega))

    trace = moment_ensemble(build, range(t.n_real), t.p, X, t.cells, t.T, threads=threads)
    trace.to_csv(out / "trace.csv")
    doc = {"config": cfg.model_dump(mode="json"), "T": list(t.T), "p": t.p}
    try:
        doc["annealed"] = annealed_exponent(trace, min_realizations=t.min_realizations).to_dict()
        doc["quenched"] = quenched_probe(trace, t.alpha, t.s, model.dset.dim,
                                         min_realizations=t.min_realizations).to_dict()
    except ValueError as err:
        doc["exponent_error"] = str(err)
    _dump_json(out / "result.json", doc)
    return {"result": "result.json", "trace": "trace.csv"}


def _run_hall(cfg, out, threads):
    t = cfg.task_spec
    model = _SeededModel(build_model(cfg), cfg.seed)
    curve = hall_constancy_scan(model, t.center, t.L, t.fermi_energies, range(t.n_real), threads=threads)
    curve.to_csv(out / "hall.csv")
    _dump_json(out / "result.json", {"config": cfg.model_dump(mode="json"), "E_F": curve.fermi_energies,
                                     "sigma": curve.sigma, "imag": curve.imag,
                                     "disjoint_bands": curve.disjoint_bands})
    return {"result": "result.json", "hall": "hall.csv"}


def _run_witness(cfg, out, threads):
    t = cfg.task_spec
    model = _SeededModel(build_model(cfg), cfg.seed)
    scan = band_edge_scan(model, t.side, t.level, t.etas, range(t.n_real), C=t.C, delta=t.delta,
                          coupling_tolerance=t.coupling_tolerance)
    doc = json.loads(scan.to_json())
    doc["config"] = cfg.model_dump(mode="json")
    _dump_json(out / "result.json", doc)
    return {"result": "result.json"}


def _run_spectrum(cfg, out, threads):
    t = cfg.task_spec
    model = build_model(cfg)
    omega = model.couplings(derived_seed(cfg.seed, t.realization))
    sd = eigendecompose(model.hamiltonian(t.center, t.L, omega))
    sd.to_csv(out / "eigenvalues.csv")
    _dump_json(out / "result.json", {"config": cfg.model_dump(mode="json"), "n": len(sd.eigenvalues),
                                     "min": float(sd.eigenvalues[0]), "max": float(sd.eigenvalues[-1])})
    return {"result": "result.json", "eigenvalues": "eigenvalues.csv"}


_RUNNERS = {"geometry": _run_geometry, "wegner": _run_wegner, "ilse": _run_ilse, "transport": _run_transport,
            "hall": _run_hall, "witness": _run_witness, "spectrum": _run_spectrum}


# ---------------------------------------------------------------- driver


def _cached(directory, chash):
    man = directory / "manifest.json"
    if not man.exists():
        return None
    try:
        doc = json.loads(man.read_text())
    except json.JSONDecodeError:
        return None
    if doc.get("status") != "ok" or doc.get("config_hash") != chash or doc.get("version") != __version__:
        return None
    for name, info in doc["files"].items():
        p = directory / info["path"]
        if not p.exists() or _sha(p) != info["sha256"]:
            return None
    return doc


def run(config, out_dir="results", threads=1, force=False):
    """Execute one campaign; identical configs reuse a complete cached run."""
    if not isinstance(config, ExperimentConfig):
        config = validate_config(config)
    chash = config.hash()
    directory = Path(out_dir) / f"{config.kind}-{chash[:16]}"
    if not force:
        doc = _cached(directory, chash)
        if doc is not None:
            outputs = {k: v["path"] for k, v in doc["files"].items()}
            return CampaignResult(chash, config.kind, directory, outputs, __version__, cached=True)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.yaml").write_text(config.to_yaml())
    t0 = time.perf_counter()
    try:
        outputs = _RUNNERS[config.kind](config, directory, max(1, int(threads)))
    except Exception as err:
        manifest = {"status": "failed", "config_hash": chash, "version": __version__, "kind": config.kind,
                    "error": {"type": type(err).__name__, "message": str(err)}, "files": {}}
        _dump_json(directory / "manifest.json", manifest)
        raise CampaignFailure(f"{config.kind} campaign failed: {err}", manifest) from err
    elapsed = time.perf_counter() - t0
    outputs = dict(outputs, config="config.yaml")
    files = {k: {"path": v, "sha256": _sha(directory / v)} for k, v in sorted(outputs.items())}
    manifest = {"status": "ok", "config_hash": chash, "version": __version__, "kind": config.kind, "files": files}
    _dump_json(directory / "manifest.json", manifest)
    return CampaignResult(chash, config.kind, directory, outputs, __version__, timing={"seconds": elapsed})


# ---------------------------------------------------------------- views


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _view_moment_vs_T(result):
    rows = _read_csv(result.path("trace"))
    groups = {}
    for r in rows:
        groups.setdefault((float(r["T"]), int(r["u_index"])), []).append(float(r["time_averaged"]))
    out = []
    for (T, u), vals in sorted(groups.items()):
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out.append((T, u, float(v.mean()), se))
    return ["T", "u", "mean", "stderr"], out


def _view_sigma_vs_EF(result):
    rows = _read_csv(result.path("hall"))
    return ["E_F", "sigma", "std"], [(float(r["E_F"]), float(r["sigma_mean"]), float(r["sigma_std"])) for r in rows]


def _view_trace_vs_delta(result):
    rows = _read_csv(result.path("traces"))
    groups = {}
    for r in rows:
        key = (r["center"], float(r["L"]), float(r["delta_lo"]), float(r["delta_hi"]))
        groups.setdefault(key, []).append(int(r["trace"]))
    out = []
    for (c, L, lo, hi), vals in sorted(groups.items()):
        v = np.asarray(vals, float)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out.append((c, L, hi - lo, float(v.mean()), se))
    return ["center", "L", "delta_width", "mean", "stderr"], out


VIEWS = {("transport", "moment_vs_T"): _view_moment_vs_T, ("hall", "sigma_vs_EF"): _view_sigma_vs_EF,
         ("wegner", "trace_vs_delta"): _view_trace_vs_delta}


def emit_plot_data(result, view, path=None):
    """Write a long-format table for ``view``; returns the file path."""
    fn = VIEWS.get((result.kind, view))
    if fn is None:
        known = sorted(v for k, v in VIEWS if k == result.kind)
        raise UnknownView(f"view {view!r} does not apply to a {result.kind} result (available: {known})")
    header, rows = fn(result)
    path = Path(path) if path is not None else result.directory / f"{view}.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path
