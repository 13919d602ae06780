"""Hall conductance, band-edge spectral witnesses and Landau localization windows."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .spectral import Projector, eigendecompose


class ZeroTrialState(ValueError):
    pass


class NearBoxNotFound(RuntimeError):
    def __init__(self, message, best_deviation):
        super().__init__(message)
        self.best_deviation = best_deviation


def landau_level(B, n):
    """Continuum Landau level ``(2n + 1) B``."""
    return (2 * n + 1) * B


def band(B, n, lam, m0, M0):
    bn = landau_level(B, n)
    return (bn - lam * m0, bn + lam * M0)


def disjoint_bands(B, lam, m0, M0):
    return lam * (m0 + M0) < 2 * B


# ---------------------------------------------------------------- Hall


@dataclass
class HallResult:
    fermi_energy: float
    sigma: float
    imag_residue: float
    sigma_ninth: float
    truncation_sensitivity: float
    region: str = "central quarter"
    n_trace_sites: int = 0
    rank: int = 0

    def to_dict(self):
        return asdict(self)


def fermi_projection(sd, E_F):
    """Spectral projection onto eigenvalues ``<= E_F``."""
    k = int(np.searchsorted(sd.eigenvalues, E_F, side="right"))
    return Projector(np.asarray(sd.eigenvectors[:, :k]), np.asarray(sd.eigenvalues[:k]))


def _comm_apply(V, h, M):
    """``(P h - h P) M`` for ``P = V V^*`` and diagonal ``h``."""
    return V @ (V.conj().T @ (h[:, None] * M)) - h[:, None] * (V @ (V.conj().T @ M))


def hall_conductance(P, grid, swap=False, fermi_energy=float("nan")):
    """Real-space Hall conductance of a projector on a 2D torus.

    Switches are sharp half-plane indicators through the box centre.  The
    trace runs over the central quarter (sup-offset below ``L/4``); the value
    over the central ninth is reported for truncation sensitivity.
    """
    if grid.dim != 2:
        raise ValueError("Hall conductance needs a 2D grid")
    pos = grid.positions()
    c = np.asarray(grid.center)
    h1 = (pos[:, 0] >= c[0]).astype(float)
    h2 = (pos[:, 1] >= c[1]).astype(float)
    if swap:
        h1, h2 = h2, h1
    off = grid.sup_offsets()
    quarter = np.flatnonzero(off < grid.L / 4)
    ninth_mask = off[quarter] < grid.L / 6
    V = np.asarray(P.basis)
    if P.rank == 0 or P.rank == grid.size:
        return HallResult(fermi_energy, 0.0, 0.0, 0.0, 0.0, n_trace_sites=len(quarter), rank=P.rank)
    PQ = V @ V[quarter].conj().T
    A_Q = PQ * h1[quarter][None, :] - h1[:, None] * PQ
    B_Q = PQ * h2[quarter][None, :] - h2[:, None] * PQ
    C_Q = _comm_apply(V, h1, B_Q) - _comm_apply(V, h2, A_Q)
    diag = np.einsum("ij,ji->i", V[quarter], V.conj().T @ C_Q)
    total = -2j * np.pi * diag.sum()
    ninth = -2j * np.pi * diag[ninth_mask].sum()
    return HallResult(float(fermi_energy), float(total.real), float(total.imag), float(ninth.real),
                      float(abs(total.real - ninth.real)), n_trace_sites=len(quarter), rank=P.rank)


@dataclass
class HallCurve:
    fermi_energies: np.ndarray
    sigma: np.ndarray  # (n_real, n_E)
    imag: np.ndarray
    lam: float
    disjoint_bands: bool

    @property
    def mean(self):
        return self.sigma.mean(axis=0)

    @property
    def std(self):
        return self.sigma.std(axis=0, ddof=1) if self.sigma.shape[0] > 1 else np.zeros(self.sigma.shape[1])

    def plateau_spread(self, lo, hi):
        """Max deviation of all samples from their median inside ``[lo, hi]``."""
        sel = (self.fermi_energies >= lo) & (self.fermi_energies <= hi)
        vals = self.sigma[:, sel]
        return float(np.max(np.abs(vals - np.median(vals)))) if vals.size else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["E_F", "sigma_mean", "sigma_std", "im_residue"])
            im = np.abs(self.imag).max(axis=0)
            for e, m, s, r in zip(self.fermi_energies, self.mean, self.std, im):
                wr.writerow([repr(float(e)), repr(float(m)), repr(float(s)), repr(float(r))])


def hall_constancy_scan(model, center, L, fermi_energies, seeds, threads=1):
    """Hall conductance per realization over a grid of Fermi energies."""
    fermi_energies = np.asarray(fermi_energies, dtype=float)
    seeds = list(seeds)

    def task(seed):
        h = model.hamiltonian(center, L, model.couplings(seed))
        sd = eigendecompose(h)
        res = [hall_conductance(fermi_projection(sd, e), h.grid, fermi_energy=e) for e in fermi_energies]
        return [r.sigma for r in res], [r.imag_residue for r in res]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(task, seeds))
    else:
        out = [task(s) for s in seeds]
    sig = np.array([o[0] for o in out])
    im = np.array([o[1] for o in out])
    return HallCurve(fermi_energies, sig, im, model.lam, model.disjoint_bands())


# ---------------------------------------------------------------- witnesses


@dataclass
class TrialState:
    vector: np.ndarray
    center: tuple
    level: int
    B: float
    level_energy: float
    refine_steps: int

    def descriptor(self):
        return {"kind": "gaussian", "center": list(self.center), "level": self.level, "B": self.B,
                "level_energy": self.level_energy, "refine_steps": self.refine_steps}


def _gauge_phase(xp, yp, cx, cy, B, gauge):
    if gauge == "landau_y":
        return -(B / 2) * (xp * (yp - cy) + cx * yp)
    if gauge == "landau_x":
        return (B / 2) * (xp * (yp + cy) - cx * yp)
    raise ValueError(f"unknown gauge {gauge!r}")


def gaussian_trial_state(h_free, center, n=0, refine_steps=4):
    """Gaussian packet in Landau level ``n`` of a discretized Landau operator.

    The continuum packet ``exp(i chi) exp(-B |x - c|^2 / 4)`` is written in the
    operator's gauge, multiplied by ``(dz^n + conj(dz)^n)`` for ``n > 0``, and
    then pushed onto the discrete level-``n`` cluster by shifted inverse
    iteration.  ``level_energy`` is the Rayleigh quotient afterwards.
    """
    meta = h_free.meta
    if meta.get("background") != "landau":
        raise ValueError("trial states need a Landau background")
    B, gauge = meta["B"], meta["gauge"]
    grid = h_free.grid
    pos = grid.positions()
    origin = np.asarray(meta["gauge_origin"])
    xp, yp = (pos - origin).T
    cx, cy = np.asarray(center, dtype=float) - origin
    dx, dy = xp - cx, yp - cy
    psi = np.exp(1j * _gauge_phase(xp, yp, cx, cy, B, gauge) - B * (dx**2 + dy**2) / 4)
    if n > 0:
        z = dx + 1j * dy
        psi = psi * (z**n + np.conj(z) ** n)
    psi /= np.linalg.norm(psi)
    mat = sp.csc_matrix(h_free.matrix, dtype=complex)
    if refine_steps > 0:
        shift = landau_level(B, n) - 0.1 * B
        lu = spla.splu((mat - shift * sp.identity(mat.shape[0], format="csc")).tocsc())
        for _ in range(refine_steps):
            psi = lu.solve(psi)
            psi /= np.linalg.norm(psi)
    energy = float(np.vdot(psi, mat @ psi).real)
    return TrialState(psi, tuple(map(float, center)), n, float(B), energy, refine_steps)


@dataclass
class SpectralWitness:
    energy: float
    residual: float
    trial: dict
    distance_to_spectrum: float | None = None

    @property
    def conclusion(self):
        return f"spectrum meets [{self.energy - self.residual:.12g}, {self.energy + self.residual:.12g}]"

    @property
    def verified(self):
        if self.distance_to_spectrum is None:
            return None
        return self.distance_to_spectrum <= self.residual * (1 + 1e-9) + 1e-12


def spectral_witness(h, E, phi, verify=False, descriptor=None):
    """Residual ``||(H - E) phi|| / ||phi||`` bounding ``dist(E, spectrum)``."""
    if isinstance(phi, TrialState):
        descriptor = descriptor or phi.descriptor()
        phi = phi.vector
    phi = np.asarray(phi)
    nrm = np.linalg.norm(phi)
    if nrm == 0:
        raise ZeroTrialState("trial state is zero")
    r = h.matrix @ phi - E * phi
    res = float(np.linalg.norm(r) / nrm)
    dist = None
    if verify:
        ev = np.linalg.eigvalsh(h.dense())
        dist = float(np.min(np.abs(ev - E)))
    return SpectralWitness(float(E), res, descriptor or {"kind": "vector"}, dist)


@dataclass
class WitnessRecord:
    eta: float
    energy: float
    residual: float
    level_energy: float
    box_center: tuple
    seed: int | None
    max_coupling_deviation: float
    fitted_constant: float
    success: bool


@dataclass
class BandEdgeScan:
    B: float
    lam: float
    level: int
    records: list
    C: float
    delta: float
    failures: dict = field(default_factory=dict)

    def to_json(self, path=None):
        doc = {"B": self.B, "lam": self.lam, "level": self.level, "C": self.C, "delta": self.delta,
               "records": [asdict(r) for r in self.records], "failures": self.failures}
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _aligned_box(model, eta, side, seeds, margin):
    """Best (seed, point index, deviation) over candidate boxes centred on set points."""
    pts = model.dset.points
    region = model.dset.region
    lo = np.asarray(region.lo) + margin
    hi = np.asarray(region.hi) - margin
    cand = np.flatnonzero(np.all((pts >= lo) & (pts <= hi), axis=1))
    if len(cand) == 0:
        raise NearBoxNotFound("no candidate boxes inside the region", float("inf"))
    from scipy.spatial import cKDTree

    tree = cKDTree(pts)
    members = tree.query_ball_point(pts[cand], side / 2, p=np.inf)
    best = (None, None, float("inf"))
    for seed in seeds:
        w = model.couplings(seed).couplings
        for ci, mem in zip(cand, members):
            dev = float(np.max(np.abs(w[mem] - eta)))
            if dev < best[2]:
                best = (seed, int(ci), dev)
    return best


def band_edge_scan(model, side, n, etas, seeds, C=1.0, delta=0.0, coupling_tolerance=None, refine_steps=4):
    """Witness residuals at ``E = B_n + lam * eta`` for each ``eta``.

    For ``eta != 0`` the candidate box (side ``side``, centred on a point of
    the set) whose couplings are closest to ``eta`` in sup-norm is chosen
    across all realizations; the trial packet sits at its centre.  The case
    ``eta = 0`` and ``lam = 0`` use the free operator only.
    """
    if model.background != "landau":
        raise ValueError("band_edge_scan needs a Landau background")
    if model.lam > 0 and not model.disjoint_bands():
        raise ValueError("disjoint-bands condition violated")
    B, lam, d = model.B, model.lam, model.dset.dim
    seeds = list(seeds)
    if coupling_tolerance is None:
        coupling_tolerance = delta / (model.dset.r * side) ** d if delta > 0 else 1e-3
    records, failures = [], {}
    free_cache = {}

    def free_record(eta, center):
        key = tuple(center)
        if key not in free_cache:
            h0 = model.free(center, side)
            ts = gaussian_trial_state(h0, center, n, refine_steps)
            free_cache[key] = (ts, spectral_witness(h0, ts.level_energy, ts).residual)
        ts, res = free_cache[key]
        return WitnessRecord(float(eta), ts.level_energy, res, ts.level_energy, tuple(center), None, 0.0,
                             float("nan"), bool(res <= delta + 1e-12 or res <= lam * C / math.sqrt(B) + delta))

    default_center = tuple(np.asarray(model.dset.region.center, dtype=float))
    for eta in etas:
        eta = float(eta)
        if lam == 0 or eta == 0:
            records.append(free_record(eta, default_center))
            continue
        seed, idx, dev = _aligned_box(model, eta, side, seeds, margin=side / 2 + model.u.delta_u)
        if dev > coupling_tolerance:
            failures[str(eta)] = {"error": "NearBoxNotFound", "best_deviation": dev, "tolerance": coupling_tolerance}
            continue
        center = tuple(model.dset.points[idx])
        h0 = model.free(center, side)
        ts = gaussian_trial_state(h0, center, n, refine_steps)
        h = model.hamiltonian(center, side, model.couplings(seed))
        E = ts.level_energy + lam * eta
        res = spectral_witness(h, E, ts).residual
        bound = lam * C / math.sqrt(B) + delta
        records.append(WitnessRecord(eta, E, res, ts.level_energy, center, int(seed), dev,
                                     res * math.sqrt(B) / lam, bool(res <= bound)))
    return BandEdgeScan(B, lam, n, records, C, delta, failures)


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------- windows


@dataclass
class LocalizationWindow:
    B: float
    level: float
    band: tuple
    collar: float
    lower: tuple | None
    upper: tuple | None
    crossover_B: float | None
    witness_interval: tuple | None = None
    witness_overlap: bool | None = None

    @property
    def empty(self):
        return self.lower is None and self.upper is None


def _crossover(n, K, lam, M, C5, B_max=1e12):
    """Largest B where ``K log B / B < lam M - lam C5 / sqrt(B)`` starts to hold."""
    g = lambda B: lam * M - lam * C5 / math.sqrt(B) - K * math.log(B) / B
    grid = np.geomspace(1.0 + 1e-9, B_max, 400)
    vals = np.array([g(b) for b in grid])
    if vals[-1] <= 0:
        return None
    neg = np.flatnonzero(vals <= 0)
    if len(neg) == 0:
        return float(grid[0])
    i = neg[-1]
    return float(brentq(g, grid[i], grid[i + 1]))


def localization_window(B, n, K, lam, m0=1.0, M0=1.0, C5=None, level_energy=None):
    """Parts of the disordered band at distance ``>= K log B / B`` from the level."""
    if B <= 1 or K <= 0:
        raise ValueError("need B > 1 and K > 0")
    bn = landau_level(B, n) if level_energy is None else level_energy
    lo, hi = bn - lam * m0, bn + lam * M0
    collar = K * math.log(B) / B
    lower = (lo, bn - collar) if bn - collar >= lo else None
    upper = (bn + collar, hi) if bn + collar <= hi else None
    cross = _crossover(n, K, lam, M0, C5 if C5 is not None else 0.0) if lam > 0 else None
    win = LocalizationWindow(B, bn, (lo, hi), collar, lower, upper, cross)
    if C5 is not None:
        w_lo = max(bn + lam * M0 - lam * C5 / math.sqrt(B), lo)
        win.witness_interval = (w_lo, hi)
        win.witness_overlap = upper is not None and max(upper[0], w_lo) <= hi
    return win
