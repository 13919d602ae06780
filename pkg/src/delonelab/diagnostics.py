"""Monte-Carlo Wegner and suitability statistics plus closed-form thresholds."""

from __future__ import annotations

import csv
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import binomtest

from .assembly import derived_seed
from .spectral import EOnSpectrum, eigendecompose, resolvent_block_norm


class ScaleTooSmall(ValueError):
    pass


class EmptyInterval(ValueError):
    pass


def _pmap(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------- fits


@dataclass
class PowerLawFit:
    exponent: float
    prefactor: float
    exponent_se: float
    n_points: int


def power_law_fit(x, mean, stderr=None, min_points=4):
    """Weighted least squares of ``log mean`` on ``log x``.

    Weights are inverse variances of ``log mean`` (``stderr / mean``); with
    no usable error bars the fit is unweighted.  Returns ``None`` when fewer
    than ``min_points`` positive means are available.
    """
    x = np.asarray(x, float)
    m = np.asarray(mean, float)
    ok = m > 0
    if ok.sum() < min_points:
        return None
    lx, ly = np.log(x[ok]), np.log(m[ok])
    w = np.ones_like(lx)
    if stderr is not None:
        sl = np.asarray(stderr, float)[ok] / m[ok]
        if np.all(sl > 0):
            w = 1.0 / sl
    coef, cov = np.polyfit(lx, ly, 1, w=w, cov="unscaled")
    return PowerLawFit(float(coef[0]), float(math.exp(coef[1])), float(math.sqrt(max(cov[0, 0], 0.0))), int(ok.sum()))


# ---------------------------------------------------------------- Wegner


@dataclass
class WegnerReport:
    centers: list
    Ls: list
    deltas: list
    n_real: int
    traces: np.ndarray  # (center, L, delta, realization) integer counts
    alpha_delta: PowerLawFit | None
    alpha_L: PowerLawFit | None
    center_ratio: float
    reference: dict
    landau_bound_ratio: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def mean(self):
        return self.traces.mean(axis=-1)

    @property
    def stderr(self):
        if self.n_real < 2:
            return np.zeros(self.traces.shape[:-1])
        return self.traces.std(axis=-1, ddof=1) / math.sqrt(self.n_real)

    @property
    def sup_over_centers(self):
        return self.mean.max(axis=0)

    def to_dict(self):
        fit = lambda f: asdict(f) if f is not None else None
        return {
            "centers": [list(map(float, c)) for c in self.centers],
            "L": list(map(float, self.Ls)),
            "deltas": [list(map(float, d)) for d in self.deltas],
            "n_real": self.n_real,
            "mean": self.mean.tolist(),
            "stderr": self.stderr.tolist(),
            "sup_over_centers": self.sup_over_centers.tolist(),
            "alpha_delta": fit(self.alpha_delta),
            "alpha_L": fit(self.alpha_L),
            "center_ratio": self.center_ratio,
            "reference": self.reference,
            "landau_bound_ratio": None if self.landau_bound_ratio is None else self.landau_bound_ratio.tolist(),
            "config": self.config,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["center", "L", "delta_lo", "delta_hi", "realization", "trace"])
            for ci, c in enumerate(self.centers):
                cs = " ".join(repr(float(v)) for v in c)
                for li, L in enumerate(self.Ls):
                    for di, (lo, hi) in enumerate(self.deltas):
                        for r in range(self.n_real):
                            wr.writerow([cs, repr(float(L)), repr(float(lo)), repr(float(hi)), r,
                                         int(self.traces[ci, li, di, r])])


def _count(ev, lo, hi):
    return int(np.searchsorted(ev, hi, side="right") - np.searchsorted(ev, lo, side="left"))


def wegner_trial(model, centers, Ls, deltas, n_real, seed, threads=1, min_fit_realizations=30,
                 landau_level_energy=None, Q_n=1.0, config=None):
    """Eigenvalue counts ``tr P(Delta)`` over boxes, intervals and realizations.

    Realization ``r`` draws one coupling vector for the whole set from
    ``derived_seed(seed, r)`` and reuses it for every centre and size.  The
    interval-width exponent is fitted at the largest ``L`` and the volume
    exponent at the widest interval, both on the centre-averaged means; the
    centre ratio is taken at that same reference pair.
    """
    centers = [tuple(map(float, np.atleast_1d(c))) for c in centers]
    Ls = list(Ls)
    deltas = [tuple(map(float, d)) for d in deltas]

    def task(r):
        omega = model.couplings(derived_seed(seed, r))
        out = np.zeros((len(centers), len(Ls), len(deltas)), dtype=np.int64)
        for ci, c in enumerate(centers):
            for li, L in enumerate(Ls):
                ev = np.linalg.eigvalsh(model.hamiltonian(c, L, omega).dense())
                for di, (lo, hi) in enumerate(deltas):
                    out[ci, li, di] = _count(ev, lo, hi)
        return out

    traces = np.stack(_pmap(task, range(n_real), threads), axis=-1)
    widths = np.array([hi - lo for lo, hi in deltas])
    li_ref = int(np.argmax(Ls))
    di_ref = int(np.argmax(widths))
    per = traces.astype(float)
    cm = per.mean(axis=0)  # centre-averaged, (L, delta, real)
    mean = cm.mean(axis=-1)
    se = cm.std(axis=-1, ddof=1) / math.sqrt(n_real) if n_real > 1 else np.zeros_like(mean)
    a_delta = a_L = None
    if n_real >= min_fit_realizations:
        a_delta = power_law_fit(widths, mean[li_ref], se[li_ref])
        a_L = power_law_fit(np.asarray(Ls, float), mean[:, di_ref], se[:, di_ref])
    ref = traces[:, li_ref, di_ref, :].mean(axis=-1)
    ratio = float(ref.max() / ref.min()) if ref.min() > 0 else (1.0 if ref.max() == 0 else float("inf"))
    bound_ratio = None
    if landau_level_energy is not None:
        B = model.B
        bound = np.zeros((len(Ls), len(deltas)))
        for li, L in enumerate(Ls):
            for di, (lo, hi) in enumerate(deltas):
                dist = min(abs(lo - landau_level_energy), abs(hi - landau_level_energy))
                if lo <= landau_level_energy <= hi:
                    dist = 0.0
                bound[li, di] = Q_n * B / (2 * dist**2) * (hi - lo) * L**2 if dist > 0 else np.inf
        bound_ratio = traces.mean(axis=-1).max(axis=0) / bound
    reference = {"L": float(Ls[li_ref]), "delta": list(deltas[di_ref]), "fit_on": "centre-averaged means",
                 "centers_probed": len(centers)}
    return WegnerReport(centers, Ls, deltas, n_real, traces, a_delta, a_L, ratio, reference, bound_ratio,
                        dict(config or {}))


# ---------------------------------------------------------------- suitability


def ilse_threshold(d):
    """``1 - 1/841^d`` as an exact fraction."""
    return 1 - Fraction(1, 841**d)


@dataclass
class SuitabilityResult:
    suitable: bool
    norm: float
    threshold: float
    on_spectrum: bool = False


def box_suitability(sd, E, theta):
    """Boundary-belt to core resolvent block against ``L^-theta``."""
    grid = sd.grid
    L = grid.L
    thr = L ** (-theta)
    try:
        norm = resolvent_block_norm(sd, E, grid.belt(), grid.core())
    except EOnSpectrum:
        return SuitabilityResult(False, float("inf"), thr, True)
    return SuitabilityResult(bool(norm <= thr), norm, thr)


@dataclass
class SuitabilityEnsemble:
    centers: list
    successes: np.ndarray  # (center, realization) bool
    rates: np.ndarray
    min_rate: float
    ci: tuple
    threshold: float
    threshold_exact: str
    E: float
    theta: float
    L: float
    on_spectrum_events: int = 0

    @property
    def meets_threshold(self):
        return self.min_rate > self.threshold

    def to_dict(self):
        return {"centers": [list(c) for c in self.centers], "rates": self.rates.tolist(), "min_rate": self.min_rate,
                "wilson_ci": list(self.ci), "threshold": self.threshold, "threshold_exact": self.threshold_exact,
                "meets_threshold": self.meets_threshold, "E": self.E, "theta": self.theta, "L": self.L,
                "n_real": int(self.successes.shape[1]), "on_spectrum_events": self.on_spectrum_events}


def wilson_interval(k, n, confidence=0.95):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def ilse_probability(model, E, theta, L, centers, n_real, seed, threads=1, confidence=0.95):
    """Empirical probability that boxes are ``(theta, E)``-suitable."""
    d = model.dset.dim
    if theta <= d:
        raise ValueError("theta must exceed the dimension")
    centers = [tuple(map(float, np.atleast_1d(c))) for c in centers]

    # identical operators (e.g. lam = 0) are decomposed once
    cache = {}
    lock = threading.Lock()

    def suitability(h):
        key = h.fingerprint()
        with lock:
            owner = key not in cache
            if owner:
                cache[key] = [threading.Event(), None]
            slot = cache[key]
        if owner:
            try:
                slot[1] = box_suitability(eigendecompose(h), E, theta)
            except Exception as err:
                slot[1] = err
                raise
            finally:
                slot[0].set()
        slot[0].wait()
        if isinstance(slot[1], Exception):
            raise slot[1]
        return slot[1]

    def task(r):
        omega = model.couplings(derived_seed(seed, r))
        row = []
        for c in centers:
            res = suitability(model.hamiltonian(c, L, omega))
            row.append((res.suitable, res.on_spectrum))
        return row

    rows = _pmap(task, range(n_real), threads)
    succ = np.array([[s for s, _ in row] for row in rows], dtype=bool).T
    collisions = int(sum(o for row in rows for _, o in row))
    rates = succ.mean(axis=1)
    worst = int(np.argmin(rates))
    ci = wilson_interval(succ[worst].sum(), n_real, confidence)
    thr = ilse_threshold(d)
    return SuitabilityEnsemble(centers, succ, rates, float(rates[worst]), ci, float(thr), str(thr), float(E),
                               float(theta), float(L), collisions)


# ---------------------------------------------------------------- correlations


@dataclass
class CorrelationProfile:
    separations: np.ndarray
    products: np.ndarray  # (eigenfunction, separation)
    aggregate: np.ndarray
    slope: float
    intercept: float
    r2: float
    n_eigenfunctions: int


def eigenfunction_correlation(sd, interval, u, shifts):
    """``||chi_{u+x} phi|| * ||chi_u phi||`` for eigenfunctions with energy in ``interval``.

    The aggregate is the sum over eigenfunctions; ``slope`` is the least
    squares slope of its logarithm against ``|x|`` over positive entries.
    """
    lo, hi = interval
    sel = np.flatnonzero((sd.eigenvalues >= lo) & (sd.eigenvalues <= hi))
    if len(sel) == 0:
        raise EmptyInterval(f"no eigenvalues in [{lo}, {hi}]")
    grid = sd.grid
    V = sd.eigenvectors[:, sel]
    u = np.atleast_1d(np.asarray(u, float))

    def cell_norm(cell):
        idx = grid.cell_sites(cell)
        return np.sqrt(np.sum(np.abs(V[idx]) ** 2, axis=0))

    base = cell_norm(u)
    shifts = [np.atleast_1d(np.asarray(x, float)) for x in shifts]
    prods = np.stack([base * cell_norm(u + x) for x in shifts], axis=1)
    seps = np.array([np.linalg.norm(x) for x in shifts])
    agg = prods.sum(axis=0)
    ok = agg > 0
    slope = intercept = r2 = float("nan")
    if ok.sum() >= 2:
        y = np.log(agg[ok])
        coef = np.polyfit(seps[ok], y, 1)
        slope, intercept = float(coef[0]), float(coef[1])
        ss_res = float(np.sum((y - np.polyval(coef, seps[ok])) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return CorrelationProfile(seps, prods, agg, slope, intercept, r2, len(sel))


# ---------------------------------------------------------------- formulas


def moment_order_threshold(alpha, s, d, regime):
    """Minimal moment order: ``12 d/s + 2 alpha d/s`` (annealed) or ``15 d/s + ...`` (quenched)."""
    if not 0 < s <= 1:
        raise ValueError("s must lie in (0, 1]")
    if alpha < 0 or d < 1:
        raise ValueError("need alpha >= 0 and d >= 1")
    base = {"annealed": 12, "quenched": 15}.get(str(regime).lower())
    if base is None:
        raise ValueError(f"unknown regime {regime!r}")
    return base * d / s + 2 * alpha * d / s


def lemma_threshold(theta, gamma, d, alpha, s):
    """``alpha (theta s + d)/s + 9 theta + 3 gamma + 2 d + d/s``."""
    if not 0 < s <= 1 or d < 1 or alpha < 0:
        raise ValueError("need s in (0, 1], d >= 1, alpha >= 0")
    if theta < d / s or gamma < d / s:
        raise ValueError("theta and gamma must be at least d/s")
    return alpha * (theta * s + d) / s + 9 * theta + 3 * gamma + 2 * d + d / s


def msa_length_scale(p0, Q, eps, theta, s, d):
    """Largest multiple of 6 below ``(p0 / (20 Q eps^s))^(1/(theta s + d))``."""
    if not 0 < p0 < 1 or min(Q, eps, theta, s) <= 0 or d < 1:
        raise ValueError("invalid parameters")
    raw = (p0 / (20 * Q * eps**s)) ** (1 / (theta * s + d))
    L = 6 * math.floor(raw / 6)
    if L == 0:
        raise ScaleTooSmall(f"scale {raw:.4g} rounds to 0")
    return L


def msa_consequences(L, p0, Q, eps, theta, s, d):
    """Both displayed consequences of the scale choice, evaluated at ``L``."""
    first = Q * (4 * eps) ** (s / 2) * L**d
    second = 2 * Q * eps**s * L ** (theta * s + d)
    return {"first": first <= p0 / 10, "first_value": first, "second": second <= p0 / 10, "second_value": second,
            "bound": p0 / 10}
