"""Filtered wave-packet moments and transport exponents.

Moments are evaluated in the eigenbasis of a full decomposition.  For a
cell ``u`` with site set ``C`` and weight ``w(x) = (1 + |x - u|^2)^(p/2)``,

    M(t) = sum_{j in C} || w^(1/2) V exp(-itE) X(E) V^* e_j ||^2,

and the exponentially weighted time average has the closed form

    Mbar(T) = sum_{k,l} A_kl K_kl / (1 - i (E_k - E_l) T / 2),

with ``A = V^* W V`` and ``K_kl = X_k X_l sum_{j in C} V_jk conj(V_jl)``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest


class CellOutsideBox(ValueError):
    pass


class QuadratureError(RuntimeError):
    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


class InsufficientGrid(ValueError):
    pass


class InsufficientRealizations(ValueError):
    pass


def _smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    f = lambda s: np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
    a, b = f(t), f(1.0 - t)
    return a / (a + b)


@dataclass(frozen=True)
class EnergyFilter:
    """Smooth nonnegative energy cutoff.

    ``support=None`` gives the constant ``amplitude`` on all energies.
    Without a plateau the profile is the bump ``exp(1 - 1/(1 - y^2))`` on
    the rescaled support; with a plateau it rises through smooth steps and
    equals ``amplitude`` on the plateau.
    """

    support: tuple | None = None
    plateau: tuple | None = None
    amplitude: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("amplitude must lie in [0, 1]")
        if self.support is not None:
            lo, hi = self.support
            if not lo < hi:
                raise ValueError("empty filter support")
            if self.plateau is not None:
                plo, phi = self.plateau
                if not lo < plo <= phi < hi:
                    raise ValueError("plateau must sit strictly inside the support")

    @classmethod
    def zero(cls):
        return cls(amplitude=0.0)

    def __call__(self, energies):
        e = np.asarray(energies, dtype=float)
        if self.support is None:
            return np.full(e.shape, self.amplitude)
        lo, hi = self.support
        if self.plateau is None:
            y = (2 * e - lo - hi) / (hi - lo)
            inside = np.abs(y) < 1
            ys = np.where(inside, y, 0.0)
            vals = np.where(inside, np.exp(1 - 1 / (1 - ys**2)), 0.0)
        else:
            plo, phi = self.plateau
            vals = _smooth_step((e - lo) / (plo - lo)) * _smooth_step((hi - e) / (hi - phi))
            vals = np.where((e > lo) & (e < hi), vals, 0.0)
        return self.amplitude * vals


def filter_operator(sd, X):
    """X(H) as a dense matrix; its eigenvalues are ``X(E_i)``."""
    xv = X(sd.eigenvalues)
    V = sd.eigenvectors
    return (V * xv[None, :]) @ V.conj().T


def _cell_data(sd, u):
    grid = sd.grid
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if len(u) != grid.dim:
        raise CellOutsideBox(f"cell index has dimension {len(u)}, grid has {grid.dim}")
    box = grid.box
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    if np.any(u - 0.5 < lo - 1e-12) or np.any(u + 0.5 > hi + 1e-12):
        raise CellOutsideBox(f"cell {u.tolist()} not inside {box}")
    sites = grid.cell_sites(u)
    if len(sites) == 0:
        raise CellOutsideBox(f"cell {u.tolist()} holds no grid sites")
    return u, sites


def _weights(sd, u, p):
    d2 = np.sum((sd.grid.positions() - u) ** 2, axis=1)
    return (1.0 + d2) ** (p / 2)


def _active(sd, X):
    xv = X(sd.eigenvalues)
    keep = np.flatnonzero(xv != 0)
    return keep, xv[keep]


def moment(sd, p, X, u, t):
    """Random moment of order ``p`` at time ``t`` (scalar or array)."""
    u, sites = _cell_data(sd, u)
    keep, xv = _active(sd, X)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if len(keep) == 0:
        out = np.zeros(ts.shape)
        return out if np.ndim(t) else float(out[0])
    V = sd.eigenvectors[:, keep]
    E = sd.eigenvalues[keep]
    w = _weights(sd, u, p)
    coef = xv[:, None] * V[sites].conj().T
    out = np.empty(ts.shape)
    for i, tt in enumerate(ts):
        psi = V @ (np.exp(-1j * tt * E)[:, None] * coef)
        out[i] = float(np.sum(w[:, None] * (psi.real**2 + psi.imag**2)))
    return out if np.ndim(t) else float(out[0])


@dataclass
class _MomentKernel:
    """Cached ``A`` and ``K`` for repeated time averages at one (u, p, X)."""

    A: np.ndarray
    K: np.ndarray
    E: np.ndarray

    @classmethod
    def build(cls, sd, p, X, u):
        u, sites = _cell_data(sd, u)
        keep, xv = _active(sd, X)
        V = sd.eigenvectors[:, keep]
        w = _weights(sd, u, p)
        A = V.conj().T @ (w[:, None] * V)
        Vc = V[sites]
        K = (xv[:, None] * xv[None, :]) * (Vc.T @ Vc.conj())
        return cls(A, K, sd.eigenvalues[keep])

    def average(self, T):
        if len(self.E) == 0:
            return 0.0
        dE = self.E[:, None] - self.E[None, :]
        # A and K are Hermitian, so A_kl K_kl pairs with its conjugate under k<->l
        val = np.sum(self.A * self.K / (1.0 - 0.5j * dE * T))
        return float(val.real)

    def at(self, t):
        if len(self.E) == 0:
            return 0.0
        dE = self.E[:, None] - self.E[None, :]
        return float(np.sum(self.A * self.K * np.exp(1j * dE * t)).real)


def _gl_panels(T, t_max, n_panels, order):
    # log-spaced up to T resolves the start, uniform panels beyond it keep
    # oscillating integrands sampled evenly out to t_max
    t0 = T * 1e-6
    edges = np.concatenate([[0.0], np.geomspace(t0, T, n_panels // 2), np.linspace(T, t_max, n_panels)[1:]])
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (b - a) * x[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * w[None, :]
    return nodes.ravel(), weights.ravel()


def laplace_average(M, T, rtol=1e-6, t_max_factor=10.0):
    """``(2/T) int_0^{t_max} exp(-2t/T) M(t) dt`` for a vectorised callable ``M``.

    Composite Gauss-Legendre, log-spaced panels on ``[0, T]`` and uniform
    ones beyond; the panel count and order grow until two successive
    estimates agree to ``rtol``.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    t_max = t_max_factor * T
    prev = None
    for n_panels, order in ((24, 8), (32, 16), (48, 24), (64, 32), (128, 32), (256, 32), (512, 32)):
        nodes, weights = _gl_panels(T, t_max, n_panels, order)
        vals = np.asarray(M(nodes), dtype=float)
        est = float(np.sum(weights * (2.0 / T) * np.exp(-2.0 * nodes / T) * vals))
        if prev is not None:
            err = abs(est - prev) / max(abs(est), 1e-300)
            if err <= rtol or (abs(est) == 0 and abs(prev) == 0):
                return est
        prev = est
    raise QuadratureError(f"time average did not reach rtol={rtol} (achieved {err:.3g})", err)


def time_averaged_moment(sd, p, X, u, T, method="spectral", rtol=1e-6):
    """Exponentially weighted time average of the random moment.

    ``method="spectral"`` integrates exactly over ``[0, inf)``;
    ``method="quadrature"`` truncates at ``10 T`` and integrates numerically.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if method == "spectral":
        return _MomentKernel.build(sd, p, X, u).average(T)
    if method == "quadrature":
        kern = _MomentKernel.build(sd, p, X, u)
        return laplace_average(np.vectorize(kern.at), T, rtol=rtol)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class TransportTrace:
    """Time-averaged moments indexed by (realization, cell, T)."""

    T: np.ndarray
    cells: list
    p: float
    averaged: np.ndarray
    instantaneous: np.ndarray
    regime: str = "annealed"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.averaged < -1e-12) or np.any(self.instantaneous < -1e-12):
            raise ValueError("moments must be nonnegative")

    @property
    def n_real(self):
        return self.averaged.shape[0]

    def scaled(self, c):
        return TransportTrace(self.T, self.cells, self.p, c * self.averaged, c * self.instantaneous,
                              self.regime, dict(self.meta))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["realization", "u_index", "T", "p", "moment", "time_averaged"])
            for r in range(self.averaged.shape[0]):
                for iu in range(len(self.cells)):
                    for it, T in enumerate(self.T):
                        wr.writerow([r, iu, repr(float(T)), repr(float(self.p)),
                                     repr(float(self.instantaneous[r, iu, it])),
                                     repr(float(self.averaged[r, iu, it]))])


def moment_trace(sd, p, X, cells, T_grid):
    """Moments of one realization; returns arrays of shape (n_cells, n_T)."""
    T_grid = np.asarray(T_grid, dtype=float)
    avg = np.empty((len(cells), len(T_grid)))
    inst = np.empty_like(avg)
    for i, u in enumerate(cells):
        kern = _MomentKernel.build(sd, p, X, u)
        for j, T in enumerate(T_grid):
            avg[i, j] = kern.average(T)
            inst[i, j] = kern.at(T)
    return avg, inst


def moment_ensemble(build, seeds, p, X, cells, T_grid, threads=1, regime="annealed"):
    """Run ``build(seed) -> SpectralData`` per seed and collect moments.

    Results are stored in seed order regardless of ``threads``.
    """
    seeds = list(seeds)

    def task(seed):
        return moment_trace(build(seed), p, X, cells, T_grid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, seeds))
    else:
        results = [task(s) for s in seeds]
    avg = np.stack([r[0] for r in results])
    inst = np.stack([r[1] for r in results])
    return TransportTrace(np.asarray(T_grid, float), [tuple(np.atleast_1d(c)) for c in cells], float(p),
                          avg, inst, regime)


@dataclass
class ExponentReport:
    beta: float
    uncertainty: float
    T: np.ndarray
    curve: np.ndarray
    sup_mean: np.ndarray
    proxy: str = "minimum over the upper half of the T grid"

    def to_dict(self):
        return {"beta": self.beta, "uncertainty": self.uncertainty, "T": self.T.tolist(),
                "curve": self.curve.tolist(), "sup_mean": self.sup_mean.tolist(), "proxy": self.proxy}


def _check_grid(T_grid):
    T = np.asarray(T_grid, dtype=float)
    if len(T) < 4 or np.any(np.diff(T) <= 0) or np.log10(T[-1] / T[0]) < 1.5 or T[0] <= 1:
        raise InsufficientGrid("need >= 4 increasing T values > 1 spanning >= 1.5 decades")
    return T


def annealed_exponent(trace, min_realizations=30):
    """Finite-T proxy for the annealed transport exponent.

    Per T the realization mean is maximised over cells, then
    ``log+(.) / (p log T)`` is taken.  The estimate is the smallest value on
    the upper half of the grid; the uncertainty combines the spread of the
    curve there with the propagated standard error of the mean.
    """
    T = _check_grid(trace.T)
    if trace.n_real < min_realizations:
        raise InsufficientRealizations(f"{trace.n_real} realizations < {min_realizations}")
    if trace.p <= 0:
        raise ValueError("p must be positive")
    mean = trace.averaged.mean(axis=0)
    iu = np.argmax(mean, axis=0)
    sup = mean[iu, np.arange(len(T))]
    curve = np.log(np.maximum(sup, 1.0)) / (trace.p * np.log(T))
    upper = slice(len(T) // 2, None)
    beta = float(curve[upper].min())
    if trace.n_real > 1:
        se = trace.averaged.std(axis=0, ddof=1)[iu, np.arange(len(T))] / math.sqrt(trace.n_real)
    else:
        se = np.zeros(len(T))
    rel = np.where(sup > 1.0, se / np.maximum(sup, 1e-300), 0.0)
    stat = rel / (trace.p * np.log(T))
    spread = 0.5 * float(np.ptp(curve[upper]))
    unc = spread + float(stat[upper].max())
    return ExponentReport(beta, unc, T, curve, sup)


@dataclass
class QuenchedProbe:
    T: np.ndarray
    values: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    exceedance: np.ndarray
    decreasing_tail: bool
    diverging: bool
    confidence: float

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def quenched_probe(trace, alpha, s, d, confidence=0.95, min_realizations=30):
    """``sup_u T^(s/d) P(Mbar > T^alpha)`` per T with Wilson intervals."""
    T = _check_grid(trace.T)
    n = trace.n_real
    if n < min_realizations:
        raise InsufficientRealizations(f"{n} realizations < {min_realizations} for confidence {confidence}")
    exceed = (trace.averaged > T[None, None, :] ** alpha).sum(axis=0)
    k = exceed.max(axis=0)
    scale = T ** (s / d)
    lo = np.empty(len(T))
    hi = np.empty(len(T))
    for i, ki in enumerate(k):
        ci = binomtest(int(ki), n).proportion_ci(confidence_level=confidence, method="wilson")
        lo[i], hi[i] = ci.low, ci.high
    vals = scale * k / n
    tail = vals[-3:]
    decreasing = bool(np.all(np.diff(tail) < 0))
    diverging = bool(np.all(np.diff(tail) > 0))
    return QuenchedProbe(T, vals, scale * lo, scale * hi, k / n, decreasing, diverging, confidence)


DL, DD, INDETERMINATE = "DL", "DD", "Indeterminate"


def classify_region(betas, tau):
    """Label per energy from ``{E: (beta, uncertainty)}`` or a list of pairs."""
    def label(b, unc):
        if b + unc < tau:
            return DL
        if b - unc > tau:
            return DD
        return INDETERMINATE

    if isinstance(betas, dict):
        return {e: label(*bu) for e, bu in betas.items()}
    return [label(*bu) for bu in betas]
