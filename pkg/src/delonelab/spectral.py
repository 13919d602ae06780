"""Eigendecompositions, spectral projections and resolvent blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class ConvergenceError(RuntimeError):
    def __init__(self, message, worst_residual):
        super().__init__(message)
        self.worst_residual = worst_residual


class WindowNotCovered(ValueError):
    pass


class ClusterNotIsolated(ValueError):
    pass


class ZeroRankProjector(ValueError):
    pass


class EOnSpectrum(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    pass


@dataclass(frozen=True)
class Iterative:
    window: tuple


@dataclass(eq=False)
class SpectralData:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    fingerprint: str
    grid: object = None
    window: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.eigenvalues, self.eigenvectors):
            arr.setflags(write=False)

    @property
    def size(self):
        return self.eigenvectors.shape[0]

    def covers(self, lo, hi):
        return self.window is None or (self.window[0] <= lo and hi <= self.window[1])

    def to_csv(self, path):
        np.savetxt(path, self.eigenvalues, fmt="%.17g", header="eigenvalue", comments="")


@dataclass(eq=False)
class Projector:
    basis: np.ndarray
    energies: np.ndarray = None

    @property
    def rank(self):
        return self.basis.shape[1]

    def dense(self):
        return self.basis @ self.basis.conj().T


def _certify(mat, vals, vecs, check_orthonormal=True):
    hv = mat @ vecs
    res = np.linalg.norm(hv - vecs * vals[None, :], axis=0) if len(vals) else np.zeros(0)
    scale = max(float(np.max(np.abs(vals))) if len(vals) else 1.0, 1.0)
    worst = float(res.max()) / scale if len(res) else 0.0
    if worst > 1e-9:
        raise ConvergenceError(f"eigenpair residual {worst:.3g} exceeds 1e-9 * ||H||", worst)
    if check_orthonormal and len(vals):
        gram = vecs.conj().T @ vecs
        defect = float(np.abs(gram - np.eye(len(vals))).max())
        if defect > 1e-10:
            raise ConvergenceError(f"orthonormality defect {defect:.3g}", defect)
    return worst


def eigendecompose(h, mode=None, certify=True):
    """All eigenpairs (``Dense``) or all pairs inside ``Iterative(window)``.

    Iterative mode runs shift-invert Lanczos around the window centre and
    grows the number of requested pairs until both window ends are passed.
    A bare ``(lo, hi)`` tuple is accepted as shorthand for ``Iterative``.
    """
    mat = h.matrix
    if isinstance(mode, Iterative):
        window = mode.window
    elif mode is None or isinstance(mode, Dense) or mode == "dense":
        window = None
    else:
        window = tuple(mode)
    if window is None:
        dense = h.dense()
        vals, vecs = sla.eigh(dense, driver="evd")
        if certify:
            _certify(dense, vals, vecs)
        return SpectralData(vals, vecs, h.fingerprint(), h.grid, None, dict(h.meta))
    lo, hi = map(float, window)
    n = mat.shape[0]
    csr = sp.csr_matrix(mat)
    sigma = (lo + hi) / 2
    k = min(n - 2, 16)
    while True:
        vals, vecs = spla.eigsh(csr, k=k, sigma=sigma, which="LM", tol=1e-13)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        if (vals.min() < lo and vals.max() > hi) or k >= n - 2:
            break
        k = min(n - 2, 2 * k)
    keep = (vals >= lo) & (vals <= hi)
    vals, vecs = vals[keep], vecs[:, keep]
    if certify:
        # degenerate clusters from Lanczos need re-orthonormalisation
        if len(vals):
            q, _ = np.linalg.qr(vecs)
            small = q.conj().T @ (csr @ q)
            vals, w = np.linalg.eigh((small + small.conj().T) / 2)
            vecs = q @ w
        _certify(csr, vals, vecs)
    return SpectralData(vals, vecs, h.fingerprint(), h.grid, (lo, hi), dict(h.meta))


def projection_trace(sd, interval):
    """Number of eigenvalues in the closed interval."""
    lo, hi = interval
    if not sd.covers(lo, hi):
        raise WindowNotCovered(f"[{lo}, {hi}] not inside decomposition window {sd.window}")
    ev = sd.eigenvalues
    return int(np.searchsorted(ev, hi, side="right") - np.searchsorted(ev, lo, side="left"))


def clusters(eigenvalues, tolerance):
    """Split the sorted spectrum at gaps wider than ``tolerance``."""
    ev = np.asarray(eigenvalues)
    cuts = np.flatnonzero(np.diff(ev) > tolerance) + 1
    return np.split(np.arange(len(ev)), cuts)


def landau_projector(sd, n, cluster_tolerance=None):
    """Projector onto the n-th eigenvalue cluster (n = 0 is the lowest)."""
    if cluster_tolerance is None:
        B = sd.meta.get("B")
        if B is None:
            raise ValueError("cluster_tolerance required when B is unknown")
        cluster_tolerance = B / 2
    groups = clusters(sd.eigenvalues, cluster_tolerance)
    if n < 0 or n >= len(groups):
        raise ClusterNotIsolated(f"only {len(groups)} clusters separated by gaps > {cluster_tolerance}")
    idx = groups[n]
    return Projector(np.asarray(sd.eigenvectors[:, idx]), np.asarray(sd.eigenvalues[idx]))


def projected_potential_floor(proj, v_sum):
    """Smallest eigenvalue of ``P V P`` restricted to the range of ``P``."""
    if proj.rank == 0:
        raise ZeroRankProjector("projector has rank 0")
    v = np.asarray(v_sum.diagonal() if hasattr(v_sum, "diagonal") and not isinstance(v_sum, np.ndarray) else v_sum)
    if v.ndim == 2:
        v = np.diag(v)
    b = proj.basis
    small = b.conj().T @ (v[:, None] * b)
    return float(np.linalg.eigvalsh((small + small.conj().T) / 2)[0])


def resolvent_block_norm(sd, z, left, right):
    """Operator norm of the ``left x right`` block of ``(H - z)^{-1}``."""
    ev = sd.eigenvalues
    if sd.window is not None:
        raise WindowNotCovered("resolvent blocks need the full decomposition")
    dist = float(np.min(np.abs(ev - z)))
    if dist < 1e-12:
        raise EOnSpectrum(f"z={z} lies on the spectrum (distance {dist:.3g})")
    vecs = sd.eigenvectors
    left = np.asarray(left)
    right = np.asarray(right)
    if left.size == 0 or right.size == 0:
        return 0.0
    block = (vecs[left] / (ev - z)[None, :]) @ vecs[right].conj().T
    return float(np.linalg.norm(block, 2))
