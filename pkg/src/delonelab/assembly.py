"""Finite-volume Hamiltonians ``H = H0 + lam * V`` on a mesh.

Backgrounds are the (2d+1)-point Laplacian and the Peierls-substituted
Landau operator on a magnetic torus. Both are reported in the convention
where the stencil diagonal ``2d/a^2`` is included, so Landau levels sit near
``(2n+1) B``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import Box, DeloneSet

DENSE_LIMIT = 6000


class FluxQuantizationError(ValueError):
    def __init__(self, message, nearest_B):
        super().__init__(message)
        self.nearest_B = nearest_B


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Cell-centred mesh on the box of side ``L`` around ``center``."""

    center: tuple
    L: float
    a: float = 1.0
    boundary: str = "periodic"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        n = self.L / self.a
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ValueError(f"L/a = {n} is not a positive integer")
        if self.boundary not in ("periodic", "dirichlet"):
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @property
    def dim(self):
        return len(self.center)

    @property
    def n(self):
        """Sites per axis."""
        return int(round(self.L / self.a))

    @property
    def size(self):
        return self.n**self.dim

    @property
    def box(self):
        return Box.cube(self.center, self.L)

    def axis_coords(self):
        c = np.asarray(self.center)
        return [c[k] - self.L / 2 + self.a * (np.arange(self.n) + 0.5) for k in range(self.dim)]

    def positions(self):
        """Site coordinates in C order (axis 0 slowest)."""
        mesh = np.meshgrid(*self.axis_coords(), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def sup_offsets(self):
        return np.max(np.abs(self.positions() - np.asarray(self.center)), axis=1)

    def belt(self):
        """Sites of the boundary belt between the boxes of sides L-3 and L-1."""
        s = self.sup_offsets()
        tol = 1e-9 * self.a
        return np.flatnonzero((s >= (self.L - 3) / 2 - tol) & (s <= (self.L - 1) / 2 + tol))

    def core(self, side=None):
        """Sites strictly inside the central box of side ``L/3`` (or ``side``)."""
        side = self.L / 3 if side is None else side
        return np.flatnonzero(self.sup_offsets() < side / 2)

    def cell_sites(self, u):
        """Sites inside the unit cube ``[u - 1/2, u + 1/2)^d``."""
        u = np.asarray(u, dtype=float)
        d = self.positions() - u
        return np.flatnonzero(np.all((d >= -0.5) & (d < 0.5), axis=1))

    def to_dict(self):
        return {"center": list(self.center), "L": self.L, "a": self.a, "boundary": self.boundary}


@dataclass(eq=False)
class DiscretizedOperator:
    matrix: object
    grid: Grid
    meta: dict = field(default_factory=dict)

    @property
    def is_sparse(self):
        return sp.issparse(self.matrix)

    def dense(self):
        return self.matrix.toarray() if self.is_sparse else np.asarray(self.matrix)

    def diagonal(self):
        return np.asarray(self.matrix.diagonal())

    def norm(self):
        if self.is_sparse:
            return float(abs(self.matrix).sum(axis=1).max())
        return float(np.linalg.norm(self.matrix, 2)) if self.matrix.shape[0] < 2000 else float(np.abs(self.matrix).sum(axis=1).max())

    def hermiticity_defect(self):
        m = self.matrix
        diff = m - m.conj().T
        d = abs(diff).max() if self.is_sparse else np.abs(diff).max()
        return float(d) / max(self.norm(), 1e-300)

    def fingerprint(self):
        m = self.matrix.tocsr() if self.is_sparse else np.ascontiguousarray(self.matrix)
        h = hashlib.sha256()
        if self.is_sparse:
            for arr in (m.data, m.indices, m.indptr):
                h.update(np.ascontiguousarray(arr).tobytes())
        else:
            h.update(m.tobytes())
        return h.hexdigest()[:16]

    def write_matrix_market(self, path):
        """Sparse text export plus a JSON sidecar with grid/gauge metadata."""
        import scipy.io

        scipy.io.mmwrite(str(path), sp.coo_matrix(self.matrix))
        meta = {"grid": self.grid.to_dict(), **{k: _jsonable(v) for k, v in self.meta.items()}}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def _finish(mat, grid, meta):
    mat = sp.csr_matrix(mat)
    if grid.size < DENSE_LIMIT:
        mat = mat.toarray()
    return DiscretizedOperator(mat, grid, meta)


def _second_difference(n, a, periodic):
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    m = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    if periodic and n > 2:
        m[0, n - 1] = -1.0
        m[n - 1, 0] = -1.0
    elif periodic and n == 2:
        m[0, 1] = m[1, 0] = -2.0
    elif periodic and n == 1:
        m[0, 0] = 0.0
    return sp.csr_matrix(m) / a**2


def assemble_laplacian(grid):
    """``-Delta`` by the standard (2d+1)-point stencil scaled by ``1/a^2``."""
    n, d = grid.n, grid.dim
    one = _second_difference(n, grid.a, grid.boundary == "periodic")
    eye = sp.identity(n, format="csr")
    total = sp.csr_matrix((n**d, n**d))
    for k in range(d):
        term = None
        for j in range(d):
            f = one if j == k else eye
            term = f if term is None else sp.kron(term, f, format="csr")
        total = total + term
    return _finish(total, grid, {"background": "laplacian"})


def flux_quanta(B, L):
    return B * L**2 / (2 * np.pi)


def admissible_field(n_flux, L):
    return 2 * np.pi * n_flux / L**2


def assemble_landau(grid, B, gauge="landau_y"):
    """Peierls-substituted ``(-i grad - A)^2`` on the periodic square torus.

    The field is oriented as ``A = (B/2)(x2, -x1)`` (curl A = -B). Link
    variables ``U(x -> y) = exp(i int_x^y A)`` enter as ``H[y, x] = -U/a^2``.
    Two Landau gauges are available; both carry a boundary twist making the
    flux through every plaquette, including wrapped ones, equal to ``B a^2``.
    """
    if grid.dim != 2 or grid.boundary != "periodic":
        raise ValueError("Landau operator requires a 2D periodic grid")
    n, a = grid.n, grid.a
    nphi = flux_quanta(B, grid.L)
    if abs(nphi - round(nphi)) > 1e-9 * max(1.0, abs(nphi)) or round(nphi) < 1:
        k = max(1, int(round(nphi)))
        raise FluxQuantizationError(
            f"flux quanta {nphi:.6g} is not a positive integer", nearest_B=admissible_field(k, grid.L)
        )
    nphi = int(round(nphi))
    phi = nphi / n**2  # flux per plaquette in units of 2*pi
    t = 1.0 / a**2
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    src = i * n + j
    dst_x = ((i + 1) % n) * n + j
    dst_y = i * n + (j + 1) % n
    if gauge == "landau_y":
        # A = (0, -B x'): y-links carry the phase, x-links twist at the seam
        ux = np.where(i == n - 1, np.exp(2j * np.pi * nphi * j / n), 1.0)
        uy = np.exp(-2j * np.pi * phi * i)
    elif gauge == "landau_x":
        # A = (B y', 0)
        ux = np.exp(2j * np.pi * phi * j)
        uy = np.where(j == n - 1, np.exp(-2j * np.pi * nphi * i / n), 1.0)
    else:
        raise ValueError(f"unknown gauge {gauge!r}")
    rows = np.concatenate([dst_x, src, dst_y, src, src])
    cols = np.concatenate([src, dst_x, src, dst_y, src])
    vals = np.concatenate([-t * ux, -t * np.conj(ux), -t * uy, -t * np.conj(uy), np.full(n * n, 4 * t, complex)])
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n * n, n * n)).tocsr()
    origin = [c[0] for c in grid.axis_coords()]
    meta = {
        "background": "landau",
        "B": float(B),
        "flux_quanta": nphi,
        "flux_per_plaquette": phi,
        "gauge": gauge,
        "gauge_origin": origin,
        "diagonal_shift": 4 * t,
    }
    return _finish(mat, grid, meta)


@dataclass(frozen=True)
class SingleSitePotential:
    """Radial bump ``u(x) = profile(|x|/radius)`` with ``u(0) = 1``.

    ``radius`` is the Euclidean support radius. The sup-norm bounds
    ``u_minus * 1{|x|_inf < eps_u} <= u <= u_plus * 1{|x|_inf < delta_u}``
    use the inner radius ``eps_u = radius/(2 sqrt(d))``.
    """

    radius: float
    profile: str = "smooth"
    dim: int = 2

    def __call__(self, disp):
        disp = np.asarray(disp, dtype=float)
        if disp.ndim >= 1 and disp.shape[-1] == self.dim:
            dist = np.linalg.norm(disp, axis=-1)
        else:
            dist = np.abs(disp)
        return _profile(self.profile, dist / self.radius)

    @property
    def u_plus(self):
        return 1.0

    @property
    def delta_u(self):
        return self.radius

    @property
    def eps_u(self):
        return self.radius / (2 * math.sqrt(self.dim))

    @property
    def u_minus(self):
        return float(_profile(self.profile, np.array(0.5)))


def _profile(name, t):
    t = np.asarray(t, dtype=float)
    inside = t < 1
    out = np.zeros_like(t)
    ti = t[inside]
    if name == "smooth":
        out[inside] = np.exp(-(ti**2) / (1 - ti**2))
    elif name == "tent":
        out[inside] = 1 - ti
    else:
        raise ValueError(f"unknown profile {name!r}")
    return out


@dataclass(frozen=True)
class CouplingDensity:
    """Named coupling distribution with support inside ``[-m0, M0]``."""

    kind: str = "uniform"
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "triangular"):
            raise ValueError(f"unknown density {self.kind!r}")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if not self.lo <= 0 <= self.hi:
            raise ValueError("support must contain 0")

    @property
    def m0(self):
        return -self.lo

    @property
    def M0(self):
        return self.hi

    @property
    def rho_plus(self):
        w = self.hi - self.lo
        return 1 / w if self.kind == "uniform" else 2 / w

    def sample(self, rng, n):
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, n)
        return rng.triangular(self.lo, (self.lo + self.hi) / 2, self.hi, n)

    @classmethod
    def from_spec(cls, spec):
        if isinstance(spec, cls):
            return spec
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ValueError(f"malformed density spec {spec!r}")
        return cls(spec["kind"], float(spec.get("lo", -1.0)), float(spec.get("hi", 1.0)))


@dataclass(frozen=True, eq=False)
class DisorderRealization:
    couplings: np.ndarray
    density: CouplingDensity
    seed: object


def sample_disorder(dset, density, seed):
    """One coupling per Delone point; deterministic given ``seed``."""
    density = CouplingDensity.from_spec(density)
    rng = np.random.default_rng(seed)
    w = np.clip(density.sample(rng, len(dset)), density.lo, density.hi)
    w.setflags(write=False)
    return DisorderRealization(w, density, seed)


def derived_seed(master_seed, *path):
    """Stable seed for a task path, independent of execution order."""
    return np.random.SeedSequence([int(master_seed)] + [int(p) for p in path])


def potential_values(positions, dset, u, couplings, include=None):
    """``sum_gamma w_gamma u(x - gamma)`` at arbitrary positions."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    out = np.zeros(len(positions))
    pts = dset.points
    w = np.asarray(couplings, dtype=float)
    if include is not None:
        pts, w = pts[include], w[include]
    keep = w != 0
    pts, w = pts[keep], w[keep]
    if len(pts) == 0:
        return out
    tree = cKDTree(positions)
    for g, wg, idx in zip(pts, w, tree.query_ball_point(pts, u.radius)):
        if idx:
            idx = np.asarray(idx)
            out[idx] += wg * u(positions[idx] - g)
    return out


def assemble_potential(dset, u, omega, grid):
    """Diagonal of the restricted potential on the grid.

    Only sites ``gamma`` at sup-distance ``< L/2 - delta_u`` from the box
    centre contribute, so every contributing bump lies inside the box.
    """
    couplings = omega.couplings if isinstance(omega, DisorderRealization) else np.asarray(omega, dtype=float)
    if len(couplings) != len(dset):
        raise ValueError("one coupling per Delone point required")
    c = np.asarray(grid.center)
    include = np.max(np.abs(dset.points - c), axis=1) < grid.L / 2 - u.delta_u
    diag = potential_values(grid.positions(), dset, u, couplings, include)
    return DiscretizedOperator(sp.diags(diag, format="csr") if grid.size >= DENSE_LIMIT else np.diag(diag), grid,
                               {"potential": True, "n_sites_included": int(include.sum())})


def assemble_hamiltonian(h0, lam, v):
    if lam < 0:
        raise ValueError("disorder strength must be >= 0")
    if h0.grid != v.grid:
        raise GridMismatch("background and potential live on different grids")
    if h0.is_sparse or v.is_sparse:
        mat = sp.csr_matrix(h0.matrix) + lam * sp.diags(v.diagonal())
    else:
        mat = np.array(h0.matrix, dtype=np.result_type(h0.matrix, float), copy=True)
        mat[np.diag_indices_from(mat)] += lam * v.diagonal()
    meta = dict(h0.meta, lam=float(lam))
    return DiscretizedOperator(mat, h0.grid, meta)


@dataclass(frozen=True, eq=False)
class DeloneAndersonModel:
    """A Delone set, a bump, a coupling law and a background operator.

    ``hamiltonian(center, L, couplings)`` restricts the model to the box of
    side ``L`` around ``center``. Backgrounds are cached per (L, center).
    """

    dset: DeloneSet
    u: SingleSitePotential
    density: CouplingDensity
    lam: float
    background: str = "laplacian"
    a: float = 1.0
    boundary: str = "periodic"
    B: float | None = None
    gauge: str = "landau_y"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("disorder strength must be >= 0")
        if self.background not in ("laplacian", "landau"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.background == "landau" and self.B is None:
            raise ValueError("Landau background needs B")

    def grid(self, center, L):
        return Grid(tuple(center), L, self.a, "periodic" if self.background == "landau" else self.boundary)

    def free(self, center, L):
        key = (tuple(np.round(np.atleast_1d(center), 12)), float(L))
        if key not in self._cache:
            g = self.grid(center, L)
            self._cache[key] = assemble_laplacian(g) if self.background == "laplacian" else assemble_landau(g, self.B, self.gauge)
        return self._cache[key]

    def couplings(self, seed):
        return sample_disorder(self.dset, self.density, seed)

    def hamiltonian(self, center, L, omega):
        h0 = self.free(center, L)
        if self.lam == 0:
            return DiscretizedOperator(h0.matrix, h0.grid, dict(h0.meta, lam=0.0))
        v = assemble_potential(self.dset, self.u, omega, h0.grid)
        return assemble_hamiltonian(h0, self.lam, v)

    def disjoint_bands(self):
        return self.B is not None and self.lam * (self.density.m0 + self.density.M0) < 2 * self.B
