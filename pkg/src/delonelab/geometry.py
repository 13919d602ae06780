"""Delone point sets: generation, validation, counting, Voronoi diagrams and
zero-potential ribbons.

All cubes are open and measured in the sup-norm, ``|y - x|_inf < L/2``.
Voronoi cells and ribbon distances use the Euclidean metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import LineString, MultiPoint, Polygon, box as shapely_box
from shapely.ops import unary_union


class DegenerateConfiguration(ValueError):
    """Point configuration admits no planar Voronoi diagram."""


class NoRibbon(RuntimeError):
    """No zero-potential ribbon fits between the inner and outer boxes."""

    def __init__(self, message, obstructing_site=None):
        super().__init__(message)
        self.obstructing_site = obstructing_site


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise ValueError("lo and hi must have the same dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, center, side):
        c = np.atleast_1d(np.asarray(center, dtype=float))
        return cls(tuple(c - side / 2), tuple(c + side / 2))

    @property
    def dim(self):
        return len(self.lo)

    @property
    def sides(self):
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def center(self):
        return (np.asarray(self.hi) + np.asarray(self.lo)) / 2

    @property
    def volume(self):
        return float(np.prod(self.sides))

    def is_empty(self):
        return bool(np.any(self.sides <= 0))

    def contains_box(self, other, tol=1e-12):
        return bool(
            np.all(np.asarray(other.lo) >= np.asarray(self.lo) - tol)
            and np.all(np.asarray(other.hi) <= np.asarray(self.hi) + tol)
        )

    def shrink(self, margin):
        return Box(tuple(np.asarray(self.lo) + margin), tuple(np.asarray(self.hi) - margin))


@dataclass(frozen=True, eq=False)
class DeloneSet:
    points: np.ndarray
    r: float
    R: float
    region: Box
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        pts = pts.reshape(-1, self.region.dim)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if not (0 < self.r < self.R):
            raise ValueError(f"need 0 < r < R, got r={self.r}, R={self.R}")

    @property
    def dim(self):
        return self.region.dim

    def __len__(self):
        return len(self.points)

    def translated(self, shift):
        shift = np.asarray(shift, dtype=float)
        region = Box(tuple(np.asarray(self.region.lo) + shift), tuple(np.asarray(self.region.hi) + shift))
        prov = dict(self.provenance, translated_by=shift.tolist())
        return DeloneSet(self.points + shift, self.r, self.R, region, prov)

    def to_files(self, csv_path):
        """Write ``x,y[,z...]`` CSV plus a JSON sidecar next to it."""
        csv_path = Path(csv_path)
        names = ["x", "y", "z"][: self.dim] if self.dim <= 3 else [f"x{i}" for i in range(self.dim)]
        np.savetxt(csv_path, self.points, delimiter=",", header=",".join(names), comments="", fmt="%.17g")
        sidecar = {
            "r": self.r,
            "R": self.R,
            "region": {"lo": list(self.region.lo), "hi": list(self.region.hi)},
            "generator": self.provenance.get("generator"),
            "seed": self.provenance.get("seed"),
            "provenance": self.provenance,
        }
        csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def from_files(cls, csv_path):
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        region = Box(tuple(meta["region"]["lo"]), tuple(meta["region"]["hi"]))
        pts = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        return cls(pts.reshape(-1, region.dim), meta["r"], meta["R"], region, meta.get("provenance", {}))


@dataclass
class DeloneReport:
    valid: bool
    discreteness_ok: bool
    density_ok: bool
    close_pairs: list
    empty_cube_witnesses: np.ndarray
    covering_bound: float
    eps: float
    degenerate: bool = False


def _as_box(region):
    if isinstance(region, Box):
        return region
    lo, hi = region
    return Box(tuple(np.atleast_1d(lo)), tuple(np.atleast_1d(hi)))


def generate_perturbed_lattice(spacing, max_displacement, region, seed):
    """Lattice ``spacing * Z^d`` with i.i.d. sup-norm displacements.

    The declared radii are ``r = spacing - 2*max_displacement`` and
    ``R = max(1.5*spacing, spacing + 2*max_displacement + 2*eps)`` where
    ``eps = r/20`` is the validation pitch, so the certificate always closes.
    """
    region = _as_box(region)
    if region.is_empty():
        raise ValueError("empty region")
    if not (0 <= max_displacement < spacing / 2):
        raise ValueError("need 0 <= max_displacement < spacing/2")
    rng = np.random.default_rng(seed)
    # lattice over the region grown by one spacing so boundary holes cannot appear
    axes = [
        np.arange(math.floor((lo - spacing) / spacing), math.ceil((hi + spacing) / spacing) + 1) * spacing
        for lo, hi in zip(region.lo, region.hi)
    ]
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, region.dim)
    pts = lattice + rng.uniform(-max_displacement, max_displacement, size=lattice.shape) if max_displacement > 0 else lattice
    inside = np.all((pts >= np.asarray(region.lo)) & (pts <= np.asarray(region.hi)), axis=1)
    pts = pts[inside]
    r = spacing - 2 * max_displacement
    R = max(1.5 * spacing, spacing + 2 * max_displacement + 2 * (r / 20) * 1.0001)
    prov = {"generator": "perturbed_lattice", "seed": seed, "spacing": spacing, "max_displacement": max_displacement}
    return DeloneSet(pts, r, R, region, prov)


def _greedy_hardcore(candidates, r):
    """Sequentially accept candidates at sup-distance >= r from accepted ones."""
    tree = cKDTree(candidates)
    pairs = tree.query_pairs(r, p=np.inf, output_type="ndarray")
    if len(pairs):
        d = np.max(np.abs(candidates[pairs[:, 0]] - candidates[pairs[:, 1]]), axis=1)
        pairs = pairs[d < r]
    n = len(candidates)
    accepted = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    lo, hi = (np.minimum(pairs[:, 0], pairs[:, 1]), np.maximum(pairs[:, 0], pairs[:, 1])) if len(pairs) else (
        np.empty(0, int), np.empty(0, int))
    # rounds of the lexicographically-first maximal independent set; same
    # result as accepting candidates one by one in index order
    while alive.any():
        live = alive[lo] & alive[hi]
        blocked = np.zeros(n, dtype=bool)
        blocked[hi[live]] = True
        new = alive & ~blocked
        accepted |= new
        alive &= ~new
        hit = new[lo] | new[hi]
        alive[lo[hit]] = False
        alive[hi[hit]] = False
        alive &= ~accepted
    return candidates[accepted]


def generate_hardcore_fill(r, R, region, seed, oversample=4.0, max_rounds=200):
    """Random hard-core points followed by greedy filling of empty R-cubes.

    Candidates are accepted in random order when they keep sup-distance
    ``>= r``. The validator's branch-and-bound scan then locates cube centres
    whose open R-cube is (possibly) empty and a point is inserted there; each
    inserted point sits at sup-distance ``>= R/2 - eps/2 > r`` from the set.
    """
    region = _as_box(region)
    if not R > 2 * r:
        raise ValueError("need R > 2r")
    rng = np.random.default_rng(seed)
    prov = {"generator": "hardcore_fill", "seed": seed}
    sides = region.sides
    if np.any(sides < R):
        # no open R-cube fits: a single central point is a valid set
        return DeloneSet(region.center[None, :], r, R, region, dict(prov, degenerate=True))
    n_cand = int(np.ceil(oversample * region.volume / r**region.dim)) + 1
    cand = np.asarray(region.lo) + rng.random((n_cand, region.dim)) * sides
    pts = _greedy_hardcore(cand, r)
    eps = _default_eps(r, R)
    for _ in range(max_rounds):
        dset = DeloneSet(pts, r, R, region, prov)
        rep = validate_delone(dset, eps=eps, discreteness=False)
        if rep.density_ok:
            break
        w = rep.empty_cube_witnesses
        tree = cKDTree(pts)
        f, _ = tree.query(w, p=np.inf)
        w = w[np.argsort(-f, kind="stable")]
        w = w[tree.query(w, p=np.inf)[0] >= r]
        if len(w) == 0:
            raise RuntimeError("fill step stalled")
        pts = np.vstack([pts, _greedy_hardcore(w, r)])
    else:
        raise RuntimeError("fill step did not converge")
    return DeloneSet(pts, r, R, region, prov)


def _default_eps(r, R):
    return min(r / 20, (R - 2 * r) / 2) if R > 2 * r else r / 20


def _covering_scan(points, region, R, eps):
    """Branch-and-bound bound on ``sup_y dist_inf(y, points)`` over cube centres.

    Returns (certified upper bound, array of unresolved finest cell centres).
    The sup-distance to a set is 1-Lipschitz, so a cell with centre value f
    and half-width h is bounded by f + h.
    """
    inner = region.shrink(R / 2)
    target = R / 2
    if np.any(inner.sides < 0):
        return 0.0, np.empty((0, region.dim))
    tree = cKDTree(points)
    h0 = max(float(np.max(inner.sides)) / 2, eps / 2)
    n_per = np.maximum(1, np.ceil(inner.sides / (2 * h0)).astype(int))
    h = float(np.max(inner.sides / (2 * n_per))) if np.any(inner.sides > 0) else 0.0
    axes = [lo + (np.arange(n) + 0.5) * s / n for lo, s, n in zip(inner.lo, inner.sides, n_per)]
    halfw = inner.sides / (2 * n_per)
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, region.dim)
    offs = np.stack(np.meshgrid(*[[-0.5, 0.5]] * region.dim, indexing="ij"), axis=-1).reshape(-1, region.dim)
    bound = 0.0
    unresolved = []
    while len(centers):
        f, _ = tree.query(centers, p=np.inf)
        h = float(np.max(halfw))
        ok = f + h < target
        if np.any(ok):
            bound = max(bound, float(np.max(f[ok] + h)))
        bad = centers[~ok]
        if len(bad) == 0:
            break
        if h <= eps / 2:
            bound = max(bound, float(np.max(f[~ok] + h)))
            unresolved.append(bad)
            break
        # split each unresolved cell into 2^d children
        centers = (bad[:, None, :] + offs[None, :, :] * halfw[None, None, :]).reshape(-1, region.dim)
        halfw = halfw / 2
    wit = np.vstack(unresolved) if unresolved else np.empty((0, region.dim))
    return bound, wit


def validate_delone(dset, eps=None, discreteness=True):
    """Check uniform discreteness exactly and certify relative density.

    Discreteness: no two distinct points at sup-distance ``< r`` (up to a
    relative round-off allowance of 1e-12).
    Density: every open R-cube centred in the ``R/2``-shrunk region contains
    a point, certified by a Lipschitz branch-and-bound scan refined down to
    cells of width ``eps``.
    """
    if len(dset) == 0:
        raise ValueError("empty Delone set")
    eps = _default_eps(dset.r, dset.R) if eps is None else eps
    pts = dset.points
    close = []
    if discreteness and len(pts) > 1:
        pairs = cKDTree(pts).query_pairs(dset.r, p=np.inf, output_type="ndarray")
        if len(pairs):
            d = np.max(np.abs(pts[pairs[:, 0]] - pts[pairs[:, 1]]), axis=1)
            close = [tuple(map(int, p)) for p in pairs[d < dset.r * (1 - 1e-12)]]
    bound, wit = _covering_scan(pts, dset.region, dset.R, eps)
    degenerate = bool(np.any(dset.region.sides < dset.R))
    density_ok = len(wit) == 0
    return DeloneReport(
        valid=(not close) and density_ok,
        discreteness_ok=not close,
        density_ok=density_ok,
        close_pairs=close,
        empty_cube_witnesses=wit,
        covering_bound=bound,
        eps=eps,
        degenerate=degenerate,
    )


def count_points(dset, center, side):
    """Number of points in the open cube of the given side around ``center``."""
    cube = Box.cube(center, side)
    if not dset.region.contains_box(cube):
        raise ValueError("box exceeds the region of the set")
    c = np.asarray(cube.center)
    return int(np.count_nonzero(np.max(np.abs(dset.points - c), axis=1) < side / 2))


def density_bounds(r, R, side, dim):
    """Two-sided count bounds ``R^-d L^d <= n <= ceil(r^-d) L^d``."""
    return R ** (-dim) * side**dim, math.ceil(r ** (-dim)) * side**dim


@dataclass
class VoronoiDiagram:
    sites: np.ndarray
    cells: list
    region: Box

    @property
    def polygons(self):
        return [np.asarray(c.exterior.coords)[:-1] for c in self.cells]

    def edges(self):
        """Unique interior Voronoi edges as an (m, 2, 2) array."""
        frame = _frame(self.region)
        segs = {}
        for cell in self.cells:
            xy = np.asarray(cell.exterior.coords)
            for a, b in zip(xy[:-1], xy[1:]):
                if _on_frame(a, b, frame):
                    continue
                key = tuple(sorted((tuple(np.round(a, 9)), tuple(np.round(b, 9)))))
                segs[key] = (a, b)
        return np.array(list(segs.values())).reshape(-1, 2, 2)

    def vertices(self):
        e = self.edges().reshape(-1, 2)
        return np.unique(np.round(e, 9), axis=0)

    def site_edge_distances(self):
        """Euclidean distance from each site to the nearest interior edge of its cell."""
        frame = _frame(self.region)
        out = np.full(len(self.sites), np.inf)
        for k, (site, cell) in enumerate(zip(self.sites, self.cells)):
            xy = np.asarray(cell.exterior.coords)
            for a, b in zip(xy[:-1], xy[1:]):
                if not _on_frame(a, b, frame):
                    out[k] = min(out[k], _point_segment_distance(site, a, b))
        return out


def _frame(region):
    return (region.lo[0], region.lo[1], region.hi[0], region.hi[1])


def _on_frame(a, b, frame, tol=1e-9):
    x0, y0, x1, y1 = frame
    for axis, val in ((0, x0), (0, x1), (1, y0), (1, y1)):
        if abs(a[axis] - val) < tol and abs(b[axis] - val) < tol:
            return True
    return False


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def voronoi(dset, region=None):
    """Planar Voronoi diagram clipped to the region box (Euclidean metric)."""
    region = dset.region if region is None else _as_box(region)
    pts = dset.points
    if dset.dim != 2:
        raise DegenerateConfiguration("Voronoi diagrams are implemented in 2D only")
    if len(pts) < 3:
        raise DegenerateConfiguration("need at least 3 points")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, float(np.abs(centered).max()))) < 2:
        raise DegenerateConfiguration("points are collinear")
    frame = shapely_box(*_frame(region))
    polys = shapely.voronoi_polygons(MultiPoint(pts), extend_to=frame, ordered=True)
    cells = [g.intersection(frame) for g in polys.geoms]
    cells = [c if isinstance(c, Polygon) else max(getattr(c, "geoms", [c]), key=lambda g: g.area) for c in cells]
    return VoronoiDiagram(np.array(pts), cells, region)


@dataclass
class Ribbon:
    curve: np.ndarray
    half_width: float
    center: np.ndarray
    inner_side: float
    outer_side: float
    min_site_distance: float
    covering_sites: np.ndarray

    @property
    def enclosed_box(self):
        return Box.cube(self.center, self.inner_side)

    @property
    def ambient_box(self):
        return Box.cube(self.center, self.outer_side)

    def sample(self, n, seed=0):
        """Points at Euclidean distance ``< half_width`` from the curve."""
        rng = np.random.default_rng(seed)
        line = LineString(self.curve)
        s = rng.random(n) * line.length
        base = np.array([line.interpolate(v).coords[0] for v in s])
        rad = self.half_width * np.sqrt(rng.random(n)) * (1 - 1e-12)
        ang = rng.random(n) * 2 * np.pi
        return base + rad[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])

    def to_json(self):
        return json.dumps(
            {
                "curve": self.curve.tolist(),
                "half_width": self.half_width,
                "center": np.asarray(self.center).tolist(),
                "inner_side": self.inner_side,
                "outer_side": self.outer_side,
                "min_site_distance": self.min_site_distance,
            }
        )


def find_zero_ribbon(dset, L, r_tilde=None, u_support_radius=0.0, center=None):
    """Closed Voronoi-edge curve between the boxes of side L/3 and L-3.

    The curve is the outer boundary of the union of the Voronoi cells that
    meet the closed box of side L/3. Every point within
    ``r_tilde/4 - r_tilde/10`` of the curve stays farther than
    ``u_support_radius`` from every site.
    """
    r_tilde = dset.r if r_tilde is None else r_tilde
    if not u_support_radius < r_tilde / 10:
        raise ValueError("single-site support radius must be < r_tilde/10")
    center = dset.region.center if center is None else np.asarray(center, dtype=float)
    if L < 3 * dset.R or L - 3 <= L / 3:
        raise NoRibbon(f"L={L} too small relative to R={dset.R}")
    outer = Box.cube(center, L)
    if not dset.region.contains_box(outer):
        raise ValueError("box of side L exceeds the region of the set")
    inside = np.max(np.abs(dset.points - center), axis=1) < L / 2
    local = DeloneSet(dset.points[inside], dset.r, dset.R, outer, dset.provenance)
    vor = voronoi(local)
    inner_poly = shapely_box(*(center - L / 6), *(center + L / 6))
    cover = [k for k, c in enumerate(vor.cells) if c.intersects(inner_poly)]
    union = unary_union([vor.cells[k] for k in cover])
    if not isinstance(union, Polygon):
        raise NoRibbon("covering cells do not form a single polygon")
    curve = np.asarray(union.exterior.coords)
    lim = (L - 3) / 2
    sup = np.max(np.abs(curve - center), axis=1)
    if np.any(sup >= lim):
        worst = curve[int(np.argmax(sup))]
        site = int(np.argmin([vor.cells[k].distance(shapely.Point(worst)) for k in cover]))
        site = cover[site]
        raise NoRibbon(
            f"cell of site {local.points[site].tolist()} reaches outside the box of side L-3",
            obstructing_site=local.points[site],
        )
    line = LineString(curve)
    if line.intersects(shapely_box(*(center - L / 6 + 1e-12), *(center + L / 6 - 1e-12))):
        raise NoRibbon("curve enters the box of side L/3")
    half_width = r_tilde / 4 - r_tilde / 10
    dmin = float(line.distance(MultiPoint(dset.points)))
    if not dmin > half_width + u_support_radius:
        raise NoRibbon(f"curve passes within {dmin:.4g} of a site")
    return Ribbon(curve, half_width, center, L / 3, L - 3, dmin, local.points[cover])
