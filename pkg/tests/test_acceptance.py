"""Acceptance criteria 1-11, one test each.

Run with ``pytest tests/test_acceptance.py -v``; a verdict line per
criterion is printed in the terminal summary.
"""

import json
import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from delonelab.assembly import (
    CouplingDensity,
    DeloneAndersonModel,
    Grid,
    SingleSitePotential,
    admissible_field,
    assemble_landau,
    assemble_laplacian,
    potential_values,
)
from delonelab.diagnostics import (
    box_suitability,
    ilse_probability,
    ilse_threshold,
    lemma_threshold,
    moment_order_threshold,
    msa_length_scale,
    wegner_trial,
)
from delonelab.geometry import (
    Box,
    count_points,
    density_bounds,
    find_zero_ribbon,
    generate_hardcore_fill,
    generate_perturbed_lattice,
    validate_delone,
)
from delonelab.orchestrator.campaign import run
from delonelab.orchestrator.config import KINDS, default_config
from delonelab.spectral import clusters, eigendecompose
from delonelab.topology_spectrum import (
    band_edge_scan,
    fermi_projection,
    hall_conductance,
    hall_constancy_scan,
    loglog_slope,
)
from delonelab.transport import (
    EnergyFilter,
    TransportTrace,
    annealed_exponent,
    laplace_average,
    moment,
    moment_ensemble,
    moment_trace,
    quenched_probe,
)

pytestmark = pytest.mark.acceptance


def r_squared(x, y):
    coef = np.polyfit(x, y, 1)
    res = np.asarray(y) - np.polyval(coef, x)
    return coef[0], 1 - np.sum(res**2) / np.sum((np.asarray(y) - np.mean(y)) ** 2)


# ---------------------------------------------------------------- 1


def test_criterion_01_delone_invariants(criterion):
    # every integer box side L > R up to 0.9 of the region, one random center each
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    n_boxes = 0
    invalid, below, above, floor_below = [], [], [], 0
    for i in range(10_000):
        if i % 2 == 0:
            spacing = rng.uniform(0.8, 3.0)
            frac = rng.uniform(0.0, 0.45)
            side = 10 * spacing
            ds = generate_perturbed_lattice(spacing, frac * spacing, Box((0, 0), (side, side)), i)
        else:
            R = rng.uniform(2.05, 4.0)
            side = rng.uniform(12.0, 18.0)
            ds = generate_hardcore_fill(1.0, R, Box((0, 0), (side, side)), i)
        if not validate_delone(ds).valid:
            invalid.append(i)
        for L in range(math.floor(ds.R) + 1, int(0.9 * side) + 1):
            c = rng.uniform(L / 2, side - L / 2, 2)
            n = count_points(ds, c, L)
            lo, hi = density_bounds(ds.r, ds.R, L, 2)
            n_boxes += 1
            if n < lo:
                below.append((i, L, n, lo))
            if n > hi:
                above.append((i, L, n, hi))
            floor_below += n < math.floor(L / ds.R) ** 2
    dt = time.perf_counter() - t0
    offending = sorted({L for _, L, _, _ in below + above}) or [None]
    criterion(1, not invalid and not below and not above and dt < 60,
              f"10000 sets, {len(invalid)} invalid; {n_boxes} integer boxes, {len(below)} below R^-d L^d, "
              f"{len(above)} above ceil(r^-d) L^d (offending L in [{offending[0]}, {offending[-1]}]); "
              f"{floor_below} below floor(L/R)^d; {dt:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_02_zero_ribbon(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    failures, nonzero = [], 0
    for i in range(100):
        if i % 2 == 0:
            ds = generate_hardcore_fill(1.0, rng.uniform(2.2, 3.5), Box((0, 0), (44, 44)), 100 + i)
        else:
            sp_ = rng.uniform(1.5, 2.5)
            ds = generate_perturbed_lattice(sp_, rng.uniform(0, 0.3) * sp_, Box((0, 0), (44, 44)), 100 + i)
        u = SingleSitePotential(0.099 * ds.r)  # support inside B(0, r/10)
        try:
            rib = find_zero_ribbon(ds, 36.0, u_support_radius=u.radius)
        except Exception as err:
            failures.append((i, type(err).__name__))
            continue
        ys = rib.sample(10_000, seed=i)
        w = rng.uniform(-1, 1, len(ds))
        v = potential_values(ys, ds, u, w)
        nonzero += int(np.count_nonzero(v))
    dt = time.perf_counter() - t0
    criterion(2, not failures and nonzero == 0 and dt < 120,
              f"100 sets, {len(failures)} ribbon failures, {nonzero} nonzero potential samples of 10^6; {dt:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_03_discretization_oracle(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for n in (4, 8, 16, 32, 64):
        ev = np.linalg.eigvalsh(assemble_laplacian(Grid((0, 0), n)).dense())
        s = np.sin(np.pi * np.arange(n) / n) ** 2
        exact = np.sort(4 * (s[:, None] + s[None, :]).ravel())
        worst = max(worst, float(np.max(np.abs(ev - exact))))
    g = Grid((0, 0), 12)
    B = admissible_field(6, 12)
    ey = np.linalg.eigvalsh(assemble_landau(g, B, "landau_y").dense())
    ex = np.linalg.eigvalsh(assemble_landau(g, B, "landau_x").dense())
    lowest = len(clusters(ey, B / 2)[0])
    gauge = float(np.max(np.abs(ey - ex)))
    dt = time.perf_counter() - t0
    criterion(3, worst < 1e-10 and lowest == 6 and gauge < 1e-10 and dt < 60,
              f"sine-sum error {worst:.2e} (N<=64), lowest cluster {lowest}, gauge gap {gauge:.2e}; {dt:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_04_wegner_scaling(criterion):
    t0 = time.perf_counter()
    ds = generate_hardcore_fill(1.0, 2.5, Box((-120, -120), (120, 120)), 11)
    model = DeloneAndersonModel(ds, SingleSitePotential(1.5), CouplingDensity("uniform"), 1.0, "laplacian", 1.0,
                                "dirichlet")
    centers = [(0.0, 0.0), (40.3, -17.9), (-55.1, 30.7), (12.6, 61.2), (-70.4, -66.8)]
    widths = np.geomspace(0.01, 0.1, 5)
    deltas = [(1.0 - w / 2, 1.0 + w / 2) for w in widths]
    rep = wegner_trial(model, centers, [12, 18, 24, 30], deltas, 200, seed=4, threads=4)
    a_d, a_L = rep.alpha_delta.exponent, rep.alpha_L.exponent
    dt = time.perf_counter() - t0
    ok = abs(a_d - 1) <= 0.2 and abs(a_L - 2) <= 0.3 and rep.center_ratio <= 2 and dt < 1800
    criterion(4, ok, f"alpha_delta={a_d:.3f}, alpha_L={a_L:.3f}, center ratio={rep.center_ratio:.3f} "
                     f"(200 realizations, 5 centers); {dt:.0f}s")


# ---------------------------------------------------------------- 5


def test_criterion_05_gap_exactness(criterion):
    t0 = time.perf_counter()
    B = 2 * np.pi / 16
    ds = generate_perturbed_lattice(4.0, 0.5, Box((-60, -60), (60, 60)), 5)
    model = DeloneAndersonModel(ds, SingleSitePotential(1.0), CouplingDensity(), 0.0, "landau", 1.0, "periodic", B)
    centers = [(0, 0), (10.2, -3.3), (-21.7, 14.1)]
    rep = wegner_trial(model, centers, [12, 16, 20], [(0.5, 0.7), (0.45, 0.9), (1.3, 1.5)], 30, seed=5)
    dt = time.perf_counter() - t0
    criterion(5, bool(np.all(rep.traces == 0)) and dt < 60,
              f"max trace {int(rep.traces.max())} over {rep.traces.size} (center, L, interval, realization) cells; {dt:.1f}s")


# ---------------------------------------------------------------- 6


def test_criterion_06_suitability(criterion, tmp_path):
    t0 = time.perf_counter()
    B = 2 * np.pi / 16
    E = 2 * B
    Ls = [12, 20, 28, 36, 44]
    lognorm = []
    for L in Ls:
        sd = eigendecompose(assemble_landau(Grid((0, 0), L), B))
        lognorm.append(math.log(box_suitability(sd, E, 2.5).norm))
    slope, r2 = r_squared(Ls, lognorm)
    ds = generate_perturbed_lattice(4.0, 0.5, Box((-60, -60), (60, 60)), 6)
    model = DeloneAndersonModel(ds, SingleSitePotential(1.0), CouplingDensity(), 0.0, "landau", 1.0, "periodic", B)
    ens = ilse_probability(model, E, 2.5, 44, [(0, 0), (4.5, -7.25), (-12.0, 3.0)], 10, seed=6, threads=2)
    res = run(default_config("ilse", task={"L": 12.0, "n_real": 2, "E": float(E)}), tmp_path)
    doc = json.loads(res.path("result").read_text())
    exact = ilse_threshold(2) == 1 - Fraction(1, 707281)
    reported = ens.threshold_exact == doc["threshold_exact"] == "707280/707281"
    dt = time.perf_counter() - t0
    ok = ens.min_rate == 1.0 and slope < 0 and r2 > 0.9 and exact and reported and dt < 600
    criterion(6, ok, f"min suitability rate {ens.min_rate} at L=44; log-norm slope {slope:.3f}/unit L, R^2={r2:.3f}; "
                     f"threshold {ens.threshold_exact}; {dt:.1f}s")


# ---------------------------------------------------------------- 7


def test_criterion_07_transport(criterion):
    t0 = time.perf_counter()
    wide = EnergyFilter((0.2, 3.8), (0.5, 3.5))
    T_free = np.geomspace(2, 64, 8)
    free = eigendecompose(assemble_laplacian(Grid((0.5,), 1500, boundary="dirichlet")))
    avg, inst = moment_trace(free, 2.0, wide, [(0.5,)], T_free)
    trace = TransportTrace(T_free, [(0.5,)], 2.0, np.repeat(avg[None], 30, 0), np.repeat(inst[None], 30, 0))
    beta_free = annealed_exponent(trace).beta

    L = 200
    ds = generate_perturbed_lattice(1.0, 0.0, Box.cube((0.5,), L), 7)
    model = DeloneAndersonModel(ds, SingleSitePotential(0.5, "tent", dim=1), CouplingDensity("uniform"), 5.0,
                                boundary="dirichlet")
    X = EnergyFilter((-6, 10), (-5.5, 9.5))
    T_loc = np.geomspace(10, 1e6, 9)
    loc = moment_ensemble(lambda s: eigendecompose(model.hamiltonian((0.5,), L, model.couplings(s))), range(30),
                          2.0, X, [(0.5,), (-20.5,), (20.5,)], T_loc)
    beta_loc = annealed_exponent(loc).beta
    exceed = quenched_probe(loc, 1.0, 1.0, 1).exceedance

    m0 = moment(free, 0.0, wide, (0.5,), [0.0, 3.0, 40.0, 500.0])
    p0_spread = float(np.ptp(m0) / m0[0])
    Tq = 7.0
    sq = laplace_average(lambda t: t**2, Tq)
    sq_err = abs(sq / (Tq**2 / 2) - 1)
    dt = time.perf_counter() - t0
    ok = abs(beta_free - 1) <= 0.15 and beta_loc <= 0.1 and np.all(exceed == 0) and p0_spread < 1e-9
    ok = ok and sq_err < 1e-4 and dt < 1200
    criterion(7, ok, f"free beta={beta_free:.3f}; localized beta={beta_loc:.3f}, max exceedance {exceed.max()}; "
                     f"p=0 spread {p0_spread:.1e}; t^2 average rel err {sq_err:.1e}; {dt:.1f}s")


# ---------------------------------------------------------------- 8


def test_criterion_08_hall(criterion):
    t0 = time.perf_counter()
    N = 32
    B = admissible_field(N * N // 16, N)
    g = Grid((0, 0), N)
    sd = eigendecompose(assemble_landau(g, B))
    s1 = hall_conductance(fermi_projection(sd, 0.6), g).sigma
    P2 = fermi_projection(sd, 1.5)
    s2 = hall_conductance(P2, g).sigma
    anti = abs(s2 + hall_conductance(P2, g, swap=True).sigma)

    ds = generate_perturbed_lattice(4.0, 0.5, Box((-30, -30), (30, 30)), 8)
    model = DeloneAndersonModel(ds, SingleSitePotential(1.0), CouplingDensity(), 0.15, "landau", 1.0, "periodic", B)
    curve = hall_constancy_scan(model, (0, 0), N, [0.7, 0.78, 0.86], range(50), threads=4)
    spread = curve.plateau_spread(0.69, 0.87)
    dt = time.perf_counter() - t0
    ok = abs(s1 - 1) < 0.05 and abs(s2 - 2) < 0.05 and anti < 1e-9 and model.disjoint_bands() and spread < 0.1
    criterion(8, ok and dt < 1800, f"N={N}: sigma={s1:.5f} (gap 0-1), {s2:.5f} (gap 1-2); swap residual {anti:.1e}; "
                                   f"lambda=0.15 plateau spread {spread:.2e} over 50 realizations; {dt:.1f}s")


# ---------------------------------------------------------------- 9


def test_criterion_09_band_edge_witness(criterion):
    t0 = time.perf_counter()
    ds = generate_perturbed_lattice(14.0, 2.0, Box((0, 0), (200, 200)), 7)
    u = SingleSitePotential(1.0, "tent")
    Bs, res, disc = [], [], []
    for nphi in (32, 64, 128, 256):
        B = admissible_field(nphi, 5.0)
        model = DeloneAndersonModel(ds, u, CouplingDensity("uniform"), 1.0, "landau", 1 / 32, "periodic", B)
        scan = band_edge_scan(model, 5.0, 0, [0.0, 1.0], range(200), coupling_tolerance=1e-3)
        free = band_edge_scan(DeloneAndersonModel(ds, u, CouplingDensity("uniform"), 0.0, "landau", 1 / 32,
                                                  "periodic", B), 5.0, 0, [0.0], range(1))
        if scan.failures:
            criterion(9, False, f"no aligned box at N_phi={nphi}: {scan.failures}")
        Bs.append(B)
        res.append(scan.records[1].residual)
        disc.append(abs(scan.records[0].residual - free.records[0].residual))
    slope = loglog_slope(Bs, res)
    dt = time.perf_counter() - t0
    ok = abs(slope + 0.5) <= 0.1 and max(disc) <= 1e-9 and dt < 1200
    criterion(9, ok, f"slope {slope:.3f} over B in [{Bs[0]:.2f}, {Bs[-1]:.2f}] (x8); residuals "
                     f"{res[0]:.3f}->{res[-1]:.3f}; eta=0 vs free max diff {max(disc):.1e}; {dt:.1f}s")


# ---------------------------------------------------------------- 10

# (theta, gamma, d, alpha, s, value) evaluated in exact rational arithmetic
LEMMA = [
    (3.6666666666666665, 4.166666666666667, 1, 2.0, 0.6, 59.833333333333336),
    (4.0, 5.5, 1, 2.0, 0.4, 70.0),
    (6.0, 6.0, 3, 1.75, 1.0, 96.75),
    (3.75, 6.0, 3, 0.75, 0.8, 67.125),
    (5.25, 6.75, 1, 1.0, 0.2, 84.75),
    (2.0, 2.75, 1, 1.25, 0.8, 33.5625),
    (6.333333333333333, 4.833333333333333, 2, 1.25, 0.6, 90.91666666666667),
    (5.75, 4.25, 3, 0.25, 1.0, 75.6875),
    (2.0, 2.0, 1, 2.0, 1.0, 33.0),
    (5.0, 7.75, 2, 1.0, 0.4, 87.25),
]

# (p0, Q, eps, theta, s, d, L) evaluated with 50-digit decimals
MSA = [
    (0.8, 2.8, 1e-10, 5.083333333333333, 0.6, 2, 6),
    (0.7, 3.3, 1e-27, 12.0, 0.2, 2, 6),
    (0.5, 2.7, 1e-26, 4.0, 1.0, 2, 9870),
    (0.4, 5.0, 1e-12, 1.25, 1.0, 1, 18516),
    (0.7, 3.1, 1e-12, 3.0, 1.0, 1, 324),
    (0.8, 4.4, 1e-23, 8.0, 0.2, 1, 6),
    (0.7, 4.3, 1e-17, 4.25, 1.0, 2, 240),
    (0.7, 1.3, 1e-17, 3.75, 0.8, 2, 252),
    (0.3, 4.2, 1e-27, 7.0, 0.2, 1, 12),
    (0.4, 1.7, 1e-30, 5.333333333333333, 0.6, 2, 1230),
]


def test_criterion_10_formulas(criterion):
    t0 = time.perf_counter()
    ann = moment_order_threshold(0, 1, 2, "annealed")
    que = moment_order_threshold(0, 1, 2, "quenched")
    lemma_bad = [row for row in LEMMA if not math.isclose(lemma_threshold(*row[:5]), row[5], rel_tol=1e-12)]
    msa_bad = [row for row in MSA if msa_length_scale(*row[:6]) != row[6]]
    dt = time.perf_counter() - t0
    ok = ann == 24 and que == 30 and not lemma_bad and not msa_bad and dt < 1
    criterion(10, ok, f"annealed {ann:g}, quenched {que:g}; lemma mismatches {len(lemma_bad)}/10, "
                      f"length-scale mismatches {len(msa_bad)}/10; {dt * 1e3:.1f}ms")


# ---------------------------------------------------------------- 11

SMALL = {
    "geometry": {"n_sets": 3, "ribbon_L": 30.0},
    "wegner": {"centers": [[0, 0], [3.5, -2.0]], "L": [6.0, 8.0], "deltas": [[0.9, 1.1]], "n_real": 4},
    "ilse": {"L": 12.0, "n_real": 3},
    "transport": {"L": 32.0, "n_real": 4},
    "hall": {"L": 16.0, "fermi_energies": [0.6, 1.5], "n_real": 2},
    "witness": {"etas": [0.0, 1.0], "n_real": 4, "coupling_tolerance": 0.5},
    "spectrum": {"L": 8.0},
}


def test_criterion_11_reproducibility(criterion, tmp_path):
    t0 = time.perf_counter()
    mismatched = []
    for kind in KINDS:
        extra = {"potential": {"radius": 0.09}} if kind == "geometry" else {}
        cfg = default_config(kind, task=SMALL[kind], **extra)
        runs = [run(cfg, tmp_path / "a", threads=1), run(cfg, tmp_path / "a", threads=1, force=True),
                run(cfg, tmp_path / "b", threads=8)]
        snaps = [{p.name: p.read_bytes() for p in sorted(r.directory.iterdir())} for r in runs]
        if not (snaps[0] == snaps[1] == snaps[2]):
            mismatched.append(kind)
    dt = time.perf_counter() - t0
    criterion(11, not mismatched and dt < 300,
              f"{len(KINDS)} campaign kinds rerun and run at width 1 vs 8; mismatches {mismatched or 'none'}; {dt:.1f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
