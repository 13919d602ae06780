import csv

import numpy as np
import pytest

from delonelab.assembly import CouplingDensity, DeloneAndersonModel, Grid, SingleSitePotential, assemble_laplacian
from delonelab.geometry import Box, generate_perturbed_lattice
from delonelab.spectral import SpectralData, eigendecompose
from delonelab.transport import (
    DD,
    DL,
    INDETERMINATE,
    CellOutsideBox,
    EnergyFilter,
    InsufficientGrid,
    InsufficientRealizations,
    QuadratureError,
    TransportTrace,
    annealed_exponent,
    classify_region,
    filter_operator,
    laplace_average,
    moment,
    moment_ensemble,
    moment_trace,
    quenched_probe,
    time_averaged_moment,
)

WIDE = EnergyFilter((0.2, 3.8), (0.5, 3.5))
T_FREE = np.geomspace(2, 64, 8)
T_LOC = np.geomspace(10, 1e6, 9)


@pytest.fixture(scope="module")
def free_chain():
    return eigendecompose(assemble_laplacian(Grid((0.5,), 1500, boundary="dirichlet")))


@pytest.fixture(scope="module")
def small_disordered():
    ds = generate_perturbed_lattice(1.0, 0.0, Box.cube((0.5,), 40), 0)
    m = DeloneAndersonModel(ds, SingleSitePotential(0.5, "tent", dim=1), CouplingDensity(), 1.0, boundary="dirichlet")
    return eigendecompose(m.hamiltonian((0.5,), 40, m.couplings(1)))


@pytest.fixture(scope="module")
def free_trace(free_chain):
    avg, inst = moment_trace(free_chain, 2.0, WIDE, [(0.5,)], T_FREE)
    # lambda = 0: every realization is the same operator
    return TransportTrace(T_FREE, [(0.5,)], 2.0, np.repeat(avg[None], 30, 0), np.repeat(inst[None], 30, 0))


@pytest.fixture(scope="module")
def localized_trace():
    L = 200
    ds = generate_perturbed_lattice(1.0, 0.0, Box.cube((0.5,), L), 0)
    m = DeloneAndersonModel(ds, SingleSitePotential(0.5, "tent", dim=1), CouplingDensity(), 5.0, boundary="dirichlet")
    X = EnergyFilter((-6, 10), (-5.5, 9.5))

    def build(seed):
        return eigendecompose(m.hamiltonian((0.5,), L, m.couplings(seed)))

    return moment_ensemble(build, range(30), 2.0, X, [(0.5,), (-20.5,), (20.5,)], T_LOC)


# ---------------------------------------------------------------- filters


def test_filter_bounds_and_support():
    e = np.linspace(-1, 5, 4001)
    for X in (EnergyFilter((0.0, 4.0)), WIDE):
        v = X(e)
        assert np.all((0 <= v) & (v <= 1))
        assert np.all(v[(e <= X.support[0]) | (e >= X.support[1])] == 0)
    assert np.all(WIDE(e[(e >= 0.5) & (e <= 3.5)]) == 1.0)
    with pytest.raises(ValueError):
        EnergyFilter((1.0, 2.0), (0.5, 1.5))


def test_filter_operator_identity_zero_and_rank(small_disordered):
    sd = small_disordered
    assert np.allclose(filter_operator(sd, EnergyFilter()), np.eye(sd.size), atol=1e-12)
    assert np.all(filter_operator(sd, EnergyFilter.zero()) == 0)
    ev = sd.eigenvalues
    plateau = (ev[10] - 1e-3, ev[14] + 1e-3)
    X = EnergyFilter((ev[10] - 0.5, ev[14] + 0.5), plateau)
    w = np.linalg.eigvalsh(filter_operator(sd, X))
    assert np.sum(np.isclose(w, 1.0, atol=1e-9)) == 5


# ---------------------------------------------------------------- moments


def test_moment_p0_constant(small_disordered):
    vals = moment(small_disordered, 0.0, EnergyFilter((0.0, 4.0)), (0.5,), [0.0, 1.3, 17.0, 400.0])
    assert np.ptp(vals) < 1e-10 * vals[0]


def test_moment_zero_filter(small_disordered):
    assert np.all(moment(small_disordered, 2.0, EnergyFilter.zero(), (0.5,), [0.0, 5.0]) == 0)


def test_moment_monotone_in_p(small_disordered):
    t = [0.0, 2.0, 20.0]
    prev = moment(small_disordered, 0.0, WIDE, (3.5,), t)
    for p in (0.5, 1, 2, 4):
        cur = moment(small_disordered, p, WIDE, (3.5,), t)
        assert np.all(cur >= prev)
        prev = cur


def test_unitarity(small_disordered):
    sd = small_disordered
    psi = np.random.default_rng(0).normal(size=sd.size)
    V, E = sd.eigenvectors, sd.eigenvalues
    for t in (0.1, 10.0, 1e3):
        phi = V @ (np.exp(-1j * t * E) * (V.T @ psi))
        assert abs(np.linalg.norm(phi) - np.linalg.norm(psi)) < 1e-10 * np.linalg.norm(psi)


def test_moment_phase_invariant(small_disordered):
    sd = small_disordered
    phases = np.exp(1j * np.random.default_rng(4).uniform(0, 2 * np.pi, sd.size))
    twisted = SpectralData(sd.eigenvalues.copy(), sd.eigenvectors * phases[None, :], sd.fingerprint, sd.grid)
    for t in (0.0, 3.0, 50.0):
        a = moment(sd, 2.0, WIDE, (0.5,), t)
        b = moment(twisted, 2.0, WIDE, (0.5,), t)
        assert abs(a - b) < 1e-9 * a
    assert abs(time_averaged_moment(sd, 2, WIDE, (0.5,), 7.0) - time_averaged_moment(twisted, 2, WIDE, (0.5,), 7.0)) < 1e-9


def test_cell_outside_box(small_disordered):
    with pytest.raises(CellOutsideBox):
        moment(small_disordered, 2.0, WIDE, (25.5,), 0.0)


def test_free_ballistic_growth(free_chain):
    t = np.geomspace(20, 200, 6)
    m = moment(free_chain, 2.0, WIDE, (0.5,), t)
    slope = np.polyfit(np.log(t), np.log(m), 1)[0]
    assert abs(slope - 2) < 0.1


# ---------------------------------------------------------------- time averages


def test_laplace_average_constant_and_square():
    assert laplace_average(lambda t: np.full_like(t, 3.0), 5.0) == pytest.approx(3.0 * (1 - np.exp(-20)), rel=1e-9)
    T = 7.0
    assert laplace_average(lambda t: t**2, T) == pytest.approx(T**2 / 2, rel=1e-4)


def test_laplace_average_reports_failure():
    rough = lambda t: np.sign(np.sin(1e4 * t))
    with pytest.raises(QuadratureError) as err:
        laplace_average(rough, 50.0, rtol=1e-12)
    assert err.value.achieved > 0


def test_time_average_small_T_limit(small_disordered):
    sd = small_disordered
    m0 = moment(sd, 2.0, WIDE, (0.5,), 0.0)
    assert time_averaged_moment(sd, 2.0, WIDE, (0.5,), 1e-3) == pytest.approx(m0, rel=1e-4)


def test_spectral_and_quadrature_agree(small_disordered):
    for T in (0.5, 4.0, 60.0):
        a = time_averaged_moment(small_disordered, 2.0, WIDE, (0.5,), T)
        b = time_averaged_moment(small_disordered, 2.0, WIDE, (0.5,), T, method="quadrature")
        assert b == pytest.approx(a, rel=1e-6)


# ---------------------------------------------------------------- exponents


def test_free_beta_near_one(free_trace):
    rep = annealed_exponent(free_trace)
    assert abs(rep.beta - 1) < 0.15
    assert rep.proxy.startswith("minimum over the upper half")


def test_beta_scale_shift(free_trace):
    base = annealed_exponent(free_trace).beta
    for c in (1.5, 1 / 1.5, 10.0):
        shifted = annealed_exponent(free_trace.scaled(c)).beta
        assert abs(shifted - base) < 2 * abs(np.log(c)) / (2.0 * np.log(T_FREE[0]))


def test_beta_scale_shift_decade_grid():
    T = np.geomspace(100, 1e4, 6)
    rng = np.random.default_rng(2)
    avg = T[None, None, :] ** 2 * rng.uniform(0.5, 1.5, (30, 2, 1))
    tr = TransportTrace(T, [(0.5,), (1.5,)], 2.0, avg, avg)
    base = annealed_exponent(tr).beta
    for c in (1.5, 1 / 1.5):
        assert abs(annealed_exponent(tr.scaled(c)).beta - base) < 0.05


def test_localized_beta_and_exceedance(localized_trace):
    rep = annealed_exponent(localized_trace)
    assert rep.beta <= 0.1
    q = quenched_probe(localized_trace, 1.0, 1.0, 1)
    assert np.all(q.exceedance == 0)


def test_ballistic_quenched_diverges(free_trace):
    q = quenched_probe(free_trace, 1.0, 1.0, 1)
    upper = len(T_FREE) // 2
    assert np.all(q.exceedance[upper:] == 1)
    assert np.allclose(q.values[upper:], T_FREE[upper:])
    assert q.diverging and not q.decreasing_tail


def test_quenched_large_alpha_vanishes(free_trace):
    q = quenched_probe(free_trace, 50.0, 1.0, 1)
    assert np.all(q.values == 0) and np.all(q.ci_low == 0)


def test_grid_and_realization_requirements(free_trace):
    short = TransportTrace(T_FREE[:3], free_trace.cells, 2.0, free_trace.averaged[:, :, :3],
                           free_trace.instantaneous[:, :, :3])
    with pytest.raises(InsufficientGrid):
        annealed_exponent(short)
    narrow = TransportTrace(np.linspace(2, 30, 6), free_trace.cells, 2.0, free_trace.averaged[:, :, :6],
                            free_trace.instantaneous[:, :, :6])
    with pytest.raises(InsufficientGrid):
        annealed_exponent(narrow)
    few = TransportTrace(T_FREE, free_trace.cells, 2.0, free_trace.averaged[:5], free_trace.instantaneous[:5])
    with pytest.raises(InsufficientRealizations):
        quenched_probe(few, 1.0, 1.0, 1)


def test_trace_rejects_negative_moments():
    with pytest.raises(ValueError):
        TransportTrace(T_FREE, [(0.5,)], 2.0, -np.ones((1, 1, 8)), np.ones((1, 1, 8)))


def test_trace_csv(tmp_path, free_trace):
    free_trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["realization", "u_index", "T", "p", "moment", "time_averaged"]
    assert len(rows) == 1 + 30 * 8


def test_ensemble_thread_invariance(small_disordered):
    build = lambda seed: small_disordered
    a = moment_ensemble(build, range(4), 2.0, WIDE, [(0.5,)], T_FREE, threads=1)
    b = moment_ensemble(build, range(4), 2.0, WIDE, [(0.5,)], T_FREE, threads=4)
    assert np.array_equal(a.averaged, b.averaged)


# ---------------------------------------------------------------- classification


def test_classify_region_rules():
    assert classify_region([(0.02, 0.03), (0.9, 0.1), (0.1, 0.05)], 0.1) == [DL, DD, INDETERMINATE]
    assert classify_region({1.0: (0.02, 0.03)}, 0.1) == {1.0: DL}
