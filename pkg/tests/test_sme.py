import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakmeas import geometry as geo, sme, trajectory as tr


def model(N=8, gamma=0.1, J=1.0):
    op = tr.build_effective_operator(geo.odd_sites(20), J, 0.0, gamma, N)
    return op, tr.initial_superfluid(op.geom, N)


def test_photocurrent_examples():
    op, _ = model(N=5, gamma=0.3)
    rho = np.zeros((6, 6), complex)
    rho[0, 0] = 1
    assert sme.photocurrent(rho, op, 0.7) == 0
    rho[:] = 0
    rho[5, 5] = 1
    assert sme.photocurrent(rho, op, 0.7) == pytest.approx(0.7 * 0.3 * 25)


def test_efficiency_threshold():
    assert sme.efficiency_threshold(1.0, 0.01, 100) == pytest.approx(1e-2)


def test_density_matrix_validation():
    with pytest.raises(ValueError):
        sme.ConditionalDensityMatrix(np.eye(2) / 2, 1.5)
    with pytest.raises(sme.SMEError):
        sme.ConditionalDensityMatrix(np.diag([1.2, -0.2]).astype(complex), 0.5).check()
    sme.ConditionalDensityMatrix(np.eye(3) / 3, 0.5).check()


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 ** 31))
def test_step_preserves_trace_hermiticity_positivity(eta, seed):
    op, psi = model(N=6)
    rng = np.random.default_rng(seed)
    rho = sme.ConditionalDensityMatrix.pure(psi, eta).rho
    stepper = sme._Stepper(op, eta, 0.01)
    for _ in range(50):
        rho, _ = sme.sme_step(rho, op, 0.01, eta, rng, stepper)
        sme.ConditionalDensityMatrix(rho, eta).check()


def test_zero_efficiency_never_detects():
    op, psi = model()
    rec = sme.run_sme(op, psi, 0.0, 10.0, 0.1, rng=1)
    assert len(rec.detection_times) == 0 and rec.n_ph[-1] == 0


def test_step_rejects_large_probability():
    op, psi = model(N=8, gamma=10.0)
    rho = np.zeros((9, 9), complex)
    rho[8, 8] = 1
    with pytest.raises(sme.SMEError):
        sme.sme_step(rho, op, 0.01, 1.0, np.random.default_rng(0))


def test_unit_efficiency_stays_pure_and_matches_wavefunction():
    op, psi = model(N=10, gamma=0.05)
    wf = tr.run_trajectory(op, psi, 10.0, 0.1, rng=3)
    assert wf.n_jumps > 0
    rec = sme.run_sme(op, psi, 1.0, 10.0, 0.1, forced_jumps=wf.jump_times, max_dt=0.005)
    np.testing.assert_allclose(rec.purity, 1, atol=1e-8)
    np.testing.assert_allclose(rec.n_mean, wf.mode_means[:, 0], atol=1e-5)
    np.testing.assert_allclose(rec.detection_times, wf.jump_times)


def test_staircase_counts_nondecreasing_and_sigma_band():
    op, psi = model(N=10, gamma=0.05)
    rec = sme.run_sme(op, psi, 0.5, 10.0, 0.1, rng=2, check_every=10)
    assert np.all(np.diff(rec.n_ph) >= 0)
    assert np.all(rec.sigma >= 0)


def test_unconditional_average_converges_to_lindblad():
    op, psi = model(N=6, gamma=0.2)
    horizon = 3.0
    ref = sme.lindblad_evolve(op, psi, np.array([0.0, horizon]))[-1]
    rng = np.random.default_rng(11)
    for eta in (0.3, 1.0):
        acc = np.zeros_like(ref)
        n = 1000
        for _ in range(n):
            acc += sme.run_sme(op, psi, eta, horizon, 0.5, rng=rng, final_state=True).extras["rho"]
        err = np.abs(np.linalg.eigvalsh(acc / n - ref)).sum()
        assert err < 0.05


def test_unit_efficiency_ensemble_matches_wavefunction_ensemble():
    op, psi = model(N=8, gamma=0.1)
    rng = np.random.default_rng(5)
    a = np.array([sme.run_sme(op, psi, 1.0, 4.0, 0.5, rng=rng).n_mean for _ in range(150)])
    b = np.array([tr.run_trajectory(op, psi, 4.0, 0.5, rng=rng).mode_means[:, 0] for _ in range(150)])
    se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
    diff = np.abs(a.mean(axis=0) - b.mean(axis=0))
    assert np.all(diff[1:] < 3 * se[1:] + 1e-12)


def test_photocurrent_integrates_to_counts():
    op, psi = model(N=8, gamma=0.1)
    rng = np.random.default_rng(8)
    eta = 0.4
    counts, expected = 0, 0.0
    for _ in range(40):
        rec = sme.run_sme(op, psi, eta, 6.0, 0.02, rng=rng)
        counts += len(rec.detection_times)
        rate = eta * op.gamma * rec.n_mean ** 2 + eta * op.gamma * rec.sigma ** 2
        expected += np.trapezoid(rate, rec.times)
    assert abs(counts - expected) < 3 * math.sqrt(expected)


def test_thinning_keeps_fraction():
    rng = np.random.default_rng(0)
    t = np.sort(rng.uniform(0, 100, 20000))
    kept = sme.thin(t, 0.1, rng)
    assert abs(len(kept) - 2000) < 3 * math.sqrt(20000 * 0.1 * 0.9)
    assert np.all(np.isin(kept, t))


def _poisson_record(rate_fn, horizon, rmax, rng):
    t = np.cumsum(rng.exponential(1 / rmax, int(rmax * horizon * 1.5)))
    t = t[t < horizon]
    return t[rng.random(len(t)) < rate_fn(t) / rmax]


def test_staircase_recovers_injected_period():
    rng = np.random.default_rng(1)
    T = math.pi
    det = _poisson_record(lambda t: 40 * (1 + np.cos(2 * math.pi * t / T)), 60.0, 80.0, rng)
    out = sme.staircase_detect(det, 60.0, window=0.3)
    assert out["steps"] >= 15
    assert out["period"] == pytest.approx(T, rel=0.05)


def test_staircase_constant_rate_has_no_steps():
    rng = np.random.default_rng(2)
    false = [sme.staircase_detect(_poisson_record(lambda t: 40 + 0 * t, 60.0, 40.0, rng), 60.0,
                                  window=0.3)["steps"] for _ in range(20)]
    # the default threshold targets 0.05 spurious risers per record
    assert sum(false) <= 3
    assert sme.staircase_detect([], 60.0, window=0.3)["steps"] == 0


def test_staircase_insufficient_data():
    with pytest.raises(sme.InsufficientData):
        sme.staircase_detect([0.1, 0.2], 0.5, window=0.3)
