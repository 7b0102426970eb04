import numpy as np
import pytest

from rotorwave.analysis import error_epsilon
from rotorwave.angular import SO2
from rotorwave.dynamics import (
    GuardError, PropagationConfig, PropagationError, PulseSpec, RpwfSet, StateVector, ensemble_dynamics,
    field_amplitude, propagate, rpwf_direct, rpwf_ensemble_run,
)
from rotorwave.thermal import boltzmann_ensemble

SHORT = PropagationConfig(dt=0.005, t_start=-15.0, t_end=15.0, sample_every=0.05, j_buffer=8)
PULSE = PulseSpec(E0=1.2)


def _mixed_state(Jmax=20, seed=0):
    rng = np.random.default_rng(seed)
    blocks = {}
    for M in (-2, 0, 1, 3):
        n = (Jmax + 1) ** 2 - M * M
        v = np.zeros(n, dtype=complex)
        v[:12] = rng.normal(size=12) + 1j * rng.normal(size=12)
        blocks[M] = v
    s = StateVector(SO2, Jmax, blocks)
    nrm = np.sqrt(s.norm())
    return StateVector(SO2, Jmax, {M: v / nrm for M, v in blocks.items()})


@pytest.fixture(scope="module")
def ens2():
    return boltzmann_ensemble(SO2, 2.0)


def test_field_is_antisymmetric():
    p = PULSE
    lo, hi = p.window
    t = np.linspace(lo, hi, 200001)
    integral = np.trapezoid(field_amplitude(t, p), t)
    assert abs(integral) / (p.E0 * p.sigma) < 1e-12
    assert p.realized_peak() < p.E0
    assert field_amplitude(p.t_center + 11 * p.sigma, p) == 0.0


def test_pulse_fwhm_roundtrip():
    p = PulseSpec.from_fwhm(2.0, fwhm=1.0)
    assert p.fwhm == pytest.approx(1.0)
    assert p.sigma == pytest.approx(0.6005612, rel=1e-6)


def test_field_free_eigenstate_is_stationary():
    s = StateVector.eigenstate(SO2, 6, 2, 1, 3)
    tr, fin = propagate(s, PulseSpec(E0=0.0), SHORT)
    assert np.ptp(tr.orientation) < 1e-13 and np.ptp(tr.alignment) < 1e-13
    assert abs(abs(fin.blocks[1][4 - 1 + 3 - 1]) - 1.0) < 1e-12


def test_unitarity_and_block_conservation():
    s = _mixed_state()
    tr, fin = propagate(s, PulseSpec(E0=4.0), SHORT)
    assert tr.metadata["norm_drift"] <= 1e-8
    assert abs(fin.norm() - 1.0) < 1e-10
    for M, n0 in s.block_norms().items():
        assert fin.block_norms()[M] == pytest.approx(n0, abs=1e-10)


def test_energy_constant_after_pulse():
    s = StateVector.eigenstate(SO2, 12, 0, 0, 1)
    e = []
    for t_end in (5.0, 12.0):
        cfg = PropagationConfig(dt=0.005, t_start=-15.0, t_end=t_end, j_buffer=8)
        _, fin = propagate(s, PULSE, cfg)
        e.append(fin.energy())
    assert e[0] > 1e-6  # the pulse did work
    assert e[1] == pytest.approx(e[0], rel=1e-10)


def test_linearity_of_propagation():
    a = StateVector.eigenstate(SO2, 8, 1, 0, 2)
    b = StateVector.eigenstate(SO2, 8, 2, 0, 4)
    ca, cb = 0.6, 0.8j
    ab = StateVector(SO2, 8, {0: ca * a.blocks[0] + cb * b.blocks[0]})
    _, fa = propagate(a, PULSE, SHORT)
    _, fb = propagate(b, PULSE, SHORT)
    _, fab = propagate(ab, PULSE, SHORT)
    np.testing.assert_allclose(fab.blocks[0], ca * fa.blocks[0] + cb * fb.blocks[0], atol=1e-12)


def test_split_step_agrees_with_rk4():
    s = StateVector.eigenstate(SO2, 18, 1, 1, 1)
    cfg_s = PropagationConfig(dt=0.002, t_start=-15.0, t_end=10.0, j_buffer=8)
    cfg_r = PropagationConfig(dt=0.002, t_start=-15.0, t_end=10.0, j_buffer=8, method="rk4")
    a, _ = propagate(s, PulseSpec(E0=3.0), cfg_s)
    b, _ = propagate(s, PulseSpec(E0=3.0), cfg_r)
    assert np.max(np.abs(a.orientation - b.orientation)) < 1e-6
    assert np.max(np.abs(a.alignment - b.alignment)) < 1e-6


def test_split_step_is_second_order():
    s = StateVector.eigenstate(SO2, 18, 0, 0, 1)
    traces = []
    for dt in (0.02, 0.01, 0.005):
        cfg = PropagationConfig(dt=dt, t_start=-15.0, t_end=10.0, sample_every=0.1, j_buffer=8)
        traces.append(propagate(s, PulseSpec(E0=5.0), cfg)[0].orientation)
    e1 = np.max(np.abs(traces[0] - traces[1]))
    e2 = np.max(np.abs(traces[1] - traces[2]))
    assert 3.0 < e1 / e2 < 5.0


def test_weak_field_response_is_linear():
    s = StateVector.eigenstate(SO2, 8, 0, 0, 1)
    a, _ = propagate(s, PulseSpec(E0=0.01), SHORT)
    b, _ = propagate(s, PulseSpec(E0=0.02), SHORT)
    np.testing.assert_allclose(b.orientation, 2 * a.orientation, rtol=0, atol=1e-4 * np.max(np.abs(b.orientation)))


def test_thermal_trace_pre_pulse_isotropic(ens2):
    dyn = ensemble_dynamics(ens2, PULSE, SHORT)
    tr = dyn.exact
    t, o, a = tr.window(-15.0, PULSE.window[0])
    assert np.max(np.abs(o)) < 1e-14
    assert np.max(np.abs(a - 1 / 3)) < 1e-13
    assert tr.within_bounds()
    assert np.max(np.abs(tr.orientation)) > 1e-3


def test_superposition_matches_direct(ens2):
    dyn = ensemble_dynamics(ens2, PULSE, SHORT, [RpwfSet(5, np.arange(7))])
    run = rpwf_direct(ens2, PULSE, SHORT, 5, np.arange(7), chunk=3)
    np.testing.assert_allclose(dyn.rpwf[0].orientation, run.trace.orientation, atol=1e-12)
    np.testing.assert_allclose(dyn.rpwf[0].alignment, run.trace.alignment, atol=1e-12)


def test_realizations_average_to_set(ens2):
    run = rpwf_ensemble_run(ens2, PULSE, SHORT, 3, 4, mode="direct", keep_realizations=True)
    mean = np.mean([r.orientation for r in run.realizations], axis=0)
    np.testing.assert_allclose(mean, run.trace.orientation, atol=1e-14)
    for r in run.realizations:
        assert r.within_bounds()


def test_rpwf_error_shrinks_with_more_realizations(ens2):
    sets = [RpwfSet(s, np.arange(n)) for n in (4, 64) for s in range(4)]
    dyn = ensemble_dynamics(ens2, PULSE, SHORT, sets)
    eps = [error_epsilon(tr, dyn.exact, T_rev=15.0, t0=0.0) for tr in dyn.rpwf]
    assert np.mean(eps[4:]) < np.mean(eps[:4]) / 4


def test_determinism(ens2):
    a = ensemble_dynamics(ens2, PULSE, SHORT, [RpwfSet(9, np.arange(5))])
    b = ensemble_dynamics(ens2, PULSE, SHORT, [RpwfSet(9, np.arange(5))])
    assert a.rpwf[0].orientation.tobytes() == b.rpwf[0].orientation.tobytes()
    assert a.exact.alignment.tobytes() == b.exact.alignment.tobytes()


def test_leakage_aborts():
    s = StateVector.eigenstate(SO2, 3, 0, 0, 1)
    cfg = PropagationConfig(dt=0.005, t_start=-15.0, t_end=0.0, j_buffer=0)
    with pytest.raises(PropagationError) as err:
        propagate(s, PulseSpec(E0=20.0), cfg)
    assert err.value.kind == "leakage"


def test_guard(ens2):
    cfg = PropagationConfig(dt=0.005, t_end=0.0, max_exact_states=ens2.n_states - 1)
    with pytest.raises(GuardError):
        ensemble_dynamics(ens2, PULSE, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        PropagationConfig(dt=0.003, sample_every=0.05)
    with pytest.raises(ValueError):
        PropagationConfig(t_end=-20.0)
    with pytest.raises(ValueError):
        PropagationConfig(method="euler")
    with pytest.raises(ValueError):
        PulseSpec(E0=-1.0)
