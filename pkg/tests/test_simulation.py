import math

import numpy as np
import pytest

from meterleak.binary import BinaryScenario, binary_I0_emu, binary_I0_up
from meterleak.core import (
    INF,
    EnergyAlphabet,
    FiniteDistribution,
    PolicyKernel,
    binary_entropy,
    mutual_information,
)
from meterleak.errors import ConfigurationError, ValidationError
from meterleak.privacy_power import solve_privacy_power
from meterleak.simulation import (
    BatteryState,
    SimulationTrace,
    SystemConfig,
    default_storage_phase,
    estimate_conditional_leakage,
    estimate_leakage,
    run_best_effort,
    run_store_and_hide,
    run_zero_battery,
    sample_indices,
    sample_policy,
    step_battery,
)

PX = FiniteDistribution.bernoulli(0.7)
PE = FiniteDistribution.bernoulli(0.5)


@pytest.fixture(scope="module")
def kernel_045():
    sol = solve_privacy_power(PX, 0.45)
    return sol.kernel, sol.value


# ---------------------------------------------------------------------------
# battery recursion


@pytest.mark.parametrize("s, e, x, y, b, expected", [
    (0, 1, 1, 1, 5, 1),
    (3, 0, 2, 0, 5, 1),
    (5, 3, 0, 0, 5, 5),
    (0, 0, 2, 0, 5, 0),
    (7, 4, 0, 0, INF, 11),
])
def test_step_battery(s, e, x, y, b, expected):
    assert step_battery(s, e, x, y, b) == expected


def test_step_battery_state_wrapper_and_bounds():
    assert step_battery(BatteryState(2), 1, 1, 0, 5) == BatteryState(2)
    with pytest.raises(ValidationError):
        step_battery(0, 1, 1, 2)
    with pytest.raises(ValidationError):
        BatteryState(-1)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SystemConfig(PX, PE, n=0)
    with pytest.raises(ConfigurationError):
        SystemConfig(PX, PE, b_max=-1)
    with pytest.raises(ConfigurationError):
        SystemConfig(PX, PE, n=10, storage_phase=10)
    c = SystemConfig(PX, PE, n=10**6)
    assert c.storage_phase == default_storage_phase(10**6) == 1000
    assert c.echo()["b_max"] == "inf"


# ---------------------------------------------------------------------------
# sampling


def test_sample_policy_deterministic_rows():
    rng = np.random.default_rng(0)
    ident = PolicyKernel.identity(PX.alphabet)
    assert all(sample_policy(ident, x, rng=rng) == x for x in (0, 1) for _ in range(20))
    greedy = PolicyKernel.greedy(PX.alphabet, PE.alphabet)
    assert all(sample_policy(greedy, 1, 1, rng) == 0 for _ in range(20))


def test_sample_policy_frequency():
    k = PolicyKernel(PX.alphabet, PX.alphabet, np.array([[1.0, 0.0], [0.5, 0.5]]))
    rng = np.random.default_rng(12345)
    draws = sample_indices(k.matrix, np.ones(10**6, dtype=int), rng)
    # 10^6 draws: binomial standard deviation 0.0005
    assert abs(np.mean(draws == 0) - 0.5) < 0.002
    single = [sample_policy(k, 1, rng=rng) for _ in range(2000)]
    assert abs(np.mean(np.asarray(single) == 0) - 0.5) < 0.05


def test_sample_policy_needs_generator_and_state():
    greedy = PolicyKernel.greedy(PX.alphabet, PE.alphabet)
    with pytest.raises(ValidationError):
        sample_policy(greedy, 1, 1)
    with pytest.raises(ConfigurationError):
        sample_policy(greedy, 1, rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# estimators


def _trace(x, y, e=None):
    x = np.asarray(x)
    z = np.zeros_like(x)
    return SimulationTrace(x, np.asarray(y), z if e is None else np.asarray(e), z, z.astype(bool))


def test_estimator_constant_trace():
    assert estimate_leakage(_trace([0] * 100, [0] * 100)) == 0.0


def test_estimator_noiseless_uniform():
    x = np.random.default_rng(1).integers(0, 2, 200_000)
    assert estimate_leakage(_trace(x, x)) == pytest.approx(1.0, abs=1e-3)


def test_estimator_against_generating_joint():
    joint = np.array([[0.3, 0.1], [0.15, 0.45]])
    rng = np.random.default_rng(2)
    idx = rng.choice(4, size=10**6, p=joint.ravel())
    est = estimate_leakage(_trace(idx // 2, idx % 2))
    assert est == pytest.approx(mutual_information(joint), abs=0.005)


def test_estimator_empty_trace():
    with pytest.raises(ValidationError):
        estimate_leakage(_trace([], []))


# ---------------------------------------------------------------------------
# policies


def test_store_and_hide_identity_kernel():
    c = SystemConfig(PX, PE, n=100_000, seed=3)
    rep = run_store_and_hide(c, PolicyKernel.identity(PX.alphabet))
    assert rep.violation_count == 0
    assert rep.mean_draw == 0.0
    assert rep.empirical_leakage == pytest.approx(binary_entropy(0.7), abs=0.01)


def test_store_and_hide_optimal_kernel(kernel_045):
    kernel, ref = kernel_045
    rep = run_store_and_hide(SystemConfig(PX, PE, n=10**6, seed=1), kernel)
    assert rep.storage_phase == 1000
    assert abs(rep.empirical_leakage - ref) < 0.01


def test_store_and_hide_without_harvest_violates():
    pe0 = FiniteDistribution.bernoulli(0.0)
    k = PolicyKernel(PX.alphabet, PX.alphabet, np.array([[1.0, 0.0], [0.5, 0.5]]))
    c = SystemConfig(PX, pe0, n=50_000, seed=4)
    with pytest.warns(RuntimeWarning):
        rep = run_store_and_hide(c, k, allow_nonstrict=True)
    hiding_requests = np.sum(rep.trace.x[rep.storage_phase:] != rep.trace.y[rep.storage_phase:])
    assert hiding_requests == 0
    assert rep.violation_count > 0
    assert rep.empirical_leakage == pytest.approx(binary_entropy(0.7), abs=0.01)


def test_best_effort_identity_kernel():
    rep = run_best_effort(SystemConfig(PX, PE, n=50_000, seed=5), PolicyKernel.identity(PX.alphabet))
    assert rep.violation_count == 0
    assert rep.empirical_leakage == pytest.approx(binary_entropy(0.7), abs=0.01)


def test_best_effort_optimal_kernel(kernel_045):
    kernel, ref = kernel_045
    rep = run_best_effort(SystemConfig(PX, PE, n=10**6, seed=1), kernel)
    assert rep.violation_fraction < 1e-3
    assert abs(rep.empirical_leakage - ref) < 0.01


def test_best_effort_zero_capacity_stays_batteryless(kernel_045):
    kernel, _ = kernel_045
    rep = run_best_effort(SystemConfig(PX, PE, b_max=0, n=20_000, seed=6), kernel)
    assert np.all(rep.trace.s == 0)
    # every AES draw must have been covered by the same slot's harvest
    assert np.all(rep.trace.x - rep.trace.y <= rep.trace.e)


def test_battery_policies_reject_overspending_kernel(kernel_045):
    kernel, _ = kernel_045
    pe = FiniteDistribution.bernoulli(0.45)
    c = SystemConfig(PX, pe, n=1000)
    with pytest.raises(ConfigurationError):
        run_best_effort(c, kernel)
    with pytest.raises(ConfigurationError):
        run_store_and_hide(c, kernel)
    with pytest.warns(RuntimeWarning):
        run_best_effort(c, kernel, allow_nonstrict=True)


def test_battery_policies_reject_state_dependent_kernel():
    greedy = PolicyKernel.greedy(PX.alphabet, PE.alphabet)
    with pytest.raises(ConfigurationError):
        run_best_effort(SystemConfig(PX, PE, n=100), greedy)


def test_zero_battery_greedy_kernel():
    greedy = PolicyKernel.greedy(PX.alphabet, PE.alphabet)
    rep = run_zero_battery(SystemConfig(PX, PE, b_max=0, n=10**6, seed=7), greedy)
    s = BinaryScenario(0.7, 0.5)
    assert rep.empirical_leakage == pytest.approx(binary_I0_emu(s), abs=0.01)
    assert rep.conditional_leakage == pytest.approx(binary_I0_up(s), abs=0.01)
    assert rep.violation_count == 0


def test_zero_battery_full_harvest():
    pe1 = FiniteDistribution.bernoulli(1.0)
    greedy = PolicyKernel.greedy(PX.alphabet, pe1.alphabet)
    rep = run_zero_battery(SystemConfig(PX, pe1, b_max=0, n=10**5, seed=8), greedy)
    assert rep.conditional_leakage == pytest.approx(0.0, abs=1e-9)


def test_zero_battery_configuration_errors():
    greedy = PolicyKernel.greedy(PX.alphabet, PE.alphabet)
    with pytest.raises(ConfigurationError):
        run_zero_battery(SystemConfig(PX, PE, n=100), greedy)
    with pytest.raises(ConfigurationError):
        run_zero_battery(SystemConfig(PX, PE, b_max=0, n=100), PolicyKernel.identity(PX.alphabet))
    # asks for a unit of energy in slots where none was harvested
    bad = np.zeros((2, 2, 2))
    bad[:, :, 0] = 1.0
    k = PolicyKernel(PX.alphabet, PX.alphabet, bad, PE.alphabet)
    with pytest.raises(ConfigurationError):
        run_zero_battery(SystemConfig(PX, PE, b_max=0, n=100), k)


def test_conditional_estimator_matches_per_state_average():
    greedy = PolicyKernel.greedy(PX.alphabet, PE.alphabet)
    rep = run_zero_battery(SystemConfig(PX, PE, b_max=0, n=50_000, seed=9), greedy)
    assert estimate_conditional_leakage(rep.trace) == rep.conditional_leakage


# ---------------------------------------------------------------------------
# reproducibility


def test_same_seed_same_trace(kernel_045):
    kernel, _ = kernel_045
    a = run_best_effort(SystemConfig(PX, PE, n=20_000, seed=11), kernel)
    b = run_best_effort(SystemConfig(PX, PE, n=20_000, seed=11), kernel)
    c = run_best_effort(SystemConfig(PX, PE, n=20_000, seed=12), kernel)
    assert a.trace_digest == b.trace_digest != c.trace_digest
    assert a.to_dict() == b.to_dict()


def test_horizons_share_a_prefix(kernel_045):
    kernel, _ = kernel_045
    short = run_best_effort(SystemConfig(PX, PE, n=1000, seed=13), kernel)
    long = run_best_effort(SystemConfig(PX, PE, n=5000, seed=13), kernel)
    assert np.array_equal(short.trace.y, long.trace.y[:1000])
    assert np.array_equal(short.trace.s, long.trace.s[:1000])


def test_trace_csv(tmp_path, kernel_045):
    kernel, _ = kernel_045
    rep = run_best_effort(SystemConfig(PX, PE, n=50, seed=14), kernel)
    path = tmp_path / "trace.csv"
    rep.trace.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,y,e,s,violated"
    assert len(lines) == 51


def test_report_dict_is_json_ready(kernel_045):
    import json
    kernel, _ = kernel_045
    rep = run_best_effort(SystemConfig(PX, PE, n=100, seed=15), kernel)
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["n"] == 100 and d["policy"] == "best-effort"
    assert math.isclose(d["violation_fraction"], rep.violation_count / 100)


# ---------------------------------------------------------------------------
# trace invariants


def test_violation_fraction_does_not_grow_with_horizon(kernel_045):
    kernel, _ = kernel_045
    for seed in range(20):
        short = run_best_effort(SystemConfig(PX, PE, n=10**4, seed=seed), kernel)
        long = run_best_effort(SystemConfig(PX, PE, n=10**6, seed=seed), kernel)
        assert long.violation_fraction <= short.violation_fraction


@pytest.mark.parametrize("b_max", [INF, 3, 0])
@pytest.mark.parametrize("runner", [run_best_effort, run_store_and_hide])
def test_trace_invariants(kernel_045, runner, b_max):
    kernel, _ = kernel_045
    c = SystemConfig(PX, PE, b_max=b_max, n=50_000, storage_phase=100, seed=16)
    tr = runner(c, kernel).trace
    assert np.all((tr.y >= 0) & (tr.y <= tr.x))
    assert np.all(tr.s >= 0)
    if b_max != INF:
        assert np.all(tr.s <= b_max)
    # replaying the recursion reproduces every stored level
    s = 0
    for t in range(len(tr) - 1):
        s = step_battery(s, tr.e[t], tr.x[t], tr.y[t], b_max)
        assert s == tr.s[t + 1]
    if b_max == INF:
        assert np.all(np.cumsum(tr.x - tr.y) <= np.cumsum(tr.e))
