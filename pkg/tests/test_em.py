import numpy as np
import pytest

from ldpm.aggregate import reconstruct_marginal
from ldpm.core import Distribution, MarginalSpec, MarginalTable, k_way_specs, marginal_operator, total_variation
from ldpm.em import EmConfig, bit_channel, decode_all, decode_marginal, em_decode, em_decode_many, failure_count
from ldpm.experiment import collect
from ldpm.mechanisms import PrivacyParams, rr_probability

SPEC2 = MarginalSpec(2, 0b11)


def noisy_counts(truth, p, n, seed):
    """Histogram of n reports whose bits were each flipped with probability 1 - p."""
    rng = np.random.default_rng(seed)
    k = int(np.log2(len(truth)))
    x = rng.choice(len(truth), size=n, p=truth)
    flips = (rng.random((n, k)) >= p) @ (1 << np.arange(k - 1, -1, -1))
    return np.bincount(x ^ flips, minlength=len(truth))


def test_bit_channel_is_stochastic():
    M = bit_channel(3, 0.8)
    np.testing.assert_allclose(M.sum(axis=0), 1.0)
    assert M[0, 0] == pytest.approx(0.8**3)
    assert M[0b011, 0] == pytest.approx(0.8 * 0.2**2)
    np.testing.assert_array_equal(bit_channel(2, 1.0), np.eye(4))


def test_noiseless_em_recovers_empirical_table():
    counts = np.array([50, 10, 25, 15])
    res = em_decode(counts, SPEC2, 1.0)
    np.testing.assert_allclose(res.table.cells, counts / counts.sum(), atol=1e-15)
    assert res.iterations <= 2
    assert res.converged


def test_uniform_observations_are_degenerate():
    res = em_decode(np.full(4, 250), SPEC2, 0.6)
    assert res.iterations == 1
    assert res.degenerate and res.table.flags["degenerate"]
    np.testing.assert_allclose(res.table.cells, 0.25)


def test_em_matches_channel_inversion():
    p, truth = 0.75, np.array([0.5, 0.2, 0.2, 0.1])
    counts = noisy_counts(truth, p, 1 << 16, 1)
    inverted = np.linalg.solve(bit_channel(2, p), counts / counts.sum())
    assert np.all(inverted > 0)
    res = em_decode(counts, SPEC2, p)
    assert res.converged and not res.degenerate
    assert total_variation(res.table, MarginalTable(SPEC2, inverted)) < 0.05
    assert total_variation(res.table, MarginalTable(SPEC2, truth)) < 0.05


def test_iterates_are_distributions_and_likelihood_increases():
    p, truth = 0.7, np.array([0.4, 0.1, 0.3, 0.2])
    counts = noisy_counts(truth, p, 5000, 2)
    for steps in range(1, 30):
        theta, *_ = em_decode_many(counts, 2, p, EmConfig(max_iterations=steps))
        assert np.all(theta >= 0)
        assert abs(theta.sum() - 1.0) < 1e-12
    res = em_decode(counts, SPEC2, p, track_likelihood=True)
    ll = np.array(res.log_likelihood)
    assert len(ll) == res.iterations + 1
    assert np.all(np.diff(ll) >= -1e-9)


def test_iterations_grow_as_noise_increases():
    truth = np.array([0.45, 0.05, 0.15, 0.35])
    iters = []
    for eps in (2.0, 1.0, 0.5):
        p = rr_probability(eps)
        iters.append(em_decode(noisy_counts(truth, p, 1 << 15, 3), SPEC2, p).iterations)
    assert iters[0] < iters[1] < iters[2]


def test_max_iterations_cap_reports_non_convergence():
    counts = noisy_counts(np.array([0.7, 0.1, 0.1, 0.1]), 0.55, 1 << 14, 4)
    res = em_decode(counts, SPEC2, 0.55, EmConfig(max_iterations=3))
    assert res.iterations == 3 and not res.converged


def test_l1_metric_runs_longer():
    counts = noisy_counts(np.array([0.7, 0.1, 0.1, 0.1]), 0.6, 1 << 14, 5)
    a = em_decode(counts, SPEC2, 0.6, EmConfig(metric="max_abs"))
    b = em_decode(counts, SPEC2, 0.6, EmConfig(metric="l1"))
    assert b.iterations >= a.iterations


def test_config_and_input_validation():
    with pytest.raises(ValueError):
        EmConfig(omega=0)
    with pytest.raises(ValueError):
        EmConfig(max_iterations=0)
    with pytest.raises(ValueError):
        EmConfig(metric="l2")
    with pytest.raises(ValueError):
        em_decode_many(np.ones(4), 2, 0.5)
    with pytest.raises(ValueError):
        em_decode_many(np.ones(3), 2, 0.7)
    with pytest.raises(ValueError):
        em_decode_many(np.zeros(4), 2, 0.7)


def test_batched_decode_matches_single_rows():
    rows = np.array([noisy_counts(np.array([0.4, 0.3, 0.2, 0.1]), 0.65, 4000, s) for s in range(5)])
    theta, iters, conv, _ = em_decode_many(rows, 2, 0.65)
    for r in range(5):
        single = em_decode(rows[r], SPEC2, 0.65)
        np.testing.assert_allclose(theta[r], single.table.cells, rtol=1e-12)
        assert iters[r] == single.iterations


def test_decoding_inpem_reports():
    d, k = 5, 2
    rng = np.random.default_rng(6)
    signals = rng.choice(1 << d, size=1 << 15, p=rng.dirichlet(np.ones(1 << d)))
    truth = Distribution.from_records(signals, d)
    params = PrivacyParams("InpEM", 8.0, d, k)
    acc = collect(signals, params, 7, "em")
    results = decode_all(acc)
    assert [r.table.spec for r in results] == k_way_specs(d, k)
    for r in results:
        assert total_variation(r.table, marginal_operator(truth, r.table.spec)) < 0.08
        single = decode_marginal(acc, r.table.spec)
        np.testing.assert_allclose(single.table.cells, r.table.cells, rtol=1e-12)
    table = reconstruct_marginal(acc, results[0].table.spec)
    np.testing.assert_allclose(table.cells, results[0].table.cells, rtol=1e-12)
    assert failure_count(results) == (sum(r.degenerate for r in results), len(results))


def test_decode_rejects_other_mechanisms():
    acc = collect([1, 2], PrivacyParams("InpPS", 1.0, 3, 2), 0)
    with pytest.raises(ValueError):
        decode_marginal(acc, MarginalSpec(3, 0b011))
    with pytest.raises(ValueError):
        decode_all(acc)
