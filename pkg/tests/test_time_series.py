import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from newton_infer.approx_newton import NewtonInferConfig, run_inference
from newton_infer.errors import ConfigError, UsageError
from newton_infer.model import (
    MeanLoss,
    SquaredLoss,
    full_gradient,
    generate_ma_timeseries,
    generate_mean,
    minibatch_gradient,
)
from newton_infer.time_series import (
    BlockSamplerConfig,
    HacWeighting,
    circular_block,
    default_lag,
    newey_west,
    run_inference_timeseries,
)
from tests import oracles

SQ = SquaredLoss()


def test_circular_block_examples():
    assert circular_block(3, 3, 4).tolist() == [3, 0, 1]
    assert circular_block(0, 1, 5).tolist() == [0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))))
def test_each_index_in_l_blocks(nl):
    n, l = nl
    counts = np.bincount(np.concatenate([circular_block(i, l, n) for i in range(n)]), minlength=n)
    assert np.all(counts == l)


def test_circular_block_rejects():
    with pytest.raises(UsageError):
        circular_block(0, 6, 5)
    with pytest.raises(UsageError):
        circular_block(5, 1, 5)


def test_block_sampler_config():
    with pytest.raises(ConfigError, match="lag"):
        BlockSamplerConfig(0, 10)
    with pytest.raises(ConfigError, match="lag"):
        BlockSamplerConfig(11, 10)
    BlockSamplerConfig(10, 10)


def test_default_lag():
    assert default_lag(200) == 3
    assert default_lag(16) == 2
    assert default_lag(1) == 1


def test_hac_weights():
    assert HacWeighting.BARTLETT.weight(1, 1) == 0.5
    assert HacWeighting.ALGORITHM_IMPLIED.weight(1, 1) == 0.0
    for l in range(1, 8):
        for j in range(l + 1):
            for kind in HacWeighting:
                assert 0.0 <= kind.weight(j, l) <= 1.0


def test_block_unbiasedness():
    data = generate_ma_timeseries(50, 4, np.ones(4), seed=3)
    theta = np.linspace(-1, 1, 4)
    for l in (1, 3, 7):
        avg = np.mean([minibatch_gradient(SQ, data, circular_block(i, l, 50), theta) for i in range(50)], axis=0)
        np.testing.assert_allclose(avg, full_gradient(SQ, data, theta), atol=1e-12)


def test_full_block_is_full_gradient():
    data = generate_ma_timeseries(30, 3, np.ones(3), seed=1)
    cfg = NewtonInferConfig(T=5, L=10, S_i=3, rho0=0.5, tau0=0.5, seed=2)
    theta0 = np.full(3, 0.1)
    a = run_inference_timeseries(SQ, data, theta0, cfg, l=30)
    b = run_inference_timeseries(SQ, data, theta0, cfg.replace(seed=7), l=30)
    assert a.batch == 30
    # the first outer gradient does not depend on the block start
    np.testing.assert_allclose(
        a.replicates[0].scaled / np.sqrt(30),
        a.replicates[0].g_bar / a.replicates[0].rho_t,
    )
    g0 = -0.5 * full_gradient(SQ, data, theta0)
    for run in (a, b):
        np.testing.assert_allclose(-0.5 * minibatch_gradient(SQ, data, run.outer_indices[0], theta0), g0, atol=1e-14)


def test_lag_one_reduces_to_iid_engine():
    data = generate_ma_timeseries(40, 3, np.ones(3), seed=5)
    cfg = NewtonInferConfig(T=12, L=20, S_o=1, S_i=4, rho0=0.5, tau0=0.5, seed=11)
    theta0 = np.full(3, 0.2)
    a = run_inference_timeseries(SQ, data, theta0, cfg, l=1)
    b = run_inference(SQ, data, theta0, cfg)
    np.testing.assert_array_equal(a.theta_trace, b.theta_trace)
    for ra, rb in zip(a.replicates, b.replicates):
        np.testing.assert_array_equal(ra.scaled, rb.scaled)
    np.testing.assert_array_equal(a.block_starts, b.outer_indices[:, 0])


def test_mean_estimation_block_mean_identity():
    data = generate_mean(60, 2, seed=4)
    cfg = NewtonInferConfig(T=25, L=4, S_i=3, rho0=0.4, tau0=0.5, seed=1)
    run = run_inference_timeseries(MeanLoss(), data, np.zeros(2), cfg, l=5)
    for t, rep in enumerate(run.replicates):
        block_mean = data.x[circular_block(int(run.block_starts[t]), 5, 60)].mean(axis=0)
        np.testing.assert_allclose(rep.g_bar / rep.rho_t, block_mean - run.theta_trace[t], atol=1e-14)
        np.testing.assert_allclose(rep.scaled, np.sqrt(5) * rep.g_bar / rep.rho_t, rtol=1e-15)


def test_timeseries_replicate_csv_has_block_column(tmp_path):
    from newton_infer.approx_newton import write_replicates_csv

    data = generate_ma_timeseries(20, 2, np.ones(2), seed=0)
    run = run_inference_timeseries(SQ, data, np.zeros(2), NewtonInferConfig(T=3, L=5, S_i=2, rho0=0.5, tau0=0.5), l=2)
    write_replicates_csv(tmp_path / "r.csv", run)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "t,rho_t,block_start,g1,g2"
    assert int(lines[1].split(",")[2]) == run.block_starts[0]


def test_newey_west_examples():
    g = np.array([1.0, -1.0])
    assert newey_west(g, 1, HacWeighting.ALGORITHM_IMPLIED)[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert newey_west(g, 1, HacWeighting.BARTLETT)[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_newey_west_rejects_short_series():
    with pytest.raises(UsageError):
        newey_west(np.ones(3), 3)


def test_newey_west_matches_loop_oracle(rng):
    g = rng.standard_normal((25, 3))
    for kind in HacWeighting:
        ref = oracles.newey_west_loops(g, 4, kind.weight)
        np.testing.assert_allclose(newey_west(g, 4, kind), ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(5, 30), st.integers(1, 4)), elements=st.floats(-10, 10)),
    st.integers(0, 4),
)
def test_newey_west_bartlett_psd(g, l):
    m = newey_west(g, l, HacWeighting.BARTLETT)
    np.testing.assert_array_equal(m, m.T)
    assert np.linalg.eigvalsh(m)[0] >= -1e-10 * max(1.0, np.abs(m).max())


def test_newey_west_iid_monte_carlo():
    g = np.random.default_rng(0).standard_normal(100_000)
    lag0 = newey_west(g, 0)[0, 0]
    assert newey_west(g, 5, HacWeighting.BARTLETT)[0, 0] == pytest.approx(lag0, rel=0.05)
