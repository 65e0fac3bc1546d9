import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inclusivefl.baselines import (
    HeteroFLServer,
    HomogeneousServer,
    LocalTrainer,
    crop_params,
    heterofl_aggregate,
    heterofl_crop,
    solve_widths,
    sub_shapes,
)
from inclusivefl.config import ExperimentConfig
from inclusivefl.data import Dataset
from inclusivefl.errors import ConfigError, DimensionError
from inclusivefl.fed import ClientSpec, FedAdamConfig, LocalConfig, local_update
from inclusivefl.harness import build_experiment, run_baseline
from inclusivefl.model import add, build_tier_models, count_parameters, forward, params_equal
from inclusivefl.tensor import TAG_LOCAL, Rng


def test_crop_example():
    w = np.arange(1.0, 10.0).reshape(3, 3)
    assert heterofl_crop(w, 2, 2).tolist() == [[1.0, 2.0], [4.0, 5.0]]


def test_full_crop_is_identity():
    w = np.random.default_rng(0).standard_normal((3, 4))
    assert heterofl_crop(w, 3, 4).tobytes() == w.tobytes()


def test_oversize_crop():
    with pytest.raises(DimensionError):
        heterofl_crop(np.ones((2, 2)), 3, 2)
    with pytest.raises(DimensionError):
        heterofl_crop(np.ones(2), 3)


@settings(max_examples=60, deadline=None)
@given(
    w=arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-1e6, 1e6)),
    data=st.data(),
)
def test_crop_exact_and_roundtrip(w, data):
    r = data.draw(st.integers(1, w.shape[0]))
    c = data.draw(st.integers(1, w.shape[1]))
    s = heterofl_crop(w, r, c)
    for i in range(r):
        for j in range(c):
            assert s[i][j] == w[i][j]
    back = np.full_like(w, np.nan)
    back[:r, :c] = s
    assert back[:r, :c].tobytes() == w[:r, :c].tobytes()


def test_coverage_mean_example():
    g = {"w": np.full((2, 2), 4.0)}
    out = heterofl_aggregate(g, [{"w": np.full((2, 2), 4.0)}, {"w": np.zeros((1, 1))}])
    assert out["w"].tolist() == [[2.0, 4.0], [4.0, 4.0]]


def test_full_width_is_plain_mean():
    rng = np.random.default_rng(1)
    locs = [{"w": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)} for _ in range(4)]
    out = heterofl_aggregate({"w": np.zeros((3, 3)), "b": np.zeros(3)}, locs)
    np.testing.assert_allclose(out["w"], np.mean([l["w"] for l in locs], axis=0), rtol=0, atol=1e-12)


def test_uncovered_entries_keep_value():
    g = {"w": np.arange(9.0).reshape(3, 3)}
    out = heterofl_aggregate(g, [{"w": np.zeros((2, 2))}])
    assert out["w"][2].tolist() == [6.0, 7.0, 8.0]
    assert out["w"][0, 2] == 2.0


def coverage_oracle(g, locals_):
    out = g.copy()
    for idx in np.ndindex(g.shape):
        vals = [l[idx] for l in locals_ if all(i < s for i, s in zip(idx, l.shape))]
        if vals:
            out[idx] = sum(vals) / len(vals)
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_coverage_mean_matches_oracle(rows, cols, crops, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((rows, cols))
    locs = [rng.standard_normal((min(r, rows), min(c, cols))) for r, c in crops]
    out = heterofl_aggregate({"w": g}, [{"w": l} for l in locs])["w"]
    np.testing.assert_allclose(out, coverage_oracle(g, locs), rtol=0, atol=1e-12)


def test_width_solver_tracks_depth_scaled_counts():
    # encoder width 48, depths 4/8/12 as thirds of a 12-layer model
    depths, d, d_in, c = (4, 8, 12), 48, 48, 2
    widths = solve_widths(depths, d, d_in, c, projection=True)
    assert widths[-1] == 48
    for depth, w in zip(depths, widths):
        target = count_parameters(depth, d, d_in, c, True)
        got = count_parameters(depths[-1], w, d_in, c, True)
        assert got >= target
        assert abs(got - target) / target <= 0.05
    assert widths[0] < widths[1] < widths[2]


def test_sub_shapes_keep_io_dims():
    (m,) = build_tier_models((3,), 5, 8, 4, Rng(0), projection=True)
    shapes = sub_shapes(m.params, 3)
    assert shapes["head.proj.weight"] == (5, 3)
    assert shapes["head.cls.weight"] == (3, 4)
    assert shapes["head.cls.bias"] == (4,)
    assert shapes["layer.2.weight"] == (3, 3)
    sub = crop_params(m.params, shapes)
    logits, _ = forward(m.with_params(sub), np.ones((2, 5)))
    assert logits.shape == (2, 4)


def test_heterofl_widths_cannot_exceed_global():
    (m,) = build_tier_models((3,), 5, 4, 2, Rng(0), projection=True)
    with pytest.raises(ConfigError):
        HeteroFLServer(m, [2, 8], [], [], LocalConfig(), Rng(0))


def _toy_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    return Dataset(x, (x[:, 1] > 0).astype(np.int64), 2)


def test_local_single_client_is_centralized_sgd():
    ds = _toy_data()
    (m,) = build_tier_models((2,), 3, 4, 2, Rng(1))
    client = ClientSpec(0, 0, 0, np.arange(40))
    cfg = LocalConfig(3, 8, 0.1)
    trainer = LocalTrainer({0: m}, [client], [ds], cfg, Rng(9))
    ref = m.copy()
    for t in range(1, 5):
        trainer.run_round(t)
        delta, _ = local_update(ref, ds.inputs[:40], ds.labels[:40], cfg, Rng(9).child(TAG_LOCAL, t, 0))
        ref = ref.with_params(add(ref.params, delta))
    assert params_equal(trainer.eval_models()[0].params, ref.params)


def test_homogeneous_server_empty_participants_skips():
    ds = _toy_data()
    (m,) = build_tier_models((2,), 3, 4, 2, Rng(1))
    clients = [ClientSpec(0, 0, 0, np.arange(30))]
    s = HomogeneousServer(m, clients, [ds], LocalConfig(1, 4, 0.1), FedAdamConfig(), Rng(2), participants={1}, n_tiers=2)
    res = s.run_round(1)
    assert params_equal(s.model.params, m.params)
    assert np.isnan(res.losses[m.tier])


_SMALL = dict(rounds=3, clients=9, data_n=400, width=6, sample_fraction=0.5, local_steps=2, batch_size=8)


@pytest.mark.parametrize("kind", ["alllarge", "allsmall", "exclusivefl", "heterofl", "local"])
def test_run_baseline_each_kind(kind):
    setting = "cross-silo" if kind == "local" else "cross-device"
    report = run_baseline(kind, ExperimentConfig(**_SMALL, setting=setting))
    assert report.records
    assert report.config.method == kind


def test_exclusivefl_needs_strong_clients():
    cfg = ExperimentConfig(**_SMALL, method="exclusivefl", proportions=(1, 1, 0))
    with pytest.raises(ConfigError):
        build_experiment(cfg)


def test_allsmall_and_alllarge_depths():
    assert build_experiment(ExperimentConfig(**_SMALL, method="allsmall")).server.model.depth == 2
    assert build_experiment(ExperimentConfig(**_SMALL, method="alllarge")).server.model.depth == 6


def test_run_baseline_rejects_unknown():
    with pytest.raises(ConfigError):
        run_baseline("fedprox", ExperimentConfig(**_SMALL))
