import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from finsurrogate.dataset import GenerateConfig, generate, split_arrays
from finsurrogate.evaluation import r2
from finsurrogate.nn import Network, NetworkSpec, dumps_weights, grad_check
from finsurrogate.nn.layers import conv, dense, global_avg_pool, relu
from finsurrogate.surrogate import (
    ArraySplits,
    SearchSpace,
    TrainConfig,
    TrainingDiverged,
    build_mini_xception,
    build_optimized_cnn,
    denormalize,
    load_bundle,
    normalize,
    predict,
    random_search,
    sample_candidate,
    save_bundle,
    timed_predict,
    train,
)

FULL_SCALE_SCHEDULE = (16, 16, 32, 32, 48, 48, 64, 64, 80, 80, 96)


@pytest.fixture(scope="module")
def sanity(tmp_path_factory):
    """50 images whose label is the filled-pixel fraction."""
    cfg = GenerateConfig(n_samples=50, n_shapes=1, resolution=32, seed=11, labels="pixel_fraction")
    manifest = generate(cfg, tmp_path_factory.mktemp("sanity"), workers=1)
    return manifest, split_arrays(manifest)


def compact_spec(res=32):
    return NetworkSpec((1, res, res), (conv(4), relu(), global_avg_pool(), dense(1)), name="compact")


def cnn_params_by_hand(res, filters, fc):
    total, c, size = 0, 1, res
    for k, f in enumerate(filters):
        total += f * (c * 9 + 1)
        c = f
        if k % 2 == 1:
            size //= 2
    return total + (c * size * size) * fc + fc + fc + 1


# architectures ---------------------------------------------------------------


def test_cnn_full_scale_schedule_parameter_count():
    spec = build_optimized_cnn(64, FULL_SCALE_SCHEDULE)
    spec.validate()
    assert spec.n_params() == cnn_params_by_hand(64, FULL_SCALE_SCHEDULE, 64)
    assert sum(1 for s in spec.layers if s.kind == "conv2d") == 11
    assert sum(1 for s in spec.layers if s.kind == "maxpool2d") == 5
    assert build_optimized_cnn(64, FULL_SCALE_SCHEDULE) == spec


def test_cnn_six_pools_variant():
    spec = build_optimized_cnn(64, n_pools=6)
    assert sum(1 for s in spec.layers if s.kind == "maxpool2d") == 6
    assert spec.shapes()[-5] == (48, 1, 1)


def test_cnn_argument_errors():
    with pytest.raises(ValueError):
        build_optimized_cnn(16)
    with pytest.raises(ValueError):
        build_optimized_cnn(32, n_pools=6)
    with pytest.raises(ValueError):
        build_optimized_cnn(64, filters=(8, 8))
    with pytest.raises(ValueError):
        build_optimized_cnn(64, n_pools=3)


def test_xception_structure_and_size():
    full = build_mini_xception(64, 1.0)
    half = build_mini_xception(64, 0.5)
    assert half.n_params() < full.n_params() < 17_000_000
    assert full.layers[-1].kind == "dense" and full.layers[-1].units == 1
    assert sum(1 for s in full.layers if s.kind == "residual") >= 3
    # parameter count grows roughly quadratically with width
    assert 2.5 < full.n_params() / half.n_params() < 4.5
    with pytest.raises(ValueError):
        build_mini_xception(16)
    with pytest.raises(ValueError):
        build_mini_xception(64, 0.0)


def test_both_architectures_end_in_single_linear_neuron():
    for spec in (build_optimized_cnn(64), build_mini_xception(64)):
        assert spec.layers[-1].kind == "dense" and spec.layers[-1].units == 1
        assert spec.shapes()[-1] == (1,)


def test_xception_stem_stride():
    full = build_mini_xception(64, stem_stride=1)
    half = build_mini_xception(64)
    assert full.n_params() == half.n_params()
    assert full.shapes()[1][1:] == (64, 64) and half.shapes()[1][1:] == (32, 32)
    assert full.shapes()[-3][1:] == (8, 8) and half.shapes()[-3][1:] == (4, 4)
    with pytest.raises(ValueError):
        build_mini_xception(64, stem_stride=3)


def test_cnn_gradient_check_tiny_width():
    # width 2 leaves whole layers dead, putting pre-activations exactly on the ReLU kink
    spec = build_optimized_cnn(32, filters=(4,) * 11, fc_units=4)
    net = Network.from_spec(spec, seed=1)
    x = np.random.default_rng(0).random((2, 1, 32, 32))
    assert grad_check(net, x, np.array([0.3, 0.7]), n_samples=200) <= 1e-4


def test_xception_gradient_check_tiny_width():
    spec = build_mini_xception(32, 0.125, block_filters=(16, 16, 16)).with_input(16)
    spec.validate()
    net = Network.from_spec(spec, seed=1)
    x = np.random.default_rng(0).random((2, 1, 16, 16))
    assert grad_check(net, x, np.array([0.3, 0.7]), n_samples=200) <= 1e-4


# training ----------------------------------------------------------------------


def test_train_config_validation_and_text():
    cfg = TrainConfig(batch_size=8, learning_rate=0.01, optimizer="sgd", target="pressure_drop")
    assert TrainConfig.loads(cfg.dumps()) == cfg
    for flag in (True, False):
        cfg = TrainConfig(mirror_augment=flag)
        assert TrainConfig.loads(cfg.dumps()) == cfg
    for bad in (dict(batch_size=0), dict(epochs=0), dict(target="x"), dict(optimizer="x"), dict(learning_rate=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_sanity_task_reaches_high_r2(sanity):
    _, s = sanity
    model = train(compact_spec(), s, TrainConfig(epochs=200, learning_rate=1e-2, batch_size=8))
    assert len(model.history) <= 200
    assert r2(s.y_val, predict(model.network, s.x_val)) >= 0.99
    # overfit sanity: training samples are reproduced closely
    assert np.max(np.abs(predict(model.network, s.x_train) - s.y_train)) <= 0.05


def test_training_is_deterministic(sanity):
    _, s = sanity
    cfg = TrainConfig(epochs=5, learning_rate=1e-2, batch_size=8, seed=4)
    a, b = train(compact_spec(), s, cfg), train(compact_spec(), s, cfg)
    assert dumps_weights(a.network) == dumps_weights(b.network)
    assert a.history.train_mse == b.history.train_mse


def test_mirror_augment_feeds_original_or_flipped_images(sanity, monkeypatch):
    _, s = sanity
    seen = []
    orig = Network.forward

    def spy(self, x):
        seen.append(x.copy())
        return orig(self, x)

    monkeypatch.setattr(Network, "forward", spy)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4, mirror_augment=True)
    train(compact_spec(), s, cfg)
    pool = {img.tobytes(): "val" for img in s.x_val}
    pool |= {img.tobytes(): "orig" for img in s.x_train} | {img[:, ::-1].tobytes(): "flip" for img in s.x_train}
    kinds = [pool.get(img.tobytes()) for batch in seen for img in batch]
    assert None not in kinds
    kinds = [k for k in kinds if k != "val"]
    assert 0.3 < kinds.count("flip") / len(kinds) < 0.7
    first = list(seen)
    seen.clear()
    train(compact_spec(), s, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(first, seen))


def test_zero_learning_rate_keeps_weights(sanity):
    _, s = sanity
    model = train(compact_spec(), s, TrainConfig(epochs=3, learning_rate=0.0, seed=2))
    fresh = Network.from_spec(compact_spec(), seed=2)
    assert dumps_weights(model.network) == dumps_weights(fresh)
    assert len(set(model.history.val_mse)) == 1


def test_best_validation_weights_are_kept(sanity):
    _, s = sanity
    model = train(compact_spec(), s, TrainConfig(epochs=30, learning_rate=3e-2, batch_size=8))
    h = model.history
    assert h.best_val_mse == min(h.val_mse)
    from finsurrogate.surrogate import evaluate_mse

    assert evaluate_mse(model.network, s.x_val, s.y_val) == pytest.approx(h.best_val_mse, rel=1e-12)


def test_plateau_halving_and_early_stop():
    rng = np.random.default_rng(0)
    x = rng.random((12, 1, 32, 32))
    y = rng.random(12)
    # random labels: validation stops improving quickly
    s = ArraySplits(x[:8], y[:8], x[8:], y[8:])
    cfg = TrainConfig(epochs=40, learning_rate=3e-2, decay=0.0, plateau_patience=2, early_stop_patience=6)
    h = train(compact_spec(), s, cfg).history
    assert len(h) < 40
    assert min(h.learning_rate) < h.learning_rate[0]
    assert all(b <= a for a, b in zip(h.learning_rate, h.learning_rate[1:]))


def test_divergence_is_reported():
    x = np.zeros((4, 1, 32, 32))
    s = ArraySplits(x, np.array([0.0, np.nan, 0.0, 0.0]), x[:2], np.zeros(2))
    with pytest.raises(TrainingDiverged) as info:
        train(compact_spec(), s, TrainConfig(epochs=2, batch_size=4))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_train_rejects_mismatched_inputs():
    x = np.zeros((4, 1, 16, 16))
    with pytest.raises(ValueError):
        train(compact_spec(), ArraySplits(x, np.zeros(4), x, np.zeros(4)), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(compact_spec(), ArraySplits(x[:0], np.zeros(0), x, np.zeros(4)), TrainConfig(epochs=1))


# prediction and bundles ------------------------------------------------------


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=10), st.floats(-100, 100), st.floats(0.01, 100))
def test_normalize_round_trip(values, lo, width):
    hi = lo + width
    back = denormalize(normalize(values, lo, hi), lo, hi)
    assert np.allclose(back, values, rtol=1e-12, atol=1e-12 * max(1.0, max(abs(v) for v in values)))


def test_normalize_degenerate_range():
    with pytest.raises(ValueError):
        normalize([1.0], 2.0, 2.0)


def test_predict_forms_and_timing():
    net = Network.from_spec(compact_spec(), seed=0)
    imgs = np.random.default_rng(0).random((3, 1, 32, 32))
    batch = predict(net, imgs)
    assert batch.shape == (3,)
    assert predict(net, imgs[0, 0]) == batch[0]
    assert np.array_equal(predict(net, imgs[:, 0]), batch)
    assert np.array_equal(predict(net, imgs), batch)
    values, seconds = timed_predict(net, imgs)
    # one-image batches may take a different BLAS path than the full batch
    assert np.allclose(values, batch, rtol=0, atol=1e-12) and np.all(seconds > 0)
    assert np.array_equal(timed_predict(net, imgs)[0], values)
    with pytest.raises(ValueError):
        predict(net, np.zeros((1, 1, 16, 16)))


def test_mirror_average_is_flip_invariant():
    net = Network.from_spec(compact_spec(), seed=0)
    imgs = np.random.default_rng(1).random((4, 1, 32, 32))
    flipped = imgs[:, :, ::-1, :]
    avg = predict(net, imgs, mirror_average=True)
    assert np.array_equal(avg, predict(net, flipped, mirror_average=True))
    assert np.allclose(avg, 0.5 * (predict(net, imgs) + predict(net, flipped)), rtol=0, atol=1e-15)
    assert not np.allclose(avg, predict(net, imgs))
    values, _ = timed_predict(net, imgs, mirror_average=True)
    assert np.allclose(values, avg, rtol=0, atol=1e-12)


def test_bundle_round_trip(tmp_path, sanity):
    _, s = sanity
    model = train(compact_spec(), s, TrainConfig(epochs=3, learning_rate=1e-2))
    save_bundle(model, tmp_path / "m")
    back = load_bundle(tmp_path / "m")
    assert back.mirror_average is False
    assert back.spec == model.spec and back.config == model.config
    assert dumps_weights(back.network) == dumps_weights(model.network)
    assert np.array_equal(back.predict(s.x_val), model.predict(s.x_val))
    assert back.label_range == model.label_range
    assert back.history.val_mse == model.history.val_mse
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "missing")


# random search -----------------------------------------------------------------


@given(st.integers(0, 2**32), st.integers(0, 1000))
def test_candidates_stay_in_range(seed, index):
    space = SearchSpace()
    c = sample_candidate(space, seed, index)
    assert 4 <= c.blocks <= 9 and 3 <= c.fc_layers <= 4
    assert len(c.filters) == 2 * c.blocks - 1 and all(9 <= f <= 95 for f in c.filters)
    assert len(c.fc_units) == c.fc_layers - 1 and all(9 <= u <= 95 for u in c.fc_units)
    assert sample_candidate(space, seed, index) == c


SMALL = SearchSpace(blocks=(4, 6), filters=(2, 6), fc_layers=(3, 4), fc_units=(2, 8))


def test_search_budget_one(sanity):
    _, s = sanity
    res = random_search(SMALL, 1, s, seed=0, base_config=TrainConfig(epochs=2))
    assert len(res.leaderboard) == 1
    assert res.best is res.leaderboard[0]


def test_search_ordering_and_determinism(sanity):
    _, s = sanity
    cfg = TrainConfig(epochs=3, learning_rate=3e-3)
    a = random_search(SMALL, 8, s, seed=5, base_config=cfg)
    b = random_search(SMALL, 8, s, seed=5, base_config=cfg)
    assert a.to_csv() == b.to_csv()
    vals = [e.val_mse for e in a.leaderboard]
    assert vals == sorted(vals)
    assert a.best.val_mse <= statistics.median(vals)
    # blocks 6 means 5 poolings, which 32 px still allows
    assert not a.skipped


def test_search_skips_infeasible_candidates(sanity):
    _, s = sanity
    deep = SearchSpace(blocks=(7, 9), filters=(2, 3), fc_layers=(3, 3), fc_units=(2, 2))
    with pytest.raises(ValueError):
        random_search(deep, 1, s, seed=0, base_config=TrainConfig(epochs=1), max_draws=5)
    mixed = SearchSpace(blocks=(6, 7), filters=(2, 3), fc_layers=(3, 3), fc_units=(2, 2))
    res = random_search(mixed, 2, s, seed=1, base_config=TrainConfig(epochs=1))
    assert len(res.leaderboard) == 2
    assert all(c.blocks == 7 for c, _ in res.skipped)
    assert all(e.candidate.blocks == 6 for e in res.leaderboard)
