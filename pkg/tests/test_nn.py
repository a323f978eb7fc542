import numpy as np
import pytest

from ml5g.nn import (
    Dataset,
    MlpModel,
    TrainingConfig,
    TrainingError,
    forward,
    forward_batch,
    gradient_check,
    mse,
    train,
)

from oracles import forward_loops


def test_zero_network_outputs_zero():
    m = MlpModel.zeros([5, 16, 16, 1])
    assert forward(m, [0.3, 0.1, 0.9, 0.0, 1.0]) == 0.0


def test_single_linear_layer():
    m = MlpModel([1, 1], [np.array([[2.0]])], [np.array([1.0])])
    assert forward(m, [3.0]) == 7.0


def test_forward_matches_loop_arithmetic():
    rng = np.random.default_rng(1)
    for _ in range(20):
        sizes = [int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17)), 1]
        m = MlpModel.initialize(sizes, rng)
        x = rng.uniform(0, 1, sizes[0])
        assert abs(forward(m, x) - forward_loops(m, x)) < 1e-12


def test_forward_arity_checked():
    m = MlpModel.zeros([3, 4, 1])
    with pytest.raises(ValueError):
        forward(m, [1.0, 2.0])
    with pytest.raises(ValueError):
        forward_batch(m, np.zeros((2, 4)))


def test_relu_hidden_linear_output():
    # negative pre-activation in the hidden layer is cut, negative output kept
    m = MlpModel([1, 1, 1], [np.array([[-1.0]]), np.array([[1.0]])], [np.array([0.0]), np.array([-2.0])])
    assert forward(m, [5.0]) == -2.0


def test_model_validation():
    with pytest.raises(ValueError):
        MlpModel([2, 1], [np.zeros((1, 3))], [np.zeros(1)])
    with pytest.raises(ValueError):
        MlpModel([2, 2], [np.zeros((2, 2))], [np.zeros(2)])
    with pytest.raises(ValueError):
        MlpModel([1, 1], [np.array([[np.nan]])], [np.zeros(1)])
    with pytest.raises(ValueError):
        MlpModel.zeros([2, 1], norm_schema=[(0, 1)])
    with pytest.raises(ValueError):
        MlpModel.zeros([2, 1], activation="tanh")


def test_serialization_roundtrip_bitwise():
    rng = np.random.default_rng(3)
    m = MlpModel.initialize([5, 16, 16, 1], rng, norm_schema=[(0, 1)] * 5, feature_names=list("abcde"))
    back = MlpModel.from_bytes(m.to_bytes())
    x = rng.uniform(0, 1, (50, 5))
    assert np.array_equal(forward_batch(m, x), forward_batch(back, x))
    assert back.to_bytes() == m.to_bytes()
    assert back.norm_schema == m.norm_schema


def test_linear_target_is_learned():
    rng = np.random.default_rng(0)
    xs = rng.uniform(0, 1, 400)
    ds = Dataset([([x], 3 * x + 1) for x in xs], ["x"])
    m = train(ds, [1, 1], TrainingConfig())
    X, y = ds.arrays()
    assert mse(m, X, y) < 1e-3


def test_constant_row_is_fitted():
    ds = Dataset([([0.2, 0.7], 0.4)] * 64, ["a", "b"])
    m = train(ds, [2, 8, 1], TrainingConfig())
    assert abs(forward(m, [0.2, 0.7]) - 0.4) < 1e-3


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    rows = [(list(rng.uniform(0, 1, 3)), float(rng.uniform(0, 1))) for _ in range(100)]
    ds = Dataset(rows, ["a", "b", "c"])
    cfg = TrainingConfig(epochs=20, seed=11)
    assert train(ds, [3, 4, 1], cfg).to_bytes() == train(ds, [3, 4, 1], cfg).to_bytes()


def test_training_does_not_worsen_training_loss():
    rng = np.random.default_rng(8)
    rows = [(list(rng.uniform(0, 1, 4)), float(rng.uniform(0, 1))) for _ in range(200)]
    ds = Dataset(rows, list("abcd"))
    cfg = TrainingConfig(epochs=30, seed=2)
    initial = MlpModel.initialize([4, 8, 1], np.random.default_rng(cfg.seed))
    X, y = ds.arrays()
    assert mse(train(ds, [4, 8, 1], cfg), X, y) <= mse(initial, X, y)


def test_empty_dataset_rejected():
    with pytest.raises(TrainingError, match="empty dataset"):
        train(Dataset([], []), [1, 1])


def test_divergence_names_epoch():
    ds = Dataset([([100.0], 100.0), ([50.0], 3.0)] * 8, ["x"])
    with pytest.raises(TrainingError, match=r"diverged at epoch \d+"):
        train(ds, [1, 1], TrainingConfig(learning_rate=1.0, epochs=50))


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset([([1.0], 1.0), ([1.0, 2.0], 1.0)])
    with pytest.raises(ValueError):
        Dataset([([1.0], -1.0)])


def test_training_config_validation():
    for bad in ({"learning_rate": 0}, {"epochs": 0}, {"batch_size": 0}, {"validation_fraction": 1.0}):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)


def test_gradient_check_small_net():
    rng = np.random.default_rng(4)
    m = MlpModel.initialize([5, 8, 1], rng)
    assert gradient_check(m, (rng.uniform(0, 1, 5), 0.7), 1e-5) < 1e-5


def test_gradient_check_zero_network():
    m = MlpModel.zeros([3, 4, 1])
    assert gradient_check(m, ([0.5, 0.1, 0.9], 1.0), 1e-5) < 1e-7


def test_gradient_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        gradient_check(MlpModel.zeros([1, 1]), ([0.0], 0.0), 0.0)


def test_gradient_check_detects_wrong_gradient(monkeypatch):
    import ml5g.nn as nn

    real = nn.gradients

    def broken(model, X, y):
        loss, dws, dbs = real(model, X, y)
        return loss, [2 * w for w in dws], dbs

    monkeypatch.setattr(nn, "gradients", broken)
    rng = np.random.default_rng(0)
    m = MlpModel.initialize([3, 4, 1], rng)
    assert gradient_check(m, (rng.uniform(0, 1, 3), 1.0)) > 0.1
