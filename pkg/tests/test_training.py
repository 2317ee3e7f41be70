import math

import numpy as np
import pytest

from lesionnet.archspec import build_network, format_archspec, parse_archspec
from lesionnet.errors import CheckpointError, DivergenceError
from lesionnet.synthetic import separable_dataset
from lesionnet.tensor import Tensor
from lesionnet.training import (
    CHECKPOINT_MAGIC,
    AdamState,
    Checkpoint,
    EpochRecord,
    TrainConfig,
    accuracy,
    adam_step,
    evaluate,
    predict,
    train,
    write_history_csv,
)

TOY_ARCH = "input 3 8 8\nconv c1 out=4 k=3 s=1\nhead 2\n"


def toy_network(seed=0, precision="float32"):
    return build_network(parse_archspec(TOY_ARCH), seed, precision)


# --------------------------------------------------------------------------- optimizer


def test_first_adam_step_moves_by_learning_rate():
    params = {"w": Tensor(np.array([0.5, -2.0]))}
    grads = {"w": Tensor(np.array([1.0, 1.0]))}

    new, state = adam_step(params, grads, AdamState.fresh(params), TrainConfig(learning_rate=1e-4))

    np.testing.assert_allclose(new["w"].data - params["w"].data, [-1e-4, -1e-4], rtol=1e-6)
    assert state.t == 1
    assert state.last_updated == 2


def test_zero_gradient_is_a_fixed_point():
    params = {"w": Tensor(np.array([0.5, -2.0]))}
    grads = {"w": Tensor(np.zeros(2))}

    new, state = adam_step(params, grads, AdamState.fresh(params), TrainConfig())

    np.testing.assert_array_equal(new["w"].data, params["w"].data)
    assert state.last_updated == 0


def test_missing_gradient_counts_as_zero():
    params = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(3))}

    new, _ = adam_step(params, {"a": Tensor(np.ones(2))}, AdamState.fresh(params), TrainConfig())

    np.testing.assert_array_equal(new["b"].data, params["b"].data)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")


# --------------------------------------------------------------------------- training


def test_small_network_overfits_separable_data(separable_data):
    network = toy_network(seed=1)
    cfg = TrainConfig(learning_rate=0.005, epochs=150, batch_size=16, max_steps=300, seed=0)

    result = train(network, separable_data, None, cfg, spec_text=TOY_ARCH)

    assert result.steps <= 300
    assert accuracy(network, separable_data) >= 0.95
    assert np.mean(result.step_losses[-10:]) < np.mean(result.step_losses[:10])

    windows = np.asarray(result.step_losses[: result.steps // 50 * 50]).reshape(-1, 50).mean(axis=1)
    assert windows.size >= 4
    # 1e-3 absorbs batch noise once the loss has flattened out
    assert np.all(np.diff(windows) <= 1e-3)


def test_training_is_reproducible(separable_data):
    cfg = TrainConfig(learning_rate=0.005, epochs=2, batch_size=8, seed=3)

    first = train(toy_network(), separable_data, None, cfg)
    second = train(toy_network(), separable_data, None, cfg)

    assert first.step_losses == second.step_losses
    for name, tensor in first.best.params.items():
        np.testing.assert_array_equal(tensor.data, second.best.params[name].data)


def test_best_checkpoint_follows_validation_accuracy(separable_data):
    val = separable_dataset(8, size=8, seed=9)
    network = toy_network()

    result = train(network, separable_data, val, TrainConfig(learning_rate=0.005, epochs=3, batch_size=8))

    accuracies = [record.val_accuracy for record in result.history]
    assert len(result.history) == 3
    assert result.best.epoch == 1 + accuracies.index(max(accuracies))
    assert accuracy(network, val) == max(accuracies)


def test_max_steps_caps_training(separable_data):
    result = train(toy_network(), separable_data, None, TrainConfig(epochs=10, batch_size=8, max_steps=5))

    assert result.steps == 5


def test_non_finite_loss_raises_divergence(separable_data):
    network = toy_network()
    network.params["head.weight"] = Tensor(np.full_like(network.params["head.weight"].data, np.nan))

    with pytest.raises(DivergenceError):
        train(network, separable_data, None, TrainConfig(epochs=1, batch_size=8))


# --------------------------------------------------------------------------- evaluation


def test_evaluate_counts_every_test_image(separable_data):
    cm = evaluate(toy_network(), separable_data)

    assert cm.total == len(separable_data)
    assert cm.positives == int(separable_data.labels.sum())


def test_equal_logits_are_predicted_benign(separable_data):
    network = toy_network()
    network.params = {name: Tensor(np.zeros_like(t.data)) for name, t in network.params.items()}

    _, predictions = predict(network, separable_data)

    assert not predictions.any()


# --------------------------------------------------------------------------- checkpoints


def trained_checkpoint(separable_data):
    network = toy_network()
    result = train(network, separable_data, None, TrainConfig(learning_rate=0.005, epochs=1, batch_size=8), TOY_ARCH)
    return network, result.best


def test_checkpoint_round_trip_reproduces_logits(tmp_path, separable_data):
    network, checkpoint = trained_checkpoint(separable_data)
    path = checkpoint.save(tmp_path / "model.lnck")

    restored = Checkpoint.load(path).build()

    images = Tensor(separable_data.images[:6])
    np.testing.assert_array_equal(restored.forward(images).data, network.forward(images).data)
    loaded = Checkpoint.load(path)
    assert loaded.epoch == checkpoint.epoch
    assert loaded.adam is not None and loaded.adam.t == checkpoint.adam.t
    assert [r.to_dict() for r in loaded.history] == [r.to_dict() for r in checkpoint.history]


def test_checkpoint_starts_with_magic(tmp_path, separable_data):
    _, checkpoint = trained_checkpoint(separable_data)

    blob = checkpoint.save(tmp_path / "model.lnck").read_bytes()

    assert blob[:4] == CHECKPOINT_MAGIC


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda blob: b"XXXX" + blob[4:],
        lambda blob: blob[:4] + (99).to_bytes(4, "little") + blob[8:],
        lambda blob: blob[:-3],
        lambda blob: blob + b"\x00\x00\x00\x00",
    ],
)
def test_corrupt_checkpoints_are_rejected(tmp_path, separable_data, corrupt):
    _, checkpoint = trained_checkpoint(separable_data)
    path = checkpoint.save(tmp_path / "model.lnck")
    path.write_bytes(corrupt(path.read_bytes()))

    with pytest.raises(CheckpointError):
        Checkpoint.load(path)


def test_history_csv(tmp_path):
    history = [EpochRecord(1, 0.6931, None), EpochRecord(2, 0.5, 0.75)]

    text = write_history_csv(history, tmp_path / "history.csv").read_text(encoding="utf-8")

    assert text.splitlines() == ["epoch,loss,val_accuracy", "1,0.693100,", "2,0.500000,0.750000"]


def test_spec_text_survives_in_checkpoint(tmp_path, separable_data):
    _, checkpoint = trained_checkpoint(separable_data)

    loaded = Checkpoint.load(checkpoint.save(tmp_path / "m.lnck"))

    assert format_archspec(parse_archspec(loaded.spec_text)) == format_archspec(parse_archspec(TOY_ARCH))
    assert not math.isnan(loaded.history[0].loss)
