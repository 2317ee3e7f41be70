import numpy as np
import pytest

from lesionnet.errors import ShapeError
from lesionnet.layers import (
    ClassifierHead,
    ConvUnit,
    Network,
    PEPEBlock,
    Pool,
    ResidualBlock,
    VisualAttentionCondenser,
    layer_param_count,
)
from lesionnet.tensor import Tensor
from lesionnet.training import AdamState, TrainConfig, adam_step


def single_layer_network(layer, input_shape, seed=0):
    return Network.initialize(input_shape, [("blk", layer)], seed, "float64")


def zero_weights(network):
    network.params = {
        name: Tensor(np.zeros_like(t.data)) if name.endswith("weight") else t for name, t in network.params.items()
    }


@pytest.mark.parametrize(
    "layer,expected",
    [
        (ResidualBlock(64, 64, 256), 75_008),
        (PEPEBlock(32, 8, 32, 8, 32), 1_536),
        (VisualAttentionCondenser(64, 16, 16, 64), 4_448),
        (ConvUnit(3, 16, (3, 3)), 464),
        (ClassifierHead(2048, 2), 4_098),
        (Pool("max"), 0),
    ],
)
def test_layer_param_counts(layer, expected):
    assert layer_param_count(layer) == expected


def test_parameter_names_follow_layer_and_unit():
    network = single_layer_network(ResidualBlock(4, 2, 8, stride=2), (4, 8, 8))

    assert "blk.conv1.weight" in network.params
    assert "blk.conv2.bn.gamma" in network.params
    assert "blk.shortcut.bn.beta" in network.params
    assert "blk.conv3.bn" in network.stats


def test_residual_with_zero_branch_is_relu_of_input(rng):
    network = single_layer_network(ResidualBlock(4, 2, 4), (4, 5, 5))
    zero_weights(network)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))

    np.testing.assert_array_equal(network.forward(x).data, np.maximum(x.data, 0.0))


def test_residual_projection_changes_shape():
    block = ResidualBlock(4, 2, 8, stride=2)

    assert block.projection_shortcut
    assert block.output_shape((4, 7, 7)) == (8, 4, 4)
    assert ResidualBlock(4, 2, 8, stride=2, stride_at="1x1").output_shape((4, 7, 7)) == (8, 4, 4)


def test_pepe_with_zero_weights_returns_input(rng):
    network = single_layer_network(PEPEBlock(8, 4, 16, 4, 8), (8, 4, 4))
    zero_weights(network)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))

    np.testing.assert_array_equal(network.forward(x).data, x.data)


def test_pepe_stride_two_halves_with_ceil():
    block = PEPEBlock(8, 4, 16, 4, 8, stride=2)

    assert not block.has_shortcut
    assert block.output_shape((8, 7, 7)) == (8, 4, 4)


def test_pepe_requires_reducing_projections():
    with pytest.raises(ValueError, match="proj1_ch"):
        PEPEBlock(8, 8, 16, 4, 8)
    with pytest.raises(ValueError, match="proj2_ch"):
        PEPEBlock(8, 4, 16, 16, 8)


def test_depthwise_unit_does_not_mix_channels(rng):
    unit = ConvUnit(3, 3, (3, 3), groups=3, has_bn=False, activation="none")
    network = single_layer_network(unit, (3, 6, 6))
    x = rng.normal(size=(1, 3, 6, 6))
    bumped = x.copy()
    bumped[0, 1] += 1.0

    delta = network.forward(Tensor(bumped)).data - network.forward(Tensor(x)).data

    assert not np.any(delta[0, 0])
    assert not np.any(delta[0, 2])
    assert np.any(delta[0, 1])


def test_attention_with_zero_scale_is_identity(rng):
    network = single_layer_network(VisualAttentionCondenser(4, 2, 2, 4), (4, 6, 6))
    network.params["blk.scale"] = Tensor(np.zeros(4))
    x = Tensor(rng.normal(size=(2, 4, 6, 6)))

    np.testing.assert_array_equal(network.forward(x).data, x.data)


@pytest.mark.parametrize("size", [7, 8, 223, 224])
def test_attention_preserves_shape(size, rng):
    network = single_layer_network(VisualAttentionCondenser(4, 2, 2, 4), (4, size, size))
    x = Tensor(rng.normal(size=(1, 4, size, size)))

    assert network.forward(x).shape == (1, 4, size, size)


def test_attention_requires_matching_up_channels():
    with pytest.raises(ValueError, match="up-mixing"):
        VisualAttentionCondenser(8, 4, 4, 6)


def test_network_rejects_wrong_input_shape():
    network = single_layer_network(ConvUnit(3, 4), (3, 8, 8))

    with pytest.raises(ShapeError):
        network.forward(Tensor.ones((1, 3, 9, 9), "float64"))


def test_initialization_is_deterministic():
    layers = [("c", ConvUnit(3, 4)), ("head", ClassifierHead(4, 2))]
    first = Network.initialize((3, 8, 8), layers, seed=5)
    second = Network.initialize((3, 8, 8), layers, seed=5)
    other = Network.initialize((3, 8, 8), layers, seed=6)

    for name, tensor in first.params.items():
        np.testing.assert_array_equal(tensor.data, second.params[name].data)
    assert not np.array_equal(first.params["c.weight"].data, other.params["c.weight"].data)


def test_he_initialization_statistics():
    network = single_layer_network(ConvUnit(64, 64, (3, 3)), (64, 4, 4), seed=11)
    weights = network.params["blk.weight"].data

    expected_std = np.sqrt(2.0 / (64 * 9))
    assert weights.size >= 10_000
    assert abs(weights.mean()) < 0.05 * expected_std
    assert weights.std() == pytest.approx(expected_std, rel=0.05)
    np.testing.assert_array_equal(network.params["blk.bn.gamma"].data, 1.0)
    np.testing.assert_array_equal(network.params["blk.bn.beta"].data, 0.0)


@pytest.mark.parametrize(
    "layer,input_shape",
    [
        (ResidualBlock(8, 4, 16, stride=2), (8, 6, 6)),
        (PEPEBlock(8, 4, 16, 4, 8), (8, 4, 4)),
        (VisualAttentionCondenser(8, 4, 4, 8), (8, 4, 4)),
        (ConvUnit(3, 8, (3, 3), groups=1), (3, 4, 4)),
        (ClassifierHead(8, 2), (8, 2, 2)),
    ],
)
def test_param_count_matches_optimizer_updates(layer, input_shape):
    network = single_layer_network(layer, input_shape)
    grads = {name: Tensor(np.ones_like(t.data)) for name, t in network.params.items()}

    _, state = adam_step(network.params, grads, AdamState.fresh(network.params), TrainConfig())

    assert state.last_updated == layer_param_count(layer) == network.num_params


def test_predict_proba_rows_sum_to_one(rng):
    network = Network.initialize((3, 8, 8), [("c", ConvUnit(3, 4)), ("head", ClassifierHead(4, 2))], seed=0)

    probs = network.predict_proba(rng.uniform(size=(5, 3, 8, 8)), batch_size=2)

    assert probs.shape == (5, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)
