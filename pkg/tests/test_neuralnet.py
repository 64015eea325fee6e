import numpy as np
import pytest
from oracles import TINY_LENET_FIRST_CONV_WEIGHT, TINY_LENET_SHAPES

from aiskin.errors import (
    ConfigurationError,
    ContractError,
    CorruptionError,
    IncompatibleModelError,
    NumericFaultError,
    ShapeError,
)
from aiskin.neuralnet import (
    ALEXNET,
    LENET5,
    TINY_ALEXNET,
    TINY_LENET,
    VGG16,
    Model,
    ModelConfig,
    ModelParameters,
    build_model,
    conv2d,
    dense,
    deserialize_parameters,
    dropout,
    gradient_check,
    gradient_check_report,
    maxpool2d,
    one_hot,
    relu,
    serialize_parameters,
    softmax,
    train_epoch,
)
from aiskin.neuralnet.layers import softmax_rows


def config(name, shape, layers, lr=0.1, batch=4):
    c, h, w = shape
    return ModelConfig(name, h, w, c, tuple(layers), lr, 1, batch, batch, 0.0)


DENSE_TOY = config("dense-toy", (4, 1, 1), [dense(5), relu(), dense(2), softmax()])
CONV_TOY = config("conv-toy", (2, 16, 16), [
    conv2d(3, 3), relu(), maxpool2d(2), conv2d(4, 3), relu(), maxpool2d(2),
    dense(6), relu(), dense(2), softmax(),
])


class TestConstruction:
    def test_tiny_lenet_shapes(self):
        assert TINY_LENET.shape_chain() == TINY_LENET_SHAPES
        model = build_model(TINY_LENET, 42)
        assert model.params[0][0].shape == TINY_LENET_FIRST_CONV_WEIGHT
        assert model.version == 0

    def test_dense_input_mismatch(self):
        bad = config("bad", (1, 8, 8), [conv2d(2, 3), dense(4, in_features=100), dense(2), softmax()])
        with pytest.raises(ShapeError) as info:
            build_model(bad, 0)
        assert info.value.layer_index == 1

    def test_softmax_must_be_last(self):
        with pytest.raises(ConfigurationError):
            config("x", (2, 1, 1), [dense(2)]).shape_chain()

    def test_same_seed_bit_identical(self):
        a, b = build_model(TINY_LENET, 7), build_model(TINY_LENET, 7)
        assert all(np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors()))

    def test_glorot_bounds_and_zero_bias(self):
        model = build_model(TINY_LENET, 1)
        w, b = model.params[0]
        limit = np.sqrt(6.0 / (3 * 25 + 6 * 25))
        assert np.abs(w).max() <= limit
        assert not b.any()

    def test_tensor_count_checked(self):
        tensors = build_model(DENSE_TOY, 0).tensors()
        with pytest.raises(IncompatibleModelError):
            Model(DENSE_TOY, tensors[:-1])

    def test_tiny_alexnet_pool_positions(self):
        kinds = [s.kind for s in TINY_ALEXNET.layers]
        convs = [i for i, k in enumerate(kinds) if k == "Conv2D"]
        pools = [i for i, k in enumerate(kinds) if k == "MaxPool2D"]
        # a pool follows the relu after conv 1, 2 and 5
        assert [convs.index(p - 2) + 1 for p in pools] == [1, 2, 5]


class TestForward:
    def test_rows_sum_to_one(self):
        model = build_model(TINY_LENET, 0)
        x = np.random.default_rng(0).normal(size=(8, 3, 32, 32))
        assert np.allclose(model.forward(x).sum(axis=1), 1.0, atol=1e-6)

    def test_zero_final_dense_is_uniform(self):
        model = build_model(TINY_LENET, 0)
        model.params[-2][0][:] = 0
        x = np.random.default_rng(0).normal(size=(3, 3, 32, 32))
        assert np.allclose(model.forward(x), 0.5, atol=1e-7)

    def test_deterministic(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 32, 32))
        assert np.array_equal(build_model(TINY_LENET, 3).forward(x), build_model(TINY_LENET, 3).forward(x))

    def test_wrong_shape(self):
        with pytest.raises(ContractError):
            build_model(TINY_LENET, 0).forward(np.zeros((1, 3, 16, 16)))

    def test_numeric_fault_names_layer(self):
        model = build_model(DENSE_TOY, 0)
        model.params[0][0][:] = np.float32(3e38)
        with pytest.raises(NumericFaultError) as info, np.errstate(over="ignore"):
            model.forward(np.full((1, 4, 1, 1), 1e3))
        assert "layer 0" in str(info.value)

    def test_softmax_extreme_logits(self):
        rng = np.random.default_rng(2)
        logits = rng.uniform(-50, 50, size=(10_000, 2))
        logits[::7] *= 20  # well past exp overflow without the max shift
        probs = softmax_rows(logits)
        assert np.all(np.isfinite(probs))
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_inverted_dropout_expectation(self):
        probe = config("probe", (6, 1, 1), [dropout(0.6), dense(2), softmax()])
        model = build_model(probe, 4)
        x = np.random.default_rng(3).uniform(0.5, 1.5, size=(1, 6, 1, 1))
        x_many = np.repeat(x, 10_000, axis=0)
        train_mean = model.logits(x_many, training=True).mean(axis=0)
        infer = model.logits(x, training=False)[0]
        assert np.allclose(train_mean, infer, rtol=0.02, atol=0.02 * np.abs(infer).max())


class TestTraining:
    def test_overfit_one_sample(self):
        model = build_model(TINY_LENET, 0)
        x = np.random.default_rng(0).normal(size=(1, 3, 32, 32))
        y = one_hot([1])
        initial, _ = model.loss_and_gradients(x, y, training=False)
        for _ in range(200):
            train_epoch(model, [(x, y)])
        final, _ = model.loss_and_gradients(x, y, training=False)
        assert final < initial

    def test_zero_learning_rate_is_null_update(self):
        model = build_model(TINY_LENET, 0)
        before = [t.copy() for t in model.tensors()]
        x = np.random.default_rng(0).normal(size=(4, 3, 32, 32))
        train_epoch(model, [(x, one_hot([0, 1, 0, 1]))], learning_rate=0.0)
        assert all(np.array_equal(a, b) for a, b in zip(before, model.tensors()))

    def test_version_unchanged_by_training(self):
        model = build_model(DENSE_TOY, 0)
        model.version = 4
        train_epoch(model, [(np.ones((2, 4, 1, 1)), one_hot([0, 1]))])
        assert model.version == 4

    def test_xor(self):
        xor = config("xor", (2, 1, 1), [dense(8), relu(), dense(2), softmax()], lr=0.5)
        model = build_model(xor, 1)
        table = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float32).reshape(4, 2, 1, 1)
        labels = np.array([0, 1, 1, 0])
        for _ in range(2000):
            train_epoch(model, [(table, one_hot(labels))])
        # exhaustive check of the learned decision table
        assert list(model.predict_labels(table)) == list(labels)

    def test_determinism_after_epochs(self):
        from aiskin.training import fit

        x = np.random.default_rng(0).normal(size=(32, 3, 32, 32))
        y = np.arange(32) % 2
        runs = []
        for _ in range(2):
            m = build_model(TINY_LENET, 5)
            fit(m, x, y, epochs=2, seed=9)
            runs.append(m.tensors())
        assert all(np.array_equal(a, b) for a, b in zip(*runs))

    def test_frozen_model_cannot_train(self):
        model = build_model(DENSE_TOY, 0).freeze()
        with pytest.raises(ValueError):
            train_epoch(model, [(np.ones((2, 4, 1, 1)), one_hot([0, 1]))])


class TestGradientCheck:
    def test_dense_toy(self):
        model = build_model(DENSE_TOY, 0)
        x = np.random.default_rng(0).normal(size=(1, 4, 1, 1))
        assert gradient_check(model, x, one_hot([1])) < 1e-4

    def test_conv_pool_toy(self):
        model = build_model(CONV_TOY, 0)
        x = np.random.default_rng(0).normal(size=(1, 2, 16, 16))
        report = gradient_check_report(model, x, one_hot([0]), n_weights=200)
        assert report["Dense"]["max_relative_error"] < 1e-4
        assert report["Conv2D"]["max_relative_error"] < 1e-3
        assert report["Conv2D"]["checked"] >= 100

    def test_zero_input_first_conv_bias(self):
        model = build_model(CONV_TOY, 0).copy(dtype=np.float64)
        model.params[0][1][:] = 0.1
        x = np.zeros((1, 2, 16, 16))
        y = one_hot([1])
        _, grads = model.loss_and_gradients(x, y, training=False)
        eps = 1e-3
        for k in range(3):
            bias = model.params[0][1]
            bias[k] += eps
            up, _ = model.loss_and_gradients(x, y, training=False)
            bias[k] -= 2 * eps
            down, _ = model.loss_and_gradients(x, y, training=False)
            bias[k] += eps
            assert abs(grads[0][1][k] - (up - down) / (2 * eps)) < 1e-6


class TestSerialization:
    def test_roundtrip_bit_identical(self):
        model = build_model(TINY_LENET, 3)
        model.version = 12
        params = model.to_parameters()
        blob = serialize_parameters(params)
        back = deserialize_parameters(blob, TINY_LENET.config_hash)
        assert back == params
        assert serialize_parameters(back) == blob
        assert back.checksum == params.checksum

    def test_flip_byte(self):
        blob = bytearray(serialize_parameters(build_model(DENSE_TOY, 0).to_parameters()))
        blob[40] ^= 0x01
        with pytest.raises(CorruptionError):
            deserialize_parameters(bytes(blob))

    def test_empty_bundle(self):
        params = ModelParameters(0, 0, [])
        assert deserialize_parameters(serialize_parameters(params)) == params

    def test_config_hash_mismatch(self):
        blob = serialize_parameters(build_model(DENSE_TOY, 0).to_parameters())
        with pytest.raises(IncompatibleModelError):
            deserialize_parameters(blob, TINY_LENET.config_hash)

    def test_truncated(self):
        blob = serialize_parameters(build_model(DENSE_TOY, 0).to_parameters())
        with pytest.raises(CorruptionError):
            deserialize_parameters(blob[:-9])

    def test_model_from_parameters(self):
        model = build_model(TINY_LENET, 2)
        model.version = 3
        clone = Model.from_parameters(TINY_LENET, deserialize_parameters(
            serialize_parameters(model.to_parameters())))
        x = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
        assert clone.version == 3
        assert np.array_equal(clone.forward(x), model.forward(x))


class TestReferenceConfigs:
    def counts(self, cfg):
        k = cfg.count_kinds()
        return k.get("Conv2D", 0), k.get("MaxPool2D", 0), k.get("Dense", 0)

    def test_lenet5(self):
        assert self.counts(LENET5) == (2, 2, 3)
        assert (LENET5.input_height, LENET5.input_width, LENET5.input_channels) == (228, 228, 3)
        assert (LENET5.learning_rate, LENET5.iterations) == (0.001, 150)
        assert (LENET5.train_batch, LENET5.test_batch, LENET5.dropout_rate) == (64, 5, 0.6)

    def test_alexnet(self):
        assert self.counts(ALEXNET) == (5, 3, 3)
        assert (ALEXNET.input_height, ALEXNET.input_width) == (227, 227)
        assert (ALEXNET.learning_rate, ALEXNET.iterations) == (0.001, 150)
        assert (ALEXNET.train_batch, ALEXNET.test_batch, ALEXNET.dropout_rate) == (64, 5, 0.6)

    def test_vgg16(self):
        assert self.counts(VGG16) == (13, 5, 3)
        assert (VGG16.input_height, VGG16.input_width) == (227, 227)
        assert (VGG16.learning_rate, VGG16.iterations) == (0.001, 200)
        assert (VGG16.train_batch, VGG16.test_batch, VGG16.dropout_rate) == (32, 5, 0.6)

    def test_reference_configs_are_metadata_only(self):
        from aiskin.training import train_baseline

        assert not any(c.trainable for c in (LENET5, ALEXNET, VGG16))
        with pytest.raises(ConfigurationError):
            train_baseline(VGG16, [], epochs=1)

    def test_reference_shape_chains_valid(self):
        for cfg in (LENET5, ALEXNET, VGG16):
            assert cfg.shape_chain()[-1] == (2,)
