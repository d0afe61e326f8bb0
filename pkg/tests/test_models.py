import logging

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from hgrnet.blocks import aspp_parameter_count
from hgrnet.checkpoint import read_checkpoint
from hgrnet.errors import CheckpointError, ConfigurationError, ContractError, MissingCheckpointError, ShapeError
from hgrnet.models import (
    HGRNet,
    SegmentationNet,
    StreamClassifier,
    build_report_model,
    count_parameters,
    fuse_features,
    load_model,
    predict,
    published_deltas,
    reconcile_parameter_counts,
    save_model,
)
from hgrnet.tensor import Tensor, backward, default_dtype
from hgrnet.training import categorical_cross_entropy
from tests.conftest import SMALL


def total(kind, shortcuts="auto"):
    return count_parameters(build_report_model(kind, 10, 320, shortcuts), breakdown=False).total


class TestParameterCounts:
    @pytest.mark.parametrize(
        "kind,expected",
        [
            ("stage1", 233745),
            ("stage1-no-aspp", 82001),
            ("shape-stream", 343963),
            ("appearance-stream", 110506),
            ("shape-only", 110218),
            ("hgrnet", 453819),
        ],
    )
    def test_identity_shortcuts(self, kind, expected):
        assert total(kind) == expected

    @pytest.mark.parametrize(
        "kind,expected",
        [("stage1", 277201), ("stage1-no-aspp", 125457), ("shape-stream", 387419), ("hgrnet", 497275)],
    )
    def test_projection_on_every_unit(self, kind, expected):
        assert total(kind, "all") == expected

    @pytest.mark.parametrize(
        "kind,published",
        [
            ("stage1", 280_000),
            ("stage1-no-aspp", 130_000),
            ("appearance-stream", 106_000),
            ("shape-stream", 385_000),
            ("hgrnet", 499_000),
        ],
    )
    def test_close_to_published_totals(self, kind, published):
        assert abs(total(kind, "all") - published) / published < 0.15

    def test_aspp_block_matches_closed_form(self):
        report = count_parameters(SegmentationNet(320))
        assert report.per_block["aspp"].total == aspp_parameter_count(128) == 151712

    def test_aspp_delta_includes_wider_score_conv(self):
        # The score conv reads 160 channels instead of 128 when ASPP is present.
        assert total("stage1") - total("stage1-no-aspp") == aspp_parameter_count(128) + 32

    def test_running_statistics_are_non_trainable(self):
        report = count_parameters(SegmentationNet(320))
        assert report.per_block["batch_norm"].non_trainable > 0
        assert report.trainable + report.non_trainable == report.total

    def test_frozen_segmentation_is_non_trainable(self):
        report = count_parameters(build_report_model("hgrnet"))
        assert report.non_trainable >= total("stage1")
        assert report.per_block["classifier"].trainable == 64 * 10 + 10

    def test_census_and_size(self):
        report = count_parameters(SegmentationNet(320))
        assert report.convolution_layers == 28
        assert report.shortcut_convolutions == 3
        assert report.serialized_bytes > 4 * report.total
        assert "TOTAL" in report.to_text()

    def test_reconcile(self):
        assert reconcile_parameter_counts("stage1") == {"auto": 233745, "all": 277201}

    def test_published_deltas(self):
        deltas = published_deltas("stage1", reconcile_parameter_counts("stage1"))
        assert deltas["auto"] == pytest.approx(-0.1652, abs=1e-4)
        assert abs(deltas["all"]) < 0.15
        assert published_deltas("shape-only", {"auto": 1}) is None
        assert published_deltas("stage1", {"auto": 1}, num_classes=4) is None

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            build_report_model("stage2")


class TestConstruction:
    @pytest.mark.parametrize("image_size", [100, 106, 321])
    def test_image_size_validated(self, image_size):
        with pytest.raises(ConfigurationError):
            SegmentationNet(image_size)

    def test_class_count_validated(self):
        with pytest.raises(ConfigurationError):
            StreamClassifier("appearance", num_classes=1, image_size=SMALL)
        with pytest.raises(ConfigurationError):
            HGRNet(num_classes=1, image_size=SMALL)

    def test_unknown_stream(self):
        with pytest.raises(ConfigurationError):
            StreamClassifier("depth", image_size=SMALL)

    def test_segmentation_only_for_shape_stream(self):
        seg = SegmentationNet(SMALL)
        with pytest.raises(ContractError):
            StreamClassifier("appearance", image_size=SMALL, segmentation=seg)
        with pytest.raises(ContractError):
            StreamClassifier("shape_only", image_size=SMALL).attach_segmentation(seg)

    def test_attached_segmentation_is_frozen_and_not_saved(self):
        seg = SegmentationNet(SMALL)
        stream = StreamClassifier("shape", 4, SMALL, segmentation=seg)
        assert not seg.trainable_variables()
        assert not seg.training
        assert not any(name.startswith("segmentation") for name in stream.state_dict())

    def test_mismatched_segmentation_size(self):
        with pytest.raises(ShapeError):
            StreamClassifier("shape", 4, SMALL, segmentation=SegmentationNet(112))


class TestForward:
    def test_segmentation_map(self, rng):
        out = predict(SegmentationNet(SMALL), rng.uniform(size=(2, SMALL, SMALL, 3)))
        assert out.shape == (2, SMALL, SMALL, 1)
        assert np.all((out > 0) & (out < 1))

    def test_wrong_input_size(self, rng):
        with pytest.raises(ShapeError):
            SegmentationNet(SMALL).eval()(Tensor(rng.uniform(size=(1, 112, 112, 3))))

    @pytest.mark.parametrize("stream,channels", [("appearance", 3), ("shape_only", 1)])
    def test_stream_probabilities(self, rng, stream, channels):
        images = rng.uniform(size=(3, SMALL, SMALL, channels))
        if stream == "shape_only":
            images = (images > 0.5).astype(float)
        probs = predict(StreamClassifier(stream, 4, SMALL), images)
        assert probs.shape == (3, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_shape_stream_needs_segmentation(self, rng):
        with pytest.raises(MissingCheckpointError):
            predict(StreamClassifier("shape", 4, SMALL), rng.uniform(size=(1, SMALL, SMALL, 3)))

    def test_hgrnet_needs_segmentation(self, rng):
        with pytest.raises(MissingCheckpointError):
            predict(HGRNet(4, SMALL), rng.uniform(size=(1, SMALL, SMALL, 3)))

    def test_hgrnet_probabilities(self, rng):
        model = HGRNet(4, SMALL, segmentation=SegmentationNet(SMALL))
        probs = predict(model, rng.uniform(size=(2, SMALL, SMALL, 3)))
        assert probs.shape == (2, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)


class TestFusion:
    def test_sum_is_symmetric(self, rng):
        a, b = Tensor(rng.normal(size=(3, 64))), Tensor(rng.normal(size=(3, 64)))
        np.testing.assert_array_equal(fuse_features(a, b).data, fuse_features(b, a).data)

    def test_zero_is_identity(self, rng):
        a = Tensor(rng.normal(size=(3, 64)))
        np.testing.assert_array_equal(fuse_features(a, Tensor(np.zeros((3, 64)))).data, a.data)

    def test_load_streams_copies_bodies(self):
        seg = SegmentationNet(SMALL, seed=5)
        shape = StreamClassifier("shape", 4, SMALL, seed=1, segmentation=seg)
        appearance = StreamClassifier("appearance", 4, SMALL, seed=2)
        model = HGRNet(4, SMALL, seed=3)
        model.load_streams(shape, appearance)
        assert model.segmentation_loaded
        np.testing.assert_array_equal(model.shape_body.conv1.kernel.data, shape.body.conv1.kernel.data)
        np.testing.assert_array_equal(model.appearance_body.fc2.weight.data, appearance.body.fc2.weight.data)
        np.testing.assert_array_equal(model.segmentation.stem.kernel.data, seg.stem.kernel.data)

    def test_load_streams_checks_roles(self):
        appearance = StreamClassifier("appearance", 4, SMALL)
        with pytest.raises(ContractError):
            HGRNet(4, SMALL).load_streams(appearance, appearance)

    def test_freeze_pre_fc2_leaves_classifier(self):
        model = HGRNet(4, SMALL)
        model.freeze_pre_fc2()
        trainable = {id(v) for v in model.trainable_variables()}
        assert trainable == {id(model.classifier.weight), id(model.classifier.bias)}

    def test_segmentation_stays_in_eval_mode(self):
        model = HGRNet(4, SMALL)
        model.train()
        assert model.training and not model.segmentation.training
        assert not model.segmentation.trainable_variables()


class TestPersistence:
    def test_stream_round_trip(self, tmp_path, rng):
        model = StreamClassifier("appearance", 4, SMALL, seed=7)
        path = tmp_path / "appearance.hgrn"
        save_model(model, path, step="appearance_stream")
        loaded, meta = load_model(path, expected_kind="appearance_stream")
        assert meta["step"] == "appearance_stream"
        images = rng.uniform(size=(2, SMALL, SMALL, 3))
        np.testing.assert_array_equal(predict(loaded, images), predict(model, images))

    def test_segmentation_round_trip_keeps_running_stats(self, tmp_path):
        model = SegmentationNet(SMALL, use_aspp=False)
        model.group1.unit1.bn1.stats.mean[:] = 0.25
        save_model(model, tmp_path / "seg.hgrn")
        loaded, meta = load_model(tmp_path / "seg.hgrn")
        assert meta["use_aspp"] is False and loaded.aspp is None
        np.testing.assert_array_equal(loaded.group1.unit1.bn1.stats.mean, model.group1.unit1.bn1.stats.mean)

    def test_hgrnet_round_trip_marks_segmentation_loaded(self, tmp_path):
        save_model(HGRNet(4, SMALL, segmentation=SegmentationNet(SMALL)), tmp_path / "fusion.hgrn")
        loaded, _ = load_model(tmp_path / "fusion.hgrn")
        assert loaded.segmentation_loaded
        assert not loaded.segmentation.trainable_variables()

    def test_wrong_kind(self, tmp_path):
        save_model(StreamClassifier("shape_only", 4, SMALL), tmp_path / "m.hgrn")
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "m.hgrn", expected_kind="segmentation")

    def test_shape_mismatch(self, tmp_path):
        save_model(StreamClassifier("appearance", 4, SMALL), tmp_path / "m.hgrn")
        model = StreamClassifier("appearance", 5, SMALL)
        _, records = read_checkpoint(tmp_path / "m.hgrn")
        with pytest.raises(CheckpointError):
            model.load_state_dict(records)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "absent.hgrn")


def reference_stream_body(body, x):
    """Straight-line numpy forward of a stream body in eval mode."""
    for index, conv in enumerate([body.conv1, body.conv2, body.conv3, body.conv4], start=1):
        windows = sliding_window_view(x, (3, 3), axis=(1, 2))
        x = np.maximum(np.einsum("nhwcij,ijco->nhwo", windows, conv.kernel.data) + conv.bias.data, 0.0)
        if index < 4:
            n, h, w, c = x.shape
            oh, ow = h // 3, w // 3
            x = x[:, :3 * oh, :3 * ow].reshape(n, oh, 3, ow, 3, c).max(axis=(2, 4))
    x = x.mean(axis=(1, 2))
    x = np.maximum(x @ body.fc1.weight.data + body.fc1.bias.data, 0.0)
    return x @ body.fc2.weight.data + body.fc2.bias.data


def zero_variables(*modules):
    for module in modules:
        for variable in module.variables():
            variable.data[...] = 0


class TestForwardInvariants:
    def test_zero_score_gives_one_half(self, rng):
        model = SegmentationNet(SMALL)
        zero_variables(model.score)
        out = predict(model, rng.uniform(size=(2, SMALL, SMALL, 3)))
        np.testing.assert_array_equal(out, np.full_like(out, 0.5))

    def test_float32_and_float64_agree(self, rng):
        images = rng.uniform(size=(1, SMALL, SMALL, 3))
        single = predict(SegmentationNet(SMALL, seed=4), images)
        with default_dtype(np.float64):
            double = predict(SegmentationNet(SMALL, seed=4), images)
        assert single.dtype == np.float32 and double.dtype == np.float64
        np.testing.assert_allclose(single, double, atol=1e-4)

    def test_zeroed_bodies_give_uniform_distribution(self, rng):
        model = HGRNet(4, SMALL, segmentation=SegmentationNet(SMALL))
        zero_variables(model.shape_body, model.appearance_body)
        out = predict(model, rng.uniform(size=(2, SMALL, SMALL, 3)))
        np.testing.assert_allclose(out, 0.25, atol=1e-7)

    def test_hgrnet_matches_straight_line_reference(self, rng, float64):
        model = HGRNet(5, SMALL, segmentation=SegmentationNet(SMALL))
        images = rng.uniform(size=(2, SMALL, SMALL, 3))
        seg_map = predict(model.segmentation, images)
        fused = reference_stream_body(model.shape_body, seg_map) + reference_stream_body(model.appearance_body, images)
        logits = fused @ model.classifier.weight.data + model.classifier.bias.data
        expected = np.exp(logits - logits.max(axis=1, keepdims=True))
        expected /= expected.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(predict(model, images), expected, rtol=1e-9, atol=1e-12)

    def test_shape_only_zero_mask_and_weights(self):
        model = StreamClassifier("shape_only", 5, SMALL)
        zero_variables(model)
        out = predict(model, np.zeros((2, SMALL, SMALL, 1)))
        np.testing.assert_allclose(out, 0.2, atol=1e-7)

    def test_shape_only_warns_on_non_binary_mask(self, caplog):
        model = StreamClassifier("shape_only", 5, SMALL)
        with caplog.at_level(logging.WARNING, logger="hgrnet.models"):
            model.stream_input(Tensor(np.ones((1, SMALL, SMALL, 1))))
            assert "non-binary" not in caplog.text
            model.stream_input(Tensor(np.full((1, SMALL, SMALL, 1), 0.5)))
        assert "non-binary mask" in caplog.text


class TestFusionGradients:
    def one_step(self, model, rng):
        images = rng.uniform(size=(2, SMALL, SMALL, 3))
        targets = np.eye(model.num_classes)[[0, 2]]
        backward(categorical_cross_entropy(model(Tensor(images)), targets))

    def test_frozen_bodies_get_no_gradient(self, rng):
        model = HGRNet(3, SMALL, segmentation=SegmentationNet(SMALL))
        model.freeze_pre_fc2()
        model.train()
        self.one_step(model, rng)
        for module in (model.segmentation, model.shape_body, model.appearance_body):
            for variable in module.variables():
                assert not variable.grad.any(), variable.name
        assert model.classifier.weight.grad.any()
        assert {id(v) for v in model.trainable_variables()} == {id(v) for v in model.classifier.variables()}

    def test_unfrozen_bodies_train_but_segmentation_does_not(self, rng):
        model = HGRNet(3, SMALL, segmentation=SegmentationNet(SMALL))
        model.eval()
        self.one_step(model, rng)
        for variable in model.segmentation.variables():
            assert not variable.grad.any(), variable.name
        for module in (model.shape_body, model.appearance_body, model.classifier):
            for variable in module.variables():
                assert variable.grad.any(), variable.name
