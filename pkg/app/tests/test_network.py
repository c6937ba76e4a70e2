"""
Tests for the backbone, the two-branch network and checkpoints
"""

from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.config.settings import AttentionConfig, BackboneConfig, LocalizerConfig, NetworkConfig
from app.errors import CheckpointError, ShapeError
from app.models import backbone
from app.models.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from app.models.network import (
    check_params,
    forward,
    forward_bound,
    init_params,
    param_shapes,
    predict,
    standardize_image,
)
from app.tensor import Tape
from app.tools.localizer import InstanceBox

# forward outputs of init_params(seed=12) on the fixed test image; written by the first run when absent
GOLDEN_PATH = Path(__file__).parent / "data" / "forward_golden.npz"


@pytest.fixture
def small_config():
    return NetworkConfig(
        global_backbone=BackboneConfig(stage_channels=[4, 8], input_size=16),
        instance_backbone=BackboneConfig(stage_channels=[4], input_size=8),
        localizer=LocalizerConfig(top_k=2, patch_size=8, min_component_area=1),
        num_classes=4,
    )


@pytest.fixture
def image():
    return np.random.default_rng(7).uniform(size=(3, 32, 32))


def zero_params(config):
    return {name: np.zeros(shape) for name, shape in param_shapes(config).items()}


class TestBackbone:
    """Tests for the strided feature extractor"""

    def run(self, image, params, config):
        tape = Tape()
        leaves = {name: tape.leaf(array, name=name) for name, array in params.items()}
        return backbone.backbone_forward(tape, tape.constant(image), leaves, "global", config)

    def test_default_layout_shape(self):
        config = BackboneConfig()
        params = backbone.init_backbone_params(np.random.default_rng(0), "global", config)
        features = self.run(np.random.default_rng(1).uniform(size=(1, 3, 96, 96)), params, config)
        assert features.shape == (1, 64, 6, 6)

    def test_zero_weights_give_zero_features(self):
        config = BackboneConfig(stage_channels=[4, 8], input_size=16)
        params = {
            name: np.zeros_like(array)
            for name, array in backbone.init_backbone_params(np.random.default_rng(0), "global", config).items()
        }
        features = self.run(np.ones((1, 3, 16, 16)), params, config)
        assert not features.data.any()

    def test_indivisible_size(self):
        config = BackboneConfig(stage_channels=[4, 8], input_size=16)
        params = backbone.init_backbone_params(np.random.default_rng(0), "global", config)
        with pytest.raises(ShapeError, match="divisible"):
            self.run(np.ones((1, 3, 18, 18)), params, config)

    def test_channel_mismatch(self):
        config = BackboneConfig(stage_channels=[4, 8], input_size=16)
        params = backbone.init_backbone_params(np.random.default_rng(0), "global", config)
        with pytest.raises(ShapeError):
            self.run(np.ones((1, 1, 16, 16)), params, config)

    def test_init_layout(self):
        config = BackboneConfig(stage_channels=[4, 8], input_size=16)
        params = backbone.init_backbone_params(np.random.default_rng(0), "instance", config)
        assert {name: array.shape for name, array in params.items()} == {
            "instance.stage1.weight": (4, 3, 3, 3),
            "instance.stage1.bias": (4,),
            "instance.stage2.weight": (8, 4, 3, 3),
            "instance.stage2.bias": (8,),
        }
        weights = np.abs(params["instance.stage1.weight"])
        assert weights.max() <= np.sqrt(6.0 / 27)
        assert weights.max() > np.sqrt(1.0 / 27)

    def test_init_keeps_activation_scale(self):
        config = BackboneConfig()
        params = backbone.init_backbone_params(np.random.default_rng(0), "global", config)
        image = standardize_image(np.random.default_rng(1).uniform(size=(1, 3, 96, 96)))
        features = self.run(image, params, config).data
        assert np.sqrt(np.mean(features**2)) > 0.2

    def test_geometry_validation(self):
        with pytest.raises(ValueError):
            BackboneConfig(stage_channels=[4, 8], input_size=18)
        with pytest.raises(ValueError):
            BackboneConfig(stage_channels=[4, 8, 16], input_size=16)


class TestForward:
    """Tests for the full two-branch forward pass"""

    def test_output_shapes(self, small_config, image):
        output = forward(image, init_params(small_config), small_config)
        assert output.features.shape == (1, 8, 4, 4)
        assert output.attention.attention_map.shape == (1, 1, 4, 4)
        assert output.logits_global.shape == (1, 4)
        assert output.logits_fusion.shape == (1, 4)
        assert 1 <= len(output.pixel_boxes) <= 2

    def test_fusion_head_width(self, small_config):
        shapes = param_shapes(small_config)
        assert small_config.fusion_dim == 8 + 2 * 4
        assert shapes["fusion_head.weight"] == (4, 16)
        assert shapes["global_head.weight"] == (4, 8)

    def test_pixel_boxes_inside_image(self, small_config, image):
        output = forward(image, init_params(small_config, seed=3), small_config)
        for box in output.pixel_boxes:
            assert 0 <= box.row0 < box.row1 <= 32
            assert 0 <= box.col0 < box.col1 <= 32

    def test_zero_attention_falls_back_to_whole_image(self, small_config, image):
        output = forward(image, zero_params(small_config), small_config)
        assert not output.attention.attention_map.data.any()
        assert [box.coords for box in output.pixel_boxes] == [(0, 0, 32, 32)]
        assert_array_equal(output.logits_fusion.data, np.zeros((1, 4)))

    def test_deterministic(self, small_config, image):
        params = init_params(small_config, seed=5)
        first = forward(image, params, small_config)
        second = forward(image, params, small_config)
        assert_array_equal(first.logits_fusion.data, second.logits_fusion.data)
        assert_array_equal(first.attention.attention_map.data, second.attention.attention_map.data)
        assert first.pixel_boxes == second.pixel_boxes

    def test_matches_golden_outputs(self, small_config, image):
        output = forward(image, init_params(small_config, seed=12), small_config)
        outputs = {
            "logits_global": output.logits_global.data,
            "logits_fusion": output.logits_fusion.data,
            "attention_map": output.attention.attention_map.data,
            "boxes": np.array([box.coords for box in output.pixel_boxes]),
        }
        if not GOLDEN_PATH.exists():
            GOLDEN_PATH.parent.mkdir(parents=True, exist_ok=True)
            np.savez(GOLDEN_PATH, **outputs)
            pytest.skip(f"wrote {GOLDEN_PATH.name}; commit it to pin the forward pass")

        with np.load(GOLDEN_PATH) as golden:
            assert set(golden.files) == set(outputs)
            assert_array_equal(outputs["boxes"], golden["boxes"])
            for name in ("logits_global", "logits_fusion", "attention_map"):
                assert_allclose(outputs[name], golden[name], rtol=0, atol=1e-10)

    def test_init_is_seeded(self, small_config):
        first, second = init_params(small_config, seed=1), init_params(small_config, seed=1)
        for name in first:
            assert_array_equal(first[name], second[name])
        assert not np.array_equal(first["global.stage1.weight"], init_params(small_config, 2)["global.stage1.weight"])

    def test_fusion_off_uses_global_logits(self, small_config, image):
        config = small_config.model_copy(update={"fusion": False})
        output = forward(image, init_params(config), config)
        assert output.logits_fusion is output.logits_global

    def test_average_attention_mode(self, small_config, image):
        config = small_config.model_copy(update={"attention": AttentionConfig(attention_mode="average")})
        output = forward(image, init_params(config), config)
        assert_allclose(
            output.attention.attention_map.data,
            output.features.data.mean(axis=1, keepdims=True),
            atol=1e-15,
        )

    def test_pinned_boxes(self, small_config, image):
        tape = Tape()
        params = init_params(small_config)
        leaves = {name: tape.leaf(array, name=name) for name, array in params.items()}
        boxes = [InstanceBox(4, 4, 20, 20)]
        output = forward_bound(tape, tape.constant(image[np.newaxis]), leaves, small_config, boxes=boxes)
        assert output.pixel_boxes == boxes

    def pinned(self, config, params, image, boxes):
        tape = Tape()
        leaves = {name: tape.leaf(array, name=name) for name, array in params.items()}
        return forward_bound(tape, tape.constant(standardize_image(image[np.newaxis])), leaves, config, boxes=boxes)

    def test_global_logits_ignore_instance_branch(self, small_config, image):
        params = init_params(small_config, seed=4)
        reference = self.pinned(small_config, params, image, [InstanceBox(0, 0, 16, 16)])

        rng = np.random.default_rng(11)
        perturbed = {
            name: array + rng.normal(size=array.shape) if name.startswith(("instance.", "fusion_head.")) else array
            for name, array in params.items()
        }
        moved = self.pinned(small_config, perturbed, image, [InstanceBox(8, 12, 32, 28), InstanceBox(0, 0, 8, 8)])
        assert_array_equal(moved.logits_global.data, reference.logits_global.data)
        assert not np.array_equal(moved.logits_fusion.data, reference.logits_fusion.data)

    def test_instance_backbone_is_shared_across_patches(self, small_config, image):
        params = init_params(small_config, seed=6)
        first, second = InstanceBox(0, 0, 16, 16), InstanceBox(10, 14, 30, 32)
        forward_order = self.pinned(small_config, params, image, [first, second])

        # slot blocks of the fusion head: global 0:8, patch one 8:12, patch two 12:16
        swapped = dict(params)
        weight = params["fusion_head.weight"]
        swapped["fusion_head.weight"] = np.concatenate([weight[:, :8], weight[:, 12:16], weight[:, 8:12]], axis=1)
        reversed_order = self.pinned(small_config, swapped, image, [second, first])
        assert_allclose(reversed_order.logits_fusion.data, forward_order.logits_fusion.data, atol=1e-12)

    def test_image_channel_mismatch(self, small_config):
        with pytest.raises(ShapeError):
            forward(np.zeros((1, 32, 32)), init_params(small_config), small_config)

    def test_check_params(self, small_config):
        params = init_params(small_config)
        check_params(params, small_config)
        params["global_head.bias"] = np.zeros(5)
        with pytest.raises(ShapeError):
            check_params(params, small_config)
        del params["global_head.bias"]
        with pytest.raises(ShapeError, match="missing"):
            check_params(params, small_config)


class TestPredict:
    """Tests for class prediction"""

    def test_uniform_logits_pick_class_zero(self, small_config, image):
        prediction = predict(image, zero_params(small_config), small_config)
        assert prediction.label == 0
        assert_allclose(prediction.probabilities, np.full(4, 0.25), atol=1e-15)

    def test_confident_class(self, small_config, image):
        params = zero_params(small_config)
        params["fusion_head.bias"] = np.array([0.0, 10.0, 0.0, 0.0])
        prediction = predict(image, params, small_config)
        assert prediction.label == 1
        assert prediction.probabilities[1] == pytest.approx(0.99986, abs=1e-5)
        assert prediction.probabilities.sum() == pytest.approx(1.0)


class TestCheckpoint:
    """Tests for the binary parameter file"""

    def test_round_trip_is_bit_exact(self, small_config, tmp_path):
        params = init_params(small_config, seed=9)
        path = save_checkpoint(tmp_path / "model.gatn", params)
        loaded = load_checkpoint(path, param_shapes(small_config))
        assert set(loaded) == set(params)
        for name, array in params.items():
            assert loaded[name].tobytes() == array.tobytes()

    def test_bytes_are_deterministic(self, small_config, tmp_path):
        params = init_params(small_config, seed=9)
        first = save_checkpoint(tmp_path / "a.gatn", params).read_bytes()
        shuffled = dict(reversed(list(params.items())))
        second = save_checkpoint(tmp_path / "b.gatn", shuffled).read_bytes()
        assert first == second
        assert first.startswith(MAGIC)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gatn"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, small_config, tmp_path):
        path = save_checkpoint(tmp_path / "model.gatn", init_params(small_config))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch(self, small_config, tmp_path):
        params = init_params(small_config)
        params["global_head.weight"] = np.zeros((4, 9))
        path = save_checkpoint(tmp_path / "model.gatn", params)
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(path, param_shapes(small_config))

    def test_missing_names(self, small_config, tmp_path):
        path = save_checkpoint(tmp_path / "model.gatn", {"global_head.bias": np.zeros(4)})
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(path, param_shapes(small_config))

    def test_missing_file_is_os_error(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "absent.gatn")
