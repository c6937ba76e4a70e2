"""
Tests for configuration sections, the flat loader and layer precedence
"""

from pathlib import Path

import pytest
from pydantic import ValidationError

from app.config.settings import (
    FLAT_KEYS,
    AttentionConfig,
    LocalizerConfig,
    RunConfig,
    TrainConfig,
    read_config_file,
    read_sidecar,
    resolve_run_config,
    write_sidecar,
)
from app.errors import UsageError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "# toy run\n"
        "epochs = 3\n"
        "global_stages = 4,8\n"
        "input_size = 32\n"
        "top_k = 2\n"
        "patch_size = 16\n"
        "instance_stages = 4\n"
        "dilation_rates = 1, 2\n"
    )
    return path


class TestSections:
    """Tests for the typed sections"""

    def test_defaults(self):
        config = RunConfig()
        assert config.train.epochs == 60
        assert config.train.batch_size == 16
        assert config.train.lr0 == 0.05
        assert config.attention.dilation_rates == (2, 4)
        assert config.localizer.top_k == 4
        assert config.synth.num_classes == 4

    def test_pair_from_string(self):
        assert AttentionConfig(dilation_rates="2,4").dilation_rates == (2, 4)

    def test_bad_dilation(self):
        with pytest.raises(ValidationError):
            AttentionConfig(dilation_rates=(0, 2))

    def test_threshold_range(self):
        with pytest.raises(ValidationError):
            LocalizerConfig(rel_threshold=1.0)

    def test_lambda_floor_range(self):
        with pytest.raises(ValidationError):
            TrainConfig(lambda_floor=1.5)

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            TrainConfig(epoch=3)

    def test_frozen(self):
        with pytest.raises(ValidationError):
            TrainConfig().epochs = 5

    def test_flat_keys_unique(self):
        assert FLAT_KEYS["epochs"] == "train"
        assert FLAT_KEYS["top_k"] == "localizer"
        assert FLAT_KEYS["out_dir"] == "paths"


class TestNetworkConfig:
    """Tests for deriving the network layout"""

    def test_default_layout(self):
        network = RunConfig().network_config()
        assert network.global_backbone.output_size == 6
        assert network.fusion_dim == 64 + 4 * 64

    def test_patch_size_drives_instance_input(self):
        config = RunConfig.from_flat({"patch_size": 48, "instance_stages": "4,8"})
        assert config.network_config().instance_backbone.input_size == 48

    def test_hidden_channels_must_match(self):
        config = RunConfig.from_flat({"hidden_channels": 32})
        with pytest.raises(ValidationError):
            config.network_config()

    def test_indivisible_input(self):
        config = RunConfig.from_flat({"input_size": 100})
        with pytest.raises(ValidationError):
            config.network_config()


class TestFlatLoading:
    """Tests for files, sidecars and precedence"""

    def test_from_flat(self):
        config = RunConfig.from_flat({"epochs": "7", "global_stages": "2,4", "fusion": "false"})
        assert config.train.epochs == 7
        assert config.layout.global_stages == [2, 4]
        assert config.layout.fusion is False

    def test_unknown_key(self):
        with pytest.raises(UsageError, match="bogus"):
            RunConfig.from_flat({"bogus": 1})

    def test_read_config_file(self, config_file):
        values = read_config_file(config_file)
        assert values["epochs"] == "3"
        assert values["global_stages"] == "4,8"
        config = RunConfig.from_flat(values)
        assert config.attention.dilation_rates == (1, 2)
        assert config.network_config().global_backbone.stage_channels == [4, 8]

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_config_file(tmp_path / "absent.conf")

    def test_flag_beats_file_beats_sidecar(self, config_file):
        file_values = read_config_file(config_file)
        sidecar = {"epochs": 100, "batch_size": 2, "top_k": 3}
        config, overridden = resolve_run_config({"epochs": "9"}, file_values, sidecar)
        assert config.train.epochs == 9
        assert config.localizer.top_k == 2
        assert config.train.batch_size == 2
        assert overridden == ["epochs"]

    def test_no_override_without_file(self):
        config, overridden = resolve_run_config({"epochs": 1})
        assert config.train.epochs == 1
        assert overridden == []

    def test_sidecar_round_trip(self, config_file, tmp_path):
        config = RunConfig.from_flat(read_config_file(config_file))
        checkpoint = tmp_path / "model.gatn"
        write_sidecar(checkpoint, config)
        restored, _ = resolve_run_config({}, {}, read_sidecar(checkpoint))
        assert restored.network_config() == config.network_config()
        assert restored.train == config.train

    def test_absent_sidecar(self, tmp_path):
        assert read_sidecar(tmp_path / "model.gatn") == {}
        assert read_sidecar(None) == {}

    def test_paths_not_in_sidecar(self, tmp_path):
        config = RunConfig.from_flat({"out_dir": str(tmp_path)})
        assert "out_dir" not in config.to_flat()
        assert config.to_flat(include_paths=True)["out_dir"] == str(tmp_path)
        assert isinstance(config.paths.out_dir, Path)
