"""
Tests for layered run configuration
"""

import pytest

from app.relocalization.preset_manager import PresetManager, deep_merge

pytestmark = pytest.mark.unit


class TestDeepMerge:
    def test_nested_values_merge(self):
        base = {"train": {"lr": 1e-3, "tau": {"tau_max": 50.0, "tau_min": 1.0}}, "model": {"beta": 100.0}}
        merged = deep_merge(base, {"train": {"tau": {"tau_max": 100.0}}})
        assert merged["train"] == {"lr": 1e-3, "tau": {"tau_max": 100.0, "tau_min": 1.0}}
        assert merged["model"] == {"beta": 100.0}
        assert base["train"]["tau"]["tau_max"] == 50.0

    def test_lists_are_replaced(self):
        merged = deep_merge({"head": [512, 1024, 512]}, {"head": [32]})
        assert merged == {"head": [32]}


class TestPresetManager:
    def test_available_presets(self):
        assert {"desk", "indoor", "outdoor", "test"} <= set(PresetManager().available())
        assert "base" not in PresetManager().available()

    def test_base_defaults(self):
        run = PresetManager().build()
        assert run.model.descriptor_dim == 256
        assert run.model.line_tokens == 12
        assert run.localization.threshold == 3.0
        assert run.synth.descriptor_dim == run.model.descriptor_dim

    def test_scene_presets(self):
        manager = PresetManager()
        indoor, outdoor = manager.build("indoor"), manager.build("outdoor")
        assert indoor.train.iterations == 2_500_000
        assert indoor.train.tau.tau_max == 50.0
        assert outdoor.train.tau.tau_max == 100.0
        assert outdoor.train.lr == pytest.approx(5e-5)

    def test_desk_and_test_keep_scene_and_model_aligned(self):
        for name in ("desk", "test"):
            run = PresetManager().build(name)
            assert run.synth.descriptor_dim == run.model.descriptor_dim, name
            assert run.synth.line_tokens == run.model.line_tokens, name

    def test_layer_order(self, tmp_path):
        user = tmp_path / "user.yaml"
        user.write_text("train:\n  iterations: 77\n  lr: 0.01\nlocalization:\n  mode: points\n")
        run = PresetManager().build("test", user, {"train": {"iterations": 3}})
        assert run.train.iterations == 3
        assert run.train.lr == 0.01
        assert run.localization.mode == "points"
        assert run.model.descriptor_dim == 16

    def test_empty_user_file(self, tmp_path):
        user = tmp_path / "empty.yaml"
        user.write_text("")
        assert PresetManager().build("test", user).train.iterations == 10

    def test_unknown_preset(self):
        with pytest.raises(KeyError, match="desk"):
            PresetManager().build("moon")

    def test_missing_user_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            PresetManager().build("test", tmp_path / "absent.yaml")

    def test_non_mapping_file(self, tmp_path):
        user = tmp_path / "list.yaml"
        user.write_text("- 1\n- 2\n")
        with pytest.raises(ValueError, match="mapping"):
            PresetManager().build("test", user)

    def test_invalid_values(self):
        with pytest.raises(ValueError, match="Invalid run configuration"):
            PresetManager().build("test", overrides={"localization": {"threshold": -1.0}})

    def test_missing_presets_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            PresetManager(tmp_path / "nowhere")
