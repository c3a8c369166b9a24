from pathlib import Path

import pytest

from splat_models import ExperimentSpec, LossConfig, TrainConfig
from utils.app_config import (
    env_overrides, get_profile, get_profile_name, get_workspace_dir, load_app_yaml, merge_layers,
    parse_config_file, parse_overrides, resolve_experiment_spec, resolve_train_config,
)
from utils.errors import ConfigurationError

APP_YAML = Path(__file__).parent.parent / "app.yaml"

APP_CONFIG = {
    "profile_synthetic": {"iterations": 100, "loss": {"threshold": 0.6}},
    "profile_real_world": {"iterations": 100, "loss": {"threshold": 0.9}},
}


class TestProfiles:
    def test_default_profile_name(self):
        assert get_profile_name() == "synthetic"

    def test_shipped_profiles(self, monkeypatch):
        app_config = load_app_yaml(APP_YAML)
        assert resolve_train_config(app_config=app_config).loss.threshold == 0.6
        monkeypatch.setenv("IESR_PROFILE", "real_world")
        config = resolve_train_config(app_config=app_config)
        assert config.loss.threshold == 0.9
        assert config.iterations == 30000
        assert config.mv_views == 3

    def test_unknown_profile(self, monkeypatch):
        monkeypatch.setenv("IESR_PROFILE", "studio")
        with pytest.raises(ConfigurationError, match="Profile 'studio' not found"):
            get_profile(APP_CONFIG)

    def test_empty_app_config_means_defaults(self):
        assert get_profile({}) == {}
        assert resolve_train_config(app_config={}) == TrainConfig()

    def test_missing_app_yaml(self, tmp_path):
        assert load_app_yaml(tmp_path / "app.yaml") == {}

    def test_malformed_app_yaml(self, tmp_path):
        path = tmp_path / "app.yaml"
        path.write_text("profile_synthetic: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="Failed to parse"):
            load_app_yaml(path)


class TestEnvironment:
    def test_overrides(self, monkeypatch):
        monkeypatch.setenv("IESR_THREADS", "4")
        monkeypatch.setenv("IESR_SEED", "17")
        assert env_overrides() == {"render.num_threads": 4, "seed": 17}
        config = resolve_train_config(app_config=APP_CONFIG)
        assert (config.render.num_threads, config.seed) == (4, 17)

    def test_nothing_set(self):
        assert env_overrides() == {}

    def test_workspace(self, monkeypatch, tmp_path):
        monkeypatch.setenv("WORKSPACE_DIR", str(tmp_path / "fallback"))
        assert get_workspace_dir() == tmp_path / "fallback"
        monkeypatch.setenv("IESR_WORKSPACE", str(tmp_path))
        assert get_workspace_dir() == tmp_path


class TestConfigFiles:
    def test_flat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# stage one\niterations = 50\nloss.threshold = 0.3  # lower\n\nbackground = [1, 1, 1]\n",
                        encoding="utf-8")
        assert parse_config_file(path) == {"iterations": 50, "loss.threshold": 0.3, "background": [1, 1, 1]}

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("iterations: 50\nloss:\n  lambda_e: 0.01\n", encoding="utf-8")
        assert parse_config_file(path) == {"iterations": 50, "loss": {"lambda_e": 0.01}}

    @pytest.mark.parametrize("name, text, message", [
        ("a.cfg", "iterations 50\n", "expected 'key = value'"),
        ("a.cfg", " = 3\n", "empty key"),
        ("a.yaml", "- 1\n- 2\n", "must be a mapping"),
    ])
    def test_malformed(self, tmp_path, name, text, message):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigurationError, match=message):
            parse_config_file(path)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigurationError, match="Cannot read"):
            parse_config_file(tmp_path / "absent.cfg")


class TestOverrides:
    def test_values_parse_like_config_files(self):
        assert parse_overrides(["lambda_ds=0.5", "loss.fusion = sum", "thresholds=[0, 1]", "densify=false"]) == {
            "lambda_ds": 0.5, "loss.fusion": "sum", "thresholds": [0, 1], "densify": False,
        }

    @pytest.mark.parametrize("item", ["iterations", "=3"])
    def test_malformed(self, item):
        with pytest.raises(ConfigurationError, match="KEY=VALUE"):
            parse_overrides([item])

    def test_override_beats_flags(self):
        flags = {"loss.threshold": 0.4, **parse_overrides(["threshold=0.8", "lambda_ds=0.1"])}
        config = resolve_train_config(flags=flags, app_config=APP_CONFIG)
        assert config.loss.threshold == 0.8
        assert config.loss.lambda_ds == 0.1

    def test_unknown_override_key(self):
        with pytest.raises(ConfigurationError, match="Unknown configuration key 'lamda_ds'"):
            resolve_train_config(flags=parse_overrides(["lamda_ds=0.1"]), app_config=APP_CONFIG)


class TestMergeLayers:
    def test_key_spellings(self):
        config = merge_layers(TrainConfig, [
            {"loss": {"threshold": 0.2}},
            {"render.tile_size": 8},
            {"lambda-e": 0.5, "num_threads": 2},
        ])
        assert config.loss.threshold == 0.2
        assert config.render.tile_size == 8
        assert config.loss.lambda_e == 0.5
        assert config.render.num_threads == 2

    def test_later_layer_wins(self):
        config = merge_layers(LossConfig, [{"threshold": 0.2}, {"threshold": 0.7}])
        assert config.threshold == 0.7

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="Unknown configuration key 'learning_rate'"):
            merge_layers(TrainConfig, [{"learning_rate": 1.0}])

    def test_invalid_value(self):
        with pytest.raises(ConfigurationError, match="Invalid configuration"):
            merge_layers(TrainConfig, [{"threshold": -1.0}])
        with pytest.raises(ConfigurationError, match="Invalid configuration"):
            merge_layers(TrainConfig, [{"ssim_window": 10}])

    @pytest.mark.parametrize("value", [-0.1, 1.5])
    def test_threshold_outside_unit_interval(self, value):
        with pytest.raises(ConfigurationError, match="Invalid configuration"):
            merge_layers(TrainConfig, [{"threshold": value}])

    def test_threshold_bounds_are_inclusive(self):
        assert merge_layers(LossConfig, [{"threshold": 0.0}]).threshold == 0.0
        assert merge_layers(LossConfig, [{"threshold": 1.0}]).threshold == 1.0


class TestPrecedence:
    def test_profile_env_file_flags(self, tmp_path, monkeypatch):
        monkeypatch.setenv("IESR_SEED", "3")
        path = tmp_path / "run.cfg"
        path.write_text("seed = 4\niterations = 7\nthreshold = 0.4\n", encoding="utf-8")

        config = resolve_train_config(app_config=APP_CONFIG)
        assert (config.seed, config.iterations, config.loss.threshold) == (3, 100, 0.6)

        config = resolve_train_config(path, app_config=APP_CONFIG)
        assert (config.seed, config.iterations, config.loss.threshold) == (4, 7, 0.4)

        config = resolve_train_config(path, {"iterations": 9}, app_config=APP_CONFIG)
        assert (config.seed, config.iterations, config.loss.threshold) == (4, 9, 0.4)

    def test_experiment_spec_scoping(self, tmp_path, monkeypatch):
        monkeypatch.setenv("IESR_SEED", "11")
        monkeypatch.setenv("IESR_THREADS", "2")
        path = tmp_path / "exp.yaml"
        path.write_text("num_views: 6\nholdout_views: [5]\ntrain:\n  mv_views: 2\n", encoding="utf-8")
        spec = resolve_experiment_spec(path, {"threshold": 0.3, "output_dir": str(tmp_path)},
                                       app_config=APP_CONFIG)
        assert isinstance(spec, ExperimentSpec)
        assert spec.seed == 11 and spec.train.seed == 11
        assert spec.train.render.num_threads == 2
        assert spec.train.iterations == 100
        assert spec.train.loss.threshold == 0.3
        assert spec.holdout_views == [5] and spec.train.mv_views == 2
        assert spec.train_views == [0, 1, 2, 3, 4]

    def test_experiment_spec_validation_is_configuration_error(self):
        with pytest.raises(ConfigurationError, match="Invalid configuration"):
            resolve_experiment_spec(flags={"num_views": 3, "holdout_views": [0, 1]}, app_config={})

    def test_sweep_thresholds_stay_in_unit_interval(self):
        with pytest.raises(ConfigurationError, match="Invalid configuration"):
            resolve_experiment_spec(flags={"thresholds": [0.0, 1.2]}, app_config={})
