"""Tests for TrainConfig defaults, JSON overrides and validation."""

import json
from pathlib import Path

import pytest

from dropgs.errors import ConfigError
from dropgs.train_config import RegularizerConfig, TrainConfig


@pytest.fixture
def config_file(tmp_path):
    def _write(data) -> Path:
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


class TestDefaults:
    def test_protocol_defaults(self):
        cfg = TrainConfig()
        assert cfg.t_total == 10000
        assert cfg.densify_interval == 100
        assert cfg.densify_grad_threshold == 5e-4
        assert cfg.lambda_dssim == 0.2
        assert cfg.densify_until_iter == 5000
        cfg.validate()

    def test_repo_config_is_desk_scale_baseline(self):
        cfg = TrainConfig.load_from_file(Path(__file__).resolve().parents[1] / "data" / "config.json")
        cfg.validate()
        assert cfg.regularizer.kind == "none"
        assert cfg.t_total == 2000
        assert (cfg.synthetic.n_train, cfg.synthetic.n_test) == (3, 5)
        assert (cfg.synthetic.width, cfg.synthetic.height) == (64, 64)
        assert cfg.densify_grad_threshold == TrainConfig().densify_grad_threshold
        assert cfg.densify_interval == TrainConfig().densify_interval

    def test_regularizer_defaults(self):
        reg = RegularizerConfig()
        assert reg.kind == "none" and not reg.drops
        assert RegularizerConfig(kind="selective").drops
        assert not RegularizerConfig(kind="l1").drops


class TestLoad:
    def test_missing_file_gives_defaults(self, tmp_path):
        cfg = TrainConfig.load_from_file(tmp_path / "absent.json")
        assert cfg.t_total == TrainConfig().t_total

    def test_overrides_and_nested_blocks(self, config_file):
        path = config_file({
            "t_total": 300,
            "densify_until": 150,
            "background": [1, 1, 1],
            "regularizer": {"kind": "dropgaussian", "gamma": 0.3, "mode": "fixed"},
            "synthetic": {"n_train": 2, "width": 32},
        })
        cfg = TrainConfig.load_from_file(path)
        assert cfg.t_total == 300
        assert cfg.densify_until_iter == 150
        assert cfg.background == (1.0, 1.0, 1.0)
        assert cfg.regularizer.kind == "dropgaussian"
        assert cfg.regularizer.gamma == 0.3
        assert cfg.regularizer.mode == "fixed"
        assert cfg.synthetic.n_train == 2
        assert cfg.synthetic.width == 32

    def test_unknown_keys_ignored(self, config_file):
        cfg = TrainConfig.load_from_file(config_file({"nonsense": 1, "regularizer": {"colour": "red"}}))
        assert cfg.regularizer.kind == "none"

    def test_bad_type(self, config_file):
        with pytest.raises(ConfigError) as exc:
            TrainConfig.load_from_file(config_file({"t_total": "many"}))
        assert exc.value.key == "t_total"

    def test_bad_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            TrainConfig.load_from_file(path)

    def test_top_level_must_be_object(self, config_file):
        with pytest.raises(ConfigError):
            TrainConfig.load_from_file(config_file([1, 2, 3]))


class TestValidate:
    @pytest.mark.parametrize(
        "block, key",
        [
            ({"regularizer": {"gamma": 1.0}}, "regularizer.gamma"),
            ({"regularizer": {"kind": "dropout"}}, "regularizer.kind"),
            ({"regularizer": {"mode": "cosine"}}, "regularizer.mode"),
            ({"regularizer": {"criterion": "size"}}, "regularizer.criterion"),
            ({"t_total": -1}, "t_total"),
            ({"workers": 0}, "workers"),
            ({"sh_degree": 3}, "sh_degree"),
            ({"init_strategy": "sfm"}, "init_strategy"),
            ({"synthetic": {"n_train": 0}}, "synthetic.n_train"),
        ],
    )
    def test_rejected(self, block, key):
        cfg = TrainConfig()
        cfg.apply_overrides(block)
        with pytest.raises(ConfigError) as exc:
            cfg.validate()
        assert exc.value.key == key

    def test_round_trip_through_dict(self):
        cfg = TrainConfig(t_total=42, regularizer=RegularizerConfig(kind="l1", criterion="distance"))
        again = TrainConfig()
        again.apply_overrides(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg
