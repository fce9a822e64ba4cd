import json

import pytest

from lifseg import config
from lifseg.config import ABLATION_VARIANTS, VARIANTS, PipelineConfig, load_project_config, normalize_variant
from lifseg.errors import BadWindow


def test_aliases_and_unicode_tags():
    assert normalize_variant("C+3×3") == "C+3x3"
    assert normalize_variant("mid") == "no-offset"
    assert normalize_variant("C+3x3+Mid+Ref") == "full"
    assert normalize_variant("C+3×3+Mid+Ref") == "full"
    with pytest.raises(ValueError):
        normalize_variant("C+7x7")


@pytest.mark.parametrize("tag", sorted(VARIANTS))
def test_every_variant_builds(tag):
    cfg = PipelineConfig.for_variant(tag)
    assert cfg.variant == tag
    assert cfg.c0 == cfg.class_count
    if cfg.offset_stage:
        assert cfg.mid_fusion != "none"


def test_painted_widths_differ_only_by_window():
    widths = [PipelineConfig.for_variant(t).painted_width_extra for t in ("baseline", "C+1x1", "C+3x3", "C+5x5")]
    assert widths == [0, 3, 27, 75]
    assert set(ABLATION_VARIANTS) <= set(VARIANTS)


def test_invalid_settings():
    with pytest.raises(BadWindow):
        PipelineConfig(window=2)
    with pytest.raises(ValueError):
        PipelineConfig(coarse_channels=5)
    with pytest.raises(ValueError):
        PipelineConfig(mid_fusion="none", offset_stage=True)
    with pytest.raises(ValueError):
        PipelineConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        PipelineConfig(offset_learning_rate=-0.1)
    with pytest.raises(ValueError):
        PipelineConfig(centroid_mode="median")


def test_defaults_train_the_offset_head_on_aligned_targets():
    cfg = PipelineConfig()
    assert cfg.centroid_mode == "aligned" and cfg.foreground_only
    assert cfg.epochs == 20 and cfg.offset_learning_rate > cfg.learning_rate


def test_json_round_trip(tmp_path):
    cfg = PipelineConfig.for_variant("C+3x3+Sem", epochs=3, grid_resolution=(4, 4, 2))
    path = tmp_path / "config.json"
    cfg.save(path)
    assert PipelineConfig.load(path) == cfg
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"variant": "full", "bogus": 1})


def test_project_config(tmp_path):
    assert load_project_config(None) == ({}, {})
    (tmp_path / config.PIPELINE_CONFIG_FILE).write_text(json.dumps({"alpha": 0.5}), encoding="utf-8")
    pipeline_overrides, scene_overrides = load_project_config(tmp_path)
    assert pipeline_overrides == {"alpha": 0.5}
    assert scene_overrides == {}


def test_environment_settings(monkeypatch):
    monkeypatch.setenv("LIFSEG_DATA_CAP_BYTES", "123")
    assert config.data_cap_bytes() == 123
    monkeypatch.setenv("LIFSEG_DATA_CAP_BYTES", "lots")
    assert config.data_cap_bytes() == config.DEFAULT_DATA_CAP_BYTES
    monkeypatch.setenv("LIFSEG_LOG_DIR", "/tmp/somewhere")
    assert config.log_dir() == "/tmp/somewhere"
