from pathlib import Path

import pytest
import yaml

from lanerep import config as C
from lanerep.errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_and_seed_propagation():
    cfg = C.from_dict({"seed": 7})
    assert cfg.scene.seed == cfg.train.seed == cfg.encoder.seed == cfg.diffusion.seed == 7
    assert C.from_dict(None) == C.RunConfig()
    assert C.load().train.epochs == C.RunConfig().train.epochs


@pytest.mark.parametrize("name", ["default.yaml", "smoke.yaml"])
def test_shipped_configs_parse(name):
    cfg = C.load(CONFIGS / name)
    assert cfg.seed == 0
    assert 300 in cfg.eval.window_sweep


def test_round_trip(tmp_path):
    cfg = C.load(CONFIGS / "smoke.yaml", {"seed": 3, "train.epochs": 5})
    p = tmp_path / "c.yaml"
    p.write_text(C.dump(cfg))
    assert C.load(p) == cfg
    assert cfg.train.epochs == 5 and cfg.scene.seed == 3


def test_unknown_keys_all_reported(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"bogus": 1, "train": {"lr": 1, "seed": 4}}))
    with pytest.raises(ConfigurationError) as info:
        C.load(p)
    msg = str(info.value)
    assert "config.bogus" in msg and "config.train.lr" in msg and "config.train.seed" in msg


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        C.from_dict({"train": {"epochs": 3}})
    with pytest.raises(ConfigurationError):
        C.from_dict({"eval": {"generation_conditioning": "both"}})
    with pytest.raises(ConfigurationError):
        C.from_dict({"eval": {"regimes": ["contrastive_only"]}})
    with pytest.raises(ConfigurationError):
        C.from_dict({"train": "fast"})
    with pytest.raises(ConfigurationError):
        C.load(tmp_path / "missing.yaml")
    p = tmp_path / "broken.yaml"
    p.write_text("train: [unclosed")
    with pytest.raises(ConfigurationError):
        C.load(p)


def test_paths_resolve_with_env(tmp_path, monkeypatch):
    cfg = C.RunConfig()
    paths = C.resolve_paths(cfg, tmp_path)
    assert paths["dataset_dir"] == tmp_path / "dataset"
    monkeypatch.setenv("LANEREP_REPORT_DIR", str(tmp_path / "elsewhere"))
    monkeypatch.setenv("LANEREP_EVAL_DIR", "rel")
    paths = C.resolve_paths(cfg, tmp_path)
    assert paths["report_dir"] == tmp_path / "elsewhere"
    assert paths["eval_dir"] == tmp_path / "rel"
