import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import planground.utils as utils
from planground.trainer import TrainConfig, config_hash
from planground.utils import resolve_output, run_name


def test_run_name_is_deterministic():
    digest = config_hash(TrainConfig(seed=3, ablation="image_only"))
    assert run_name("image_only", 3, digest) == run_name("image_only", 3, digest)
    assert run_name("image_only", 3, digest) == f"image_only_seed3_{digest[:12]}"


def test_run_name_tracks_configuration():
    first = run_name("full", 0, config_hash(TrainConfig(hidden_size=8)))
    second = run_name("full", 0, config_hash(TrainConfig(hidden_size=16)))
    assert first != second


def test_run_name_spaces_normalised():
    assert run_name("my run", 1, "abc") == "my_run_seed1_abc"


def test_run_name_needs_digest():
    with pytest.raises(ValueError):
        run_name("full", 0, "")


def test_resolve_output_prefers_explicit_path(tmp_path):
    assert resolve_output(tmp_path / "x", "data") == tmp_path / "x"
    assert resolve_output(str(tmp_path), "data") == tmp_path


def test_resolve_output_falls_back_to_data_dir(monkeypatch, tmp_path):
    monkeypatch.setattr(utils, "default_data_dir", lambda: tmp_path)
    assert resolve_output(None, "checkpoints/full.ckpt") == tmp_path / "checkpoints" / "full.ckpt"


def test_default_data_dir_names_application():
    assert utils.APP_NAME in str(utils.default_data_dir())
