import numpy as np
import pytest
import torch
from PIL import Image

from semtok.data import ingest_folder
from semtok.errors import ConfigError, MissingArtifact, RunLocked
from semtok.pipeline import RunConfig, RunDir, load_datasets, sampler_config


@pytest.fixture
def image_folder(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("b_dogs", "a_cats"):
        (tmp_path / name).mkdir()
        for i in range(10):
            arr = (rng.random((40, 56, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(tmp_path / name / f"{i}.png")
    return tmp_path


def test_folder_source_random_crops_train_center_crops_held(image_folder):
    rc = RunConfig(source="image_folder", data_path=str(image_folder), image_size=32, f=8, data_seed=3)
    train, held = load_datasets(rc)
    assert len(train) == 16 and len(held) == 4
    assert train.images.shape[1:] == (32, 32, 3) and held.images.shape[1:] == (32, 32, 3)
    assert train.class_names == ["a_cats", "b_dogs"]
    again, _ = load_datasets(rc)
    assert torch.equal(train.images, again.images)
    # some training crop is off-centre
    centred = ingest_folder(image_folder, 32, crop="center")
    assert any(not any(torch.equal(t, c) for c in centred.images) for t in train.images)


def test_run_dir_lock_and_require(tmp_path):
    run = RunDir(tmp_path / "r").create()
    with pytest.raises(MissingArtifact):
        run.require("stage1", "stage-1 checkpoint")
    with run.lock():
        with pytest.raises(RunLocked):
            with RunDir(tmp_path / "r").lock():
                pass
    with run.lock():
        pass


def test_sampler_config_from_run_config():
    sc = sampler_config(RunConfig())
    assert (sc.steps, sc.cfg_scale, sc.cfg_channels) == (30, 4.0, 3)
    assert sampler_config(RunConfig(cfg_channels="all")).cfg_channels == "all"
    with pytest.raises(ConfigError):
        sampler_config(RunConfig(cfg_channels="64"))
