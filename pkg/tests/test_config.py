from pathlib import Path

import pytest

from irevnet.config import load_config, parse_config
from irevnet.errors import ConfigError
from irevnet.network import preset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["tiny-b", "tiny-a", "paper-b", "paper-a"])
def test_shipped_configs_match_presets(name):
    assert load_config(CONFIGS / f"{name}.ini").net == preset(name)


def test_mnist_recipe():
    exp = load_config(CONFIGS / "tiny-b-mnist.ini")
    assert exp.net == preset("tiny-b")
    assert exp.optim.lr == 0.05 and exp.optim.milestones == (500,)
    assert exp.train.batch_size == 16 and exp.train.augment == "crop"
    assert exp.data_source == "mnist_idx"


def test_preset_with_override():
    exp = parse_config("[net]\npreset = tiny-b\nnum_classes = 4\n")
    assert exp.net.num_classes == 4 and exp.net.depth == 16


@pytest.mark.parametrize("text, match", [
    ("[optimizer]\nlr = 0.1\n", "missing \\[net\\]"),
    ("[net]\npreset = huge\n", "unknown preset"),
    ("[net]\npreset = tiny-b\n[bogus]\n", "unknown section"),
    ("[net]\npreset = tiny-b\ncolour = red\n", "unknown keys"),
    ("[net]\nsplit_factor = 2\n", "needs a preset"),
    ("[net]\npreset = tiny-b\nblocks = many\n", "bad value"),
    ("[net]\npreset = tiny-b\n[train]\naugment = rotate\n", "augment"),
    ("[net]\npreset = tiny-b\n[data]\nsource = imagenet\n", "source"),
    ("[net]\ninput_shape = 3,8,8\nsplit_factor = 2\nblocks = 4\ndownsample_at = 1,2,3\n", "block"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "x.ini")
