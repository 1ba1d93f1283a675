from pathlib import Path

import pytest

from bmdgan.data import RunConfig
from bmdgan.errors import ConfigError
from bmdgan.losses.data import GANMode
from bmdgan.training.data import LRPolicy, StageName
from bmdgan.utils.confparse import config_hash, parse_config, parse_config_text, serialize_config

MINIMAL = """
[paths]
out_dir = "runs/demo"
"""


def test_minimal_config_fills_defaults():
    config = parse_config_text(MINIMAL)
    assert config.paths.out_dir == Path("runs/demo")
    assert config.paths.dataset_dir == Path("runs/demo")
    assert config.phantom is None
    assert config.loss.lambda_l1 == 100.0
    assert config.loss.lambda_gc == 1.0
    assert config.loss.lambda_fm == 10.0
    assert config.loss.gan_mode == GANMode.VANILLA_LOG
    assert config.bmd.threshold_t == 1000.0
    assert config.hierarchical

    assert config.stage1.stage == StageName.STAGE1
    assert config.stage1.lr_policy == LRPolicy.LINEAR_DECAY
    assert config.stage1.weight_decay == 1e-4
    assert config.stage2.stage == StageName.STAGE2
    assert config.stage2.lr_policy == LRPolicy.SGDR
    assert config.stage2.weight_decay == 1e-8


def test_partial_stage_section_keeps_stage_defaults():
    config = parse_config_text(MINIMAL + "\n[stage2]\nepochs = 3\n")
    assert config.stage2.epochs == 3
    assert config.stage2.lr_policy == LRPolicy.SGDR
    assert config.stage2.weight_decay == 1e-8


def test_misspelled_key_is_reported_with_suggestion_and_line():
    text = MINIMAL + "\n[loss]\nlambda_gc = 2.0\nlamda_l1 = 50.0\n"
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text)
    error = excinfo.value
    assert error.key == "loss.lamda_l1"
    assert error.line == 7
    assert "did you mean 'lambda_l1'" in str(error)


def test_missing_paths_section():
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text("[loss]\nlambda_l1 = 50.0\n")
    assert excinfo.value.key == "paths"
    assert "required" in str(excinfo.value)


def test_type_mismatch_names_the_key():
    text = MINIMAL + "\n[stage1]\nepochs = \"ten\"\n"
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text)
    assert excinfo.value.key == "stage1.epochs"
    assert excinfo.value.line == 6


def test_stage_section_cannot_change_its_stage():
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(MINIMAL + "\n[stage1]\nstage = \"STAGE2\"\n")
    assert excinfo.value.key.startswith("stage1")


def test_invalid_toml_reports_line():
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text("[paths]\nout_dir = \n")
    assert excinfo.value.key == "<toml>"
    assert excinfo.value.line is not None


def test_serialized_config_parses_back(tiny_spec):
    config = parse_config_text(MINIMAL).copy(update={"phantom": tiny_spec})
    restored = parse_config_text(serialize_config(config))
    assert restored == config
    assert config_hash(restored) == config_hash(config)


def test_config_hash_tracks_content():
    first = parse_config_text(MINIMAL)
    same = parse_config_text("# comment\n" + MINIMAL)
    other = parse_config_text(MINIMAL + "\n[seeds]\ntrain = 1\n")
    assert config_hash(first) == config_hash(same)
    assert config_hash(first) != config_hash(other)
    assert len(config_hash(first)) == 64


def test_parse_config_reads_files(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(MINIMAL, encoding="utf-8")
    assert parse_config(path) == parse_config_text(MINIMAL)


def test_shipped_sample_config_parses():
    sample = Path(__file__).resolve().parents[1] / "config.toml"
    config = parse_config(sample)
    assert isinstance(config, RunConfig)
    assert config.phantom is not None


@pytest.mark.parametrize(
    "section, expected_key, expected_line",
    [
        ("\n[stage1]\nepochs = 2.7\n", "stage1.epochs", 6),
        ("hierarchical = 0\n", "hierarchical", 1),
        ("\n[seeds]\ntrain = true\n", "seeds.train", 6),
        ("\n[loss]\nlambda_l1 = \"100\"\n", "loss.lambda_l1", 6),
        ("\n[stage2.augment]\nhflip = 1\n", "stage2.augment.hflip", 6),
    ],
)
def test_toml_type_mismatch_is_not_coerced(section, expected_key, expected_line):
    # top-level keys must precede the first table
    text = section + MINIMAL if expected_line == 1 else MINIMAL + section
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text)
    assert excinfo.value.key == expected_key
    assert excinfo.value.line == expected_line


def test_integers_widen_into_float_fields():
    config = parse_config_text(MINIMAL + "\n[loss]\nlambda_l1 = 100\nlambda_fm = 10\n")
    assert config.loss.lambda_l1 == 100.0
    assert isinstance(config.loss.lambda_l1, float)
