import textwrap

import pytest

from flowedit_lab.config import ConfigError, load_config

MIXTURES = """\
source:
  dim: 2
  components:
    - {weight: 0.5, mean: [-1.0, 0.0], cov: [1, 0, 0, 1]}
    - {weight: 0.5, mean: [1.0, 0.0], cov: [1, 0, 0, 1]}
target:
  dim: 2
  components:
    - {weight: 1.0, mean: [0.0, 5.0], cov: [1, 0, 0, 1]}
"""


def write(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(textwrap.dedent(text))
    return path


def test_defaults_are_the_two_mode_experiment():
    cfg = load_config()
    s = cfg.schedule
    assert (s.T, s.n_max, s.n_min, s.n_avg, s.step_scale_c) == (50, 50, 0, 16, 1.0)
    assert cfg.samples == 1000 and cfg.seeds == list(range(20))
    assert cfg.methods == ["flowedit", "invert_edit", "sdedit"]
    assert cfg.guidance_scale == 1.0 and cfg.backend == "analytic"


def test_sd3_preset():
    s = load_config(preset="sd3").schedule
    assert (s.T, s.n_max, s.n_avg) == (50, 33, 1)


def test_file_and_overrides(tmp_path):
    path = write(tmp_path, MIXTURES + "schedule: {T: 20, n_max: 15}\nseeds: [3, 4]\n")
    cfg = load_config(path, {"schedule.n_avg": 2, "methods": "flowedit,sdedit"})
    assert cfg.schedule.T == 20 and cfg.schedule.n_max == 15 and cfg.schedule.n_avg == 2
    assert cfg.seeds == [3, 4] and cfg.methods == ["flowedit", "sdedit"]
    assert cfg.target.n_components == 1


def test_missing_mixture_is_line_anchored(tmp_path):
    path = write(tmp_path, "samples: 10\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.field_name == "source"
    assert str(info.value) == f"{path}:1: missing required field 'source'"


def test_unknown_field_reports_its_line(tmp_path):
    path = write(tmp_path, MIXTURES + "sampels: 10\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line == 10 and "sampels" in str(info.value)


@pytest.mark.parametrize("extra, field, line", [
    ("schedule:\n  T: 10\n  n_max: 20\n", "schedule", 10),
    ("samples: 1\n", "samples", 10),
    ("methods: [flowedit, magic]\n", "methods", 10),
    ("seeds: [-1]\n", "seeds", 10),
    ("guidance: {scale: -2}\n", "guidance.scale", None),
])
def test_invalid_values(tmp_path, extra, field, line):
    path = write(tmp_path, MIXTURES + extra)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.field_name == field
    if line is not None:
        assert info.value.line == line


def test_bad_mixture_reported(tmp_path):
    path = write(tmp_path, MIXTURES.replace("weight: 1.0", "weight: 2.0"))
    with pytest.raises(ConfigError, match="target"):
        load_config(path)


def test_invalid_yaml(tmp_path):
    path = write(tmp_path, "source: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(path)


def test_config_hash_tracks_content_not_output_dir():
    a = load_config()
    assert a.config_hash() == load_config().config_hash()
    assert a.config_hash() == load_config(overrides={"out": "elsewhere"}).config_hash()
    assert a.config_hash() != load_config(overrides={"samples": 999}).config_hash()
