import textwrap

import pytest

from src.domd_bench.errors import ConfigError
from src.domd_bench.scenesim import SceneSpec
from src.domd_bench.solver import SolverConfig
from src.utils.config_helper import config_hash, dump_model, load_model, read_yaml
from tests.conftest import static_plane_spec

SCENE_YAML = """\
spec_version: 1
name: wall
camera:
  fx: 60.0
  fy: 60.0
  cx: 47.5
  cy: 31.5
  width: 96
  height: 64
background:
  - depth: 10.0
"""


def _write(tmp_path, text, name="scene.yaml"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


def test_load_scene(tmp_path):
    spec = load_model(_write(tmp_path, SCENE_YAML), SceneSpec)
    assert spec.name == "wall"
    assert spec.background[0].depth == 10.0
    assert spec.camera.intrinsics().shape == (64, 96)


def test_missing_key_names_key_and_line(tmp_path):
    path = _write(tmp_path, SCENE_YAML.replace("  fx: 60.0\n", ""))
    with pytest.raises(ConfigError) as info:
        load_model(path, SceneSpec)
    assert "missing required key 'camera.fx'" in str(info.value)
    assert info.value.key == "camera.fx"
    assert info.value.line == 3


def test_unknown_key_is_rejected(tmp_path):
    path = _write(tmp_path, SCENE_YAML + "lighting: harsh\n")
    with pytest.raises(ConfigError) as info:
        load_model(path, SceneSpec)
    assert "unknown key 'lighting'" in str(info.value)
    assert info.value.line == 12


def test_invalid_value_points_at_list_item(tmp_path):
    path = _write(tmp_path, SCENE_YAML.replace("depth: 10.0", "depth: -1.0"))
    with pytest.raises(ConfigError) as info:
        load_model(path, SceneSpec)
    assert info.value.key == "background[0].depth"
    assert info.value.line == 11


def test_malformed_yaml_reports_line(tmp_path):
    path = _write(tmp_path, "a: 1\nb: [1, 2\nc: 3\n")
    with pytest.raises(ConfigError, match="malformed YAML") as info:
        read_yaml(path)
    assert info.value.line is not None


def test_top_level_must_be_mapping(tmp_path):
    with pytest.raises(ConfigError, match="mapping"):
        load_model(_write(tmp_path, "- 1\n- 2\n"), SolverConfig)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_model(tmp_path / "absent.yaml", SolverConfig)


def test_hash_is_stable_and_sensitive():
    a = static_plane_spec()
    assert config_hash(a) == config_hash(static_plane_spec())
    assert config_hash(a) != config_hash(static_plane_spec(depth=11.0))
    assert config_hash(a, SolverConfig()) != config_hash(a, SolverConfig(iterations=1))
    assert len(config_hash(a)) == 64


def test_dump_then_load_keeps_the_hash(tmp_path):
    spec = static_plane_spec()
    path = tmp_path / "scene.yaml"
    dump_model(spec, path)
    assert config_hash(load_model(path, SceneSpec)) == config_hash(spec)
