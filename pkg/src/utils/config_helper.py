"""
Helpers to load YAML configuration files into pydantic models.

Parse errors carry the file and line of the problem; schema errors name the dotted key
path and the line of the closest YAML node, e.g.::

    scene.yaml:3: missing required key 'camera.fx'

    >>> from src.domd_bench.scenesim import SceneSpec
    >>> spec = load_model("scene.yaml", SceneSpec)
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, ValidationError

from src.domd_bench.errors import ConfigError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)
KeyPath = Tuple[Union[str, int], ...]


def _node_lines(node: yaml.Node, prefix: KeyPath = ()) -> Dict[KeyPath, int]:
    """Map every key path of a composed YAML document to its 1-based line."""
    lines = {prefix: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            lines.update(_node_lines(value_node, prefix + (key_node.value,)))
            lines[prefix + (key_node.value,)] = key_node.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for index, item in enumerate(node.value):
            lines.update(_node_lines(item, prefix + (index,)))
    return lines


def _closest_line(lines: Dict[KeyPath, int], path: KeyPath) -> int:
    for cut in range(len(path), -1, -1):
        if path[:cut] in lines:
            return lines[path[:cut]]
    return 1


def _dotted(path: KeyPath) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def read_yaml(path: Union[str, Path]) -> Tuple[Any, Dict[KeyPath, int]]:
    """Read a YAML file, returning the data and a key-path to line map."""
    path = str(path)
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", path=path) from e
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"malformed YAML: {problem}", path=path, line=line) from e
    lines = _node_lines(node) if node is not None else {}
    return data, lines


def validate_model(
    data: Any, model: Type[ModelT], path: str = "<config>", lines: Dict[KeyPath, int] = None
) -> ModelT:
    """Validate plain data against ``model``, converting errors to ``ConfigError``."""
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping of keys to values", path=path, line=1)
    try:
        return model.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        key_path = tuple(part for part in error["loc"] if not str(part).startswith("function-"))
        key = _dotted(key_path)
        line = _closest_line(lines, key_path)
        if error["type"] == "missing":
            message = f"missing required key '{key}'"
        elif error["type"] == "extra_forbidden":
            message = f"unknown key '{key}'"
        else:
            message = f"invalid value for '{key or '<root>'}': {error['msg']}"
        raise ConfigError(message, path=path, line=line, key=key) from e


def load_model(path: Union[str, Path], model: Type[ModelT]) -> ModelT:
    """Read and validate a YAML config file."""
    data, lines = read_yaml(path)
    result = validate_model(data, model, str(path), lines)
    logger.debug("loaded %s from %s", model.__name__, path)
    return result


def canonical_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(*models: BaseModel) -> str:
    """SHA-256 over the canonical JSON of one or more models."""
    digest = hashlib.sha256()
    for model in models:
        digest.update(canonical_json(model).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def dump_model(model: BaseModel, path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(model.model_dump(mode="json"), f, sort_keys=True)
