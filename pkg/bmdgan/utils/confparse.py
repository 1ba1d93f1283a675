"""
TOML run configuration: strict parsing, serialization and hashing.
"""
import difflib
import hashlib
import json
import re
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Type, Union

import toml  # type: ignore
from pydantic import BaseModel, ValidationError
from pydantic.fields import ModelField

from ..data import RunConfig
from ..errors import ConfigError

PathLike = Union[str, Path]

HEADER_PATTERN = re.compile(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?\s*(#.*)?$")


def _model_at(loc: Sequence[Union[str, int]]) -> Optional[Type[BaseModel]]:
    """
    Walks RunConfig fields along a pydantic error location. Returns the model owning the last
    component, or None if the path leaves the model tree.
    """
    model: Type[BaseModel] = RunConfig
    for part in loc:
        if isinstance(part, int):
            continue
        field = model.__fields__.get(part)
        if field is None:
            return None
        inner = field.type_
        if not (isinstance(inner, type) and issubclass(inner, BaseModel)):
            return None
        model = inner
    return model


def _find_line(text: str, parts: List[str]) -> Optional[int]:
    """
    1-based line of a dotted key: the key line inside its table when present, else the table
    header, else None.
    """
    lines = text.splitlines()
    section = ".".join(parts[:-1])
    key = parts[-1] if parts else ""

    header_line = None
    start = 0
    if section:
        for index, line in enumerate(lines):
            match = HEADER_PATTERN.match(line)
            if match and match.group(1) == section:
                header_line = index
                start = index + 1
                break
        if header_line is None:
            return None

    key_pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for index in range(start, len(lines)):
        line = lines[index]
        if HEADER_PATTERN.match(line):
            break
        if key_pattern.match(line):
            return index + 1

    # the key may itself be a table
    dotted = ".".join(parts)
    for index, line in enumerate(lines):
        match = HEADER_PATTERN.match(line)
        if match and match.group(1) == dotted:
            return index + 1

    return None if header_line is None else header_line + 1


def _describe(error: dict, text: str) -> ConfigError:
    loc: Tuple[Union[str, int], ...] = tuple(error["loc"])
    if loc and loc[0] == "__root__":
        loc = loc[1:]
    key = ".".join(str(part) for part in loc) or "<root>"
    string_parts = [str(part) for part in loc if not isinstance(part, int)]
    line = _find_line(text, string_parts) if string_parts else None

    message = error["msg"]
    if error["type"] == "value_error.extra" and string_parts:
        owner = _model_at(loc[:-1])
        if owner is not None:
            suggestions = difflib.get_close_matches(string_parts[-1], list(owner.__fields__), n=1)
            if suggestions:
                message = f"unknown key; did you mean {suggestions[0]!r}?"
            else:
                message = "unknown key"
    elif error["type"] == "value_error.missing":
        message = "required key is missing"
    return ConfigError(key, message, line=line)


def _strict_mismatch(field: ModelField, value: Any) -> Optional[str]:
    """
    TOML types that pydantic would coerce silently: floats or booleans into integer fields,
    integers into boolean fields, strings or booleans into number fields.
    """
    expected = field.type_
    if expected is bool:
        return None if isinstance(value, bool) else "expected a boolean"
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            return "expected an integer"
        return None
    if expected is float:
        # integers widen to floats
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return "expected a number"
        return None
    return None


def _check_strict_types(
    raw: Any, model: Type[BaseModel], loc: Tuple[Union[str, int], ...] = ()
) -> Optional[dict]:
    """
    First strict type mismatch in raw TOML data, as a pydantic-style error dict.
    """
    if not isinstance(raw, dict):
        return None
    for name, value in raw.items():
        field = model.__fields__.get(name)
        if field is None or value is None:
            continue
        error = _check_field(field, value, loc + (name,))
        if error is not None:
            return error
    return None


def _check_field(
    field: ModelField, value: Any, loc: Tuple[Union[str, int], ...]
) -> Optional[dict]:
    if isinstance(value, list) and field.sub_fields:
        for index, item in enumerate(value):
            sub_field = field.sub_fields[min(index, len(field.sub_fields) - 1)]
            error = _check_field(sub_field, item, loc + (index,))
            if error is not None:
                return error
        return None
    inner = field.type_
    if isinstance(inner, type) and issubclass(inner, BaseModel):
        return _check_strict_types(value, inner, loc)
    message = _strict_mismatch(field, value)
    if message is None:
        return None
    return {
        "loc": loc,
        "msg": f"{message}, got {type(value).__name__}",
        "type": "type_error.strict",
    }


def parse_config_text(text: str) -> RunConfig:
    try:
        raw = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ConfigError("<toml>", e.msg, line=e.lineno)
    mismatch = _check_strict_types(raw, RunConfig)
    if mismatch is not None:
        raise _describe(mismatch, text)
    try:
        return RunConfig.parse_obj(raw)
    except ValidationError as e:
        raise _describe(e.errors()[0], text)


def parse_config(path: PathLike) -> RunConfig:
    with open(path, "r", encoding="utf-8") as ifp:
        text = ifp.read()
    return parse_config_text(text)


def _drop_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _drop_none(item) for key, item in value.items() if item is not None}
    if isinstance(value, list):
        return [_drop_none(item) for item in value]
    return value


def config_as_dict(config: RunConfig) -> dict:
    return json.loads(config.json())


def serialize_config(config: RunConfig) -> str:
    """
    TOML text that parses back to an equal RunConfig. Unset optional values are omitted.
    """
    return toml.dumps(_drop_none(config_as_dict(config)))


def config_hash(config: RunConfig) -> str:
    """
    sha256 of the canonical JSON of the parsed configuration.
    """
    canonical = json.dumps(config_as_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
