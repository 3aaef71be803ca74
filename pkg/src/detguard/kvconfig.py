"""Line-oriented ``key = value`` configuration files with a fixed key set."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable, Mapping, Type, TypeVar, Union

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def _convert(raw: str, kind: Any, key: str):
    try:
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in ("tuple[float, ...]", "tuple[int, ...]"):
            conv = float if "float" in kind else int
            return tuple(conv(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_kv(text: str, cls: Type[T], source: str = "<config>") -> T:
    """Build dataclass ``cls`` from ``key = value`` lines; unknown or repeated keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: repeated key {key!r}")
        values[key] = _convert(raw, fields[key].type, key)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_kv(path: Union[str, Path], cls: Type[T]) -> T:
    return parse_kv(Path(path).read_text(encoding="utf-8"), cls, str(path))


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def kv_lines(obj: Any) -> list[str]:
    return [f"{f.name} = {format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def dump_kv(obj: Any) -> str:
    return "".join(line + "\n" for line in kv_lines(obj))


def comment_header(items: Iterable[str]) -> str:
    return "".join(f"# {line}\n" for line in items)


def parse_comment_header(lines: Iterable[str]) -> dict[str, str]:
    """Collect ``# key = value`` lines at the top of a CSV."""
    out: dict[str, str] = {}
    for line in lines:
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if "=" in body:
            key, value = (p.strip() for p in body.split("=", 1))
            out[key] = value
    return out


def from_mapping(values: Mapping[str, str], cls: Type[T]) -> T:
    """Rebuild ``cls`` from the subset of ``values`` naming its fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    text = "".join(f"{k} = {v}\n" for k, v in values.items() if k in names)
    return parse_kv(text, cls)
