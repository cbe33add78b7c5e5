"""Plain-text run configuration: sections of key = value pairs.

Sections mirror the library's config dataclasses one key per field.
Unknown sections or keys are rejected; ``parse(render(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .codec import CodecConfig
from .finetune import FinetuneConfig
from .probmodel import ProbConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    bucket_edges: tuple = (0.05, 0.1)
    include_header: bool = False
    clip_bpp_lo: float = 0.0
    clip_bpp_hi: float = float("inf")


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    probmodel: ProbConfig = field(default_factory=ProbConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "codec": CodecConfig,
    "probmodel": ProbConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "eval": EvalConfig,
}


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):  # schedule of weight triples
            return "; ".join(",".join(repr(float(x)) for x in t) for t in v)
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, kind, name: str):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            if ";" in text or name == "schedule":
                return tuple(
                    tuple(float(x) for x in part.split(","))
                    for part in text.split(";") if part.strip())
            return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {text!r}") from e
    raise ConfigError(f"unsupported field type for {name}")


def render(cfg: RunConfig) -> str:
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in fields(cls):
            out.write(f"{f.name} = {_render_value(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def parse(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    kwargs = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        known = {f.name for f in fields(cls)}
        defaults = cls()
        values = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kind = type(getattr(defaults, key))
            values[key] = _parse_value(raw, kind, f"{section}.{key}")
        try:
            kwargs[section] = cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid [{section}] config: {e}") from e
    return RunConfig(**kwargs)


def load(path) -> RunConfig:
    with open(path, "r") as f:
        return parse(f.read())


def dump(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        f.write(render(cfg))
