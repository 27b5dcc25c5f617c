"""Run configuration: TOML or JSON file, defaults, and flag overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .egroi import EgroiConfig
from .errors import ArgumentError, ConfigError


@dataclass(frozen=True)
class EvalSettings:
    template: str = "general"
    shot: str = "zero"
    with_mfg: bool = False
    scheme: str = "option_letter"
    hints: str | None = None


@dataclass(frozen=True)
class ClientSettings:
    endpoint: str | None = None
    model: str = "gpt-4o"
    token_env: str = "TRIAD_GEN_TOKEN"
    attempts: int = 3
    max_in_flight: int = 4
    stub_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    name: str = "default"
    dataset_root: str = "."
    output_root: str = "run"
    workers: int = 1
    mfg_store: str | None = None
    egroi: EgroiConfig = field(default_factory=EgroiConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    client: ClientSettings = field(default_factory=ClientSettings)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_root) / self.name

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.dataset_root) / p

    def to_dict(self):
        return {
            "name": self.name,
            "dataset_root": self.dataset_root,
            "output_root": self.output_root,
            "workers": self.workers,
            "mfg_store": self.mfg_store,
            "egroi": self.egroi.to_dict(),
            "eval": {f.name: getattr(self.eval, f.name) for f in fields(self.eval)},
            "client": {f.name: getattr(self.client, f.name) for f in fields(self.client)},
        }


# key -> accepted python types; tuples of ints are given as 2-element lists
_SCALARS = {
    "name": (str,), "dataset_root": (str,), "output_root": (str,), "workers": (int,),
    "mfg_store": (str, type(None)),
}
_SECTIONS = {
    "egroi": (EgroiConfig, {
        "threshold": (float, int), "box_side": (int,), "iou_merge": (float, int), "cap": (int,),
        "pool": (int,), "budget": (int,), "connectivity": (int,), "seed": (int,),
        "base_grid": ("pair",), "patch_grid": ("pair",), "anyres_tiles": (int,),
    }),
    "eval": (EvalSettings, {
        "template": (str,), "shot": (str,), "with_mfg": (bool,), "scheme": (str,),
        "hints": (str, type(None)),
    }),
    "client": (ClientSettings, {
        "endpoint": (str, type(None)), "model": (str,), "token_env": (str,), "attempts": (int,),
        "max_in_flight": (int,), "stub_seed": (int,),
    }),
}


def _check_type(key, value, kinds):
    if "pair" in kinds:
        if (isinstance(value, (list, tuple)) and len(value) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            return tuple(value)
        raise ConfigError(f"config key '{key}' expects a pair of integers, got {value!r}")
    ok = any(isinstance(value, k) and not (isinstance(value, bool) and k is not bool) for k in kinds)
    if not ok:
        names = " or ".join("null" if k is type(None) else k.__name__ for k in kinds)
        raise ConfigError(f"config key '{key}' expects {names}, got {type(value).__name__} {value!r}")
    if float in kinds and isinstance(value, int):
        value = float(value)
    return value


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not text.strip():
        return {}
    if path.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        if path.suffix == ".toml":
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: neither TOML nor JSON") from exc


def _set_dotted(tree: dict, dotted: str, value):
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key '{p}' is not a section")
    node[parts[-1]] = value


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig`.

    ``overrides`` maps dotted keys (``"egroi.threshold"``) to values and wins
    over the file; ``None`` values are ignored so unset CLI flags fall through.
    """
    raw = load_config_file(path) if path else {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table/object")
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, key, value)

    top = {}
    sections = {}
    for key, value in raw.items():
        if key in _SCALARS:
            top[key] = _check_type(key, value, _SCALARS[key])
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{key}' must be a table")
            cls, schema = _SECTIONS[key]
            kwargs = {}
            for sub, sv in value.items():
                if sub not in schema:
                    raise ConfigError(f"unknown config key '{key}.{sub}'")
                kwargs[sub] = _check_type(f"{key}.{sub}", sv, schema[sub])
            try:
                sections[key] = cls(**kwargs)
            except ArgumentError as exc:
                raise ConfigError(f"invalid [{key}] settings: {exc}") from exc
        else:
            raise ConfigError(f"unknown config key '{key}'")
    if top.get("workers", 1) < 1:
        raise ConfigError("config key 'workers' must be >= 1")
    cfg = RunConfig(**top, **sections)
    _check_choices(cfg)
    return cfg


def _check_choices(cfg: RunConfig):
    from .evalharness import SCHEMES, SHOTS, TEMPLATES

    for key, value, allowed in (("eval.template", cfg.eval.template, TEMPLATES),
                                ("eval.shot", cfg.eval.shot, SHOTS),
                                ("eval.scheme", cfg.eval.scheme, SCHEMES)):
        if value not in allowed:
            raise ConfigError(f"config key '{key}' must be one of {allowed}, got {value!r}")
    if cfg.client.attempts < 1 or cfg.client.max_in_flight < 1:
        raise ConfigError("config keys 'client.attempts' and 'client.max_in_flight' must be >= 1")
