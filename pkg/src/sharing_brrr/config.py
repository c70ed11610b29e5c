"""YAML run configuration with line-numbered error messages.

Top-level sections (all optional unless a command needs them)::

    seed: 0
    threads: 1
    out_dir: out
    data:      {x_path, y_path, groups_path, standardize: true, screen: null}
    model:     {variant: sharing, hyper: {...}, adapt: {...} | null}
    schedule:  {total_iters, burn_in, thin}
    synth:     {...SynthConfig fields...}
    bench:     {...BenchConfig fields...}
    verify:    {prop: all, s1: [1, 2, 3], budget: 200000, truncation: 40, a3: 3, a4: 4, nu: 5}
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import yaml

SECTIONS = {
    "seed": None, "threads": None, "out_dir": None,
    "data": {"x_path", "y_path", "groups_path", "standardize", "screen"},
    "model": {"variant", "hyper", "adapt", "share_information", "group_sparsity", "use_noise_factors"},
    "schedule": {"total_iters", "burn_in", "thin"},
    "synth": None, "bench": None,
    "verify": {"prop", "s1", "budget", "truncation", "a3", "a4", "nu", "seed"},
}


class ConfigError(ValueError):
    pass


class Config:
    """Parsed config plus a map from dotted key path to source line."""

    def __init__(self, data: Optional[dict] = None, lines: Optional[dict] = None, path=None):
        self.data = data or {}
        self.lines = lines or {}
        self.path = path

    def where(self, key: str) -> str:
        line = self.lines.get(key)
        src = self.path or "<config>"
        return f"{src}:{line}" if line else str(src)

    def error(self, key: str, msg: str) -> ConfigError:
        return ConfigError(f"{self.where(key)}: {key}: {msg}")

    def section(self, name: str) -> dict:
        v = self.data.get(name) or {}
        if not isinstance(v, dict):
            raise self.error(name, "must be a mapping")
        return dict(v)

    def get(self, dotted: str, default=None):
        cur = self.data
        for part in dotted.split("."):
            if not isinstance(cur, dict) or part not in cur:
                return default
            cur = cur[part]
        return cur

    def require(self, dotted: str):
        v = self.get(dotted)
        if v is None:
            raise self.error(dotted, "required field is missing")
        return v


def _walk(node, prefix, lines):
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            lines[key] = k.start_mark.line + 1
            _walk(v, key, lines)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        at = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{at}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    lines = {}
    _walk(node, "", lines)
    cfg = Config(data, lines, path)
    for key, value in data.items():
        if key not in SECTIONS:
            raise cfg.error(key, f"unknown section; expected one of {sorted(SECTIONS)}")
        allowed = SECTIONS[key]
        if allowed is not None:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise cfg.error(key, "must be a mapping")
            for sub in value:
                if sub not in allowed:
                    raise cfg.error(f"{key}.{sub}", f"unknown key; expected one of {sorted(allowed)}")
    return cfg
