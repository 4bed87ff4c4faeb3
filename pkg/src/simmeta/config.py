"""Study configuration: a YAML document validated into ``StudyConfig``."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .bootstrap import LEVELS
from .metamodel import METRICS, WEIGHTS
from .study import ALTERNATIVES, ESTIMATORS, FACTORS, ConfigurationError, expand_grid


class ConfigError(ConfigurationError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, field=None, line=None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")
        self.field = field
        self.line = line


@dataclass
class BootstrapSettings:
    levels: list[str] = field(default_factory=lambda: list(LEVELS))
    B: int = 200
    seed: int = 1


@dataclass
class StudyConfig:
    factors: dict[str, list[float]]
    reps: int = 100
    seed: int = 0
    estimators: list[str] = field(default_factory=lambda: list(ESTIMATORS))
    alternative: str = "two-sided"
    metrics: list[str] = field(default_factory=lambda: ["power"])
    presets: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    weights: str = "none"
    bootstrap: BootstrapSettings = field(default_factory=BootstrapSettings)
    output_dir: str = "results"
    workers: int = 1

    def conditions(self):
        return expand_grid(self.factors)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _lines(text: str) -> dict[tuple, int]:
    """1-based line of each key path in a YAML mapping document."""
    out: dict[tuple, int] = {}
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                out[path + (k.value,)] = k.start_mark.line + 1
                walk(v, path + (k.value,))
    walk(node, ())
    return out


def _check_keys(d: dict, allowed, path, lines):
    for k in d:
        if k not in allowed:
            key = path + (k,)
            raise ConfigError(f"unknown key {'.'.join(map(str, key))!r}", ".".join(map(str, key)),
                              lines.get(key))


def from_dict(d: dict, lines: dict | None = None) -> StudyConfig:
    lines = lines or {}
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a mapping")
    names = {f.name for f in dataclasses.fields(StudyConfig)}
    _check_keys(d, names, (), lines)
    if "factors" not in d:
        raise ConfigError("missing required key 'factors'", "factors")

    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}", key, lines.get(tuple(key.split("."))))

    factors = d["factors"]
    if not isinstance(factors, dict):
        fail("factors", "must map factor names to value lists")
    _check_keys(factors, FACTORS, ("factors",), lines)
    clean = {}
    for name in FACTORS:
        vals = factors.get(name)
        if vals is None:
            fail("factors", f"missing factor {name!r}")
        if not isinstance(vals, list):
            vals = [vals]
        if not vals:
            fail(f"factors.{name}", "value list is empty")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            fail(f"factors.{name}", "values must be numbers")
        clean[name] = [int(v) if name == "n" and float(v).is_integer() else float(v)
                       for v in vals]
    kw = {"factors": clean}
    for key in ("reps", "seed", "workers"):
        if key in d:
            if not isinstance(d[key], int) or isinstance(d[key], bool):
                fail(key, "must be an integer")
            kw[key] = d[key]
    if kw.get("reps", 1) < 1:
        fail("reps", "must be >= 1")
    if kw.get("workers", 1) < 1:
        fail("workers", "must be >= 1")
    for key, allowed in (("estimators", ESTIMATORS), ("metrics", tuple(METRICS))):
        if key in d:
            vals = d[key]
            if not isinstance(vals, list) or not vals:
                fail(key, "must be a non-empty list")
            bad = [v for v in vals if v not in allowed]
            if bad:
                fail(key, f"unknown value(s) {bad}; allowed {list(allowed)}")
            kw[key] = list(vals)
    if "presets" in d:
        if not isinstance(d["presets"], list) or any(p not in (1, 2, 3, 4) for p in d["presets"]):
            fail("presets", "must be a list drawn from 1, 2, 3, 4")
        kw["presets"] = list(d["presets"])
    if "alternative" in d:
        if d["alternative"] not in ALTERNATIVES:
            fail("alternative", f"must be one of {list(ALTERNATIVES)}")
        kw["alternative"] = d["alternative"]
    if "weights" in d:
        if d["weights"] not in WEIGHTS:
            fail("weights", f"must be one of {list(WEIGHTS)}")
        kw["weights"] = d["weights"]
    if "output_dir" in d:
        if not isinstance(d["output_dir"], str):
            fail("output_dir", "must be a string")
        kw["output_dir"] = d["output_dir"]
    if "bootstrap" in d:
        b = d["bootstrap"]
        if not isinstance(b, dict):
            fail("bootstrap", "must be a mapping")
        _check_keys(b, {"levels", "B", "seed"}, ("bootstrap",), lines)
        bs = BootstrapSettings()
        if "levels" in b:
            if not isinstance(b["levels"], list) or any(v not in LEVELS for v in b["levels"]):
                fail("bootstrap.levels", f"must be a list drawn from {list(LEVELS)}")
            bs.levels = list(b["levels"])
        for key in ("B", "seed"):
            if key in b:
                if not isinstance(b[key], int) or isinstance(b[key], bool):
                    fail(f"bootstrap.{key}", "must be an integer")
                setattr(bs, key, b[key])
        if bs.B < 2:
            fail("bootstrap.B", "must be >= 2")
        kw["bootstrap"] = bs
    cfg = StudyConfig(**kw)
    try:
        cfg.conditions()
    except ConfigurationError as exc:
        raise ConfigError(str(exc), "factors", lines.get(("factors",))) from exc
    return cfg


def loads(text: str) -> StudyConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {exc}", line=mark.line + 1 if mark else None) from exc
    return from_dict(d, _lines(text))


def load(path) -> StudyConfig:
    return loads(Path(path).read_text())


def reference_config_text() -> str:
    return resources.files("simmeta").joinpath("data/reference_study.yaml").read_text()


def reference_config() -> StudyConfig:
    return loads(reference_config_text())
