"""Experiment configuration: sectioned ``key = value`` text with ``#`` comments.

Example::

    [backend]
    kind = toy            # toy | real
    seed = 42

    [guidance]
    scale = 7.5
    lambda_t = 0.3
    routing = pose        # pose | all | none | <table entry> | 0,1,2,12

    [routing]
    sdxl = 0,1,2,12       # extra/overriding routing-table entries

String values may be written bare or as JSON strings (``"a # b"``).
Precedence: ``--set`` overrides > config file > dataclass defaults.
"""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .guidance import GuidanceConfig
from .routing import builtin_routing_table, default_pose_mask
from .wcm import WcmConfig


class ConfigError(ValueError):
    def __init__(self, message, line: Optional[int] = None, source: Optional[str] = None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class BackendSection:
    kind: str = "toy"
    seed: int = 42
    latent_shape: tuple = (4, 32, 32)
    widths: tuple = (8, 16, 16, 32)
    emb_dim: int = 16
    condition_scale: int = 8
    routing_id: str = "toy-13site"


@dataclass
class RealSection:
    model_id: str = ""
    controlnet_id: str = ""
    device: str = "cpu"
    dtype: str = "float32"
    height: int = 512
    width: int = 512


@dataclass
class GuidanceSection:
    scale: float = 7.5
    lambda_t: float = 0.3
    use_negative_control: bool = False
    routing: str = "pose"


@dataclass
class WcmSection:
    enabled: bool = False
    canny_low: float = 50.0
    canny_high: float = 150.0
    dilation_radius: int = 2
    w_floor: float = 0.5


@dataclass
class RunSection:
    seed: int = 1
    steps: int = 20
    batch: int = 1
    out: str = "runs"


@dataclass
class InputsSection:
    depth: str = ""
    prompt: str = ""
    negative_prompt: str = ""
    depth_sha256: str = ""


SECTIONS = {
    "backend": BackendSection,
    "real": RealSection,
    "guidance": GuidanceSection,
    "wcm": WcmSection,
    "run": RunSection,
    "inputs": InputsSection,
}


@dataclass
class ExperimentConfig:
    backend: BackendSection = field(default_factory=BackendSection)
    real: RealSection = field(default_factory=RealSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    wcm: WcmSection = field(default_factory=WcmSection)
    run: RunSection = field(default_factory=RunSection)
    inputs: InputsSection = field(default_factory=InputsSection)
    routing: dict = field(default_factory=dict)

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


# -- value coercion ---------------------------------------------------------

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def coerce(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return _parse_int_list(text)
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    return str(value)


def _split_value(raw: str) -> str:
    raw = raw.strip()
    if raw.startswith('"'):
        decoder = json.JSONDecoder()
        value, end = decoder.raw_decode(raw)
        rest = raw[end:].strip()
        if rest and not rest.startswith("#"):
            raise ValueError(f"unexpected text after quoted value: {rest!r}")
        return value
    if "#" in raw:
        raw = raw.split("#", 1)[0]
    return raw.strip()


# -- parsing ----------------------------------------------------------------

def set_value(cfg: ExperimentConfig, path: str, text: str, line=None, source=None) -> None:
    """Assign ``section.key`` from its textual form."""
    if "." not in path:
        raise ConfigError(f"setting {path!r} must be written as section.key", line, source)
    section, key = path.split(".", 1)
    if section == "routing":
        try:
            cfg.routing[key] = _parse_int_list(text)
        except ValueError as exc:
            raise ConfigError(f"routing.{key}: {exc}", line, source) from None
        return
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r}; known: {sorted(SECTIONS) + ['routing']}", line, source)
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {path!r}; known keys in [{section}]: {sorted(names)}", line, source)
    try:
        setattr(obj, key, coerce(getattr(obj, key), text))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}", line, source) from None


def parse_config(text: str, base: Optional[ExperimentConfig] = None, source: str = "<config>") -> ExperimentConfig:
    cfg = base.copy() if base is not None else ExperimentConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", lineno, source)
            section = stripped[1:-1].strip()
            if section not in SECTIONS and section != "routing":
                raise ConfigError(f"unknown section [{section}]", lineno, source)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno, source)
        if section is None:
            raise ConfigError("setting outside of any [section]", lineno, source)
        key, raw = stripped.split("=", 1)
        try:
            value = _split_value(raw)
        except ValueError as exc:
            raise ConfigError(str(exc), lineno, source) from None
        set_value(cfg, f"{section}.{key.strip()}", value, lineno, source)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", source=str(p)) from None
        cfg = parse_config(text, cfg, source=str(p))
    apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects path=value, got {item!r}")
        path, value = item.split("=", 1)
        set_value(cfg, path.strip(), _split_value(value) if value.strip().startswith('"') else value.strip(),
                  source="--set")
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        for f in fields(getattr(cfg, name)):
            out.append(f"{f.name} = {format_value(getattr(getattr(cfg, name), f.name))}")
        out.append("")
    out.append("[routing]")
    for k in sorted(cfg.routing):
        out.append(f"{k} = {format_value(tuple(cfg.routing[k]))}")
    return "\n".join(out) + "\n"


def run_id(cfg: ExperimentConfig, extra: str = "") -> str:
    """Hash of the resolved config (output directory excluded) plus ``extra``."""
    c = cfg.copy()
    c.run.out = ""
    return hashlib.sha256((dump_config(c) + extra).encode()).hexdigest()[:12]


# -- validation and resolution ----------------------------------------------

def routing_table(cfg: ExperimentConfig) -> dict:
    table = builtin_routing_table()
    table.update({k: frozenset(v) for k, v in cfg.routing.items()})
    return table


def resolve_mask(cfg: ExperimentConfig, site_count: int) -> frozenset:
    name = cfg.guidance.routing.strip()
    if name == "pose":
        return default_pose_mask(cfg.backend.routing_id, cfg.routing)
    if name == "all":
        return frozenset(range(site_count))
    if name in ("none", ""):
        return frozenset()
    table = routing_table(cfg)
    if name in table:
        return frozenset(table[name])
    try:
        return frozenset(_parse_int_list(name))
    except ValueError:
        raise ConfigError(f"guidance.routing: unknown routing {name!r}; known: pose, all, none, "
                          f"{', '.join(sorted(table))} or explicit site indices") from None


def validate(cfg: ExperimentConfig) -> None:
    for key in ("seed", "steps", "batch"):
        if getattr(cfg.run, key) < 1:
            raise ConfigError(f"run.{key} must be a positive integer")
    if cfg.backend.kind not in ("toy", "real"):
        raise ConfigError(f"backend.kind must be 'toy' or 'real', got {cfg.backend.kind!r}")
    g = cfg.guidance
    if not g.scale > 0:
        raise ConfigError("guidance.scale must be > 0")
    if not 0.0 <= g.lambda_t <= 1.0:
        raise ConfigError("guidance.lambda_t must lie in [0, 1]")
    if g.routing == "pose" and cfg.backend.routing_id not in routing_table(cfg):
        raise ConfigError(f"backend.routing_id {cfg.backend.routing_id!r} has no routing-table entry")
    if g.routing.strip() not in ("all", "pose"):
        resolve_mask(cfg, 0)
    w = cfg.wcm
    if w.enabled:
        try:
            wcm_config(cfg)
        except ValueError as exc:
            raise ConfigError(f"wcm: {exc}") from None


def wcm_config(cfg: ExperimentConfig) -> Optional[WcmConfig]:
    w = cfg.wcm
    if not w.enabled:
        return None
    return WcmConfig(w.canny_low, w.canny_high, w.dilation_radius, w.w_floor)


def guidance_config(cfg: ExperimentConfig, site_count: int) -> GuidanceConfig:
    return GuidanceConfig(
        scale_s=cfg.guidance.scale,
        lambda_t=cfg.guidance.lambda_t,
        use_negative_control=cfg.guidance.use_negative_control,
        routing_mask=resolve_mask(cfg, site_count),
        wcm=wcm_config(cfg),
    )


# -- sweeps -----------------------------------------------------------------

def parse_values(text: str) -> list:
    """``a,b,c`` or inclusive ``start:stop:step``."""
    text = text.strip()
    if ":" in text and not text.startswith('"'):
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ConfigError("range step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [repr(round(start + k * step, 12)) for k in range(max(n, 0))]
    return [v.strip() for v in text.split(",")]


@dataclass(frozen=True)
class SweepSpec:
    axes: tuple = ()

    @classmethod
    def parse(cls, items) -> "SweepSpec":
        axes = []
        for item in items:
            if "=" not in item:
                raise ConfigError(f"--sweep expects path=values, got {item!r}")
            path, values = item.split("=", 1)
            axes.append((path.strip(), tuple(parse_values(values))))
        return cls(tuple(axes))

    def cells(self):
        """Yield (cell_name, [(path, value), ...]) over the cartesian grid."""
        if not self.axes:
            yield "base", []
            return
        paths = [p for p, _ in self.axes]
        for combo in itertools.product(*(v for _, v in self.axes)):
            assign = list(zip(paths, combo))
            yield "_".join(f"{p}={v}" for p, v in assign), assign

    def check(self, cfg: ExperimentConfig) -> None:
        for _, assign in self.cells():
            c = cfg.copy()
            for path, value in assign:
                set_value(c, path, value, source="--sweep")
            validate(c)

    def describe(self) -> str:
        return ";".join(f"{p}={','.join(v)}" for p, v in self.axes)
