"""TOML run configuration.

Sections and keys (all optional; defaults in parentheses):

[run]         seed (0), scenes (50), workers (1), output_dir ("meshpose-out"),
              outlier_sweep (empty list; one report per listed outlier_rate)
[prototypes]  vertices (1058), feature_dim (64), seed (0)
[sim]         categories, instances, same_category, depth_range, scale_range,
              deformation_range, kappa, literal_kappa, outlier_rate,
              heatmap_sigma, occlusion, max_overlap, distractors, stride
[solver]      pixel_threshold, max_iterations, min_inliers, max_instances,
              confidence, lo_iterations, batch_size, duplicate_extent
[refinement]  pixel_threshold, max_iterations, rtol, huber
[pipeline]    t1, t2, refine, inliers_from_detection
[metrics]     niou, iou, degrees, normalized, meters (threshold lists)
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .metrics import MetricThresholds
from .refine import RefinementParams
from .sim import SimConfig
from .solver.ransac import SolverParams


@dataclass(frozen=True)
class PrototypeSpec:
    vertices: int = 1058
    feature_dim: int = 64
    seed: int = 0


@dataclass(frozen=True)
class PipelineSection:
    t1: float = 0.5
    t2: float = 0.7
    refine: bool = True
    inliers_from_detection: bool = True


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    scenes: int = 50
    workers: int = 1
    output_dir: str = "meshpose-out"
    outlier_sweep: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    prototypes: PrototypeSpec = field(default_factory=PrototypeSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    solver: SolverParams = field(default_factory=SolverParams)
    refinement: RefinementParams = field(default_factory=RefinementParams)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    metrics: MetricThresholds = field(default_factory=MetricThresholds)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else dataclasses.asdict(v)
        return _jsonable(out)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, run=dataclasses.replace(self.run, seed=seed), sim=dataclasses.replace(self.sim, seed=seed)
        )

    def with_workers(self, workers: int) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, workers=workers))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


_SECTIONS = {
    "run": RunSection,
    "prototypes": PrototypeSpec,
    "sim": SimConfig,
    "solver": SolverParams,
    "refinement": RefinementParams,
    "pipeline": PipelineSection,
    "metrics": MetricThresholds,
}
_EXCLUDED = {("sim", "seed"), ("sim", "intrinsics"), ("refinement", "t2")}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line declaring `key` inside `[section]` (or the header itself)."""
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line.startswith("[") and line.endswith("]"):
            current = line.strip("[] ")
            if key is None and current == section:
                return n
        elif current == section and key is not None and line.split("=", 1)[0].strip() == key:
            return n
    return None


def _coerce(section: str, name: str, default, value):
    where = f"[{section}] {name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported key")


def _build(section: str, cls, table: dict):
    fields = {f.name: f for f in dataclasses.fields(cls) if (section, f.name) not in _EXCLUDED}
    defaults = cls()
    kwargs = {}
    for key, value in table.items():
        if key not in fields:
            err = ConfigError(f"[{section}] unknown key {key!r}; known keys: {', '.join(sorted(fields))}")
            err.key = key
            raise err
        try:
            kwargs[key] = _coerce(section, key, getattr(defaults, key), value)
        except ConfigError as exc:
            exc.key = key
            raise
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in _SECTIONS.items():
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        try:
            parts[name] = _build(name, cls, table)
        except ConfigError as exc:
            key = getattr(exc, "key", None)
            if key is None:
                # Dataclass validation names the offending field in its message.
                bad = sorted((k for k in table if k in str(exc)), key=len, reverse=True)
                key = bad[0] if bad else None
            line = _line_of(text, name, key)
            raise ConfigError(f"line {line}: {exc}" if line else str(exc)) from exc
    run = parts["run"]
    if run.scenes < 1 or run.workers < 1:
        raise ConfigError("[run] scenes and workers must be positive")
    for r in run.outlier_sweep:
        if not isinstance(r, (int, float)) or not 0 <= r < 1:
            raise ConfigError(f"[run] outlier_sweep values must lie in [0, 1), got {r!r}")
    sim = dataclasses.replace(parts["sim"], seed=run.seed)
    refinement = dataclasses.replace(parts["refinement"], t2=parts["pipeline"].t2)
    return RunConfig(run, parts["prototypes"], sim, parts["solver"], refinement, parts["pipeline"], parts["metrics"])


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
