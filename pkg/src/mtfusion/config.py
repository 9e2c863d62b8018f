"""Pipeline configuration: a YAML document validated strictly before any work starts."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .balancing import DEFAULT_CENTER, BINS
from .data import TASKS, FeatureGroupSpec, default_columns
from .errors import ConfigError, SchemaError
from .gbdt import TUNED_PARAMS, GbdtParams
from .windowing import DEFAULT_TERMS, OPTIONAL_TERM, WindowConfig

BACKBONE_DIMS = {"resnet50": 200, "efficientnet": 300}
PCA_SOLVERS = ("jacobi", "lapack")


@dataclass(frozen=True)
class WindowSection:
    short: float = DEFAULT_TERMS["short"]
    middle: float = DEFAULT_TERMS["middle"]
    long: float = DEFAULT_TERMS["long"]
    optional_mid: float = OPTIONAL_TERM[1]
    stride: float = 0.2


@dataclass(frozen=True)
class BalanceSection:
    enabled: bool = False
    seed: int = 0
    center_regions: tuple[int, ...] = tuple(sorted(DEFAULT_CENTER))


@dataclass(frozen=True)
class SelectionSection:
    enabled: bool = False
    fraction: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    corpus: str
    output: str
    tasks: tuple[str, ...] = TASKS
    backbone: str = "resnet50"
    pca_dims: int | None = None          # overrides the backbone default when set
    pca_solver: str = "jacobi"
    use_3s_term: bool = False
    window: WindowSection = field(default_factory=WindowSection)
    balance: BalanceSection = field(default_factory=BalanceSection)
    feature_selection: SelectionSection = field(default_factory=SelectionSection)
    learner: GbdtParams = field(default_factory=GbdtParams)
    combiner: GbdtParams = field(default_factory=GbdtParams)
    grid: dict = field(default_factory=lambda: {
        "num_leaves": [15, 31, 63], "learning_rate": [0.05, 0.1],
        "max_depth": [-1, 6], "min_child_samples": [10, 20]})
    folds: int = 5
    seed: int = 0
    fps: float | None = None             # None: taken from the corpus manifest
    schema: tuple[FeatureGroupSpec, ...] | None = None
    source: str | None = field(default=None, compare=False)

    @property
    def deep_dims(self) -> int:
        return self.pca_dims if self.pca_dims is not None else BACKBONE_DIMS[self.backbone]

    def window_config(self, fps: float) -> WindowConfig:
        terms = {"short": self.window.short, "middle": self.window.middle,
                 "long": self.window.long}
        if self.use_3s_term:
            terms[OPTIONAL_TERM[0]] = self.window.optional_mid
        return WindowConfig(terms, self.window.stride, fps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d["tasks"] = list(self.tasks)
        d["balance"]["center_regions"] = list(self.balance.center_regions)
        if self.schema is not None:
            d["schema"] = [{"name": g.name, "dim": g.dim, "source": g.source,
                            "columns": list(g.columns)} for g in self.schema]
        return d

    def digest(self) -> str:
        """sha256 of the canonical JSON form (paths included)."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        """Paths in a config file are relative to the file's directory."""
        p = Path(path)
        if p.is_absolute() or self.source is None:
            return p
        return Path(self.source).parent / p


def _check_keys(section: str, given: dict, allowed) -> None:
    for key in given:
        if key not in allowed:
            where = f" in {section!r}" if section else ""
            raise ConfigError(f"unknown config key {key!r}{where}")


def _section(cls, name: str, raw) -> object:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name!r} must be a mapping")
    _check_keys(name, raw, {f.name for f in fields(cls)})
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _number(name, value, kind=float, positive=True):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if kind is int and value != int(value):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return kind(value)


def _flag(name, value) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{name} must be true or false, got {value!r}")
    return value


def _schema(raw) -> tuple[FeatureGroupSpec, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("schema must be a non-empty list of groups")
    out = []
    for i, g in enumerate(raw):
        if not isinstance(g, dict):
            raise ConfigError(f"schema[{i}] must be a mapping")
        _check_keys(f"schema[{i}]", g, {"name", "dim", "source", "columns"})
        if "name" not in g or "dim" not in g:
            raise ConfigError(f"schema[{i}] needs 'name' and 'dim'")
        try:
            dim = _number(f"schema[{i}].dim", g["dim"], int)
            cols = tuple(g.get("columns") or default_columns(g["name"], dim))
            kw = {"source": g["source"]} if "source" in g else {}
            out.append(FeatureGroupSpec(g["name"], dim, cols, **kw))
        except (SchemaError, ValueError) as exc:
            raise ConfigError(f"schema[{i}]: {exc}") from None
    names = [g.name for g in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate group names in schema: {names}")
    return tuple(out)


def _grid(raw) -> dict:
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("grid must be a non-empty mapping of parameter -> list of values")
    _check_keys("grid", raw, TUNED_PARAMS)
    grid = {}
    for k in TUNED_PARAMS:
        if k not in raw:
            continue
        vals = raw[k]
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid.{k} must be a non-empty list")
        grid[k] = vals
    return grid


def from_dict(raw: dict, source: str | None = None) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    allowed = {f.name for f in fields(PipelineConfig)} - {"source"}
    _check_keys("", raw, allowed)
    for key in ("corpus", "output"):
        if key not in raw or raw[key] in (None, ""):
            raise ConfigError(f"missing required config key {key!r}")
    kw: dict = {"corpus": str(raw["corpus"]), "output": str(raw["output"]), "source": source}

    if "tasks" in raw:
        tasks = raw["tasks"]
        if not isinstance(tasks, list) or not tasks:
            raise ConfigError("tasks must be a non-empty list")
        for t in tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; expected one of {TASKS}")
        # canonical order
        kw["tasks"] = tuple(t for t in TASKS if t in tasks)
    if "backbone" in raw:
        if raw["backbone"] not in BACKBONE_DIMS:
            raise ConfigError(f"backbone must be one of {sorted(BACKBONE_DIMS)}")
        kw["backbone"] = raw["backbone"]
    if raw.get("pca_dims") is not None:
        kw["pca_dims"] = _number("pca_dims", raw["pca_dims"], int)
    if "pca_solver" in raw:
        if raw["pca_solver"] not in PCA_SOLVERS:
            raise ConfigError(f"pca_solver must be one of {PCA_SOLVERS}")
        kw["pca_solver"] = raw["pca_solver"]
    if "use_3s_term" in raw:
        kw["use_3s_term"] = _flag("use_3s_term", raw["use_3s_term"])

    window = _section(WindowSection, "window", raw.get("window"))
    for f in fields(WindowSection):
        _number(f"window.{f.name}", getattr(window, f.name))
    kw["window"] = window

    bal = _section(BalanceSection, "balance", raw.get("balance"))
    _flag("balance.enabled", bal.enabled)
    _number("balance.seed", bal.seed, int, positive=False)
    regions = tuple(sorted(int(_number("balance.center_regions", r, int, positive=False))
                           for r in bal.center_regions))
    bad = [r for r in regions if not 0 <= r < BINS * BINS]
    if bad:
        raise ConfigError(f"balance.center_regions out of range 0..{BINS * BINS - 1}: {bad}")
    kw["balance"] = BalanceSection(bal.enabled, int(bal.seed), regions)

    sel = _section(SelectionSection, "feature_selection", raw.get("feature_selection"))
    _flag("feature_selection.enabled", sel.enabled)
    frac = _number("feature_selection.fraction", sel.fraction)
    if frac > 1:
        raise ConfigError("feature_selection.fraction must lie in (0, 1]")
    kw["feature_selection"] = SelectionSection(sel.enabled, frac)

    kw["learner"] = _section(GbdtParams, "learner", raw.get("learner"))
    kw["combiner"] = _section(GbdtParams, "combiner", raw.get("combiner"))
    if "grid" in raw:
        kw["grid"] = _grid(raw["grid"])
    if "folds" in raw:
        kw["folds"] = _number("folds", raw["folds"], int)
        if kw["folds"] < 2:
            raise ConfigError("folds must be >= 2")
    if "seed" in raw:
        kw["seed"] = _number("seed", raw["seed"], int, positive=False)
    if raw.get("fps") is not None:
        kw["fps"] = _number("fps", raw["fps"])
    if raw.get("schema") is not None:
        kw["schema"] = _schema(raw["schema"])
    return PipelineConfig(**kw)


def parse_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return from_dict(raw or {}, str(path))


def describe(cfg: PipelineConfig) -> str:
    """Every effective setting, one ``key=value`` per line, for the run log."""
    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                yield from walk(f"{prefix}.{k}" if prefix else str(k), v)
        else:
            yield f"{prefix}={json.dumps(obj)}"
    return "\n".join(walk("", cfg.to_dict()))
