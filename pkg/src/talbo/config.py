"""Versioned YAML experiment configuration with line-anchored validation errors."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .alignment import InversionConfig
from .benchmark import TASKS, TaskConfig
from .latent_model import LatentModelConfig
from .optimizer import VARIANTS, PretrainConfig, RetrainConfig, RunConfig, SurrogateConfig

SCHEMA_VERSION = 1
DEFAULT_CONFIG = Path(__file__).with_name("configs") / "default.yaml"


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, line and column."""


@dataclass(frozen=True)
class RunSection:
    horizon: int = 600
    batch_size: int = 10
    num_init: int = 100
    num_init_slots: int = 50
    trust_length_init: float = 0.8


@dataclass(frozen=True)
class ExperimentSuite:
    tasks: tuple[TaskConfig, ...]
    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: str = "results"
    parallel: int = 1
    run: RunSection = RunSection()
    latent: LatentModelConfig = LatentModelConfig()
    surrogate: SurrogateConfig = SurrogateConfig()
    pretrain: PretrainConfig = PretrainConfig()
    retrain: RetrainConfig = RetrainConfig()
    inversion: InversionConfig = InversionConfig()
    source: str | None = field(default=None, compare=False)

    def task(self, name: str) -> TaskConfig:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"task {name!r} not in config (have {[t.name for t in self.tasks]})")

    def run_config(self, task: str | TaskConfig, variant: str, seed: int) -> RunConfig:
        tc = self.task(task) if isinstance(task, str) else task
        return RunConfig(
            task=tc,
            variant=variant,
            seed=int(seed),
            horizon=self.run.horizon,
            batch_size=self.run.batch_size,
            num_init=self.run.num_init,
            num_init_slots=self.run.num_init_slots,
            trust_length_init=self.run.trust_length_init,
            latent=self.latent,
            surrogate=self.surrogate,
            pretrain=self.pretrain,
            retrain=self.retrain,
            inversion=self.inversion,
        )


# -- YAML plumbing --------------------------------------------------------


def _marks(node: yaml.Node, path: tuple = (), out: dict | None = None) -> dict:
    """Map each key path to the ``(line, column)`` of its value (1-based)."""
    out = {} if out is None else out
    out[path] = (node.start_mark.line + 1, node.start_mark.column + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (("key", k.value),)] = (k.start_mark.line + 1, k.start_mark.column + 1)
            _marks(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _marks(v, path + (i,), out)
    return out


class _Reader:
    def __init__(self, source: str, marks: dict):
        self.source = source
        self.marks = marks

    def fail(self, path: tuple, message: str, key: bool = False) -> None:
        probe = path[:-1] + (("key", path[-1]),) if key and path else path
        while probe not in self.marks and probe:
            probe = probe[:-1]
        line, col = self.marks.get(probe, (1, 1))
        where = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{self.source}:{line}:{col}: {where}: {message}")

    def scalar(self, value: Any, expected: type, path: tuple):
        if expected is bool:
            if not isinstance(value, bool):
                self.fail(path, f"expected a boolean, got {value!r}")
            return value
        if expected is int:
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(path, f"expected an integer, got {value!r}")
            return value
        if expected is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(path, f"expected a number, got {value!r}")
            return float(value)
        if expected is str:
            if not isinstance(value, str):
                self.fail(path, f"expected a string, got {value!r}")
            return value
        raise TypeError(expected)

    def section(self, cls, data: Any, path: tuple, base=None):
        """Build dataclass ``cls`` from a mapping, overriding ``base`` (or defaults)."""
        if data is None:
            return base if base is not None else cls()
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        proto = base if base is not None else cls()
        known = {f.name: f for f in fields(cls)}
        updates = {}
        for key, value in data.items():
            if key not in known:
                self.fail(path + (key,), f"unknown key (allowed: {', '.join(sorted(known))})", key=True)
            default = getattr(proto, key)
            updates[key] = self.scalar(value, type(default), path + (key,))
        try:
            return replace(proto, **updates)
        except (ValueError, TypeError) as exc:
            self.fail(path, str(exc))


def _task(reader: _Reader, data: Any, path: tuple) -> TaskConfig:
    if isinstance(data, str):
        data = {"name": data}
    if not isinstance(data, dict) or "name" not in data:
        reader.fail(path, "a task needs a name")
    name = reader.scalar(data["name"], str, path + ("name",))
    base = TASKS.get(name, TaskConfig(name=name))
    return reader.section(TaskConfig, data, path, base)


TOP_LEVEL = {"schema_version", "tasks", "variants", "seeds", "output", "run", "latent", "surrogate", "pretrain", "retrain", "inversion"}


def parse_suite(text: str, source: str = "<string>") -> ExperimentSuite:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{mark.line + 1}:{mark.column + 1}" if mark is not None else "1:1"
        raise ConfigError(f"{source}:{loc}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    reader = _Reader(source, _marks(node) if node is not None else {})
    if not isinstance(data, dict):
        reader.fail((), "top level must be a mapping")
    for key in data:
        if key not in TOP_LEVEL:
            reader.fail((key,), f"unknown key (allowed: {', '.join(sorted(TOP_LEVEL))})", key=True)
    if "schema_version" not in data:
        reader.fail((), "missing schema_version")
    if data["schema_version"] != SCHEMA_VERSION:
        reader.fail(("schema_version",), f"unsupported schema version {data['schema_version']!r} (expected {SCHEMA_VERSION})")

    def listing(key: str) -> list:
        value = data.get(key)
        if not isinstance(value, list) or not value:
            reader.fail((key,), "expected a non-empty list")
        return value

    tasks = tuple(_task(reader, t, ("tasks", i)) for i, t in enumerate(listing("tasks")))
    variants = tuple(reader.scalar(v, str, ("variants", i)) for i, v in enumerate(listing("variants")))
    for i, v in enumerate(variants):
        if v not in VARIANTS:
            reader.fail(("variants", i), f"unknown variant {v!r} (allowed: {', '.join(sorted(VARIANTS))})")
    seeds = tuple(reader.scalar(s, int, ("seeds", i)) for i, s in enumerate(listing("seeds")))

    output = data.get("output") or {}
    if not isinstance(output, dict):
        reader.fail(("output",), "expected a mapping")
    for key in output:
        if key not in ("root", "parallel"):
            reader.fail(("output", key), "unknown key (allowed: parallel, root)", key=True)
    root = reader.scalar(output.get("root", "results"), str, ("output", "root"))
    parallel = reader.scalar(output.get("parallel", 1), int, ("output", "parallel"))
    if parallel < 1:
        reader.fail(("output", "parallel"), "must be >= 1")

    run = reader.section(RunSection, data.get("run"), ("run",))
    try:
        RunConfig(horizon=run.horizon, batch_size=run.batch_size, num_init=run.num_init, num_init_slots=run.num_init_slots)
    except ValueError as exc:
        reader.fail(("run",), str(exc))
    return ExperimentSuite(
        tasks=tasks,
        variants=variants,
        seeds=seeds,
        output_dir=root,
        parallel=parallel,
        run=run,
        latent=reader.section(LatentModelConfig, data.get("latent"), ("latent",)),
        surrogate=reader.section(SurrogateConfig, data.get("surrogate"), ("surrogate",)),
        pretrain=reader.section(PretrainConfig, data.get("pretrain"), ("pretrain",)),
        retrain=reader.section(RetrainConfig, data.get("retrain"), ("retrain",)),
        inversion=reader.section(InversionConfig, data.get("inversion"), ("inversion",)),
        source=source,
    )


def load_suite(path: str | Path) -> ExperimentSuite:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_suite(text, str(path))


def suite_to_dict(suite: ExperimentSuite) -> dict:
    """Plain mapping that ``parse_suite`` accepts back."""

    def plain(obj):
        return {k: v for k, v in dataclasses.asdict(obj).items()}

    return {
        "schema_version": SCHEMA_VERSION,
        "tasks": [plain(t) for t in suite.tasks],
        "variants": list(suite.variants),
        "seeds": list(suite.seeds),
        "output": {"root": suite.output_dir, "parallel": suite.parallel},
        "run": plain(suite.run),
        "latent": plain(suite.latent),
        "surrogate": plain(suite.surrogate),
        "pretrain": plain(suite.pretrain),
        "retrain": plain(suite.retrain),
        "inversion": plain(suite.inversion),
    }
