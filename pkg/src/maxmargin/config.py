"""Experiment configuration: strict YAML parsing with key-path errors.

Unknown keys are rejected outright, so a typo in an eps grid or a method
name fails the run instead of silently changing the experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import yaml

from .attacks import Norm, PgdConfig
from .data import Dataset, gen_blobs, load_mnist_idx, standardize
from .errors import ConfigError
from .evaluation import AttackSpec, EvalSuite
from .losses import LossKind
from .rng import derive_seed
from .training import Method, OptimSpec, TrainConfig


class _Section:
    """One mapping level of the config; tracks consumed keys and its path."""

    def __init__(self, raw: Any, path: str):
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("expected a mapping", path or "<root>")
        self.raw = dict(raw)
        self.path = path

    def _sub(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind=None, default=None, required: bool = False):
        if key not in self.raw:
            if required:
                raise ConfigError("missing required key", self._sub(key))
            return default
        val = self.raw.pop(key)
        if val is None:
            return default
        if kind is not None:
            if kind is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if kind in (int, float) and isinstance(val, bool):
                raise ConfigError(f"expected {kind.__name__}", self._sub(key))
            if not isinstance(val, kind):
                name = kind.__name__ if isinstance(kind, type) else str(kind)
                raise ConfigError(f"expected {name}, got {type(val).__name__}", self._sub(key))
        return val

    def section(self, key: str) -> "_Section":
        return _Section(self.take(key, dict, default={}), self._sub(key))

    def finish(self):
        if self.raw:
            raise ConfigError("unknown key", self._sub(sorted(self.raw)[0]))


def _enum(section: _Section, key: str, enum_cls, default=None, required=False):
    raw = section.take(key, str, default=None, required=required)
    if raw is None:
        return default
    try:
        return enum_cls(raw.lower())
    except ValueError:
        valid = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"must be one of: {valid}", section._sub(key)) from None


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n: int = 400
    centers: tuple = ((-2.0, 0.0), (2.0, 0.0))
    sigma: float = 0.25
    images: str | None = None
    labels: str | None = None
    take: int | None = None
    standardize: bool = False

    def load(self, seed: int, data_dir=None) -> Dataset:
        if self.kind == "blobs":
            ds = gen_blobs(self.n, self.centers, self.sigma, seed)
            return standardize(ds) if self.standardize else ds
        if self.kind == "mnist_idx":
            if not self.images or not self.labels:
                raise ConfigError("mnist_idx needs images and labels paths", "dataset")
            images, labels = self.images, self.labels
            if data_dir is not None:
                from pathlib import Path

                images = str(Path(data_dir) / images)
                labels = str(Path(data_dir) / labels)
            return load_mnist_idx(images, labels, take=self.take)
        raise ConfigError(f"unknown dataset kind {self.kind!r}", "dataset.kind")


@dataclass(frozen=True)
class ModelEntry:
    name: str
    train: TrainConfig


@dataclass(frozen=True)
class EvalSpec:
    eps_grid: tuple[float, ...]
    suite: EvalSuite
    restarts: int


@dataclass(frozen=True)
class TheorySpec:
    instances: int = 20
    grid_n: int = 256
    logit_samples: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: DatasetSpec
    hidden: tuple[int, ...]
    models: tuple[ModelEntry, ...]
    evaluation: EvalSpec
    theory: TheorySpec = TheorySpec()
    output_dir: str | None = None
    jobs: int = 1
    data_dir: str | None = None


def _parse_dataset(sec: _Section) -> DatasetSpec:
    kind = sec.take("kind", str, default="blobs")
    if kind not in ("blobs", "mnist_idx"):
        raise ConfigError("must be 'blobs' or 'mnist_idx'", sec._sub("kind"))
    centers = sec.take("centers", list, default=[[-2.0, 0.0], [2.0, 0.0]])
    spec = DatasetSpec(
        kind=kind,
        n=sec.take("n", int, default=400),
        centers=tuple(tuple(float(v) for v in c) for c in centers),
        sigma=sec.take("sigma", float, default=0.25),
        images=sec.take("images", str),
        labels=sec.take("labels", str),
        take=sec.take("take", int),
        standardize=bool(sec.take("standardize", bool, default=False)),
    )
    if spec.take is not None and spec.take < 1:
        raise ConfigError("take must be >= 1", sec._sub("take"))
    sec.finish()
    return spec


def _parse_optimizer(sec: _Section) -> OptimSpec:
    kind = sec.take("kind", str, default="adam")
    if kind not in ("sgd", "adam"):
        raise ConfigError("must be 'sgd' or 'adam'", sec._sub("kind"))
    milestones = sec.take("lr_milestones", list, default=[])
    spec = OptimSpec(
        kind=kind,
        lr=sec.take("lr", float, default=1e-3),
        momentum=sec.take("momentum", float, default=0.9),
        beta1=sec.take("beta1", float, default=0.9),
        beta2=sec.take("beta2", float, default=0.999),
        eps_hat=sec.take("eps_hat", float, default=1e-8),
        lr_milestones=tuple(float(m) for m in milestones),
        lr_factor=sec.take("lr_factor", float, default=0.1),
    )
    sec.finish()
    return spec


def _parse_attack(sec: _Section) -> PgdConfig:
    cfg = PgdConfig(
        steps=sec.take("steps", int, default=10),
        step_size=sec.take("step_size", float),
        loss=_enum(sec, "loss", LossKind, default=LossKind.SLM),
        rand_init=bool(sec.take("rand_init", bool, default=True)),
        restarts=sec.take("restarts", int, default=1),
    )
    sec.finish()
    return cfg


_TRAIN_KEYS = ("norm", "eps", "d_max", "eps_min", "eps_max", "epochs",
               "batch_size", "ramp_epochs", "val_fraction", "bisect_iters")


def _parse_train(defaults: dict, sec: _Section, *, seed: int, hidden, path: str) -> TrainConfig:
    """Merge shared training defaults with one model entry."""
    method = _enum(sec, "method", Method, required=True)
    merged = dict(defaults)
    for key in _TRAIN_KEYS:
        if key in sec.raw:
            merged[key] = sec.take(key)
    if "optimizer" in sec.raw:
        merged["optimizer"] = _parse_optimizer(sec.section("optimizer"))
    if "attack" in sec.raw:
        merged["attack"] = _parse_attack(sec.section("attack"))
    norm = merged.pop("norm", Norm.L2)
    if isinstance(norm, str):
        try:
            norm = Norm(norm.lower())
        except ValueError:
            raise ConfigError("must be 'linf' or 'l2'", f"{path}.norm") from None
    try:
        cfg = TrainConfig(method=method, hidden=tuple(hidden), norm=norm,
                          seed=seed, **{k: v for k, v in merged.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None
    sec.finish()
    return cfg


def _parse_evaluation(sec: _Section) -> EvalSpec:
    eps_grid = sec.take("eps_grid", list, required=True)
    try:
        grid = tuple(float(v) for v in eps_grid)
    except (TypeError, ValueError):
        raise ConfigError("eps_grid entries must be numbers", sec._sub("eps_grid")) from None
    if len(grid) < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("eps_grid must be non-empty and strictly increasing",
                          sec._sub("eps_grid"))
    restarts = sec.take("restarts", int, default=4)
    steps = sec.take("steps", int, default=100)
    step_scale = sec.take("step_scale", float)
    suite_raw = sec.take("suite", list)
    if suite_raw is not None:
        specs = []
        for i, entry in enumerate(suite_raw):
            esec = _Section(entry, f"{sec._sub('suite')}[{i}]")
            specs.append(AttackSpec(
                loss=_enum(esec, "loss", LossKind, required=True),
                steps=esec.take("steps", int, default=steps),
                restarts=esec.take("restarts", int, default=1),
                step_scale=esec.take("step_scale", float, default=step_scale),
            ))
            esec.finish()
        suite = EvalSuite(tuple(specs))
        restarts = suite.total_restarts
    else:
        if restarts % 2 != 0 or restarts < 2:
            raise ConfigError("restarts must be even and >= 2", sec._sub("restarts"))
        loss_names = sec.take("losses", list, default=["ce", "cw"])
        kinds = []
        for nm in loss_names:
            try:
                kinds.append(LossKind(str(nm).lower()))
            except ValueError:
                raise ConfigError(f"unknown loss {nm!r}", sec._sub("losses")) from None
        per = restarts // len(kinds)
        if per * len(kinds) != restarts:
            raise ConfigError("restarts must divide evenly across losses",
                              sec._sub("restarts"))
        suite = EvalSuite(tuple(
            AttackSpec(k, steps=steps, restarts=per, step_scale=step_scale)
            for k in kinds
        ))
    sec.finish()
    return EvalSpec(eps_grid=grid, suite=suite, restarts=restarts)


def _parse_theory(sec: _Section) -> TheorySpec:
    spec = TheorySpec(
        instances=sec.take("instances", int, default=20),
        grid_n=sec.take("grid_n", int, default=256),
        logit_samples=sec.take("logit_samples", int, default=1000),
    )
    sec.finish()
    return spec


def parse_config(text: str) -> ExperimentConfig:
    """Validate a YAML document into an ExperimentConfig; the first problem
    raises ConfigError carrying the offending key path."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from None
    root = _Section(raw, "")
    seed = root.take("seed", int, default=0)
    output_dir = root.take("output_dir", str)
    jobs = root.take("jobs", int, default=1)
    dataset = _parse_dataset(root.section("dataset"))
    arch = root.section("architecture")
    hidden = tuple(int(v) for v in arch.take("hidden", list, default=[32, 32]))
    arch.finish()

    train_sec = root.section("training")
    defaults: dict = {}
    for key in _TRAIN_KEYS:
        if key in train_sec.raw:
            defaults[key] = train_sec.take(key)
    if "optimizer" in train_sec.raw:
        defaults["optimizer"] = _parse_optimizer(train_sec.section("optimizer"))
    if "attack" in train_sec.raw:
        defaults["attack"] = _parse_attack(train_sec.section("attack"))
    train_sec.finish()

    models_raw = root.take("models", list, required=True)
    entries = []
    seen = set()
    for i, entry in enumerate(models_raw):
        msec = _Section(entry, f"models[{i}]")
        name = msec.take("name", str, default=f"model{i}")
        if name in seen:
            raise ConfigError(f"duplicate model name {name!r}", f"models[{i}].name")
        seen.add(name)
        model_seed = msec.take("seed", int, default=derive_seed(seed, "model", name))
        entries.append(ModelEntry(
            name=name,
            train=_parse_train(defaults, msec, seed=model_seed, hidden=hidden,
                               path=f"models[{i}]"),
        ))
    if not entries:
        raise ConfigError("need at least one model", "models")

    evaluation = _parse_evaluation(root.section("evaluation"))
    theory = _parse_theory(root.section("theory"))
    root.finish()
    return ExperimentConfig(
        seed=seed, dataset=dataset, hidden=hidden, models=tuple(entries),
        evaluation=evaluation, theory=theory, output_dir=output_dir, jobs=jobs,
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
