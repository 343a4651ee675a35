"""YAML run configuration with ``model``, ``train`` and ``task`` sections.

Unknown sections or keys are rejected. Absent keys take the dataclass
defaults, except that the task's ``H_v``, ``vocab`` and ``num_questions``
follow the model section when not given explicitly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .data import SyntheticTaskSpec
from .errors import ConfigError
from .former import MiniFormerConfig
from .trainer import TrainConfig

SECTIONS = {"model": MiniFormerConfig, "train": TrainConfig, "task": SyntheticTaskSpec}
_SHARED = ("H_v", "vocab", "num_questions")


@dataclass(frozen=True)
class RunConfig:
    model: MiniFormerConfig = field(default_factory=MiniFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "task": self.task.to_dict()}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def override(self, **train_overrides) -> "RunConfig":
        """Replace train fields, skipping ``None`` values.

        ``few_shot`` goes to the task. ``seed`` also reseeds the task's teacher
        and draws, so one seed names one (task, adapter init) pair; the
        backbone keeps its own ``backbone_seed``.
        """
        few = train_overrides.pop("few_shot", None)
        kw = {k: v for k, v in train_overrides.items() if v is not None}
        task_kw = {}
        if few is not None:
            task_kw["few_shot"] = few
        if "seed" in kw:
            task_kw["teacher_seed"] = kw["seed"]
        try:
            tr = replace(self.train, **kw)
            task = replace(self.task, **task_kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return RunConfig(model=self.model, train=tr, task=task)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def from_dict(doc: dict | None) -> RunConfig:
    """Validate a parsed mapping into a :class:`RunConfig`."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a mapping with model/train/task sections")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    model = _build(MiniFormerConfig, doc.get("model") or {}, "model")
    train = _build(TrainConfig, doc.get("train") or {}, "train")
    task_vals = dict(doc.get("task") or {})
    for key in _SHARED:
        task_vals.setdefault(key, getattr(model, key))
    task = _build(SyntheticTaskSpec, task_vals, "task")
    return RunConfig(model=model, train=train, task=task)


def packaged(name: str) -> Path:
    """Path of a config shipped with the package (``toy`` or ``reference``)."""
    return Path(__file__).parent / "data" / f"{name}.yaml"


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a YAML run config; ``None`` gives the packaged toy config."""
    if path is None:
        path = packaged("toy")
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return from_dict(doc)
