"""Synthetic caption-like and VQA-like tasks labelled by a frozen teacher."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError

KINDS = ("caption-like", "vqa-like")
FEW_SHOT = (None, 50, 150)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "caption-like"
    teacher_seed: int = 0
    n_train: int = 512
    n_val: int = 256
    Tv: int = 16
    noise_rate: float = 0.0
    few_shot: int | None = None
    H_v: int = 56
    vocab: int = 4
    num_questions: int = 8
    teacher_hidden: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.few_shot not in FEW_SHOT:
            raise ConfigError(f"few_shot must be off, 50 or 150, got {self.few_shot!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1]")
        if self.Tv < 1 or self.H_v < 1 or self.vocab < 2 or self.n_val < 0:
            raise ConfigError("invalid task dimensions")

    @property
    def train_size(self) -> int:
        return self.few_shot if self.few_shot is not None else self.n_train

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    vision: np.ndarray
    labels: np.ndarray
    question_ids: np.ndarray | None = None
    clean_labels: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> "Split":
        q = None if self.question_ids is None else self.question_ids[idx]
        c = None if self.clean_labels is None else self.clean_labels[idx]
        return Split(self.vision[idx], self.labels[idx], q, c)


@dataclass
class Dataset:
    train: Split
    val: Split
    teacher: "Teacher"


class Teacher:
    """One-hidden-layer tanh network over pooled vision tokens (+ question one-hot).

    Output biases are calibrated so that labels come out close to uniform.
    """

    def __init__(self, spec: SyntheticTaskSpec):
        rng = np.random.default_rng([spec.teacher_seed, 0xC0FFEE])
        self.spec = spec
        d_in = spec.H_v + (spec.num_questions if spec.kind == "vqa-like" else 0)
        self.W1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), (spec.teacher_hidden, d_in))
        self.b1 = rng.normal(0.0, 0.1, spec.teacher_hidden)
        self.W2 = rng.normal(0.0, 1.0 / np.sqrt(spec.teacher_hidden), (spec.vocab, spec.teacher_hidden))
        self.b2 = np.zeros(spec.vocab)
        self._calibrate(rng)

    def features(self, vision: np.ndarray, question_ids=None) -> np.ndarray:
        # mean of Tv iid N(0,1) tokens, rescaled back to unit variance
        f = vision.mean(axis=1) * np.sqrt(vision.shape[1])
        if self.spec.kind == "vqa-like":
            onehot = np.eye(self.spec.num_questions)[np.asarray(question_ids)] * 2.0
            f = np.concatenate([f, onehot], axis=1)
        return f

    def _logits(self, f: np.ndarray) -> np.ndarray:
        return np.tanh(f @ self.W1.T + self.b1) @ self.W2.T + self.b2

    def _calibrate(self, rng: np.random.Generator, n: int = 100_000, iters: int = 300):
        spec = self.spec
        f = rng.standard_normal((n, spec.H_v))
        if spec.kind == "vqa-like":
            q = rng.integers(0, spec.num_questions, n)
            f = np.concatenate([f, np.eye(spec.num_questions)[q] * 2.0], axis=1)
        pre = np.tanh(f @ self.W1.T + self.b1) @ self.W2.T
        target = np.log(1.0 / spec.vocab)
        for _ in range(iters):
            counts = np.bincount(np.argmax(pre + self.b2, axis=1), minlength=spec.vocab) + 1.0
            self.b2 -= 0.5 * (np.log(counts / counts.sum()) - target)

    def predict(self, vision: np.ndarray, question_ids=None) -> np.ndarray:
        return np.argmax(self._logits(self.features(vision, question_ids)), axis=1)


def _draw(spec: SyntheticTaskSpec, teacher: Teacher, n: int, rng: np.random.Generator) -> Split:
    vision = rng.standard_normal((n, spec.Tv, spec.H_v))
    qids = rng.integers(0, spec.num_questions, n) if spec.kind == "vqa-like" else None
    clean = teacher.predict(vision, qids)
    labels = clean.copy()
    if spec.noise_rate > 0:
        flip = rng.random(n) < spec.noise_rate
        shift = rng.integers(1, spec.vocab, n)
        labels[flip] = (labels[flip] + shift[flip]) % spec.vocab
    return Split(vision, labels.astype(np.int64), qids, clean.astype(np.int64))


@lru_cache(maxsize=32)
def _teacher(kind, teacher_seed, H_v, vocab, num_questions, teacher_hidden) -> Teacher:
    return Teacher(SyntheticTaskSpec(kind=kind, teacher_seed=teacher_seed, H_v=H_v, vocab=vocab,
                                     num_questions=num_questions, teacher_hidden=teacher_hidden))


def teacher_for(spec: SyntheticTaskSpec) -> Teacher:
    """Shared, read-only teacher; it depends only on the seed, kind and widths."""
    return _teacher(spec.kind, spec.teacher_seed, spec.H_v, spec.vocab, spec.num_questions, spec.teacher_hidden)


def gen_dataset(spec: SyntheticTaskSpec) -> Dataset:
    """Deterministic train/val draws; the two splits use independent seed streams."""
    if spec.train_size < 1:
        raise ContractError("n_train must be at least 1")
    teacher = teacher_for(spec)
    train_ss, val_ss = np.random.SeedSequence([spec.teacher_seed, 1]).spawn(2)
    train = _draw(spec, teacher, spec.train_size, np.random.default_rng(train_ss))
    val = _draw(spec, teacher, spec.n_val, np.random.default_rng(val_ss))
    return Dataset(train=train, val=val, teacher=teacher)
