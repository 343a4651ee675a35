"""Training loop, baselines, ablations and the expert-count sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import engine as E
from .checkpoint import save_adapter
from .data import Dataset, Split, SyntheticTaskSpec, gen_dataset
from .errors import ConfigError, InvariantBreach
from .former import MiniFormerConfig, atomic_write
from .model import ABLATIONS, AdapterSpec, PetalModel
from .optim import AdamW, clip_grad_norm, warmup_cosine

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser recipe plus the tuning method.

    Defaults follow the published recipe (AdamW 0.9/0.999, weight decay 0.02,
    warmup 1e-6 -> 2e-5 over 1000 steps, cosine decay, five epochs, batch 32).
    Desk-scale runs are far shorter than 1000 steps, so toy configs shrink
    the warmup and raise the peak rate; see :func:`toy_train_config`.
    """

    epochs: int = 5
    batch: int = 32
    lr_start: float = 1e-6
    lr_peak: float = 2e-5
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.02
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    backbone_seed: int = 0
    method: str = "petal"
    ablation: str = "none"
    rank: int = 4
    d_p: int | None = None
    experts: int = 3
    expert_middle: int = 4
    expert_form: str = "bottleneck"
    lora_rank: int = 4
    mu: float = 0.1
    eta: float = 0.01
    temperature: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("epochs must be >= 0 and batch >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        self.adapter_spec()  # validates method/ablation

    def adapter_spec(self) -> AdapterSpec:
        names = {f.name for f in fields(AdapterSpec)}
        return AdapterSpec(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale recipe: same optimiser, shorter warmup, larger peak rate."""
    base = dict(epochs=5, batch=32, lr_start=1e-4, lr_peak=1e-2, warmup_steps=10)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class RunReport:
    rows: list[tuple[int, str, float, float]]
    trainable_count: int
    wall_time: float
    seed: int
    config: dict
    backbone_hash_before: str
    backbone_hash_after: str
    steps: int = 0
    ib_calls: int = 0
    train_items: int = 0

    def metric(self, split: str, epoch: int = -1, key: str = "accuracy") -> float:
        rows = [r for r in self.rows if r[1] == split]
        row = rows[epoch] if epoch < 0 else next(r for r in rows if r[0] == epoch)
        return row[3] if key == "accuracy" else row[2]

    @property
    def val_accuracy(self) -> float:
        return self.metric("val")

    @property
    def initial_train_loss(self) -> float:
        return self.metric("train", 0, "loss")

    @property
    def final_train_loss(self) -> float:
        return self.metric("train", -1, "loss")

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for epoch, split, loss, acc in self.rows:
            w.writerow([epoch, split, repr(float(loss)), repr(float(acc))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    report: RunReport
    model: PetalModel
    data: Dataset
    out_dir: Path | None = None


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i:i + size] for i in range(0, n, size)]
    # the contrastive bound needs at least two examples per batch
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def evaluate(model: PetalModel, split: Split) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``model`` on ``split``."""
    if len(split) == 0:
        return float("nan"), float("nan")
    logits = model.predict_logits(split.vision, split.question_ids)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(split)), split.labels].mean())
    acc = float((logits.argmax(axis=1) == split.labels).mean())
    return loss, acc


def fit(model: PetalModel, train: Split, val: Split, tc: TrainConfig) -> RunReport:
    """Optimise ``model`` in place and return per-epoch metrics."""
    start = time.perf_counter()
    params = model.parameters()
    nb = len(_batches(len(train), tc.batch, np.random.default_rng(0)))
    total = tc.epochs * nb
    if tc.epochs and tc.warmup_steps > total:
        raise ConfigError(f"warmup_steps={tc.warmup_steps} exceeds the {total} total steps of this run")
    opt = AdamW(params, lr=tc.lr_start, betas=(tc.beta1, tc.beta2), eps=tc.eps, weight_decay=tc.weight_decay)
    rng = np.random.default_rng([tc.seed, 0xBA7C])
    hash_before = model.frozen_hash()
    full_before = model.bb.content_hash()

    rows = []

    def record(epoch):
        for name, split in (("train", train), ("val", val)):
            loss, acc = evaluate(model, split)
            rows.append((epoch, name, loss, acc))

    record(0)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        for idx in _batches(len(train), tc.batch, rng):
            batch = train.take(idx)
            opt.zero_grad()
            loss, _, _ = model.loss(batch.vision, batch.labels, batch.question_ids)
            E.backward(loss)
            clip_grad_norm(params, tc.clip_norm)
            opt.lr = warmup_cosine(step, total, tc.warmup_steps, tc.lr_start, tc.lr_peak)
            opt.step()
            step += 1
        if model.frozen_hash() != hash_before:
            raise InvariantBreach("a frozen backbone tensor changed during training")
        record(epoch)
        log.info("epoch %d: %s", epoch, rows[-1])

    return RunReport(
        rows=rows,
        trainable_count=model.trainable_count(),
        wall_time=time.perf_counter() - start,
        seed=tc.seed,
        config=tc.to_dict(),
        backbone_hash_before=full_before,
        backbone_hash_after=model.bb.content_hash(),
        steps=step,
        ib_calls=model.ib_calls,
        train_items=len(train),
    )


def check_dims(cfg: MiniFormerConfig, task: SyntheticTaskSpec):
    if task.H_v != cfg.H_v or task.vocab != cfg.vocab or task.num_questions != cfg.num_questions:
        raise ConfigError(
            f"task dims (H_v={task.H_v}, vocab={task.vocab}, questions={task.num_questions}) do not match "
            f"model (H_v={cfg.H_v}, vocab={cfg.vocab}, questions={cfg.num_questions})"
        )


def train(cfg: MiniFormerConfig, tc: TrainConfig, task: SyntheticTaskSpec, out_dir: str | Path | None = None,
          templates: list[str] | None = None, data: Dataset | None = None) -> TrainResult:
    """Generate the task, train one method and optionally write run artefacts."""
    check_dims(cfg, task)
    data = data if data is not None else gen_dataset(task)
    model = PetalModel(cfg, tc.adapter_spec(), task.kind, templates=templates)
    report = fit(model, data.train, data.val, tc)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_adapter({k: t.data for k, t in model.named_trainable().items()}, out / "adapter.petl")
        atomic_write(out / "metrics.csv", report.metrics_csv().encode())
        echo = {"model": cfg.to_dict(), "train": tc.to_dict(), "task": task.to_dict()}
        atomic_write(out / "config.json", (json.dumps(echo, indent=2, sort_keys=True) + "\n").encode())
    return TrainResult(report=report, model=model, data=data, out_dir=out)


def sweep_experts(cfg: MiniFormerConfig, tc: TrainConfig, task: SyntheticTaskSpec, ks=(1, 2, 3, 4, 5, 6)) -> list[dict]:
    """Train once per expert count; rows carry final val accuracy and loss."""
    rows = []
    data = gen_dataset(task)
    for k in ks:
        if k < 1:
            raise ConfigError(f"expert count must be >= 1, got {k}")
        rep = train(cfg, replace(tc, experts=k), task, data=data).report
        rows.append({"K": k, "accuracy": rep.val_accuracy, "loss": rep.metric("val", -1, "loss")})
    return rows


def ablate(cfg: MiniFormerConfig, tc: TrainConfig, task: SyntheticTaskSpec, ablations=ABLATIONS) -> list[dict]:
    """Run the petal method under each ablation switch."""
    rows = []
    data = gen_dataset(task)
    for ab in ablations:
        res = train(cfg, replace(tc, method="petal", ablation=ab), task, data=data)
        rep = res.report
        rows.append({"ablation": ab, "accuracy": rep.val_accuracy, "loss": rep.metric("val", -1, "loss"),
                     "trainable": rep.trainable_count, "ib_calls": rep.ib_calls})
    return rows


def rows_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


COMPARISON = (("petal", "none"), ("head", "none"), ("petal", "V3"))


def compare_methods(cfg: MiniFormerConfig, tc: TrainConfig, task: SyntheticTaskSpec, seeds=range(5),
                    runs=COMPARISON) -> list[dict]:
    """Final val accuracy of each (method, ablation) pair on every seed.

    A seed names the task draw (``teacher_seed``) and the adapter init; all
    runs share the backbone given by ``tc.backbone_seed``.
    """
    rows = []
    for seed in seeds:
        task_s = replace(task, teacher_seed=seed)
        data = gen_dataset(task_s)
        for method, ab in runs:
            rep = train(cfg, replace(tc, seed=seed, method=method, ablation=ab), task_s, data=data).report
            rows.append({"seed": seed, "method": method, "ablation": ab, "accuracy": rep.val_accuracy,
                         "loss": rep.metric("val", -1, "loss"), "trainable": rep.trainable_count,
                         "seconds": rep.wall_time})
    return rows
