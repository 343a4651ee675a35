"""A mini-former plus whichever trainable parts a tuning method needs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .dma import SLOTS, ModalityTag, init_factor_bank
from .engine import Tensor
from .errors import ConfigError, DimensionError
from .former import (
    KINDS,
    Adapters,
    ForwardResult,
    FrozenBackbone,
    LoraPair,
    MiniFormerConfig,
    build_frozen_backbone,
    forward,
    tokenize,
)
from .ib import IBConfig, attention_pool, ib_loss
from .moe import init_expert_set, load_templates, moe_enhance

METHODS = ("petal", "full", "head", "lora")
ABLATIONS = ("none", "V1", "V2", "V3", "V4", "random_instruction")
INIT_STD = 0.02


@dataclass(frozen=True)
class AdapterSpec:
    """What to attach to the backbone. Mirrors the tuning fields of a train config."""

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
    seed: int = 0
    backbone_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.method != "petal" and self.ablation != "none":
            raise ConfigError(f"ablation {self.ablation} only applies to the petal method")

    @property
    def uses_moe(self) -> bool:
        return self.method == "petal" and self.ablation in ("none", "V2", "V4")

    @property
    def uses_ib(self) -> bool:
        return self.method == "petal" and self.ablation not in ("V2", "V3") and self.mu > 0

    @property
    def trains_gamma(self) -> bool:
        return self.ablation != "V4"


def lora_baseline_delta(d_out: int, d_in: int, R: int, seed: int = 0, dtype=np.float64) -> LoraPair:
    """Low-rank pair ``B @ A`` with Gaussian A and zero B (so the delta starts at 0)."""
    if R < 1 or R > min(d_out, d_in):
        raise ConfigError(f"LoRA rank {R} must lie in [1, min({d_out}, {d_in})]")
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(0.0, INIT_STD, (R, d_in)), requires_grad=True, dtype=dtype)
    B = Tensor(np.zeros((d_out, R)), requires_grad=True, dtype=dtype)
    return LoraPair(A=A, B=B)


class PetalModel:
    def __init__(self, cfg: MiniFormerConfig, spec: AdapterSpec = AdapterSpec(), task_kind: str = "caption-like",
                 templates: list[str] | None = None, backbone: FrozenBackbone | None = None):
        self.cfg = cfg
        self.spec = spec
        self.task_kind = task_kind
        self.templates = templates or load_templates(task="vqa" if task_kind == "vqa-like" else "caption")
        self.bb = backbone if backbone is not None else build_frozen_backbone(cfg, spec.backbone_seed)
        self.bb.set_trainable([])
        self.banks = None
        self.experts = None
        self.lora = None
        self.random_instruction = None
        self.ib_cfg = IBConfig(eta=spec.eta, mu=spec.mu, temperature=spec.temperature)
        self.ib_calls = 0
        self._template_ids = [tokenize(t, cfg.text_vocab) for t in self.templates]
        if any(not ids for ids in self._template_ids):
            raise ConfigError("every template needs at least one word")

        seeds = np.random.SeedSequence([spec.seed, 0x9E7A]).generate_state(4)
        if spec.method == "petal":
            qs, ts = ModalityTag.query_stream, ModalityTag.text_stream
            self.banks = {
                "self": init_factor_bank(cfg.H_t, cfg.H_t, spec.rank, spec.d_p, (qs, ts), int(seeds[0]),
                                         attention_kind="self"),
                "cross": init_factor_bank(cfg.H_v, cfg.H_t, spec.rank, spec.d_p, (qs,), int(seeds[1]),
                                          attention_kind="cross"),
            }
            if not spec.trains_gamma:
                for bank in self.banks.values():
                    bank.gamma.requires_grad = False
            if spec.uses_moe:
                self.experts = init_expert_set(cfg.H_t, spec.experts, spec.expert_middle, spec.expert_form,
                                               int(seeds[2]))
            if spec.ablation == "random_instruction":
                rng = np.random.default_rng(int(seeds[3]))
                self.random_instruction = Tensor(rng.normal(0.0, INIT_STD, (self.n_instruction_tokens, cfg.H_t)),
                                                 requires_grad=True)
        elif spec.method == "lora":
            self.lora = {}
            for l in range(cfg.layers):
                for kind in KINDS:
                    for i, slot in enumerate(SLOTS):
                        d_out, d_in = cfg.slot_shape(kind, slot)
                        sub = int(seeds[0]) + 1009 * l + 101 * KINDS.index(kind) + i
                        self.lora[f"layer{l}.{kind}.{slot}"] = lora_baseline_delta(d_out, d_in, spec.lora_rank, sub)
        elif spec.method == "head":
            last = cfg.layers - 1
            self.bb.set_trainable(self.bb.block_names(last) + ["head.weight", "head.bias"])
        elif spec.method == "full":
            self.bb.set_trainable(None)

    # ------------------------------------------------------------------
    @property
    def n_instruction_tokens(self) -> int:
        return len(self.templates) + (1 if self.task_kind == "vqa-like" else 0)

    def named_trainable(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.banks is not None:
            for kind, bank in self.banks.items():
                for name, t in bank.named_parameters().items():
                    if t.requires_grad:
                        out[f"{kind}.{name}"] = t
        if self.experts is not None:
            for name, t in self.experts.named_parameters().items():
                out[f"moe.{name}"] = t
        if self.random_instruction is not None:
            out["random_instruction"] = self.random_instruction
        if self.lora is not None:
            for name, pair in self.lora.items():
                out[f"lora.{name}.A"] = pair.A
                out[f"lora.{name}.B"] = pair.B
        for name, t in self.bb.params.items():
            if t.requires_grad:
                out[f"backbone.{name}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_trainable().values())

    def trainable_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def frozen_hash(self) -> str:
        """Content hash over the backbone tensors this method must not touch."""
        frozen = {n: t for n, t in self.bb.params.items() if not t.requires_grad}
        return FrozenBackbone(frozen).content_hash()

    def load_state(self, state: dict[str, np.ndarray]):
        own = self.named_trainable()
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing}")
        for name, arr in state.items():
            if name not in own:
                raise KeyError(f"checkpoint tensor {name!r} has no slot in this model")
            if own[name].shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {own[name].shape}")
            own[name].data = np.array(arr, dtype=own[name].dtype)

    # ------------------------------------------------------------------
    def raw_instruction(self, batch: int, question_ids=None) -> Tensor:
        """Stacked template tokens (+ question token) built from the word table in-graph."""
        table = self.bb["word_embed"]
        rows = [E.mean(table[np.asarray(ids)], axis=0, keepdims=True) for ids in self._template_ids]
        base = E.concat(rows, axis=0)
        x = base + Tensor(np.zeros((batch,) + base.shape), dtype=base.dtype)
        if self.task_kind == "vqa-like":
            if question_ids is None:
                raise DimensionError("vqa-like inputs need question ids")
            qidx = np.asarray(question_ids) % self.cfg.num_questions
            q = E.reshape(self.bb["question_embed"][qidx], (batch, 1, self.cfg.H_t))
            x = E.concat([x, q], axis=1)
        return x

    def instruction(self, batch: int, question_ids=None) -> tuple[Tensor, np.ndarray | None]:
        if self.random_instruction is not None:
            zeros = Tensor(np.zeros((batch,) + self.random_instruction.shape))
            return self.random_instruction + zeros, None
        x = self.raw_instruction(batch, question_ids)
        if self.experts is None:
            return x, None
        enhanced = moe_enhance(self.experts, x)
        return enhanced.I_in, enhanced.gate_weights

    def adapters(self) -> Adapters:
        return Adapters(banks=self.banks, lora=self.lora)

    def forward(self, vision, question_ids=None, keep_projections: bool = False) -> tuple[ForwardResult, np.ndarray | None]:
        vision = np.asarray(vision) if not isinstance(vision, Tensor) else vision
        B = vision.shape[0]
        I, gates = self.instruction(B, question_ids)
        return forward(self.bb, self.cfg, vision, I, self.adapters(), keep_projections), gates

    def loss(self, vision, labels, question_ids=None) -> tuple[Tensor, float, float | None]:
        """Total loss ``CE + mu * IB`` and its two parts as floats."""
        res, _ = self.forward(vision, question_ids)
        ce = E.cross_entropy(res.logits, labels)
        total = ce
        ib_val = None
        if self.spec.uses_ib and len(labels) >= 2:
            pooled = attention_pool(res.text_features)
            ib = ib_loss(pooled.z_hat, labels, cfg=self.ib_cfg)
            self.ib_calls += 1
            ib_val = float(ib.data)
            total = ce + ib * self.spec.mu
        return total, float(ce.data), ib_val

    def predict_logits(self, vision, question_ids=None, batch: int = 256) -> np.ndarray:
        out = []
        with E.no_grad():
            for i in range(0, len(vision), batch):
                q = None if question_ids is None else question_ids[i:i + batch]
                res, _ = self.forward(vision[i:i + batch], q)
                out.append(res.logits.data)
        return np.concatenate(out, axis=0)
