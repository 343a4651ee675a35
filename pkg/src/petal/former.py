"""A toy frozen Q-Former with adapter injection points.

Each block runs self-attention over ``[query tokens ; instruction tokens]``,
cross-attention from the query tokens to the vision tokens, and a shared
feed-forward layer, all post-norm. A frozen linear head maps the mean of
the final query tokens to class logits.

Every attention projection can be routed through a factor bank (PETAL), a
per-matrix LoRA pair, or left as the plain frozen weight.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import re
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .dma import SLOTS, FactorBank, ModalityTag, delta_weight, dma_rows
from .engine import Tensor
from .errors import ConfigError, DimensionError

QS = ModalityTag.query_stream.value
TS = ModalityTag.text_stream.value
KINDS = ("self", "cross")


@dataclass(frozen=True)
class MiniFormerConfig:
    layers: int = 2
    H_t: int = 32
    H_v: int = 56
    heads: int = 4
    num_query_tokens: int = 8
    vocab: int = 4
    ffn_mult: int = 4
    text_vocab: int = 64
    num_questions: int = 8
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("layers", "H_t", "H_v", "heads", "num_query_tokens", "vocab", "ffn_mult", "text_vocab", "num_questions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.H_t % self.heads:
            raise ConfigError(f"H_t={self.H_t} is not divisible by heads={self.heads}")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    @property
    def ffn_width(self) -> int:
        return self.ffn_mult * self.H_t

    def slot_shape(self, kind: str, slot: str) -> tuple[int, int]:
        """(d_out, d_in) of one attention projection."""
        if kind == "cross" and slot in ("key", "value"):
            return self.H_t, self.H_v
        return self.H_t, self.H_t

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrozenBackbone:
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data)
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_trainable(self, names=None):
        """Flag ``names`` (all when None) trainable and everything else frozen."""
        chosen = set(self.params) if names is None else set(names)
        for name, t in self.params.items():
            t.requires_grad = name in chosen

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def block_names(self, layer: int) -> list[str]:
        prefix = f"layer{layer}."
        return [n for n in self.params if n.startswith(prefix)]


def backbone_shapes(cfg: MiniFormerConfig) -> dict[str, tuple]:
    H, F = cfg.H_t, cfg.ffn_width
    shapes = {
        "query_embed": (cfg.num_query_tokens, H),
        "word_embed": (cfg.text_vocab, H),
        "question_embed": (cfg.num_questions, H),
    }
    for l in range(cfg.layers):
        for kind in KINDS:
            for slot in SLOTS:
                d_out, d_in = cfg.slot_shape(kind, slot)
                shapes[f"layer{l}.{kind}.{slot}.weight"] = (d_out, d_in)
                shapes[f"layer{l}.{kind}.{slot}.bias"] = (d_out,)
            shapes[f"layer{l}.{kind}.ln.weight"] = (H,)
            shapes[f"layer{l}.{kind}.ln.bias"] = (H,)
        shapes[f"layer{l}.ffn.in.weight"] = (F, H)
        shapes[f"layer{l}.ffn.in.bias"] = (F,)
        shapes[f"layer{l}.ffn.out.weight"] = (H, F)
        shapes[f"layer{l}.ffn.out.bias"] = (H,)
        shapes[f"layer{l}.ffn.ln.weight"] = (H,)
        shapes[f"layer{l}.ffn.ln.bias"] = (H,)
    shapes["head.weight"] = (cfg.vocab, H)
    shapes["head.bias"] = (cfg.vocab,)
    return shapes


def block_param_count(cfg: MiniFormerConfig) -> int:
    H, V, F = cfg.H_t, cfg.H_v, cfg.ffn_width
    self_attn = 4 * (H * H + H) + 2 * H
    cross_attn = 2 * (H * H + H) + 2 * (H * V + H) + 2 * H
    ffn = F * H + F + H * F + H + 2 * H
    return self_attn + cross_attn + ffn


def backbone_param_count(cfg: MiniFormerConfig) -> int:
    """Closed-form size of the frozen backbone."""
    H = cfg.H_t
    embeds = (cfg.num_query_tokens + cfg.text_vocab + cfg.num_questions) * H
    head = cfg.vocab * H + cfg.vocab
    return embeds + cfg.layers * block_param_count(cfg) + head


def build_frozen_backbone(cfg: MiniFormerConfig, seed: int = 0, dtype=np.float64) -> FrozenBackbone:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in backbone_shapes(cfg).items():
        if name.endswith("ln.weight"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape) if name.endswith("ln.bias") else rng.normal(0.0, cfg.init_std, shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, shape)
        params[name] = Tensor(arr, requires_grad=False, dtype=dtype, name=name)
    return FrozenBackbone(params)


# ----------------------------------------------------------------------
# instructions
# ----------------------------------------------------------------------
def tokenize(text: str, text_vocab: int) -> list[int]:
    words = re.findall(r"[a-z0-9]+", text.lower())
    return [zlib.crc32(w.encode()) % text_vocab for w in words]


def template_tokens(bb: FrozenBackbone, cfg: MiniFormerConfig, templates: list[str]) -> np.ndarray:
    """One token per template: the mean of its frozen word embeddings."""
    table = bb["word_embed"].data
    rows = []
    for t in templates:
        ids = tokenize(t, cfg.text_vocab)
        if not ids:
            raise ConfigError(f"template {t!r} has no words")
        rows.append(table[ids].mean(axis=0))
    return np.stack(rows)


def stack_instructions(bb: FrozenBackbone, cfg: MiniFormerConfig, templates: list[str], batch: int,
                       question_ids=None) -> np.ndarray:
    """Stacked instruction tokens ``(B, T_i, H_t)``; a question token is appended when ids are given."""
    base = template_tokens(bb, cfg, templates)
    x = np.broadcast_to(base, (batch,) + base.shape)
    if question_ids is not None:
        q = bb["question_embed"].data[np.asarray(question_ids) % cfg.num_questions]
        x = np.concatenate([x, q[:, None, :]], axis=1)
    return np.ascontiguousarray(x)


# ----------------------------------------------------------------------
# adapters seen by the forward pass
# ----------------------------------------------------------------------
@dataclass
class LoraPair:
    A: Tensor
    B: Tensor

    def delta(self) -> Tensor:
        return E.matmul(self.B, self.A)


@dataclass
class Adapters:
    banks: dict[str, FactorBank] | None = None
    lora: dict[str, LoraPair] | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    attn_maps: list[np.ndarray]
    query_features: Tensor
    text_features: Tensor
    projections: dict[str, Tensor] = field(default_factory=dict)


def _check_banks(cfg: MiniFormerConfig, banks: dict[str, FactorBank]):
    want = {"self": (cfg.H_t, cfg.H_t), "cross": (cfg.H_v, cfg.H_t)}
    for kind, (d_in, d_out) in want.items():
        bank = banks.get(kind)
        if bank is None:
            raise ConfigError(f"missing {kind}-attention factor bank")
        if bank.d_in != d_in or bank.d_out != d_out:
            raise ConfigError(
                f"{kind} bank is {bank.d_in}->{bank.d_out}, model needs {d_in}->{d_out}"
            )


class _Projector:
    """Applies attention projections, caching each shared delta once per pass."""

    def __init__(self, bb, cfg, adapters: Adapters | None, keep: bool):
        self.bb = bb
        self.cfg = cfg
        self.banks = adapters.banks if adapters else None
        self.lora = adapters.lora if adapters else None
        self._cache: dict = {}
        self.keep = keep
        self.kept: dict[str, Tensor] = {}
        if self.banks is not None:
            _check_banks(cfg, self.banks)

    def _delta(self, kind, modality, slot, d_in):
        key = (kind, modality, slot, d_in)
        if key not in self._cache:
            self._cache[key] = delta_weight(self.banks[kind], modality, slot, d_in=d_in)
        return self._cache[key]

    def __call__(self, layer: int, kind: str, slot: str, X: Tensor, modality: str) -> Tensor:
        base = f"layer{layer}.{kind}.{slot}"
        W0, b0 = self.bb[base + ".weight"], self.bb[base + ".bias"]
        if self.banks is not None:
            bank = self.banks[kind]
            out = dma_rows(bank, W0, X, self._delta(kind, modality, slot, W0.shape[1]))
        else:
            out = E.matmul(X, E.transpose(W0))
            if self.lora is not None and base in self.lora:
                pair = self.lora[base]
                out = out + E.matmul(E.matmul(X, E.transpose(pair.A)), E.transpose(pair.B))
        out = out + b0
        if self.keep:
            self.kept[f"{base}.{modality}"] = out
        return out


def _heads(x: Tensor, h: int) -> Tensor:
    B, T, H = x.shape
    return E.transpose(E.reshape(x, (B, T, h, H // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, T, dh = x.shape
    return E.reshape(E.transpose(x, (0, 2, 1, 3)), (B, T, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, h: int) -> tuple[Tensor, Tensor]:
    qh, kh, vh = _heads(q, h), _heads(k, h), _heads(v, h)
    dh = qh.shape[-1]
    scores = E.matmul(qh, E.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    w = E.softmax(scores, axis=-1)
    return _merge_heads(E.matmul(w, vh)), w


def _ln(bb, prefix, x):
    return E.layer_norm(x, bb[prefix + ".weight"], bb[prefix + ".bias"])


def forward(bb: FrozenBackbone, cfg: MiniFormerConfig, vision_tokens, instruction,
            adapters: Adapters | None = None, keep_projections: bool = False) -> ForwardResult:
    """Run the model on a batch.

    ``vision_tokens`` is ``(B, Tv, H_v)``; ``instruction`` is the enhanced
    instruction tensor ``(B, Ti, H_t)`` (or an ``EnhancedInstruction``).
    """
    V = E.as_tensor(vision_tokens)
    I = getattr(instruction, "I_in", instruction)
    I = E.as_tensor(I)
    if V.ndim != 3 or V.shape[-1] != cfg.H_v or V.shape[1] == 0:
        raise DimensionError(f"vision tokens must be (B, Tv>0, {cfg.H_v}), got {V.shape}")
    B = V.shape[0]
    if I.ndim == 2:
        I = I + Tensor(np.zeros((B,) + I.shape), dtype=I.dtype)
    if I.ndim != 3 or I.shape[0] != B or I.shape[-1] != cfg.H_t:
        raise DimensionError(f"instruction must be (B={B}, Ti, {cfg.H_t}), got {I.shape}")

    proj = _Projector(bb, cfg, adapters, keep_projections)
    nq, h = cfg.num_query_tokens, cfg.heads
    q = bb["query_embed"] + Tensor(np.zeros((B, nq, cfg.H_t)), dtype=V.dtype)
    t = I
    maps = []
    for l in range(cfg.layers):
        # self-attention over both streams; each stream uses its own lambda
        def both(slot, qx, tx):
            return E.concat([proj(l, "self", slot, qx, QS), proj(l, "self", slot, tx, TS)], axis=1)

        ctx, _ = _attend(both("query", q, t), both("key", q, t), both("value", q, t), h)
        att_o = both("output", ctx[:, :nq], ctx[:, nq:])
        joint = _ln(bb, f"layer{l}.self.ln", E.concat([q, t], axis=1) + att_o)
        q, t = joint[:, :nq], joint[:, nq:]

        # cross-attention: query tokens read the vision tokens
        cq = proj(l, "cross", "query", q, QS)
        ck = proj(l, "cross", "key", V, QS)
        cv = proj(l, "cross", "value", V, QS)
        cctx, w = _attend(cq, ck, cv, h)
        maps.append(w.data.copy())
        q = _ln(bb, f"layer{l}.cross.ln", q + proj(l, "cross", "output", cctx, QS))

        def ffn(x):
            hid = E.gelu(E.matmul(x, E.transpose(bb[f"layer{l}.ffn.in.weight"])) + bb[f"layer{l}.ffn.in.bias"])
            out = E.matmul(hid, E.transpose(bb[f"layer{l}.ffn.out.weight"])) + bb[f"layer{l}.ffn.out.bias"]
            return _ln(bb, f"layer{l}.ffn.ln", x + out)

        q, t = ffn(q), ffn(t)

    pooled = E.mean(q, axis=1)
    logits = E.matmul(pooled, E.transpose(bb["head.weight"])) + bb["head.bias"]
    return ForwardResult(logits=logits, attn_maps=maps, query_features=q, text_features=t, projections=proj.kept)


# ----------------------------------------------------------------------
# adapter-free reference path (plain numpy, no tape)
# ----------------------------------------------------------------------
def reference_forward(bb: FrozenBackbone, cfg: MiniFormerConfig, vision_tokens: np.ndarray,
                      instruction: np.ndarray) -> np.ndarray:
    """Frozen-model logits computed without the tensor engine or adapters."""
    p = {k: v.data for k, v in bb.params.items()}
    V = np.asarray(vision_tokens, dtype=np.float64)
    I = np.asarray(instruction, dtype=np.float64)
    B = V.shape[0]
    nq, h = cfg.num_query_tokens, cfg.heads

    def lin(x, name):
        return x @ p[name + ".weight"].T + p[name + ".bias"]

    def ln(x, name):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * p[name + ".weight"] + p[name + ".bias"]

    def attn(qx, kx, vx):
        def split(x):
            b, n, H = x.shape
            return x.reshape(b, n, h, H // h).transpose(0, 2, 1, 3)

        qs, ks, vs = split(qx), split(kx), split(vx)
        s = qs @ ks.transpose(0, 1, 3, 2) / math.sqrt(qs.shape[-1])
        s = s - s.max(-1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(-1, keepdims=True)
        o = w @ vs
        b, hh, n, dh = o.shape
        return o.transpose(0, 2, 1, 3).reshape(b, n, hh * dh)

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    q = np.broadcast_to(p["query_embed"], (B, nq, cfg.H_t))
    t = I
    for l in range(cfg.layers):
        pre = f"layer{l}.self."
        x = np.concatenate([q, t], axis=1)
        ctx = attn(lin(x, pre + "query"), lin(x, pre + "key"), lin(x, pre + "value"))
        x = ln(x + lin(ctx, pre + "output"), pre + "ln")
        q, t = x[:, :nq], x[:, nq:]
        pre = f"layer{l}.cross."
        ctx = attn(lin(q, pre + "query"), lin(V, pre + "key"), lin(V, pre + "value"))
        q = ln(q + lin(ctx, pre + "output"), pre + "ln")
        f = f"layer{l}.ffn."
        q = ln(q + lin(gelu(lin(q, f + "in")), f + "out"), f + "ln")
        t = ln(t + lin(gelu(lin(t, f + "in")), f + "out"), f + "ln")
    return q.mean(1) @ p["head.weight"].T + p["head.bias"]


# ----------------------------------------------------------------------
# attention dump
# ----------------------------------------------------------------------
def attention_csv(attn_maps: list[np.ndarray], sample: int = 0) -> str:
    """CSV text ``layer,head,token,w1..wTv`` for one example of the batch."""
    if not attn_maps:
        raise ValueError("no attention maps; run forward first")
    tv = attn_maps[0].shape[-1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "head", "token"] + [f"w{i + 1}" for i in range(tv)])
    for l, w in enumerate(attn_maps):
        for head in range(w.shape[1]):
            for tok in range(w.shape[2]):
                writer.writerow([l, head, tok] + [repr(float(v)) for v in w[sample, head, tok]])
    return buf.getvalue()


def atomic_write(path: str | Path, data: bytes):
    """Write to a temp file in the destination directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_attention(attn_maps: list[np.ndarray], path: str | Path, sample: int = 0) -> Path:
    path = Path(path)
    atomic_write(path, attention_csv(attn_maps, sample).encode())
    return path
