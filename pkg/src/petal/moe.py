"""Adaptive instruction mixture-of-experts.

K experts each transform the stacked instruction tokens ``x``; a gate scores
every expert from mean-pooled ``(x, y_k)`` and a softmax turns the scores
into convex weights. The enhanced instruction is ``sum_k g_k * y_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigError, ContractError, DimensionError

FORMS = ("bottleneck", "affine")
INIT_STD = 0.02


@dataclass
class ExpertSet:
    form: str
    experts: list[dict[str, Tensor]]
    gate_w: Tensor
    gate_b: Tensor

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def width(self) -> int:
        return self.gate_w.shape[0] // 2

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, ex in enumerate(self.experts):
            for name, t in ex.items():
                out[f"expert{k}.{name}"] = t
        out["gate.weight"] = self.gate_w
        out["gate.bias"] = self.gate_b
        return out

    def trainable(self) -> list[Tensor]:
        return [t for t in self.named_parameters().values() if t.requires_grad]


@dataclass
class EnhancedInstruction:
    I_in: Tensor
    gate_weights: np.ndarray = field(default_factory=lambda: np.ones(1))


def init_expert_set(
    H_t: int,
    K: int = 3,
    M: int = 64,
    form: str = "bottleneck",
    seed: int = 0,
    identity: bool = True,
    dtype=np.float64,
) -> ExpertSet:
    """Build K experts plus the gate.

    With ``identity`` every expert starts as the identity map: affine experts
    get ``gamma=1, beta=0``; bottleneck experts get a zero up-projection (the
    down-projection stays random so the experts drift apart once trained).
    Without it, affine experts are jittered and the up-projection is random.
    """
    if K < 1:
        raise ConfigError(f"expert count must be >= 1, got {K}")
    if form not in FORMS:
        raise ConfigError(f"unknown expert form {form!r}; expected one of {FORMS}")
    if H_t < 1 or (form == "bottleneck" and M < 1):
        raise ConfigError("expert widths must be positive")
    rng = np.random.default_rng(seed)
    experts = []
    for _ in range(K):
        if form == "affine":
            if identity:
                g, b = np.ones(H_t), np.zeros(H_t)
            else:
                g = 1.0 + rng.normal(0.0, INIT_STD, H_t)
                b = rng.normal(0.0, INIT_STD, H_t)
            experts.append({"gamma": Tensor(g, True, dtype), "beta": Tensor(b, True, dtype)})
        else:
            down = rng.normal(0.0, INIT_STD, (M, H_t))
            up = np.zeros((H_t, M)) if identity else rng.normal(0.0, INIT_STD, (H_t, M))
            experts.append({"down": Tensor(down, True, dtype), "up": Tensor(up, True, dtype)})
    gate_w = Tensor(rng.normal(0.0, INIT_STD, 2 * H_t), True, dtype)
    return ExpertSet(form=form, experts=experts, gate_w=gate_w, gate_b=Tensor(0.0, True, dtype))


def expert_forward(es: ExpertSet, k: int, x: Tensor) -> Tensor:
    if not 0 <= k < es.K:
        raise IndexError(f"expert index {k} out of range for K={es.K}")
    ex = es.experts[k]
    if es.form == "affine":
        return ex["gamma"] * x + ex["beta"]
    # residual bottleneck adapter
    hidden = E.gelu(E.matmul(x, E.transpose(ex["down"])))
    return x + E.matmul(hidden, E.transpose(ex["up"]))


def gate_scores(es: ExpertSet, x: Tensor, ys: list[Tensor]) -> Tensor:
    """Linear scores on ``[pool(x); pool(y_k)]``, stacked on the last axis."""
    for y in ys:
        if y.shape != x.shape:
            raise DimensionError(f"expert output {y.shape} does not match input {x.shape}")
    H = es.width
    px = E.mean(x, axis=-2)
    sx = E.tsum(px * es.gate_w[:H], axis=-1, keepdims=True)
    w_y = es.gate_w[H:]
    cols = [sx + E.tsum(E.mean(y, axis=-2) * w_y, axis=-1, keepdims=True) for y in ys]
    return E.concat(cols, axis=-1) + es.gate_b


def gate_weights(es: ExpertSet, x: Tensor, ys: list[Tensor]) -> Tensor:
    return E.softmax(gate_scores(es, x, ys), axis=-1)


def moe_enhance(es: ExpertSet, x: Tensor) -> EnhancedInstruction:
    x = E.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0 or x.size == 0:
        raise ContractError(f"instruction representation is empty (shape {x.shape})")
    if x.shape[-1] != es.width:
        raise DimensionError(f"instruction width {x.shape[-1]} != expert width {es.width}")
    ys = [expert_forward(es, k, x) for k in range(es.K)]
    g = gate_weights(es, x, ys)
    lead = g.shape[:-1]
    out = None
    for k, y in enumerate(ys):
        gk = E.reshape(g[..., k], lead + (1, 1))
        term = gk * y
        out = term if out is None else out + term
    return EnhancedInstruction(I_in=out, gate_weights=g.data.copy())


def load_templates(path: str | Path | None = None, task: str = "caption") -> list[str]:
    """Instruction templates, one per non-blank line (``#`` starts a comment).

    With no path the three built-in templates for ``task`` ("caption" or
    "vqa") are returned.
    """
    if path is None:
        if task not in ("caption", "vqa"):
            raise ConfigError(f"no built-in templates for task {task!r}")
        text = resources.files("petal").joinpath(f"data/{task}_templates.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lines = [ln.strip() for ln in text.splitlines()]
    out = [ln for ln in lines if ln and not ln.startswith("#")]
    if not out:
        raise ConfigError("template file contains no templates")
    return out
