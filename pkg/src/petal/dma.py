"""Dynamic mode approximation of attention weights.

An adapted projection computes ``gamma * W0 @ X + dW @ X`` where the frozen
weight ``W0`` is scaled by a learnable threshold and the delta is a CP
reconstruction from factors shared by every layer of one attention kind::

    dW[m, s] = sum_r lam[m]_r * <p_r, e_s> * v_r u_r^T

``e_s`` is a fixed orthonormal selector for projection slot ``s`` (query,
key, value, output). It contracts the third CP mode so that every slot gets
its own 2-D delta while U, V and P stay shared.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigError, ContractError, DimensionError

SLOTS = ("query", "key", "value", "output")
INIT_STD = 0.02


class ModalityTag(str, enum.Enum):
    query_stream = "query_stream"
    text_stream = "text_stream"


def _tag(m) -> str:
    return m.value if isinstance(m, ModalityTag) else str(m)


@dataclass
class FactorBank:
    U: Tensor
    V: Tensor
    P: Tensor
    lam: dict[str, Tensor]
    gamma: Tensor
    slot_selectors: dict[str, np.ndarray]
    attention_kind: str = "self"

    @property
    def R(self) -> int:
        return self.U.shape[1]

    @property
    def d_in(self) -> int:
        return self.U.shape[0]

    @property
    def d_out(self) -> int:
        return self.V.shape[0]

    @property
    def d_p(self) -> int:
        return self.P.shape[0]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.lam)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"U": self.U, "V": self.V, "P": self.P}
        for m, t in self.lam.items():
            out[f"lambda.{m}"] = t
        out["gamma"] = self.gamma
        return out

    def trainable(self) -> list[Tensor]:
        return [t for t in self.named_parameters().values() if t.requires_grad]

    def copy(self) -> "FactorBank":
        def dup(t):
            return Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype)

        return FactorBank(
            U=dup(self.U), V=dup(self.V), P=dup(self.P),
            lam={m: dup(t) for m, t in self.lam.items()},
            gamma=dup(self.gamma),
            slot_selectors={s: e.copy() for s, e in self.slot_selectors.items()},
            attention_kind=self.attention_kind,
        )


def orthonormal_selectors(d_p: int, slots, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n = len(slots)
    if d_p < n:
        raise ConfigError(f"d_p={d_p} cannot hold {n} orthonormal slot selectors")
    q, r = np.linalg.qr(rng.standard_normal((d_p, n)))
    q = q * np.sign(np.diag(r))
    return {s: q[:, i].copy() for i, s in enumerate(slots)}


def init_factor_bank(
    d_in: int,
    d_out: int,
    R: int,
    d_p: int | None = None,
    modalities=(ModalityTag.query_stream, ModalityTag.text_stream),
    seed: int = 0,
    slots=SLOTS,
    attention_kind: str = "self",
    dtype=np.float64,
) -> FactorBank:
    """Gaussian U, P and lambda; zero V; threshold 1.

    ``d_p`` defaults to ``R**2``, the third-mode extent under which the
    factor bank holds ``R**3`` entries in P.
    """
    if d_p is None:
        d_p = R * R
    for name, val in (("d_in", d_in), ("d_out", d_out), ("R", R), ("d_p", d_p)):
        if int(val) < 1:
            raise ConfigError(f"{name} must be positive, got {val}")
    if not modalities:
        raise ConfigError("at least one modality is required")
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, INIT_STD, size=(d_in, R))
    P = rng.normal(0.0, INIT_STD, size=(d_p, R))
    lam = {_tag(m): Tensor(rng.normal(0.0, INIT_STD, size=R), requires_grad=True, dtype=dtype) for m in modalities}
    selectors = orthonormal_selectors(d_p, tuple(slots), rng)
    return FactorBank(
        U=Tensor(U, requires_grad=True, dtype=dtype),
        V=Tensor(np.zeros((d_out, R)), requires_grad=True, dtype=dtype),
        P=Tensor(P, requires_grad=True, dtype=dtype),
        lam=lam,
        gamma=Tensor(1.0, requires_grad=True, dtype=dtype),
        slot_selectors={s: e.astype(dtype) for s, e in selectors.items()},
        attention_kind=attention_kind,
    )


def _lookup(bank: FactorBank, m, s) -> tuple[Tensor, np.ndarray]:
    try:
        lam = bank.lam[_tag(m)]
    except KeyError:
        raise KeyError(f"modality {_tag(m)!r} not in bank (has {list(bank.lam)})") from None
    try:
        sel = bank.slot_selectors[s]
    except KeyError:
        raise KeyError(f"slot {s!r} not in bank (has {list(bank.slot_selectors)})") from None
    return lam, sel


def delta_weight(bank: FactorBank, m, s: str, d_in: int | None = None) -> Tensor:
    """CP reconstruction ``dW`` of shape ``(d_out, d_in)`` for one modality/slot.

    ``d_in`` smaller than the bank's input extent uses the leading rows of U,
    which is how the cross-attention bank (sized for vision features) also
    serves the text-width query/output projections.
    """
    lam, sel = _lookup(bank, m, s)
    U = bank.U
    if d_in is not None and d_in != bank.d_in:
        if d_in > bank.d_in:
            raise DimensionError(f"slot input width {d_in} exceeds bank input width {bank.d_in}")
        U = U[:d_in]
    mode3 = E.reshape(E.matmul(E.transpose(bank.P), Tensor(sel.reshape(-1, 1), dtype=bank.P.dtype)), (bank.R,))
    coef = lam * mode3
    return E.matmul(bank.V * coef, E.transpose(U))


def _check_frozen(W0: Tensor):
    if not isinstance(W0, Tensor):
        raise ContractError("W0 must be a Tensor")
    if W0.requires_grad:
        raise ContractError("W0 is flagged trainable; the backbone weight must stay frozen")


def dma_forward(bank: FactorBank, W0: Tensor, X: Tensor, m, s: str) -> Tensor:
    """``gamma * W0 @ X + dW @ X`` with X laid out as ``(d_in, T)``."""
    _check_frozen(W0)
    X = E.as_tensor(X)
    if W0.shape[-1] != X.shape[-2]:
        raise DimensionError(f"W0 {W0.shape} does not conform with X {X.shape}")
    dW = delta_weight(bank, m, s, d_in=W0.shape[1])
    if dW.shape != W0.shape:
        raise DimensionError(f"bank delta {dW.shape} does not match W0 {W0.shape}")
    return bank.gamma * E.matmul(W0, X) + E.matmul(dW, X)


def dma_rows(bank: FactorBank, W0: Tensor, X: Tensor, dW: Tensor) -> Tensor:
    """Row-major variant used inside the model: X is ``(..., T, d_in)``."""
    return bank.gamma * E.matmul(X, E.transpose(W0)) + E.matmul(X, E.transpose(dW))


def merge_for_inference(bank: FactorBank, W0: Tensor, m, s: str) -> Tensor:
    """Fused weight ``gamma * W0 + dW`` (no graph recorded)."""
    _check_frozen(W0)
    with E.no_grad():
        dW = delta_weight(bank, m, s, d_in=W0.shape[1])
        if dW.shape != W0.shape:
            raise DimensionError(f"bank delta {dW.shape} does not match W0 {W0.shape}")
        return bank.gamma * W0 + dW
