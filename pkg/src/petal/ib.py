"""Score-based information bottleneck.

Instruction features are attention-pooled into one vector per example, and
the loss trades ``I(Z;Y)`` against ``eta * I(Z;X)``. Two estimators exist:

* ``contrastive_surrogate`` (differentiable, used in training): an InfoNCE
  style lower bound for ``I(Z;Y)`` against in-batch class prototypes, plus
  a Gaussian-prior norm penalty standing in for ``I(Z;X)``.
* ``histogram_oracle`` (no gradient): plug-in mutual information on
  quantised samples, used to cross-check the surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigError, ContractError, DimensionError

ESTIMATORS = ("contrastive_surrogate", "histogram_oracle")


@dataclass(frozen=True)
class IBConfig:
    """Bottleneck settings.

    ``eta`` and ``mu`` have no published values; 0.01 and 0.1 keep the
    cross-entropy term dominant early in training.
    """

    eta: float = 0.01
    mu: float = 0.1
    estimator: str = "contrastive_surrogate"
    bins: int = 8
    temperature: float = 0.1

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")


@dataclass
class PooledRepresentation:
    alpha: Tensor
    H_hat: Tensor

    @property
    def z_hat(self) -> Tensor:
        return self.H_hat


def attention_pool(H: Tensor) -> PooledRepresentation:
    """Softmax-weighted average of the rows of ``H`` (``(..., N, d)``).

    Each row is scored against the mean row, scaled by ``1/sqrt(d)``.
    """
    H = E.as_tensor(H)
    if H.ndim < 2 or H.shape[-2] == 0:
        raise ContractError(f"attention_pool needs at least one feature row, got shape {H.shape}")
    d = H.shape[-1]
    q = E.mean(H, axis=-2, keepdims=True)
    scores = E.tsum(H * q, axis=-1) * (1.0 / math.sqrt(d))
    alpha = E.softmax(scores, axis=-1)
    a = E.reshape(alpha, alpha.shape + (1,))
    H_hat = E.tsum(a * H, axis=-2)
    return PooledRepresentation(alpha=alpha, H_hat=H_hat)


def _codes(samples: Sequence[Hashable]) -> np.ndarray:
    index: dict = {}
    return np.fromiter((index.setdefault(s, len(index)) for s in samples), dtype=np.int64, count=len(samples))


def mi_discrete(z_samples: Sequence[Hashable], y_samples: Sequence[Hashable]) -> float:
    """Plug-in mutual information in bits from empirical joint counts."""
    z_samples, y_samples = list(z_samples), list(y_samples)
    if not z_samples or not y_samples:
        raise ContractError("mi_discrete needs non-empty sample lists")
    if len(z_samples) != len(y_samples):
        raise DimensionError(f"sample lists differ in length: {len(z_samples)} vs {len(y_samples)}")
    zc, yc = _codes(z_samples), _codes(y_samples)
    n = zc.size
    joint = np.zeros((zc.max() + 1, yc.max() + 1), dtype=np.int64)
    np.add.at(joint, (zc, yc), 1)
    cz, cy = joint.sum(axis=1), joint.sum(axis=0)
    terms = []
    for i, j in zip(*np.nonzero(joint)):
        c = int(joint[i, j])
        # integer products keep the ratio independent of argument order
        terms.append(c / n * math.log2(c * n / (int(cz[i]) * int(cy[j]))))
    # fsum is exactly rounded, so the result does not depend on term order
    return math.fsum(terms)


def quantize(z: np.ndarray, bins: int = 8) -> list[tuple]:
    """Equal-width per-dimension binning over the observed range."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    lo, hi = z.min(axis=0), z.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    idx = np.floor((z - lo) / span * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    return [tuple(row) for row in idx]


def _unit_rows(x: Tensor) -> Tensor:
    return x / E.sqrt(E.tsum(x * x, axis=-1, keepdims=True) + 1e-12)


def class_prototypes(z: Tensor, labels: np.ndarray) -> Tensor:
    """Row ``j`` is the in-batch mean of ``z`` over examples sharing ``labels[j]``."""
    same = (labels[:, None] == labels[None, :]).astype(z.dtype)
    avg = same / same.sum(axis=1, keepdims=True)
    return E.matmul(Tensor(avg, dtype=z.dtype), z)


def contrastive_mi(z_hat: Tensor, labels, temperature: float = 0.1, prototypes: Tensor | None = None) -> Tensor:
    """InfoNCE bound ``log B + mean_i log softmax_j(cos(z_i, p_j)/t)[i]``."""
    labels = np.asarray(labels)
    B = z_hat.shape[0]
    if B < 2:
        raise ContractError("the contrastive estimator needs a batch of at least 2")
    if labels.shape[0] != B:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {B}")
    if prototypes is None:
        prototypes = class_prototypes(z_hat, labels)
    sim = E.matmul(_unit_rows(z_hat), E.transpose(_unit_rows(prototypes))) * (1.0 / temperature)
    lsm = E.log_softmax(sim, axis=-1)
    diag = lsm[np.arange(B), np.arange(B)]
    return E.mean(diag) + math.log(B)


def compression_proxy(z_hat: Tensor) -> Tensor:
    """Gaussian-prior stand-in for ``I(Z;X)``: batch mean of ``0.5*|z|^2/d``."""
    d = z_hat.shape[-1]
    return E.mean(E.tsum(z_hat * z_hat, axis=-1)) * (0.5 / d)


def histogram_mi(z: np.ndarray, other, bins: int = 8) -> float:
    """Oracle MI (bits) between quantised ``z`` and labels or a quantised array."""
    zq = quantize(z, bins)
    other = np.asarray(other)
    oq = quantize(other, bins) if other.dtype.kind == "f" else list(other.tolist())
    return mi_discrete(zq, oq)


def ib_loss(z_hat: Tensor, labels, x_summary=None, cfg: IBConfig = IBConfig()) -> Tensor:
    """``-I(Z;Y) + eta * I(Z;X)`` in nats under the configured estimator.

    The histogram oracle needs ``x_summary`` for its compression term and
    returns a constant tensor (no gradient).
    """
    labels = np.asarray(labels)
    if cfg.estimator == "contrastive_surrogate":
        keep = contrastive_mi(z_hat, labels, cfg.temperature)
        loss = -keep
        if cfg.eta:
            loss = loss + compression_proxy(z_hat) * cfg.eta
        return loss
    if x_summary is None:
        raise ContractError("histogram_oracle needs x_summary to estimate I(Z;X)")
    xs = x_summary.data if isinstance(x_summary, Tensor) else np.asarray(x_summary)
    keep = histogram_mi(z_hat.data, labels, cfg.bins) * math.log(2)
    drop = histogram_mi(z_hat.data, xs, cfg.bins) * math.log(2)
    return Tensor(-keep + cfg.eta * drop, dtype=z_hat.dtype)
