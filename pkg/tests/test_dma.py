import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petal import engine as E
from petal.dma import SLOTS, ModalityTag, delta_weight, dma_forward, init_factor_bank, merge_for_inference
from petal.engine import Tensor
from petal.errors import ConfigError, ContractError, DimensionError

QS, TS = ModalityTag.query_stream, ModalityTag.text_stream


def triple_loop(U, V, P, lam, e):
    """Entry by entry: dW[i, j] = sum_r V[i, r] * lam[r] * (P^T e)[r] * U[j, r]."""
    d_out, R = V.shape
    d_in = U.shape[0]
    mode3 = [sum(P[k, r] * e[k] for k in range(P.shape[0])) for r in range(R)]
    out = np.zeros((d_out, d_in))
    for i in range(d_out):
        for j in range(d_in):
            out[i, j] = sum(V[i, r] * lam[r] * mode3[r] * U[j, r] for r in range(R))
    return out


def trained_bank(d_in, d_out, R, seed, d_p=None):
    if d_p is None and R * R < len(SLOTS):
        d_p = len(SLOTS)
    bank = init_factor_bank(d_in, d_out, R, d_p=d_p, seed=seed)
    rng = np.random.default_rng(seed + 1)
    bank.V.data = rng.normal(size=bank.V.shape)
    bank.gamma.data = np.asarray(1.0 + 0.3 * rng.normal())
    return bank


@settings(max_examples=50, deadline=None)
@given(d_in=st.integers(1, 8), d_out=st.integers(1, 8), R=st.integers(1, 4), seed=st.integers(0, 10**6),
       slot=st.sampled_from(SLOTS), modality=st.sampled_from([QS, TS]))
def test_delta_weight_matches_triple_loop(d_in, d_out, R, seed, slot, modality):
    bank = trained_bank(d_in, d_out, R, seed)
    got = delta_weight(bank, modality, slot).data
    want = triple_loop(bank.U.data, bank.V.data, bank.P.data, bank.lam[modality.value].data,
                       bank.slot_selectors[slot])
    assert np.abs(got - want).max() <= 1e-12


@settings(max_examples=50, deadline=None)
@given(d_in=st.integers(1, 8), d_out=st.integers(1, 8), R=st.integers(1, 4), T=st.integers(1, 5),
       seed=st.integers(0, 10**6))
def test_dma_forward_matches_dense_oracle(d_in, d_out, R, T, seed):
    bank = trained_bank(d_in, d_out, R, seed)
    rng = np.random.default_rng(seed + 2)
    W0 = Tensor(rng.normal(size=(d_out, d_in)))
    X = Tensor(rng.normal(size=(d_in, T)))
    dW = triple_loop(bank.U.data, bank.V.data, bank.P.data, bank.lam["query_stream"].data,
                     bank.slot_selectors["value"])
    want = (float(bank.gamma.data) * W0.data + dW) @ X.data
    got = dma_forward(bank, W0, X, QS, "value").data
    assert np.abs(got - want).max() <= 1e-9 * max(1.0, np.abs(want).max())


@pytest.mark.parametrize("seed", range(5))
def test_fresh_bank_has_zero_delta(seed):
    bank = init_factor_bank(6, 5, 3, seed=seed)
    for m in (QS, TS):
        for s in SLOTS:
            assert np.abs(delta_weight(bank, m, s).data).max() == 0.0
    assert float(bank.gamma.data) == 1.0


def test_fresh_bank_forward_equals_frozen_path():
    rng = np.random.default_rng(0)
    bank = init_factor_bank(4, 3, 2, seed=0)
    W0, X = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 6)))
    np.testing.assert_array_equal(dma_forward(bank, W0, X, QS, "key").data, W0.data @ X.data)


def test_p_has_r_cubed_entries_by_default():
    bank = init_factor_bank(8, 8, 4)
    assert bank.P.shape == (16, 4)
    assert bank.P.size == 4 ** 3


def test_slot_selectors_are_orthonormal():
    bank = init_factor_bank(8, 8, 3)
    E_ = np.stack([bank.slot_selectors[s] for s in SLOTS], axis=1)
    np.testing.assert_allclose(E_.T @ E_, np.eye(len(SLOTS)), atol=1e-12)


def test_modalities_differ_only_through_lambda():
    bank = trained_bank(5, 4, 3, seed=11)
    bank.lam["text_stream"].data = bank.lam["query_stream"].data.copy()
    np.testing.assert_array_equal(delta_weight(bank, QS, "query").data, delta_weight(bank, TS, "query").data)


def test_delta_rank_is_at_most_R():
    bank = trained_bank(8, 8, 2, seed=3)
    s = np.linalg.svd(delta_weight(bank, QS, "output").data, compute_uv=False)
    assert np.sum(s > 1e-8 * s[0]) <= 2


def test_gradients_through_dma_forward():
    bank = trained_bank(4, 3, 2, seed=5)
    rng = np.random.default_rng(6)
    W0, X = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 5)))
    target = rng.normal(size=(3, 5))

    def loss(_):
        out = dma_forward(bank, W0, X, TS, "query")
        return E.tsum(E.tanh(out) * Tensor(target))

    for name, t in bank.named_parameters().items():
        assert E.finite_diff_check(loss, t) <= 1e-4, name


def test_merge_matches_adapted_forward():
    bank = trained_bank(4, 3, 2, seed=8)
    rng = np.random.default_rng(9)
    W0, X = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    merged = merge_for_inference(bank, W0, QS, "output")
    np.testing.assert_allclose(merged.data @ X.data, dma_forward(bank, W0, X, QS, "output").data, rtol=1e-12)


def test_trainable_w0_is_rejected():
    bank = init_factor_bank(3, 3, 2)
    with pytest.raises(ContractError):
        dma_forward(bank, Tensor(np.eye(3), requires_grad=True), Tensor(np.ones((3, 1))), QS, "query")


def test_shape_mismatch_is_rejected():
    bank = init_factor_bank(3, 3, 2)
    with pytest.raises(DimensionError):
        dma_forward(bank, Tensor(np.ones((4, 3))), Tensor(np.ones((3, 1))), QS, "query")


def test_unknown_modality_is_a_key_error():
    bank = init_factor_bank(3, 3, 2, modalities=(QS,))
    with pytest.raises(KeyError):
        delta_weight(bank, TS, "query")


def test_nonpositive_rank_is_rejected():
    with pytest.raises(ConfigError):
        init_factor_bank(3, 3, 0)


def test_rank_one_needs_room_for_four_selectors():
    with pytest.raises(ConfigError):
        init_factor_bank(3, 3, 1)
    bank = init_factor_bank(3, 3, 1, d_p=4)
    assert bank.P.shape == (4, 1)
