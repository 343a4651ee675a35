import pytest
from hypothesis import given
from hypothesis import strategies as st

from petal.budget import (
    PAPER_DIMS,
    compare_budgets,
    lora_count,
    petal_budget,
)
from petal.errors import ConfigError


def test_paper_dims_subtotal():
    r = petal_budget(**PAPER_DIMS)
    assert r.paper_mode_subtotal == 1_056_768
    assert r.qformer_part == 761_856
    assert r.moe_part == 294_912
    assert 0.005 <= r.ratio <= 0.006


def test_qformer_part_closed_form():
    H_v, H_t, R = 1408, 768, 64
    assert petal_budget(**PAPER_DIMS).qformer_part == (H_v + 2 * R * R + 3 * H_t) * R


def test_itemized_extras():
    r = petal_budget(**PAPER_DIMS)
    lines = {l.component: l.count for l in r.lines}
    assert lines["cross.lambda"] == 64 and lines["self.lambda"] == 128
    assert lines["cross.gamma"] == lines["self.gamma"] == 1
    assert lines["moe.gate"] == 2 * 768 + 1
    assert lines["classifier head (frozen)"] == 0
    assert r.full_itemized_total - r.paper_mode_subtotal == 64 + 128 + 2 + 1537


def test_non_square_third_mode_warns():
    r = petal_budget(**PAPER_DIMS, d_p=64)
    assert r.warnings and "d_p=64" in r.warnings[0]
    assert r.paper_mode_subtotal != 1_056_768
    assert not petal_budget(**PAPER_DIMS).warnings


def test_affine_experts():
    assert petal_budget(**PAPER_DIMS, form="affine").moe_part == 2 * 768 * 3


def test_comparison_rows():
    rows = {r["method"]: r for r in compare_budgets()}
    assert rows["full"]["trainable"] == 188_000_000
    assert rows["petal"]["trainable"] == 1_056_768
    assert rows["lora"]["trainable"] == 12 * 8 * 64 * (768 + 768) == 9_437_184
    assert "5,000,000" in rows["lora"]["note"]


def test_lora_count_formula():
    assert lora_count(2, [(3, 4), (5, 6)], 2) == 2 * (2 * 7 + 2 * 11)


def test_text_and_csv_render():
    r = petal_budget(**PAPER_DIMS)
    assert "1,056,768" in r.to_text()
    assert "paper_mode_subtotal,1056768," in r.to_csv()


@pytest.mark.parametrize("bad", [dict(H_v=0), dict(R=-1), dict(K=1.5)])
def test_nonpositive_dims(bad):
    dims = dict(PAPER_DIMS, **bad)
    with pytest.raises(ConfigError):
        petal_budget(**dims)


dims = st.integers(1, 2000)


@given(H_v=dims, H_t=dims, R=st.integers(1, 80), M=st.integers(1, 100), K=st.integers(1, 8))
def test_budget_is_pure_and_ordered(H_v, H_t, R, M, K):
    a, b = petal_budget(H_v, H_t, R, M, K), petal_budget(H_v, H_t, R, M, K)
    assert a == b
    assert 0 <= a.paper_mode_subtotal <= a.full_itemized_total
    assert all(isinstance(l.count, int) and l.count >= 0 for l in a.lines)
    assert a.paper_mode_subtotal == (H_v + 2 * R * R + 3 * H_t) * R + H_t * M * 2 * K
    assert a.ratio == a.paper_mode_subtotal / a.backbone_reference
