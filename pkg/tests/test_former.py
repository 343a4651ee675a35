import math

import numpy as np
import pytest

from petal import engine as E
from petal.dma import init_factor_bank
from petal.errors import ConfigError, DimensionError
from petal.former import (
    Adapters,
    MiniFormerConfig,
    attention_csv,
    backbone_param_count,
    build_frozen_backbone,
    dump_attention,
    forward,
    reference_forward,
    stack_instructions,
)
from petal.gradcheck import scramble
from petal.model import AdapterSpec, PetalModel
from petal.moe import load_templates

CFG = MiniFormerConfig(init_std=0.08)


def vision(cfg, B=3, Tv=5, seed=0):
    return np.random.default_rng(seed).normal(size=(B, Tv, cfg.H_v))


def test_closed_form_count_matches_traversal():
    for cfg in (CFG, MiniFormerConfig(layers=3, H_t=16, H_v=24, heads=2, vocab=7)):
        assert build_frozen_backbone(cfg).count() == backbone_param_count(cfg)


def test_backbone_hash_is_seeded():
    a, b = build_frozen_backbone(CFG, 0), build_frozen_backbone(CFG, 0)
    assert a.content_hash() == b.content_hash()
    assert build_frozen_backbone(CFG, 1).content_hash() != a.content_hash()


@pytest.mark.parametrize("task", ["caption-like", "vqa-like"])
@pytest.mark.parametrize("form", ["affine", "bottleneck"])
def test_fresh_adapters_reproduce_frozen_forward(task, form):
    model = PetalModel(CFG, AdapterSpec(expert_form=form), task)
    V = vision(CFG)
    qids = np.array([0, 3, 5]) if task == "vqa-like" else None
    res, _ = model.forward(V, qids)
    templates = load_templates(task="vqa" if task == "vqa-like" else "caption")
    ref = reference_forward(model.bb, CFG, V, stack_instructions(model.bb, CFG, templates, 3, qids))
    rel = np.abs(res.logits.data - ref).max() / np.abs(ref).max()
    assert rel <= 1e-9


def hand_forward(p, V, I):
    """One layer, one head, written token by token with plain floats."""

    def vec_lin(x, name):
        W, b = p[name + ".weight"], p[name + ".bias"]
        return [sum(W[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(b))]

    def vec_ln(x, name):
        m = sum(x) / len(x)
        v = sum((a - m) ** 2 for a in x) / len(x)
        w, b = p[name + ".weight"], p[name + ".bias"]
        return [(a - m) / math.sqrt(v + 1e-5) * w[i] + b[i] for i, a in enumerate(x)]

    def attend(qs, ks, vs):
        out = []
        for q in qs:
            s = [sum(a * b for a, b in zip(q, k)) / math.sqrt(len(q)) for k in ks]
            top = max(s)
            e = [math.exp(a - top) for a in s]
            tot = sum(e)
            out.append([sum(e[t] / tot * vs[t][i] for t in range(len(vs))) for i in range(len(vs[0]))])
        return out

    def gelu(a):
        return 0.5 * a * (1 + math.tanh(math.sqrt(2 / math.pi) * (a + 0.044715 * a ** 3)))

    rows = [list(r) for r in p["query_embed"]] + [list(r) for r in I]
    nq = len(p["query_embed"])
    pre = "layer0.self."
    ctx = attend([vec_lin(r, pre + "query") for r in rows], [vec_lin(r, pre + "key") for r in rows],
                 [vec_lin(r, pre + "value") for r in rows])
    rows = [vec_ln([a + b for a, b in zip(r, vec_lin(c, pre + "output"))], pre + "ln") for r, c in zip(rows, ctx)]
    q = rows[:nq]
    pre = "layer0.cross."
    ctx = attend([vec_lin(r, pre + "query") for r in q], [vec_lin(v, pre + "key") for v in V],
                 [vec_lin(v, pre + "value") for v in V])
    q = [vec_ln([a + b for a, b in zip(r, vec_lin(c, pre + "output"))], pre + "ln") for r, c in zip(q, ctx)]
    f = "layer0.ffn."
    q = [vec_ln([a + b for a, b in zip(r, vec_lin([gelu(x) for x in vec_lin(r, f + "in")], f + "out"))], f + "ln")
         for r in q]
    pooled = [sum(r[i] for r in q) / len(q) for i in range(len(q[0]))]
    return vec_lin(pooled, "head")


def test_tiny_instance_matches_hand_rolled_oracle():
    cfg = MiniFormerConfig(layers=1, H_t=4, H_v=3, heads=1, num_query_tokens=2, vocab=3, ffn_mult=2,
                           text_vocab=8, init_std=0.5)
    bb = build_frozen_backbone(cfg, seed=4)
    rng = np.random.default_rng(5)
    V = rng.normal(size=(1, 2, 3))
    I = rng.normal(size=(1, 1, 4))
    p = {k: v.data.tolist() for k, v in bb.params.items()}
    want = hand_forward(p, V[0].tolist(), I[0].tolist())
    got = forward(bb, cfg, V, I).logits.data[0]
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_attention_maps_are_row_stochastic():
    model = PetalModel(CFG)
    scramble(model, 0)
    res, _ = model.forward(vision(CFG))
    assert len(res.attn_maps) == CFG.layers
    for w in res.attn_maps:
        assert w.shape == (3, CFG.heads, CFG.num_query_tokens, 5)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


def test_dump_round_trip(tmp_path):
    model = PetalModel(CFG)
    res, _ = model.forward(vision(CFG))
    path = dump_attention(res.attn_maps, tmp_path / "a.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,head,token," + ",".join(f"w{i}" for i in range(1, 6))
    assert len(lines) - 1 == CFG.layers * CFG.heads * CFG.num_query_tokens
    for line in lines[1:]:
        assert abs(sum(float(v) for v in line.split(",")[3:]) - 1.0) <= 1e-6
    first = path.read_bytes()
    dump_attention(res.attn_maps, path)
    assert path.read_bytes() == first


def test_dump_without_maps_fails():
    with pytest.raises(ValueError):
        attention_csv([])


def test_dump_to_unwritable_path(tmp_path):
    res, _ = PetalModel(CFG).forward(vision(CFG))
    with pytest.raises(OSError):
        dump_attention(res.attn_maps, tmp_path / "missing" / "a.csv")


def test_text_lambda_never_touches_query_projections():
    model = PetalModel(CFG)
    scramble(model, 3)
    V = vision(CFG)
    before, _ = model.forward(V, keep_projections=True)
    model.banks["self"].lam["text_stream"].data = np.zeros_like(model.banks["self"].lam["text_stream"].data)
    after, _ = model.forward(V, keep_projections=True)
    for slot in ("query", "key", "value"):
        np.testing.assert_array_equal(after.projections[f"layer0.self.{slot}.query_stream"].data,
                                      before.projections[f"layer0.self.{slot}.query_stream"].data)
        assert not np.array_equal(after.projections[f"layer0.self.{slot}.text_stream"].data,
                                  before.projections[f"layer0.self.{slot}.text_stream"].data)
    # the change still reaches the query rows through attention mixing
    assert not np.array_equal(after.projections["layer0.self.output.query_stream"].data,
                              before.projections["layer0.self.output.query_stream"].data)


def test_every_connected_adapter_gets_gradient():
    model = PetalModel(CFG, AdapterSpec(), "vqa-like")
    scramble(model, 1)
    V = vision(CFG, B=4)
    loss, _, _ = model.loss(V, np.array([0, 1, 2, 3]), np.array([1, 2, 3, 4]))
    E.backward(loss)
    for name, t in model.named_trainable().items():
        if name == "moe.gate.bias":
            # softmax is shift invariant, so a shared bias has no gradient
            assert np.abs(t.grad).max() < 1e-12
            continue
        assert np.abs(t.grad).max() > 0, name


def test_mismatched_bank_is_a_config_error():
    banks = {"self": init_factor_bank(16, 16, 2), "cross": init_factor_bank(CFG.H_v, CFG.H_t, 2)}
    bb = build_frozen_backbone(CFG)
    I = np.zeros((3, 2, CFG.H_t))
    with pytest.raises(ConfigError):
        forward(bb, CFG, vision(CFG), I, Adapters(banks=banks))


def test_bad_vision_shape():
    bb = build_frozen_backbone(CFG)
    with pytest.raises(DimensionError):
        forward(bb, CFG, np.zeros((2, 5, CFG.H_v + 1)), np.zeros((2, 3, CFG.H_t)))


def test_invalid_config():
    with pytest.raises(ConfigError):
        MiniFormerConfig(H_t=30, heads=4)
