import numpy as np
import pytest

from omnifuse import instruction_fusion as insf
from omnifuse.numerics import Tensor, backward, finite_diff_grad, sum_all
from omnifuse.visual_branches import TokenGrid


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6)
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / denom


def grid_of(value, shape=(2, 4, 4, 3)):
    return TokenGrid(Tensor(np.full(shape, float(value))))


# ---------------------------------------------------------------- tokenizer

def test_tokenize_normalizes():
    assert insf.tokenize("What, EMOTION?!  is shown") == ["what", "emotion", "is", "shown"]
    assert insf.detokenize(["what", "emotion"]) == "what emotion"


def test_token_ids_range_and_determinism():
    ids = insf.token_ids("describe the person's mood")
    assert ids.size == 4
    assert np.all((ids >= 1) & (ids < insf.VOCAB_SIZE))
    assert np.array_equal(ids, insf.token_ids("describe the person's mood"))


# ---------------------------------------------------------------- encoder stub

def test_encoder_deterministic():
    enc = insf.InstructionEncoderStub(seed=0)
    a = enc("what emotion does the face show")
    b = enc("what emotion does the face show")
    assert np.array_equal(a.cls, b.cls)
    c = insf.InstructionEncoderStub(seed=0)("what emotion does the face show")
    assert np.array_equal(a.cls, c.cls)


def test_encoder_normalization_fixpoint():
    enc = insf.InstructionEncoderStub(seed=1)
    for s in ["  What ACTION??", "a,b;c", "Track the TWO people's motion!"]:
        norm = insf.detokenize(insf.tokenize(s))
        assert np.array_equal(enc(norm).cls, enc(s).cls)


def test_encoder_distinguishes_one_token_edits():
    enc = insf.InstructionEncoderStub(seed=2)
    rng = np.random.default_rng(3)
    words = [f"word{i}" for i in range(40)]
    for _ in range(100):
        base = list(rng.choice(words, size=5, replace=False))
        variant = list(base)
        variant[rng.integers(5)] = f"novel{rng.integers(10_000)}"
        a = enc(" ".join(base)).cls
        b = enc(" ".join(variant)).cls
        assert np.max(np.abs(a - b)) > 1e-8


def test_encoder_rejects_empty():
    enc = insf.InstructionEncoderStub(seed=0)
    for s in ["", "   ", "?!,."]:
        with pytest.raises(ValueError):
            enc(s)


def test_encoder_weights_frozen():
    enc = insf.InstructionEncoderStub(seed=0)
    assert all(not p.requires_grad for p in enc.params().values())


# ---------------------------------------------------------------- weights

def test_zero_logits_give_uniform_weights():
    w = insf.weights_from_logits(Tensor(np.zeros(3)))
    assert np.allclose([w.w1, w.w2, w.w3], 1.0 / 3.0, atol=1e-12)
    assert abs(w.w1 + w.w2 + w.w3 - 1.0) <= 1e-12


def test_ln2_logit_gives_half_quarter_quarter():
    w = insf.weights_from_logits(Tensor(np.array([np.log(2.0), 0.0, 0.0])))
    assert np.allclose([w.w1, w.w2, w.w3], [0.5, 0.25, 0.25], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=3)
    a = insf.weights_from_logits(Tensor(logits))
    b = insf.weights_from_logits(Tensor(logits + 17.3))
    assert np.allclose([a.w1, a.w2, a.w3], [b.w1, b.w2, b.w3], atol=1e-12)


def test_fusion_weights_validation():
    with pytest.raises(ValueError):
        insf.FusionWeights(0.5, 0.3, 0.1)
    with pytest.raises(ValueError):
        insf.FusionWeights(1.2, -0.2, 0.0)
    w = insf.FusionWeights(1.0, 0.0, 0.0)  # boundary is expressible
    assert w.w1 == 1.0
    raw = insf.FusionWeights(2.0, -1.0, 0.0, normalized=False)
    assert raw.w2 == -1.0


def test_gating_head_outputs_convex_weights():
    enc = insf.InstructionEncoderStub(seed=5)
    head = insf.GatingHead(d_t=32, d_h=64, seed=6)
    w = head(enc("how do the two people interact"))
    for v in (w.w1, w.w2, w.w3):
        assert 0.0 < v < 1.0
    assert abs(w.w1 + w.w2 + w.w3 - 1.0) <= 1e-12


# ---------------------------------------------------------------- fuse

def test_fuse_boundary_weight_returns_first_grid():
    rng = np.random.default_rng(7)
    f1 = TokenGrid(Tensor(rng.normal(size=(2, 4, 4, 3))))
    f2 = TokenGrid(Tensor(rng.normal(size=(2, 4, 4, 3))))
    f3 = TokenGrid(Tensor(rng.normal(size=(2, 4, 4, 3))))
    out = insf.fuse(f1, f2, f3, insf.FusionWeights(1.0, 0.0, 0.0))
    assert np.array_equal(out.tokens.data, f1.tokens.data)


def test_fuse_equal_grids_is_identity():
    rng = np.random.default_rng(8)
    g = rng.normal(size=(2, 4, 4, 3))
    w = insf.weights_from_logits(Tensor(rng.normal(size=3)))
    out = insf.fuse(TokenGrid(Tensor(g.copy())), TokenGrid(Tensor(g.copy())),
                    TokenGrid(Tensor(g.copy())), w)
    assert np.allclose(out.tokens.data, g, atol=1e-12)


def test_fuse_hand_arithmetic():
    out = insf.fuse(grid_of(1.0), grid_of(2.0), grid_of(4.0),
                    insf.FusionWeights(0.5, 0.25, 0.25))
    assert np.array_equal(out.tokens.data, np.full((2, 4, 4, 3), 2.0))


def test_fuse_convexity_bounds():
    rng = np.random.default_rng(9)
    grids = [rng.normal(size=(2, 4, 4, 3)) for _ in range(3)]
    w = insf.weights_from_logits(Tensor(rng.normal(size=3)))
    out = insf.fuse(*[TokenGrid(Tensor(g)) for g in grids], w).tokens.data
    lo = np.minimum(np.minimum(grids[0], grids[1]), grids[2])
    hi = np.maximum(np.maximum(grids[0], grids[1]), grids[2])
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)


def test_fuse_rejects_misaligned_grids():
    with pytest.raises(ValueError):
        insf.fuse(grid_of(1.0), grid_of(1.0, shape=(2, 4, 4, 5)), grid_of(1.0),
                  insf.FusionWeights(1.0, 0.0, 0.0))


def test_unnormalized_weights_make_linear_combination():
    out = insf.fuse(grid_of(1.0), grid_of(2.0), grid_of(4.0),
                    insf.FusionWeights(2.0, -1.0, 0.0, normalized=False))
    assert np.allclose(out.tokens.data, 0.0, atol=1e-15)


# ---------------------------------------------------------------- gradients

def test_gating_gradient_reaches_mlp_parameters():
    rng = np.random.default_rng(10)
    enc = insf.InstructionEncoderStub(seed=11)
    head = insf.GatingHead(d_t=32, d_h=16, seed=12)
    emb = enc("what emotion is on the face")
    grids = [TokenGrid(Tensor(rng.normal(size=(2, 4, 4, 3)))) for _ in range(3)]

    def loss_fn(_p=None):
        return sum_all(insf.fuse(*grids, head(emb)).tokens)

    loss = loss_fn()
    backward(loss)
    g_w2, g_b2 = head.w2.grad.copy(), head.b2.grad.copy()
    assert rel_err(g_w2, finite_diff_grad(loss_fn, head.w2)) <= 1e-4
    assert rel_err(g_b2, finite_diff_grad(loss_fn, head.b2)) <= 1e-4
