import numpy as np
import pytest

from omnifuse.numerics import (
    Adam,
    GraphConsumedError,
    NonFiniteError,
    ParamGroup,
    Tensor,
    add,
    backward,
    concat_axis,
    cross_entropy,
    embed_lookup,
    finite_diff_grad,
    gelu,
    layer_norm,
    matmul,
    mean_pool_axis,
    mul,
    reshape,
    softmax_lastdim,
    sum_all,
    transpose,
    zero_grads,
)


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return np.max(np.abs(a - b) / denom)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_softmax_symmetry():
    out = softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_range_and_sum():
    rng = np.random.default_rng(1)
    out = softmax_lastdim(Tensor(rng.normal(size=(5, 7)) * 10))
    assert np.all(out.data > 0) and np.all(out.data < 1)
    assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-12


def test_gelu_zero_and_reflection():
    assert gelu(Tensor(0.0)).item() == 0.0
    # gelu(x) - gelu(-x) == x because Phi(x) + Phi(-x) == 1
    x = 2.0
    total = gelu(Tensor(x)).item() - gelu(Tensor(-x)).item()
    assert abs(total - x) < 1e-12


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    loss = sum_all(mul(x, x))
    backward(loss)
    assert np.allclose(x.grad, [6.0])


def test_backward_cross_entropy_identity():
    # grad of CE wrt logits is softmax(p) minus one-hot
    logits = Tensor([[0.0, 0.0]], requires_grad=True)
    loss = cross_entropy(logits, [0])
    backward(loss)
    assert np.allclose(logits.grad, [[-0.5, 0.5]])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(mul(x, x))


def test_backward_graph_consumed():
    x = Tensor([1.0], requires_grad=True)
    loss = sum_all(mul(x, x))
    backward(loss)
    with pytest.raises(GraphConsumedError):
        backward(loss)


def test_grads_accumulate_until_zeroed():
    x = Tensor([2.0], requires_grad=True)
    for _ in range(2):
        backward(sum_all(mul(x, x)))
    assert np.allclose(x.grad, [8.0])
    zero_grads([ParamGroup("x", [x])])
    assert x.grad is None


def test_nonfinite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf, 1.0])


def test_finite_diff_on_sum():
    x = Tensor(np.random.default_rng(2).normal(size=(4,)))
    g = finite_diff_grad(lambda t: sum_all(t), x)
    assert np.allclose(g, np.ones(4), atol=1e-8)


def test_finite_diff_on_square():
    x = Tensor([1.0, 2.0])
    g = finite_diff_grad(lambda t: sum_all(mul(t, t)), x)
    assert np.allclose(g, [2.0, 4.0], atol=1e-6)


def _random_graph_loss(x: Tensor, aux: dict):
    """Composed graph touching every op kind; aux holds fixed constants."""
    h = matmul(x, aux["w"])                       # (n, m)
    h = add(h, aux["b"])                          # bias broadcast
    h = gelu(h)
    h = layer_norm(h, aux["gain"], aux["bias"])
    picked = embed_lookup(h, aux["ids"])          # row gather
    s = softmax_lastdim(h)
    pooled = mean_pool_axis(mul(s, h), 0)         # (m,)
    cat = concat_axis([picked, reshape(pooled, (1, pooled.shape[0]))], 0)
    ce = cross_entropy(cat, aux["targets"])
    tr = sum_all(transpose(matmul(cat, transpose(aux["w2"]))))
    return add(ce, mul(tr, 0.01))


@pytest.mark.parametrize("seed", range(20))
def test_random_graph_grads_match_finite_diff(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    m = int(rng.integers(2, 8))
    k = int(rng.integers(1, 8))
    aux = {
        "w": Tensor(rng.normal(size=(k, m))),
        "w2": Tensor(rng.normal(size=(2, m))),
        "b": Tensor(rng.normal(size=(m,))),
        "gain": Tensor(rng.normal(size=(m,)) * 0.5 + 1.0),
        "bias": Tensor(rng.normal(size=(m,)) * 0.1),
        "ids": rng.integers(0, n, size=1),
        "targets": rng.integers(0, m, size=2),
    }
    x = Tensor(rng.normal(size=(n, k)), requires_grad=True)
    loss = _random_graph_loss(x, aux)
    backward(loss)
    fd = finite_diff_grad(lambda t: _random_graph_loss(t, aux), x)
    assert rel_err(x.grad, fd) <= 1e-4


def test_op_determinism_bitwise():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(4, 5))
    outs = []
    for _ in range(2):
        t = Tensor(data.copy())
        out = layer_norm(gelu(matmul(t, Tensor(data.T))),
                         Tensor(np.ones(4)), Tensor(np.zeros(4)))
        outs.append(out.data.tobytes())
    assert outs[0] == outs[1]


def test_embed_lookup_scatter_grad():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = embed_lookup(table, np.array([0, 0, 2]))
    backward(sum_all(out))
    assert np.allclose(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_concat_split_grad():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    out = concat_axis([a, b], 0)
    backward(sum_all(mul(out, out)))
    assert np.allclose(a.grad, [[2.0, 4.0]])
    assert np.allclose(b.grad, [[6.0, 8.0], [10.0, 12.0]])


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


class TestAdam:
    def _group(self, value, frozen=False):
        p = Tensor([value], requires_grad=True)
        return p, ParamGroup("g", [p], frozen=frozen)

    def test_frozen_group_bitwise_unchanged(self):
        p, group = self._group(1.2345, frozen=True)
        before = p.data.tobytes()
        opt = Adam([group], lr=0.5)
        for _ in range(100):
            p.grad = np.array([1.0])
            opt.step()
        assert p.data.tobytes() == before

    def test_first_step_magnitude(self):
        # with bias correction, a unit grad moves the scalar by lr/(1+eps)
        p, group = self._group(1.0)
        opt = Adam([group], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert abs(p.data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12

    def test_zero_grad_no_change(self):
        p, group = self._group(0.7)
        opt = Adam([group], lr=0.1)
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] == 0.7

    def test_missing_grad_raises(self):
        p, group = self._group(0.7)
        opt = Adam([group], lr=0.1)
        with pytest.raises(ValueError):
            opt.step()
