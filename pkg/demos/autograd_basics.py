"""Tour of the reverse-mode tensor core: graphs, gradients, and Adam.

Run:  python3 demos/autograd_basics.py
"""

import numpy as np

from omnifuse.numerics import (
    Adam,
    ParamGroup,
    Tensor,
    add,
    backward,
    finite_diff_grad,
    gelu,
    matmul,
    mean_pool_axis,
    mul,
    softmax_lastdim,
    sum_all,
    zero_grads,
)


def gradient_check():
    print("== gradient check against central differences ==")
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)))

    def f(t):
        h = gelu(matmul(t, w))
        return sum_all(mul(softmax_lastdim(h), h))

    backward(f(x))
    fd = finite_diff_grad(f, x)
    err = np.max(np.abs(x.grad - fd) / np.maximum(np.abs(fd), 1e-6))
    print(f"   reverse-mode vs finite differences, max rel err: {err:.2e}")


def fit_line():
    print("== fitting y = 3x - 1 with Adam ==")
    rng = np.random.default_rng(1)
    xs = rng.uniform(-1, 1, (64, 1))
    ys = 3.0 * xs - 1.0 + rng.normal(0, 0.05, (64, 1))

    w = Tensor(np.zeros((1, 1)), requires_grad=True)
    b = Tensor(np.zeros((1,)), requires_grad=True)
    group = ParamGroup("line", [w, b])
    opt = Adam([group], lr=0.05)

    for step in range(400):
        pred = add(matmul(Tensor(xs), w), b)
        err = add(pred, mul(Tensor(ys), -1.0))
        loss = mean_pool_axis(mean_pool_axis(mul(err, err), 0), 0)
        zero_grads([group])
        backward(loss)
        opt.step()
        if step % 100 == 0:
            print(f"   step {step:3d}  loss {loss.item():.4f}")
    print(f"   learned w={w.data[0, 0]:.3f} b={b.data[0]:.3f} "
          f"(target 3.000 / -1.000)")


def frozen_group():
    print("== frozen parameter groups ignore updates ==")
    p = Tensor([1.5], requires_grad=True)
    group = ParamGroup("stuck", [p], frozen=True)
    opt = Adam([group], lr=1.0)
    before = p.data.copy()
    for _ in range(10):
        p.grad = np.array([5.0])
        opt.step()
    print(f"   value before {before[0]} after 10 steps {p.data[0]} "
          f"(bitwise equal: {p.data.tobytes() == before.tobytes()})")


if __name__ == "__main__":
    gradient_check()
    fit_line()
    frozen_group()
