import numpy as np

from voldit import tensor as tc


def rel_err(a, b) -> float:
    """Largest coordinate-wise relative disagreement, floored for near-zero entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a) + np.abs(b), 1e-6)
    return float(np.max(np.abs(a - b) / scale))


def projected(fn, shape_out, seed=99):
    """Scalar objective ``sum(fn(*xs) * R)`` with a fixed random ``R``."""
    r = np.random.default_rng(seed).standard_normal(shape_out)

    def loss(*xs):
        y = fn(*xs)
        return tc.sum_(tc.mul(y, tc.as_tensor(r, y)))

    return loss


def check_grads(fn, inputs, h=1e-6, coords=None, seed=0):
    """Compare tape gradients of ``fn`` against central differences for each input.

    Returns the worst relative error.  ``coords`` caps how many coordinates per
    input are probed (all when ``None``).
    """
    ts = [tc.Tensor(x, requires_grad=True) for x in inputs]
    with tc.no_grad():
        out_shape = fn(*ts).shape
    loss = projected(fn, out_shape)
    tc.backward(loss(*ts))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(ts):
        idx = list(np.ndindex(t.shape))
        if coords is not None and len(idx) > coords:
            idx = [idx[j] for j in rng.choice(len(idx), size=coords, replace=False)]

        def f(x, i=i):
            args = list(ts)
            args[i] = x
            return loss(*args)

        num = tc.finite_difference_grad(f, t, h=h, indices=idx)
        ana = t.grad if t.grad is not None else np.zeros(t.shape)
        sel = tuple(np.array(idx).T)
        worst = max(worst, rel_err(ana[sel], num[sel]))
    return worst
