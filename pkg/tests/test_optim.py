import numpy as np
import pytest

from ssrkit.optim import Adam, AdamW


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0, decoupled=False):
    """Textbook Adam written out step by step, one scalar at a time."""
    p = [float(x) for x in p]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            gi = float(g[i]) + (0.0 if decoupled else wd * p[i])
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            if decoupled:
                p[i] -= lr * wd * p[i]
            p[i] -= lr * mhat / (vhat ** 0.5 + eps)
    return np.array(p)


def run(opt, p0, grads):
    params = {"p": np.array(p0, dtype=np.float64)}
    for g in grads:
        opt.step(params, {"p": np.array(g, dtype=np.float64)})
    return params["p"]


def test_first_step_moves_by_lr_times_sign():
    out = run(Adam(0.1), [1.0, -2.0, 0.0], [[3.0, -0.5, 1e-3]])
    np.testing.assert_allclose(out, [0.9, -1.9, -0.1], atol=1e-6)


@pytest.mark.parametrize("wd,cls", [(0.0, Adam), (0.1, Adam), (0.1, AdamW)])
def test_matches_reference(wd, cls):
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    grads = rng.standard_normal((30, 5))
    out = run(cls(1e-2, weight_decay=wd), p0, grads)
    ref = reference_adam(p0, grads, 1e-2, wd=wd, decoupled=cls is AdamW)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)


def test_lr_zero_is_identity():
    p0 = [1.0, 2.0]
    assert np.array_equal(run(AdamW(0.0, weight_decay=0.5), p0, [[1.0, 1.0]] * 5), p0)


def test_converges_on_quadratic():
    params = {"x": np.array([5.0, -3.0])}
    opt = Adam(0.1)
    for _ in range(500):
        opt.step(params, {"x": 2 * params["x"]})
    assert np.linalg.norm(params["x"]) < 1e-2


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        Adam(-1.0)


def test_state_is_per_name():
    opt = Adam(0.1)
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    opt.step(params, {"a": np.ones(1)})
    assert params["b"][0] == 0.0 and "b" not in opt.m
