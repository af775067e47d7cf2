import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from condensenext import kernels

pytestmark = pytest.mark.skipif(kernels.NUMBA_KERNELS is None, reason="numba unavailable")
NP, NB = kernels.NUMPY_KERNELS, kernels.NUMBA_KERNELS


@given(n=st.integers(1, 3), c=st.integers(1, 4), d=st.integers(3, 9), k=st.sampled_from([1, 3]),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 10_000))
def test_depthwise_kernels_agree(n, c, d, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, d, d)).astype(np.float32)
    xpad = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))))
    w = r.normal(size=(c, k, k)).astype(np.float32)
    out = (d + 2 * pad - k) // stride + 1
    a = NP.dw_forward(xpad, w, stride, out, out)
    b = NB.dw_forward(xpad, w, stride, out, out)
    assert np.allclose(a, b, atol=1e-5)
    g = r.normal(size=a.shape).astype(np.float32)
    ph, pw = xpad.shape[2:]
    assert np.allclose(NP.dw_backward_input(g, w, stride, ph, pw), NB.dw_backward_input(g, w, stride, ph, pw),
                       atol=1e-5)
    assert np.allclose(NP.dw_backward_weight(xpad, g, stride, k), NB.dw_backward_weight(xpad, g, stride, k),
                       atol=1e-4)


@given(n=st.integers(1, 3), c=st.integers(1, 5), d=st.integers(1, 5), act=st.sampled_from([0, 1, 2]),
       seed=st.integers(0, 10_000))
def test_bn_kernels_agree(n, c, d, act, seed):
    if n * d * d < 2:
        return
    r = np.random.default_rng(seed)
    x = r.normal(0, 3, size=(n, c, d, d)).astype(np.float32)
    gamma = r.uniform(0.5, 2, c).astype(np.float32)
    beta = r.normal(size=c).astype(np.float32)
    for fa, fb in zip(NP.bn_act_forward(x, gamma, beta, 1e-5, act), NB.bn_act_forward(x, gamma, beta, 1e-5, act)):
        assert np.allclose(fa, fb, atol=1e-4)
    out, xhat, _, _, inv = NP.bn_act_forward(x, gamma, beta, 1e-5, act)
    g = r.normal(size=x.shape).astype(np.float32)
    # keep the activation kinks well away from the comparison
    pre = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    if act and (np.min(np.abs(pre)) < 1e-4 or np.min(np.abs(pre - 6)) < 1e-4):
        return
    for fa, fb in zip(NP.bn_act_backward(g, xhat, gamma, beta, inv, act),
                      NB.bn_act_backward(g, xhat, gamma, beta, inv, act)):
        assert np.allclose(fa, fb, atol=1e-4)
    for fa, fb in zip(NP.bn_train_forward(x, gamma, beta, 1e-5), NB.bn_train_forward(x, gamma, beta, 1e-5)):
        assert np.allclose(fa, fb, atol=1e-4)
    for fa, fb in zip(NP.bn_backward(g, xhat, gamma, inv), NB.bn_backward(g, xhat, gamma, inv)):
        assert np.allclose(fa, fb, atol=1e-4)


def test_float64_inputs_supported():
    r = np.random.default_rng(0)
    xpad = r.normal(size=(1, 2, 5, 5))
    w = r.normal(size=(2, 3, 3))
    assert np.allclose(NP.dw_forward(xpad, w, 1, 3, 3), NB.dw_forward(xpad, w, 1, 3, 3), atol=1e-12)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, CONDENSENEXT_NUMBA=flag)
    code = "from condensenext import kernels; print(kernels.active().name)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_model_output_same_on_both_paths(monkeypatch):
    from condensenext import arch
    from condensenext.tensor import Tensor
    from tests.conftest import toy_spec

    x = Tensor(np.random.default_rng(3).normal(size=(4, 3, 32, 32)).astype(np.float32))
    outs = []
    for use in (False, True):
        monkeypatch.setattr(kernels, "USE_NUMBA", use)
        g = arch.build(toy_spec(), seed=0)
        outs.append(arch.forward(g, x, training=True, seed=1).data)
    assert np.allclose(outs[0], outs[1], atol=1e-4)
