import numpy as np
import pytest

from mofetime import tensor as T
from mofetime.embedding import EmbedParams, dilated_context_mix, init_embed, pointwise_embed

from conftest import check_op_gradient


def make_params(rng, h=6, K=3, d=2, gate=0.0, conv=None, identity_out=False):
    a = init_embed(h, K, d, rng)
    a["gate_logit"] = np.array([gate])
    if conv is not None:
        a["conv"] = conv
    if identity_out:
        a["out.w"] = np.eye(h)
        a["out.b"] = np.zeros(h)
    t = {k: T.tensor(v, requires_grad=True) for k, v in a.items()}
    return EmbedParams(t["proj_w"], t["proj_v"], t["gate_logit"], t["conv"], t["out.w"], t["out.b"], d)


def _swish(z):
    return z / (1 + np.exp(-z))


def test_zero_input_embeds_to_zero(rng):
    p = make_params(rng)
    assert np.array_equal(pointwise_embed(np.zeros(4), p).data, np.zeros((4, 6)))


def test_balanced_gate(rng):
    p = make_params(rng, gate=0.0)
    x = rng.standard_normal(5)
    zw = x[:, None] * p.proj_w.data[:, 0]
    zv = x[:, None] * p.proj_v.data[:, 0]
    assert np.allclose(pointwise_embed(x, p).data, 0.5 * _swish(zw) + 0.5 * zv, atol=1e-14)


def test_saturated_gate(rng):
    p = make_params(rng, gate=20.0)
    x = rng.standard_normal(5)
    ref = _swish(x[:, None] * p.proj_w.data[:, 0])
    out = pointwise_embed(x, p).data
    # 1 - sigmoid(20) ~ 2e-9 weight on the linear branch
    assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-3)) < 1e-8 * 1e3


def test_gate_convexity(rng):
    p = make_params(rng, gate=0.7)
    x = rng.standard_normal(20)
    sw = _swish(x[:, None] * p.proj_w.data[:, 0])
    lin = x[:, None] * p.proj_v.data[:, 0]
    out = pointwise_embed(x, p).data
    lo, hi = np.minimum(sw, lin), np.maximum(sw, lin)
    assert ((out >= lo - 1e-12) & (out <= hi + 1e-12)).all()


def test_linear_branch_homogeneity(rng):
    p = make_params(rng, gate=-20.0)
    x = rng.standard_normal(8)
    a = pointwise_embed(3.0 * x, p).data
    b = 3.0 * pointwise_embed(x, p).data
    assert np.allclose(a, b, rtol=1e-7, atol=1e-9)


def test_zero_conv_identity_out_is_identity(rng):
    p = make_params(rng, identity_out=True)
    E = T.tensor(rng.standard_normal((10, 6)))
    assert np.array_equal(dilated_context_mix(E, p).data, E.data)


def test_impulse_receptive_field(rng):
    C = rng.standard_normal((3, 6))
    p = make_params(rng, conv=C, identity_out=True)
    e = rng.standard_normal(6)
    E = np.zeros((12, 6))
    E[5] = e
    out = dilated_context_mix(T.tensor(E), p).data
    assert set(np.nonzero(np.abs(out).sum(axis=1))[0].tolist()) == {5, 7, 9}
    assert np.allclose(out[5], e + C[0] * e, atol=1e-15)
    assert np.allclose(out[7], C[1] * e, atol=1e-15)
    assert np.allclose(out[9], C[2] * e, atol=1e-15)


@pytest.mark.parametrize("j", [0, 3, 8])
def test_causality_prefix_bitwise(rng, j):
    p = make_params(rng, conv=rng.standard_normal((3, 6)))
    x = rng.standard_normal(12)
    base = dilated_context_mix(pointwise_embed(x, p), p).data
    x2 = x.copy()
    x2[j + 1:] += rng.standard_normal(12 - j - 1)
    pert = dilated_context_mix(pointwise_embed(x2, p), p).data
    assert np.array_equal(base[:j + 1], pert[:j + 1])


def test_embedding_gradients(rng):
    h, K, d = 4, 3, 2
    base = init_embed(h, K, d, rng)
    base["conv"] = rng.standard_normal((K, h))
    base["gate_logit"] = np.array([0.3])
    x = rng.standard_normal((2, 9))
    names = ["proj_w", "proj_v", "gate_logit", "conv", "out.w", "out.b"]

    def build(*ts):
        p = EmbedParams(*ts, dilation=d)
        return dilated_context_mix(pointwise_embed(x, p), p)

    assert check_op_gradient(build, [base[n] for n in names]) < 1e-4
