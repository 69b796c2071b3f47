import math

import numpy as np
import pytest

from yoga import blocks as B
from yoga import ops
from yoga.errors import DimensionError
from yoga.gradcheck import check_module
from yoga.tensor import FlopCounter, Tensor, no_grad


def rng(seed=0):
    return np.random.default_rng(seed)


def enumerate_params(module):
    return sum(p.data.size for p in module.parameters())


def instrumented(module, shape, call=None):
    x = Tensor(rng(9).standard_normal(shape).astype(np.float32))
    module.eval()
    with FlopCounter() as fc, no_grad():
        (call or (lambda m, t: m(t)))(module, x)
    return fc.flops


def zero_weights(module):
    for p in module.parameters():
        p.data[...] = 0.0


# -- ConvBlock --------------------------------------------------------------
def test_convblock_identity_gives_silu():
    blk = B.ConvBlock(3, 3, 1, rng=rng())
    blk.conv.weight.data[...] = np.eye(3).reshape(3, 3, 1, 1)
    blk.bn.eps = 1e-12
    blk.eval()
    x = rng(1).standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(blk(Tensor(x)).data, ops.silu(x).data, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("c1,c2,k,g", [(3, 16, 3, 1), (8, 8, 3, 8), (6, 12, 1, 3), (4, 4, 5, 2)])
def test_convblock_param_count(c1, c2, k, g):
    blk = B.ConvBlock(c1, c2, k, g=g, rng=rng())
    assert blk.param_count() == c2 * (c1 // g) * k * k + 2 * c2 == enumerate_params(blk)


def test_convblock_464():
    assert B.ConvBlock(3, 16, 3).param_count() == 464


def test_convblock_gradient():
    assert check_module(B.ConvBlock(3, 4, 3, 2, rng=rng()), [rng(2).standard_normal((2, 3, 5, 5))]) < 1e-4


# -- GhostConv --------------------------------------------------------------
def test_ghost_spec_rejects_odd_and_reports_factor():
    with pytest.raises(ValueError):
        B.GhostConvSpec(16, 31)
    assert B.GhostConvSpec(16, 32).improvement_factor == 2


def test_ghost_zero_input_raw_is_zero():
    g = B.GhostConv(4, 8, 3, raw=True, rng=rng())
    assert np.all(g(Tensor(np.zeros((1, 4, 5, 5)))).data == 0)


def test_ghost_2704_vs_4608():
    g = B.GhostConv(16, 32, 3, 1, 5, raw=True, rng=rng())
    assert g.param_count() == 16 * 16 * 9 + 16 * 25 == 2704 == enumerate_params(g)
    assert g.standard_param_count() == 4608
    assert g.param_count() / g.standard_param_count() == pytest.approx(0.587, abs=1e-3)


@pytest.mark.parametrize("c1", [16, 64, 128, 256, 512])
def test_ghost_ratio_closed_form(c1):
    g = B.GhostConv(c1, 2 * c1, 3, 1, 5, raw=True)
    assert g.param_count() / g.standard_param_count() == pytest.approx(0.5 + 25 / (18 * c1), rel=1e-12)


def test_ghost_first_half_is_primary_conv():
    g = B.GhostConv(4, 8, 3, raw=True, rng=rng())
    x = rng(3).standard_normal((2, 4, 6, 6)).astype(np.float32)
    out = g(Tensor(x)).data
    ref = ops.conv2d(x, g.primary.weight, g.primary.spec).data
    np.testing.assert_array_equal(out[:, :4], ref)
    assert out.shape[1] == 8


def test_ghost_gradient():
    assert check_module(B.GhostConv(4, 8, 3, 1, 5, rng=rng()), [rng(4).standard_normal((2, 4, 5, 5))]) < 1e-4


# -- Ghost bottleneck -------------------------------------------------------
def test_bottleneck_zero_main_path_is_identity():
    b = B.GhostBottleneck(8, 8, 1, raw=True, rng=rng())
    for m in b._main():
        zero_weights(m)
    x = rng(5).standard_normal((1, 8, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(b(Tensor(x)).data, x)


def test_bottleneck_stride2_halves_and_rejects_mismatch():
    b = B.GhostBottleneck(4, 8, 2, rng=rng())
    assert b(Tensor(np.ones((1, 4, 8, 8)))).shape == (1, 8, 4, 4)
    with pytest.raises(DimensionError):
        B.GhostBottleneck(4, 8, 1)


@pytest.mark.parametrize("s", [1, 2])
def test_bottleneck_gradient(s):
    b = B.GhostBottleneck(8, 8, s, rng=rng(s))
    assert check_module(b, [rng(6).standard_normal((2, 8, 4, 4))]) < 1e-4


# -- CSPGhost ---------------------------------------------------------------
def test_csp_empty_body_is_skeleton():
    c = B.CSPGhost(8, 16, 0, rng=rng())
    x = Tensor(rng(7).standard_normal((1, 8, 4, 4)))
    c.eval()
    ref = c.cv3(ops.concat_channels([c.cv1(x), c.cv2(x)]))
    np.testing.assert_array_equal(c(x).data, ref.data)


def test_csp_affine_param_growth():
    counts = [B.CSPGhost(16, 16, n).param_count() for n in range(4)]
    assert len({counts[i + 1] - counts[i] for i in range(3)}) == 1
    for n in (1, 2, 3):
        assert enumerate_params(B.CSPGhost(16, 16, n, rng=rng())) == counts[n]


def test_csp_branch_independence():
    c = B.CSPGhost(8, 8, 2, rng=rng()).eval()
    x = rng(8).standard_normal((1, 8, 4, 4))
    a0, b0 = c.branches(Tensor(x))
    # zero every input channel feeding only the bypass: cv2's contribution
    c.cv2.conv.weight.data[...] = 0
    a1, b1 = c.branches(Tensor(x))
    np.testing.assert_array_equal(a0.data, a1.data)
    assert not np.allclose(b0.data, b1.data)


def test_csp_gradient():
    assert check_module(B.CSPGhost(8, 8, 2, rng=rng()), [rng(9).standard_normal((2, 8, 4, 4))]) < 1e-4


# -- SPP --------------------------------------------------------------------
def test_spp_constant_and_shape():
    s = B.SPP(8, 8, rng=rng())
    x = Tensor(np.full((1, 4, 6, 6), 2.0))
    pyr = s.pyramid(x).data
    assert pyr.shape == (1, 16, 6, 6) and np.all(pyr == 2.0)
    for hw in (1, 3, 7):
        assert s(Tensor(np.ones((1, 8, hw, hw)))).shape == (1, 8, hw, hw)


def test_spp_bright_pixel_plateaus():
    s = B.SPP(2, 2, rng=rng())
    x = np.zeros((1, 1, 15, 15))
    x[0, 0, 7, 7] = 1.0
    pyr = s.pyramid(Tensor(x)).data[0]
    for branch, k in enumerate((5, 9, 13), start=1):
        expect = np.zeros((15, 15))
        r = k // 2
        expect[7 - r:7 + r + 1, 7 - r:7 + r + 1] = 1.0
        np.testing.assert_array_equal(pyr[branch], expect)


def test_spp_gradient():
    assert check_module(B.SPP(8, 8, (3, 5), rng=rng()), [rng(10).standard_normal((2, 8, 4, 4))]) < 1e-4


# -- MS-CAM -----------------------------------------------------------------
def test_mscam_zero_weights_half():
    m = B.MSCAM(8, 4, rng=rng()).eval()
    zero_weights(m)
    out = m(Tensor(rng(11).standard_normal((2, 8, 5, 5)))).data
    assert np.all(out == 0.5)


def test_mscam_range_over_random_draws():
    r = rng(12)
    for i in range(200):
        m = B.MSCAM(8, 4, rng=r).train(bool(i % 2))
        out = m(Tensor(r.standard_normal((2, 8, 3, 3)) * r.uniform(0.1, 5))).data
        assert out.shape == (2, 8, 3, 3)
        assert np.all((out > 0) & (out < 1))


def test_mscam_local_attention_varies_spatially():
    m = B.MSCAM(8, 4, rng=rng()).eval()
    m.use_global = False
    out = m(Tensor(rng(13).standard_normal((1, 8, 6, 6)))).data
    assert out[0].reshape(8, -1).var(axis=1).min() > 0


def test_mscam_rejects_indivisible():
    with pytest.raises(ValueError):
        B.MscamSpec(10, 4)


def test_mscam_gradient():
    assert check_module(B.MSCAM(8, 4, rng=rng()), [rng(14).standard_normal((2, 8, 3, 3))]) < 1e-4


# -- AFF --------------------------------------------------------------------
def test_aff_equal_inputs():
    a = B.AFF(8, rng=rng())
    x = rng(15).standard_normal((2, 8, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(a(Tensor(x), Tensor(x)).data, x, atol=1e-6)


def test_aff_endpoints():
    a = B.AFF(8, rng=rng()).eval()
    zero_weights(a)
    x, y = rng(16).standard_normal((2, 2, 8, 3, 3))
    a.mscam.local2.bias.data[...] = 60.0
    np.testing.assert_allclose(a(Tensor(x), Tensor(y)).data, x, atol=1e-6)
    a.mscam.local2.bias.data[...] = -60.0
    np.testing.assert_allclose(a(Tensor(x), Tensor(y)).data, y, atol=1e-6)


def test_aff_betweenness_random():
    r = rng(17)
    for _ in range(100):
        a = B.AFF(8, rng=r)
        x, y = r.standard_normal((2, 2, 8, 3, 3)) * 3
        out = a(Tensor(x), Tensor(y)).data
        lo, hi = np.minimum(x, y), np.maximum(x, y)
        slack = 4 * np.finfo(np.float64).eps * np.maximum(np.abs(x), np.abs(y))
        assert np.all(out >= lo - slack) and np.all(out <= hi + slack)


def test_aff_shape_mismatch():
    with pytest.raises(DimensionError):
        B.AFF(8)(Tensor(np.ones((1, 8, 4, 4))), Tensor(np.ones((1, 8, 2, 2))))


def test_aff_gradient():
    r = rng(18)
    assert check_module(B.AFF(8, rng=r), [r.standard_normal((2, 8, 3, 3)),
                                          r.standard_normal((2, 8, 3, 3))]) < 1e-4


# -- head -------------------------------------------------------------------
@pytest.mark.parametrize("nc,expected", [(80, 255), (1, 18)])
def test_head_channels(nc, expected):
    d = B.Detect(nc, (8, 16, 32), rng=rng())
    assert d.out_channels == expected
    feats = [Tensor(np.zeros((1, c, s, s), np.float32)) for c, s in ((8, 8), (16, 4), (32, 2))]
    outs = d(feats)
    for o, s in zip(outs, (8, 4, 2)):
        assert o.shape == (1, 3, nc + 5, s, s)


def test_head_bias_prior():
    d = B.Detect(3, (8, 8, 8), rng=rng())
    b = d.pred[0].bias.data.reshape(3, 8)
    assert b[0, 4] == pytest.approx(math.log(8 / (640 / 8) ** 2), rel=1e-6)
    assert b[0, 5] == pytest.approx(math.log(0.6 / 2.01), rel=1e-6)


def test_head_channel_mismatch():
    d = B.Detect(2, (8, 8), 3, (8, 16))
    with pytest.raises(DimensionError):
        d([Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 8, 2, 2)))])


def test_head_gradient():
    r = rng(19)
    d = B.Detect(2, (8, 8), 2, (8, 16), rng=r)
    assert check_module(d, [r.standard_normal((2, 8, 4, 4)), r.standard_normal((2, 8, 2, 2))],
                        call=lambda m, xs: m(xs)) < 1e-4


# -- counters vs instrumented execution ------------------------------------
CASES = [
    ("ConvBlock", lambda: B.ConvBlock(3, 8, 3, 2, rng=rng()), (1, 3, 8, 8)),
    ("GhostConv", lambda: B.GhostConv(8, 16, 3, 2, rng=rng()), (1, 8, 8, 8)),
    ("GhostBottleneck", lambda: B.GhostBottleneck(8, 8, rng=rng()), (1, 8, 6, 6)),
    ("GhostBottleneck_s2", lambda: B.GhostBottleneck(8, 16, 2, rng=rng()), (1, 8, 6, 6)),
    ("CSPGhost", lambda: B.CSPGhost(8, 16, 2, rng=rng()), (1, 8, 6, 6)),
    ("SPP", lambda: B.SPP(16, 16, rng=rng()), (1, 16, 4, 4)),
    ("MSCAM", lambda: B.MSCAM(16, 4, rng=rng()), (2, 16, 4, 4)),
]


@pytest.mark.parametrize("name,make,shape", CASES, ids=[c[0] for c in CASES])
def test_block_counts_match_enumeration_and_execution(name, make, shape):
    m = make()
    assert m.param_count() == enumerate_params(m)
    flops, out = m.flops(shape)
    assert flops == instrumented(m, shape)
    m.eval()
    with no_grad():
        assert m(Tensor(np.zeros(shape, np.float32))).shape == out


def test_aff_and_head_counts():
    a = B.AFF(16, rng=rng())
    shape = (1, 16, 4, 4)
    assert a.param_count() == enumerate_params(a)
    y = Tensor(rng(20).standard_normal(shape).astype(np.float32))
    assert a.flops(shape)[0] == instrumented(a, shape, lambda m, t: m(t, y))
    d = B.Detect(3, (8, 16), 3, (8, 16), rng=rng())
    shapes = [(1, 8, 4, 4), (1, 16, 2, 2)]
    assert d.param_count() == enumerate_params(d)
    feats = [Tensor(np.zeros(s, np.float32)) for s in shapes]
    d.eval()
    with FlopCounter() as fc, no_grad():
        d(feats)
    assert d.flops_multi(shapes)[0] == fc.flops
