import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from flamegaze.fusion import (
    MMTM,
    Additive,
    ConcatResidual,
    TransferFunction,
    aggregate_additive,
    aggregate_concat_residual,
    joint_width,
    mmtm_forward,
)
from flamegaze.nncore import ShapeError, finite_difference_check


def maps(rng, n=2, hw=(4, 3), c=(6, 6)):
    return rng.normal(size=(n, *hw, c[0])), rng.normal(size=(n, *hw, c[1]))


def test_joint_width_examples():
    assert joint_width(256, 256) == 128
    assert MMTM(256, 256).z_dim == 128
    assert joint_width(5, 6) == 2  # floor of 11/4


def test_zero_excitation_is_exact_identity(rng):
    r, h = maps(rng)
    m = MMTM(6, 6, zero_excitation=True, rng=rng)
    r2, h2 = mmtm_forward(r, h, m)
    np.testing.assert_array_equal(r2, r)
    np.testing.assert_array_equal(h2, h)


def test_transfer_function_identity_at_zero_excitation(rng):
    t = TransferFunction((6, 8), zero_excitation=True, rng=rng)
    for name, c in (("mmtm3", 6), ("mmtm4", 8)):
        r, h = maps(rng, c=(c, c))
        out = t.children[name].forward(r, h)
        np.testing.assert_array_equal(out[0], r)
        np.testing.assert_array_equal(out[1], h)


@given(st.integers(0, 2**31), st.floats(0.1, 5.0))
def test_gains_strictly_inside_zero_two(seed, scale):
    # float64 sigmoid only rounds to 0 or 1 once |e| exceeds about 36
    rng = np.random.default_rng(seed)
    m = MMTM(4, 4, rng=rng)
    r, h = maps(rng, c=(4, 4))
    g_r, g_h = m.gains(r * scale, h * scale)
    for g in (g_r, g_h):
        assert np.all(g > 0) and np.all(g < 2)


def test_gain_oracle(rng):
    """Gains recomputed by hand from the layer weights."""
    m = MMTM(3, 5, rng=rng)
    r, h = maps(rng, c=(3, 5))
    s = np.concatenate([r.mean(axis=(1, 2)), h.mean(axis=(1, 2))], axis=1)
    p = dict(m.named_parameters())
    z = np.maximum(s @ p["joint.weight"] + p["joint.bias"], 0)
    er = z @ p["excite_r.weight"] + p["excite_r.bias"]
    eh = z @ p["excite_h.weight"] + p["excite_h.bias"]
    r2, h2 = m.forward(r, h)
    np.testing.assert_allclose(r2, r * (2 / (1 + np.exp(-er)))[:, None, None, :], rtol=1e-12)
    np.testing.assert_allclose(h2, h * (2 / (1 + np.exp(-eh)))[:, None, None, :], rtol=1e-12)


@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 6), st.integers(1, 6))
def test_mmtm_preserves_shapes(n, hh, ww, cr, ch):
    assume(cr + ch >= 4)
    rng = np.random.default_rng([n, hh, ww, cr, ch])
    r = rng.normal(size=(n, hh, ww, cr))
    h = rng.normal(size=(n, ww, hh, ch))  # streams may differ spatially
    r2, h2 = MMTM(cr, ch, rng=rng).forward(r, h)
    assert r2.shape == r.shape and h2.shape == h.shape


def test_mmtm_shape_errors(rng):
    m = MMTM(4, 4)
    with pytest.raises(ShapeError):
        m.forward(rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 3, 3, 4)))
    with pytest.raises(ShapeError):
        m.forward(rng.normal(size=(2, 3, 3, 5)), rng.normal(size=(2, 3, 3, 4)))


def test_mmtm_config_validated():
    with pytest.raises(ValueError):
        MMTM(4, 4, z_activation="tanh")
    with pytest.raises(ValueError):
        MMTM(1, 2)


def test_concat_order_rgb_first(rng):
    agg = ConcatResidual(3, 2, 5, rng=rng)
    r, h = maps(rng, c=(3, 2))
    # equal widths give an identity skip; silencing the branch exposes the concat
    agg.children["block"].children["conv2"].params["weight"][...] = 0.0
    out = agg.forward(r, h, train=True)
    np.testing.assert_array_equal(out[..., :3], np.maximum(r, 0))
    np.testing.assert_array_equal(out[..., 3:], np.maximum(h, 0))


def test_concat_residual_zero_input_zero_block(rng):
    agg = ConcatResidual(3, 3, 4, rng=rng)
    for name, p in agg.named_parameters():
        if not name.endswith("gamma"):
            p[...] = 0.0
    z = np.zeros((2, 3, 3, 3))
    assert np.all(aggregate_concat_residual(z, z, agg, train=True) == 0.0)
    assert np.all(aggregate_concat_residual(z, z, agg) == 0.0)


def test_concat_residual_output_width_and_errors(rng):
    agg = ConcatResidual(3, 2, 7, rng=rng)
    r, h = maps(rng, c=(3, 2))
    assert agg.forward(r, h).shape == r.shape[:3] + (7,)
    with pytest.raises(ShapeError):
        agg.forward(r, h[:, :2])


def test_concat_residual_depends_on_both_inputs(rng):
    agg = ConcatResidual(3, 3, 4, rng=rng)
    r, h = maps(rng, c=(3, 3))
    base = agg.forward(r, h)
    assert not np.allclose(agg.forward(r + rng.normal(size=r.shape), h), base)
    assert not np.allclose(agg.forward(r, h + rng.normal(size=h.shape)), base)


def test_additive_examples(rng):
    r, h = maps(rng)
    np.testing.assert_array_equal(aggregate_additive(r, np.zeros_like(r)), r)
    assert np.all(aggregate_additive(r, -r) == 0.0)
    np.testing.assert_array_equal(aggregate_additive(r, h), aggregate_additive(h, r))
    with pytest.raises(ShapeError):
        aggregate_additive(r, h[..., :3])


# --- gradients -----------------------------------------------------------------


def check_pair(mod, r, h, train=True):
    state = {}

    def fwd(xs, tr):
        out = mod.forward(*xs, train=tr)
        if isinstance(out, tuple):
            state["shapes"] = [o.shape for o in out]
            out = np.concatenate([o.ravel() for o in out])
        else:
            state["shape"] = out.shape
        state["cot"] = np.random.default_rng(3).normal(size=out.shape)
        return float(np.sum(out * state["cot"]))

    def bwd(d):
        cot = state["cot"] * d
        if "shapes" in state:
            a, b = state["shapes"]
            n = int(np.prod(a))
            return mod.backward((cot[:n].reshape(a), cot[n:].reshape(b)))
        return mod.backward(cot.reshape(state["shape"]))

    res = finite_difference_check(mod, (r, h), forward=fwd, backward=bwd, train=train)
    assert res.checked > 0
    return res


def test_grad_mmtm(rng):
    r, h = maps(rng, c=(4, 4))
    assert check_pair(MMTM(4, 4, rng=rng), r, h).max_rel_error < 1e-4


def test_grad_mmtm_without_z_activation(rng):
    r, h = maps(rng, c=(3, 5))
    assert check_pair(MMTM(3, 5, z_activation="none", rng=rng), r, h).max_rel_error < 1e-4


def test_grad_concat_residual(rng):
    r, h = maps(rng, c=(3, 2))
    assert check_pair(ConcatResidual(3, 2, 4, rng=rng), r, h).max_rel_error < 1e-4


def test_grad_additive(rng):
    r, h = maps(rng)
    assert check_pair(Additive(), r, h).max_rel_error < 1e-4
