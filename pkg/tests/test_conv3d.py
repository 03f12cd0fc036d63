"""Convolution tests against a literal triple-loop reference.

The reference evaluates out[f,v] = sum_t w[f,c,t] h[c, v - l*t] directly from
the definition, so any indexing or stride mistake in the fast kernel shows up
as a value mismatch rather than a plausible-looking wrong answer.
"""

import numpy as np
import pytest

from bayesvox import tensor as T
from bayesvox.conv3d import ConvSpec, dilated_conv3d, receptive_field
from bayesvox.tensor import Tensor

from test_tensor import finite_diff_grad


def conv_reference(x, w, b, spec):
    """Direct evaluation of the convolution definition. Slow, obviously right."""
    a, b_, c = spec.kernel_bounds
    l = spec.dilation
    p = spec.padding
    cin, d, h, wid = x.shape
    f = spec.out_channels
    dp, hp, wp = spec.output_extent((d, h, wid))
    out = np.zeros((f, dp, hp, wp), dtype=x.dtype)
    for fi in range(f):
        for vd in range(dp):
            for vh in range(hp):
                for vw in range(wp):
                    acc = 0.0
                    for ci in range(cin):
                        for td in range(-a, a + 1):
                            for th in range(-b_, b_ + 1):
                                for tw in range(-c, c + 1):
                                    sd = vd + l * (a - td) - p
                                    sh = vh + l * (b_ - th) - p
                                    sw = vw + l * (c - tw) - p
                                    if 0 <= sd < d and 0 <= sh < h and 0 <= sw < wid:
                                        acc += (
                                            w[fi, ci, td + a, th + b_, tw + c]
                                            * x[ci, sd, sh, sw]
                                        )
                    out[fi, vd, vh, vw] = acc + (b[fi] if b is not None else 0.0)
    return out


CASES = [
    ConvSpec(in_channels=2, out_channels=3, kernel_bounds=(1, 1, 1), dilation=1, padding=1),
    ConvSpec(in_channels=2, out_channels=3, kernel_bounds=(1, 1, 1), dilation=1, padding=0),
    ConvSpec(in_channels=1, out_channels=2, kernel_bounds=(1, 1, 1), dilation=2, padding=2),
    ConvSpec(in_channels=2, out_channels=2, kernel_bounds=(1, 0, 1), dilation=1, padding=1),
    ConvSpec(in_channels=3, out_channels=4, kernel_bounds=(0, 0, 0), dilation=1, padding=0),
    ConvSpec(in_channels=1, out_channels=1, kernel_bounds=(1, 1, 1), dilation=3, padding=1),
]


class TestForwardAgainstReference:
    @pytest.mark.parametrize("spec", CASES)
    def test_matches_triple_loop(self, spec):
        rng = np.random.default_rng(101)
        shape = (spec.in_channels, 8, 7, 8)
        x = rng.normal(size=shape)
        w = rng.normal(size=spec.weight_shape())
        b = rng.normal(size=spec.out_channels)
        got = dilated_conv3d(Tensor(x), Tensor(w), Tensor(b), spec).data
        want = conv_reference(x, w, b, spec)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_identity_kernel_preserves_input(self):
        rng = np.random.default_rng(7)
        spec = ConvSpec(1, 1, (1, 1, 1), dilation=1, padding=1)
        w = np.zeros(spec.weight_shape())
        w[0, 0, 1, 1, 1] = 1.0  # center tap only
        x = rng.normal(size=(1, 6, 6, 6))
        out = dilated_conv3d(Tensor(x), Tensor(w), None, spec).data
        np.testing.assert_allclose(out, x, atol=1e-14)

    @pytest.mark.parametrize("dil", [1, 2, 4])
    def test_impulse_lands_on_dilated_lattice(self, dil):
        # all-ones 3^3 kernel on a centered impulse: the response must sit
        # exactly on the 27 positions offset by dil times each tap
        spec = ConvSpec(1, 1, (1, 1, 1), dilation=dil, padding=dil)
        side = 4 * dil + 1
        x = np.zeros((1, side, side, side))
        mid = side // 2
        x[0, mid, mid, mid] = 1.0
        w = np.ones(spec.weight_shape())
        out = dilated_conv3d(Tensor(x), Tensor(w), None, spec).data[0]
        expected = np.zeros_like(out)
        for td in (-dil, 0, dil):
            for th in (-dil, 0, dil):
                for tw in (-dil, 0, dil):
                    expected[mid + td, mid + th, mid + tw] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_bias_only_on_zero_input(self):
        spec = ConvSpec(2, 3, (1, 1, 1), dilation=1, padding=1)
        rng = np.random.default_rng(9)
        w = rng.normal(size=spec.weight_shape())
        b = np.array([1.0, -2.0, 0.5])
        out = dilated_conv3d(Tensor(np.zeros((2, 5, 5, 5))), Tensor(w), Tensor(b), spec).data
        for i, bv in enumerate(b):
            np.testing.assert_array_equal(out[i], np.full((5, 5, 5), bv))

    def test_linearity_in_input(self):
        rng = np.random.default_rng(13)
        spec = ConvSpec(2, 2, (1, 1, 1), dilation=2, padding=1)
        w = Tensor(rng.normal(size=spec.weight_shape()))
        x1 = rng.normal(size=(2, 7, 7, 7))
        x2 = rng.normal(size=(2, 7, 7, 7))
        lhs = dilated_conv3d(Tensor(2.0 * x1 - 3.0 * x2), w, None, spec).data
        rhs = (
            2.0 * dilated_conv3d(Tensor(x1), w, None, spec).data
            - 3.0 * dilated_conv3d(Tensor(x2), w, None, spec).data
        )
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-11)


class TestGeometry:
    def test_output_extent_same_padding(self):
        spec = ConvSpec(1, 1, (1, 1, 1), dilation=4, padding=4)
        assert spec.output_extent((16, 16, 16)) == (16, 16, 16)

    def test_output_extent_shrinks_without_padding(self):
        spec = ConvSpec(1, 1, (1, 1, 1), dilation=2, padding=0)
        assert spec.output_extent((10, 11, 12)) == (6, 7, 8)

    def test_output_extent_rejects_too_small_input(self):
        spec = ConvSpec(1, 1, (1, 1, 1), dilation=8, padding=0)
        with pytest.raises(ValueError) as exc:
            spec.output_extent((16, 16, 16))
        assert "axis 0" in str(exc.value)

    def test_receptive_field_accumulates(self):
        specs = [
            ConvSpec(1, 4, (1, 1, 1), dilation=d, padding=d) for d in (1, 2, 4)
        ]
        assert receptive_field(specs) == (15, 15, 15)

    def test_receptive_field_anisotropic(self):
        specs = [ConvSpec(1, 1, (1, 0, 2), dilation=3, padding=0)]
        assert receptive_field(specs) == (7, 1, 13)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ConvSpec(0, 1, (1, 1, 1))
        with pytest.raises(ValueError):
            ConvSpec(1, 1, (1, 1, 1), dilation=0)
        with pytest.raises(ValueError):
            ConvSpec(1, 1, (-1, 1, 1))
        with pytest.raises(ValueError):
            ConvSpec(1, 1, (1, 1, 1), padding=-1)


class TestShapeErrors:
    def test_wrong_input_channels(self):
        spec = ConvSpec(2, 3, (1, 1, 1), padding=1)
        w = Tensor(np.zeros(spec.weight_shape()))
        with pytest.raises(T.ShapeMismatchError):
            dilated_conv3d(Tensor(np.zeros((1, 5, 5, 5))), w, None, spec)

    def test_wrong_weight_shape(self):
        spec = ConvSpec(2, 3, (1, 1, 1), padding=1)
        with pytest.raises(T.ShapeMismatchError):
            dilated_conv3d(
                Tensor(np.zeros((2, 5, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), None, spec
            )

    def test_wrong_bias_shape(self):
        spec = ConvSpec(2, 3, (1, 1, 1), padding=1)
        w = Tensor(np.zeros(spec.weight_shape()))
        with pytest.raises(T.ShapeMismatchError):
            dilated_conv3d(Tensor(np.zeros((2, 5, 5, 5))), w, Tensor(np.zeros(2)), spec)

    def test_dtype_mismatch(self):
        spec = ConvSpec(1, 1, (1, 1, 1), padding=1)
        w = Tensor(np.zeros(spec.weight_shape(), dtype=np.float32))
        with pytest.raises(ValueError):
            dilated_conv3d(Tensor(np.zeros((1, 4, 4, 4))), w, None, spec)


class TestGradients:
    """Backward pass against finite differences, all three operands."""

    @pytest.mark.parametrize(
        "spec",
        [
            ConvSpec(2, 2, (1, 1, 1), dilation=1, padding=1),
            ConvSpec(1, 2, (1, 1, 1), dilation=2, padding=2),
            ConvSpec(2, 1, (1, 0, 1), dilation=1, padding=0),
            ConvSpec(2, 3, (0, 0, 0), dilation=1, padding=0),
        ],
    )
    def test_grads_match_finite_differences(self, spec):
        rng = np.random.default_rng(55)
        x0 = rng.normal(size=(spec.in_channels, 6, 5, 6))
        w0 = rng.normal(size=spec.weight_shape())
        b0 = rng.normal(size=spec.out_channels)
        # random linear functional of the output makes every element matter
        proj = rng.normal(size=(spec.out_channels,) + spec.output_extent((6, 5, 6)))

        def run(xa, wa, ba):
            out = dilated_conv3d(xa, wa, ba, spec)
            return T.tsum(out * Tensor(proj))

        x = Tensor(x0.copy(), requires_grad=True)
        w = Tensor(w0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        T.backward(run(x, w, b))

        fd_x = finite_diff_grad(lambda v: run(Tensor(v), Tensor(w0), Tensor(b0)).item(), x0.copy())
        fd_w = finite_diff_grad(lambda v: run(Tensor(x0), Tensor(v), Tensor(b0)).item(), w0.copy())
        fd_b = finite_diff_grad(lambda v: run(Tensor(x0), Tensor(w0), Tensor(v)).item(), b0.copy())
        np.testing.assert_allclose(x.grad, fd_x, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(w.grad, fd_w, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(b.grad, fd_b, rtol=1e-5, atol=1e-7)

    def test_grad_flows_through_stacked_layers(self):
        rng = np.random.default_rng(77)
        s1 = ConvSpec(1, 2, (1, 1, 1), dilation=1, padding=1)
        s2 = ConvSpec(2, 2, (1, 1, 1), dilation=2, padding=2)
        x0 = rng.normal(size=(1, 6, 6, 6))
        w1 = Tensor(rng.normal(size=s1.weight_shape()) * 0.3, requires_grad=True)
        w2 = Tensor(rng.normal(size=s2.weight_shape()) * 0.3, requires_grad=True)

        def run(w1t, w2t):
            h = T.relu(dilated_conv3d(Tensor(x0), w1t, None, s1))
            return T.tsum(T.square(dilated_conv3d(h, w2t, None, s2)))

        T.backward(run(w1, w2))
        fd_w1 = finite_diff_grad(
            lambda v: run(Tensor(v), Tensor(w2.data)).item(), w1.data.copy()
        )
        np.testing.assert_allclose(w1.grad, fd_w1, rtol=1e-4, atol=1e-6)
