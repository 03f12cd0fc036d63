"""Dilated volumetric convolution as an autodiff operation.

The operator computes, for output channel f and voxel v,

    out[f, v] = bias[f] + sum_c sum_t weight[f, c, t] * h[c, v - l*t]

where t ranges over the symmetric integer offsets {-a..a} x {-b..b} x {-c..c}
of the kernel, l is the dilation factor, and the input is zero-padded by
``padding`` voxels on every side. Weight tap axes are stored in offset order,
so ``weight[f, c, 0, 0, 0]`` multiplies the input at offset (+l*a, +l*b, +l*c)
relative to the output voxel and the center tap sits at index (a, b, c).

Implementation: the padded input is exposed as a strided window view of shape
(Cin, ka, kb, kc, D', H', W'), flattened into a matrix, and hit with one BLAS
matmul against the flattened weights. The backward pass reuses the same
matrices; the input gradient is assembled with one scatter-add per kernel tap.
On a single core this is several times faster than gather-based im2col.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeMismatchError, Tensor, _accumulate

__all__ = ["ConvSpec", "dilated_conv3d", "receptive_field"]


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one dilated convolution layer.

    ``kernel_bounds`` (a, b, c) give the half-width of the kernel per axis;
    the kernel shape is (2a+1, 2b+1, 2c+1). ``padding`` is the number of
    zero voxels added on each side of every axis.
    """

    in_channels: int
    out_channels: int
    kernel_bounds: tuple[int, int, int]
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"ConvSpec: channel counts must be positive, got {self}")
        kb = tuple(int(v) for v in self.kernel_bounds)
        if len(kb) != 3 or any(v < 0 for v in kb):
            raise ValueError(f"ConvSpec: kernel_bounds must be three ints >= 0, got {kb}")
        object.__setattr__(self, "kernel_bounds", kb)
        if self.dilation < 1:
            raise ValueError(f"ConvSpec: dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec: padding must be >= 0, got {self.padding}")

    @property
    def kernel_shape(self) -> tuple[int, int, int]:
        a, b, c = self.kernel_bounds
        return (2 * a + 1, 2 * b + 1, 2 * c + 1)

    @property
    def taps(self) -> int:
        ka, kb, kc = self.kernel_shape
        return ka * kb * kc

    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel_shape

    def output_extent(self, in_extent: tuple[int, int, int]) -> tuple[int, int, int]:
        """Output spatial size; raises when a kernel overruns the padded input."""
        out = []
        for axis, (n, bound) in enumerate(zip(in_extent, self.kernel_bounds)):
            m = n + 2 * self.padding - 2 * self.dilation * bound
            if m < 1:
                raise ValueError(
                    f"ConvSpec: axis {axis} extent {n} with padding {self.padding} "
                    f"cannot fit kernel bound {bound} at dilation {self.dilation} "
                    f"(output extent would be {m})"
                )
            out.append(m)
        return tuple(out)


def receptive_field(specs: list[ConvSpec]) -> tuple[int, int, int]:
    """Voxel extent per axis that can influence one output voxel of a stack."""
    rf = [1, 1, 1]
    for spec in specs:
        for axis, bound in enumerate(spec.kernel_bounds):
            rf[axis] += 2 * spec.dilation * bound
    return tuple(rf)


def _window_view(h_pad: np.ndarray, spec: ConvSpec, out_extent) -> np.ndarray:
    """View of shape (Cin, ka, kb, kc, D', H', W') over the padded input.

    win[c, ti, tj, tk, x, y, z] = h_pad[c, x + l*(2a-ti), y + l*(2b-tj),
    z + l*(2c-tk)], so tap index ti corresponds to kernel offset ti - a.
    """
    a, b, c = spec.kernel_bounds
    l = spec.dilation
    sc, sd, sh, sw = h_pad.strides
    origin = h_pad[:, 2 * l * a :, 2 * l * b :, 2 * l * c :]
    shape = (h_pad.shape[0],) + spec.kernel_shape + tuple(out_extent)
    strides = (sc, -l * sd, -l * sh, -l * sw, sd, sh, sw)
    return as_strided(origin, shape=shape, strides=strides)


def dilated_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Apply the convolution described by ``spec``.

    Args:
        x: input of shape (Cin, D, H, W).
        weight: kernel of shape (F, Cin, 2a+1, 2b+1, 2c+1), tap axes in
            offset order -a..a.
        bias: per-output-channel vector of shape (F,), or None.
        spec: layer geometry; channel counts and kernel shape must match.

    Returns:
        Tensor of shape (F, D', H', W') with D' = D + 2*padding - 2*dilation*a.
    """
    if x.data.ndim != 4 or x.data.shape[0] != spec.in_channels:
        raise ShapeMismatchError("dilated_conv3d input", x.data.shape, (spec.in_channels, "D", "H", "W"))
    if weight.data.shape != spec.weight_shape():
        raise ShapeMismatchError("dilated_conv3d weight", weight.data.shape, spec.weight_shape())
    if bias is not None and bias.data.shape != (spec.out_channels,):
        raise ShapeMismatchError("dilated_conv3d bias", bias.data.shape, (spec.out_channels,))
    if weight.data.dtype != x.data.dtype:
        raise ValueError(
            f"dilated_conv3d: dtype mismatch, input {x.data.dtype} vs weight {weight.data.dtype}"
        )

    cin, d, h, w = x.data.shape
    f = spec.out_channels
    p = spec.padding
    out_extent = spec.output_extent((d, h, w))
    n_vox = int(np.prod(out_extent))

    if p > 0:
        h_pad = np.zeros((cin, d + 2 * p, h + 2 * p, w + 2 * p), dtype=x.data.dtype)
        h_pad[:, p : p + d, p : p + h, p : p + w] = x.data
    else:
        h_pad = np.ascontiguousarray(x.data)

    win = _window_view(h_pad, spec, out_extent)
    cols = win.reshape(cin * spec.taps, n_vox)  # copies: the view is not contiguous
    w_mat = weight.data.reshape(f, cin * spec.taps)
    out2d = w_mat @ cols
    if bias is not None:
        out2d += bias.data[:, None]
    data = out2d.reshape((f,) + out_extent)

    a, b, c = spec.kernel_bounds
    l = spec.dilation
    dp, hp, wp = out_extent

    def bw(g, grads):
        g2d = g.reshape(f, n_vox)
        if bias is not None and bias.requires_grad:
            _accumulate(grads, bias, g2d.sum(axis=1))
        if weight.requires_grad:
            bcols = _window_view(h_pad, spec, out_extent).reshape(cin * spec.taps, n_vox)
            _accumulate(grads, weight, (g2d @ bcols.T).reshape(weight.data.shape))
        if x.requires_grad:
            r = (w_mat.T @ g2d).reshape((cin,) + spec.kernel_shape + out_extent)
            gpad = np.zeros_like(h_pad)
            for ti in range(2 * a + 1):
                s0 = l * (2 * a - ti)
                for tj in range(2 * b + 1):
                    s1 = l * (2 * b - tj)
                    for tk in range(2 * c + 1):
                        s2 = l * (2 * c - tk)
                        gpad[:, s0 : s0 + dp, s1 : s1 + hp, s2 : s2 + wp] += r[:, ti, tj, tk]
            gx = gpad[:, p : p + d, p : p + h, p : p + w]
            _accumulate(grads, x, np.ascontiguousarray(gx))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(data, parents, bw)
