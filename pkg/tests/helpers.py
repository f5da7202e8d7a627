"""Shared test utilities: independent oracles and tiny fixtures."""

import numpy as np

from dmsn.ops import ConvLayerSpec, conv_output_shape


def naive_conv3d(x, spec: ConvLayerSpec, weights, bias=None):
    """Direct-summation convolution oracle: loop every output element and sum
    its window product.  Deliberately independent of the library kernels."""
    n, co, to, ho, wo = conv_output_shape(x.shape, spec)
    pt, ph, pw = spec.padding
    st, sh, sw = spec.stride
    kt, kh, kw = spec.kernel
    xp = np.pad(x.astype(np.float64),
                ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    w64 = weights.astype(np.float64)
    out = np.zeros((n, co, to, ho, wo))
    for b in range(n):
        for o in range(co):
            for ti in range(to):
                for hi in range(ho):
                    for wi in range(wo):
                        window = xp[b, :,
                                    ti * st:ti * st + kt,
                                    hi * sh:hi * sh + kh,
                                    wi * sw:wi * sw + kw]
                        out[b, o, ti, hi, wi] = np.sum(window * w64[o])
    if bias is not None:
        out += bias.astype(np.float64)[None, :, None, None, None]
    return out.astype(x.dtype)


def random_conv_case(rng, dtype=np.float32, temporal=False, spatial=False):
    """A random micro conv geometry plus matching input/weights."""
    in_c = int(rng.integers(1, 4))
    out_c = int(rng.integers(1, 5))
    if temporal:
        kernel = (int(rng.integers(1, 4)), 1, 1)
    elif spatial:
        k = int(rng.integers(1, 4))
        kernel = (1, k, k)
    else:
        kernel = tuple(int(rng.integers(1, 4)) for _ in range(3))
    stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
    padding = tuple(int(rng.integers(0, 2)) for _ in range(3))
    spec = ConvLayerSpec(in_c, out_c, kernel, stride, padding)
    t = int(rng.integers(kernel[0], kernel[0] + 4))
    h = int(rng.integers(kernel[1], kernel[1] + 5))
    w = int(rng.integers(kernel[2], kernel[2] + 5))
    x = rng.normal(size=(int(rng.integers(1, 3)), in_c, t, h, w)).astype(dtype)
    weights = rng.normal(size=spec.weight_shape).astype(dtype)
    return spec, x, weights
