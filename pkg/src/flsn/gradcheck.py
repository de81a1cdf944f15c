"""Finite-difference audit of every differentiable op and of a small FLSN.

Each case builds float64 inputs, reduces the op output to a scalar through
a fixed random projection, and compares backprop against central
differences with :func:`flsn.tensor.grad_check`.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .model import FLSN, HAAR_KERNELS, ModelConfig, bandpass_attention, ca_block, init_params, kernel_select, noise_estimator
from .tensor import Tensor

TOLERANCE = 1e-3
E2E_CONFIG = ModelConfig(nc=4, branches=2, blocks_per_branch=1)
E2E_SIZE = 16

Case = tuple[str, Callable[..., Tensor], list[Tensor]]


def _away_from_zero(rng, shape):
    """Values with |v| in [0.2, 1]: keeps relu/abs clear of their kinks."""
    return rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _projected(op: Callable[..., Tensor], out_shape, rng) -> Callable[..., Tensor]:
    w = Tensor(rng.normal(size=out_shape))
    return lambda *xs: T.sum(T.mul(op(*xs), w))


def _cases(rng: np.random.Generator) -> Iterator[Case]:
    def t(*shape, kinkless=False):
        return Tensor(_away_from_zero(rng, shape) if kinkless else rng.normal(size=shape))

    def case(name, op, inputs):
        with T.no_grad():
            shape = op(*inputs).shape
        return name, _projected(op, shape, rng), inputs

    yield case("conv2d", lambda x, k, b: T.conv2d(x, k, b, stride=1, padding=1), [t(2, 3, 7, 6), t(4, 3, 3, 3), t(1, 4, 1, 1)])
    yield case("conv2d/stride2", lambda x, k: T.conv2d(x, k, stride=2, padding=2), [t(1, 2, 9, 8), t(3, 2, 5, 5)])
    yield case("conv2d_transposed", lambda x, k: T.conv2d_transposed(x, k, stride=2), [t(2, 3, 4, 5), t(3, 2, 3, 3)])
    yield case("conv2d_transposed/pad", lambda x, k: T.conv2d_transposed(x, k, stride=1, padding=1), [t(1, 2, 5, 5), t(2, 3, 3, 3)])
    yield case("global_avg_pool", T.global_avg_pool, [t(2, 3, 5, 4)])
    yield case("instance_norm", T.instance_norm, [t(2, 3, 5, 4)])
    yield case("relu", T.relu, [t(2, 2, 5, 5, kinkless=True)])
    yield case("sigmoid", T.sigmoid, [t(2, 2, 5, 5)])
    yield case("abs", T.abs, [t(2, 2, 5, 5, kinkless=True)])
    yield case("scale", lambda x: T.scale(x, -2.5), [t(1, 2, 4, 4)])
    yield case("add_scalar", lambda x: T.add_scalar(x, 0.75), [t(1, 2, 4, 4)])
    yield case("add/broadcast", T.add, [t(2, 3, 4, 4), t(2, 3, 1, 1)])
    yield case("sub", T.sub, [t(2, 3, 4, 4), t(2, 3, 4, 4)])
    yield case("mul/broadcast", T.mul, [t(2, 3, 4, 4), t(1, 1, 1, 1)])
    yield case("channel_concat", T.channel_concat, [t(2, 2, 4, 4), t(2, 3, 4, 4)])
    yield case("channel_slice", lambda x: T.channel_slice(x, 1, 3), [t(2, 4, 4, 4)])
    yield case("avg_downsample2", T.avg_downsample2, [t(2, 2, 6, 8)])
    yield case("bilinear_upsample/x2", lambda x: T.bilinear_upsample(x, 2), [t(1, 2, 4, 5)])
    yield case("bilinear_upsample/x4", lambda x: T.bilinear_upsample(x, 4), [t(1, 1, 3, 3)])
    yield case("depth_to_space", lambda x: T.depth_to_space(x, 2), [t(2, 8, 3, 3)])
    for band, k in HAAR_KERNELS.items():
        yield case(f"haar_band/{band}", lambda x, k=k: T.haar_band(x, k), [t(1, 2, 6, 4)])
        yield case(f"haar_band_transposed/{band}", lambda y, k=k: T.haar_band_transposed(y, k), [t(1, 2, 3, 2)])
    yield "sum", T.sum, [t(2, 3, 3, 3)]
    yield "mean", lambda x: T.mean(T.mul(x, x)), [t(2, 3, 3, 3)]

    p = init_params(E2E_CONFIG, seed=int(rng.integers(2**31)))
    for name, tensor in p.items():
        if name.endswith(".bias"):
            tensor.data[:] = rng.normal(scale=0.1, size=tensor.shape)

    def block(name, prefix, fn, x):
        yield case(name, lambda x, *ws: fn(x), [x] + [w for n, w in p.items() if n.startswith(prefix)])

    yield from block("ca_block", "branch1.block1.ca.", lambda x: ca_block(x, p, "branch1.block1.ca"), t(1, 4, 6, 6))
    yield from block("kernel_select", "branch1.block1.", lambda x: kernel_select(x, p, "branch1.block1"), t(1, 4, 6, 6))
    yield from block("bandpass_attention", "branch1.ba.", lambda x: bandpass_attention(x, p, "branch1.ba"), t(1, 4, 6, 6))
    yield from block("noise_estimator", "ne.", lambda x: noise_estimator(x, p)[0], Tensor(rng.uniform(size=(1, 1, 8, 8))))


def end_to_end_case(seed: int = 0) -> Case:
    rng = np.random.default_rng(seed)
    model = FLSN(E2E_CONFIG, seed=seed)
    frame = Tensor(rng.uniform(size=(1, 1, E2E_SIZE, E2E_SIZE)))
    target = Tensor(rng.uniform(size=(1, 1, 2 * E2E_SIZE, 2 * E2E_SIZE)))
    fn = lambda *ws: T.mean(T.abs(T.sub(model(frame), target)))  # noqa: E731
    return "flsn/end-to-end", fn, model.parameters()


def run(samples: int = 50, seed: int = 0, end_to_end: bool = True, report: Callable[[str, float], None] | None = None):
    """Return [(case name, worst relative error)] for all cases, in float64."""
    results = []
    with T.precision(np.float64):
        rng = np.random.default_rng(seed)
        cases = list(_cases(rng))
        if end_to_end:
            cases.append(end_to_end_case(seed))
        for name, fn, inputs in cases:
            err = T.grad_check(fn, inputs, samples=samples, seed=seed)
            results.append((name, err))
            if report:
                report(name, err)
    return results
