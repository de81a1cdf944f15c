"""The FLSN network and its building blocks.

Blocks are plain functions over a name -> Tensor parameter mapping plus a
name prefix, so the parameter set of a model is fully described by
:func:`param_schema`.

Parameter schema (``cr = max(1, nc // ca_reduction)``; every ``*.bias`` is
shaped (1, C, 1, 1); scalars are (1, 1, 1, 1))::

    ne.head                      conv 3x3 in=1  out=nc        W_1
    ne.carb{1,2}.conv1           conv 3x3 nc -> nc             W_2 / W_5
    ne.carb{1,2}.conv2           conv 3x3 nc -> nc             W_3 / W_6
    ne.carb{1,2}.ca.{down,up}    1x1 bottleneck nc -> cr -> nc W_4 / W_7
    ne.tail                      conv 3x3 nc -> 1              W_8
    stem                         conv 3x3 (2 with NE, else 1) -> nc
    branch{b}.ba.{ll,lh,hl,hh}.ca.{down,up}   per-band channel attention
    branch{b}.ba.{ll,lh,hl,hh}.scale          band weight w_1..w_4
    branch{b}.block{k}.conv5     conv 5x5 nc/2 -> nc
    branch{b}.block{k}.conv3     conv 3x3 nc/2 -> nc
    branch{b}.block{k}.ca.{down,up}
    branch{b}.out                conv 3x3 nc -> 1
    branch{b}.alpha              branch weight
    up                           conv 3x3 1 -> 4, then depth-to-space x2

The noise estimator counts each attention bottleneck as one weighted layer,
which gives the eight layers W_1..W_8 listed above.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, GeometryError
from .tensor import Tensor

Params = Mapping[str, Tensor]

# first letter filters rows, second filters columns; L = [1 1]/sqrt2, H = [-1 1]/sqrt2
HAAR_KERNELS = {
    "ll": 0.5 * np.array([[1.0, 1.0], [1.0, 1.0]]),
    "lh": 0.5 * np.array([[-1.0, -1.0], [1.0, 1.0]]),
    "hl": 0.5 * np.array([[-1.0, 1.0], [-1.0, 1.0]]),
    "hh": 0.5 * np.array([[1.0, -1.0], [-1.0, 1.0]]),
}
BANDS = ("ll", "lh", "hl", "hh")


@dataclass(frozen=True)
class ModelConfig:
    nc: int = 32
    branches: int = 4
    blocks_per_branch: int = 3
    use_noise_estimator: bool = True
    use_bandpass_attention: bool = True
    ca_reduction: int = 4

    def __post_init__(self):
        if self.nc < 2 or self.nc % 2:
            raise ConfigError(f"nc must be a positive even number (the basic block splits channels in half), got {self.nc}")
        if self.branches < 1:
            raise ConfigError(f"branches must be >= 1, got {self.branches}")
        if self.blocks_per_branch < 1:
            raise ConfigError(f"blocks_per_branch must be >= 1, got {self.blocks_per_branch}")
        if self.ca_reduction < 1:
            raise ConfigError(f"ca_reduction must be >= 1, got {self.ca_reduction}")

    @property
    def divisor(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** self.branches

    @property
    def bottleneck(self) -> int:
        return max(1, self.nc // self.ca_reduction)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_entries(name, out_c, in_c, k):
    return [(f"{name}.weight", (out_c, in_c, k, k), "weight"), (f"{name}.bias", (1, out_c, 1, 1), "bias")]


def _ca_entries(prefix, nc, cr):
    return _conv_entries(f"{prefix}.down", cr, nc, 1) + _conv_entries(f"{prefix}.up", nc, cr, 1)


def param_schema(config: ModelConfig) -> list[tuple[str, tuple[int, int, int, int], str]]:
    """Ordered (name, shape, kind) for every learnable tensor; kind drives initialization."""
    nc, cr = config.nc, config.bottleneck
    entries = []
    if config.use_noise_estimator:
        entries += _conv_entries("ne.head", nc, 1, 3)
        for i in (1, 2):
            entries += _conv_entries(f"ne.carb{i}.conv1", nc, nc, 3)
            entries += _conv_entries(f"ne.carb{i}.conv2", nc, nc, 3)
            entries += _ca_entries(f"ne.carb{i}.ca", nc, cr)
        entries += _conv_entries("ne.tail", 1, nc, 3)
    entries += _conv_entries("stem", nc, 2 if config.use_noise_estimator else 1, 3)
    for b in range(1, config.branches + 1):
        if config.use_bandpass_attention:
            for band in BANDS:
                entries += _ca_entries(f"branch{b}.ba.{band}.ca", nc, cr)
                entries.append((f"branch{b}.ba.{band}.scale", (1, 1, 1, 1), "band"))
        for k in range(1, config.blocks_per_branch + 1):
            entries += _conv_entries(f"branch{b}.block{k}.conv5", nc, nc // 2, 5)
            entries += _conv_entries(f"branch{b}.block{k}.conv3", nc, nc // 2, 3)
            entries += _ca_entries(f"branch{b}.block{k}.ca", nc, cr)
        entries += _conv_entries(f"branch{b}.out", 1, nc, 3)
        entries.append((f"branch{b}.alpha", (1, 1, 1, 1), "alpha"))
    entries += _conv_entries("up", 4, 1, 3)
    return entries


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-s, s) kernels with s = sqrt(1 / fan_in), zero biases, alpha = 1/B, band weights 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in param_schema(config):
        if kind == "weight":
            s = math.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
            data = rng.uniform(-s, s, size=shape)
        elif kind == "bias":
            data = np.zeros(shape)
        elif kind == "alpha":
            data = np.full(shape, 1.0 / config.branches)
        else:
            data = np.ones(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _conv(x: Tensor, p: Params, name: str) -> Tensor:
    w = p[f"{name}.weight"]
    return T.conv2d(x, w, p[f"{name}.bias"], stride=1, padding=w.shape[2] // 2)


# ---------------------------------------------------------------- blocks

def channel_attention(x: Tensor, p: Params, prefix: str) -> Tensor:
    """Sigmoid gate (n, c, 1, 1) from a pooled 1x1 bottleneck."""
    expected = p[f"{prefix}.down.weight"].shape[1]
    if x.shape[1] != expected:
        raise DimensionError(f"{prefix}: input has {x.shape[1]} channels, attention expects {expected}")
    z = T.relu(_conv(T.global_avg_pool(x), p, f"{prefix}.down"))
    return T.sigmoid(_conv(z, p, f"{prefix}.up"))


def ca_block(x: Tensor, p: Params, prefix: str, return_attention: bool = False):
    """x + x * a, with a the channel attention of x."""
    a = channel_attention(x, p, prefix)
    out = T.add(x, T.mul(x, a))
    return (out, a) if return_attention else out


def kernel_select(feat: Tensor, p: Params, prefix: str) -> Tensor:
    nc = feat.shape[1]
    if nc % 2:
        raise ConfigError(f"{prefix}: kernel selection needs an even channel count, got {nc}")
    half = nc // 2
    wide = _conv(T.channel_slice(feat, 0, half), p, f"{prefix}.conv5")
    narrow = _conv(T.channel_slice(feat, half, nc), p, f"{prefix}.conv3")
    w = channel_attention(T.add(wide, narrow), p, f"{prefix}.ca")
    return T.add(T.mul(wide, w), T.mul(narrow, 1.0 - w))


def _ne_carb(x: Tensor, p: Params, prefix: str) -> Tensor:
    h = T.relu(T.instance_norm(_conv(x, p, f"{prefix}.conv1")))
    # no norm before the gate: pooling an instance-normalized map gives exactly 0
    h = _conv(h, p, f"{prefix}.conv2")
    return T.add(x, T.mul(h, channel_attention(h, p, f"{prefix}.ca")))


def noise_estimator(frame: Tensor, p: Params) -> tuple[Tensor, Tensor]:
    """Returns (noise map, frame and noise map stacked on the channel axis)."""
    if frame.shape[1] != 1:
        raise DimensionError(f"noise estimator takes single-channel frames, got {frame.shape}")
    h = _conv(frame, p, "ne.head")
    h = _ne_carb(h, p, "ne.carb1")
    h = _ne_carb(h, p, "ne.carb2")
    noise = _conv(h, p, "ne.tail")
    return noise, T.channel_concat(frame, noise)


def haar_analysis(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Single-level orthonormal Haar split into (LL, LH, HL, HH) at half resolution."""
    return tuple(T.haar_band(x, HAAR_KERNELS[b]) for b in BANDS)


def haar_synthesis(ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor) -> Tensor:
    shapes = {t.shape for t in (ll, lh, hl, hh)}
    if len(shapes) != 1:
        raise DimensionError(f"haar_synthesis: band shapes differ: {sorted(shapes)}")
    out = None
    for band, coeffs in zip(BANDS, (ll, lh, hl, hh)):
        part = T.haar_band_transposed(coeffs, HAAR_KERNELS[band])
        out = part if out is None else T.add(out, part)
    return out


def bandpass_attention(
    x: Tensor, p: Params, prefix: str, band_fn: Callable[[Tensor, str], Tensor] | None = None
) -> Tensor:
    """Reweight each Haar sub-band through its own attention block, resynthesize, add x.

    ``band_fn(coeffs, band)`` replaces the per-band attention block (test hook).
    """
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise GeometryError(f"{prefix}: bandpass attention needs even spatial dims, got {h}x{w}")
    acc = None
    for band, coeffs in zip(BANDS, haar_analysis(x)):
        y = band_fn(coeffs, band) if band_fn else ca_block(coeffs, p, f"{prefix}.{band}.ca")
        part = T.mul(T.haar_band_transposed(y, HAAR_KERNELS[band]), p[f"{prefix}.{band}.scale"])
        acc = part if acc is None else T.add(acc, part)
    return T.add(acc, x)


# ---------------------------------------------------------------- network

class FLSN:
    """Single-frame 2x super-resolution network.

    >>> model = FLSN(ModelConfig(nc=4, branches=2, blocks_per_branch=1), seed=0)
    >>> model(Tensor.zeros((1, 1, 16, 16))).shape
    (1, 1, 32, 32)
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = init_params(config, seed)
        expected = [name for name, _, _ in param_schema(config)]
        if list(params) != expected:
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set does not match config: missing {missing}, unexpected {extra}")
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def __call__(self, frame: Tensor) -> Tensor:
        return self.forward(frame)

    def forward(self, frame: Tensor) -> Tensor:
        cfg, p = self.config, self.params
        n, c, h, w = frame.shape
        if c != 1:
            raise DimensionError(f"FLSN takes single-channel frames, got {frame.shape}")
        d = cfg.divisor
        if h % d or w % d:
            raise GeometryError(
                f"input {h}x{w} is not divisible by 2^B = {d} (B = {cfg.branches} branches); crop or pad to a multiple of {d}"
            )
        x = noise_estimator(frame, p)[1] if cfg.use_noise_estimator else frame
        feat = _conv(x, p, "stem")
        residual = None
        for b in range(1, cfg.branches + 1):
            if b > 1:
                feat = T.avg_downsample2(feat)
            f = feat
            if cfg.use_bandpass_attention:
                f = bandpass_attention(f, p, f"branch{b}.ba")
            for k in range(1, cfg.blocks_per_branch + 1):
                f = kernel_select(f, p, f"branch{b}.block{k}")
            f = T.bilinear_upsample(f, 2 ** (b - 1))
            g = T.mul(_conv(f, p, f"branch{b}.out"), p[f"branch{b}.alpha"])
            residual = g if residual is None else T.add(residual, g)
        s = T.add(residual, frame)
        return T.depth_to_space(_conv(s, p, "up"), 2)
