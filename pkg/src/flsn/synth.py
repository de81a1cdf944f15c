"""Synthetic structured-illumination data.

A known high-resolution specimen is illuminated with a sinusoidal pattern
at 3 angles x 5 phases, blurred by a Gaussian PSF, binned 2x2 onto the
camera grid and corrupted with Poisson + Gaussian read noise. Samples are
written as FLT1 files::

    <root>/<split>/sample_00000/{hr.flt, frame_<a>_<p>.flt x 15, meta.txt}
    <root>/manifest.txt     relative sample paths, one per line
"""
from __future__ import annotations

import logging
import math
import os
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, DatasetError, LoadError
from .fileio import read_tensor, write_tensor

log = logging.getLogger(__name__)

DATA_MAX = 65535.0
N_FRAMES = 15
_MASK64 = (1 << 64) - 1
_SPLITS = {"train": 1, "test": 2}


@dataclass
class OpticsConfig:
    psf_sigma_lr: float = 1.0
    pattern_freq: float = 0.2  # cycles per HR pixel
    modulation: float = 0.8
    angles: tuple[float, ...] = (0.0, math.pi / 3, 2 * math.pi / 3)
    phases: tuple[float, ...] = tuple(2 * math.pi * k / 5 for k in range(5))

    def __post_init__(self):
        self.angles = tuple(float(a) for a in self.angles)
        self.phases = tuple(float(p) for p in self.phases)
        if not 0 <= self.modulation <= 1:
            raise ConfigError(f"modulation must lie in [0, 1], got {self.modulation}")
        if not 0 <= self.pattern_freq < 0.5:
            raise ConfigError(f"pattern_freq must be below Nyquist (0.5 cycles/pixel), got {self.pattern_freq}")
        if self.psf_sigma_lr < 0:
            raise ConfigError(f"psf_sigma_lr must be >= 0, got {self.psf_sigma_lr}")
        if len(self.angles) * len(self.phases) != N_FRAMES:
            raise ConfigError(f"need 15 frames per sample, got {len(self.angles)} angles x {len(self.phases)} phases")


REGIME_PHOTONS = {"HE": 2000.0, "LE": 20.0}


@dataclass
class NoiseConfig:
    """Poisson shot noise plus Gaussian read noise (in photon units).

    LE defaults to 1% of the HE photon budget.
    """

    regime: str = "HE"
    photon_scale: float | None = None
    read_sigma: float = 2.0

    def __post_init__(self):
        if self.regime not in REGIME_PHOTONS:
            raise ConfigError(f"regime must be HE or LE, got {self.regime!r}")
        if self.photon_scale is None:
            self.photon_scale = REGIME_PHOTONS[self.regime]
        if self.photon_scale <= 0:
            raise ConfigError(f"photon_scale must be positive, got {self.photon_scale}")
        if self.read_sigma < 0:
            raise ConfigError(f"read_sigma must be >= 0, got {self.read_sigma}")


@dataclass
class SimSample:
    frames: list[np.ndarray]  # 15 x (1, 1, h, w), angle-major, raw 0..65535 scale
    hr: np.ndarray  # (1, 1, 2h, 2w)
    meta: dict[str, str] = field(default_factory=dict)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    s = splitmix64(master & _MASK64)
    for p in path:
        s = splitmix64(s ^ (p & _MASK64))
    return s


def normalize(x):
    return x / DATA_MAX


# ---------------------------------------------------------------- specimen

def _splat(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, weights: np.ndarray):
    """Bilinear deposit of point masses onto img."""
    h, w = img.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        np.add.at(img, (yy[ok], xx[ok]), (weights * wt)[ok])


def gen_ground_truth(seed: int, size: tuple[int, int], style: str = "filaments") -> np.ndarray:
    """Random specimen in [0, 1], shaped (1, 1, H, W)."""
    H, W = size
    if H % 2 or W % 2:
        raise ConfigError(f"ground-truth size must be even, got {H}x{W}")
    rng = np.random.default_rng(seed)
    img = np.zeros((H, W))
    if style == "filaments":
        n_curves = max(3, round(H * W / 1200))
        for _ in range(n_curves):
            n_steps = int(rng.uniform(0.6, 1.6) * max(H, W) / 0.5)
            heading = rng.uniform(0, 2 * math.pi)
            turn = np.cumsum(rng.normal(0, 0.04, n_steps)) + rng.normal(0, 0.01) * np.arange(n_steps)
            theta = heading + turn
            ys = rng.uniform(0, H) + np.cumsum(0.5 * np.sin(theta))
            xs = rng.uniform(0, W) + np.cumsum(0.5 * np.cos(theta))
            _splat(img, ys, xs, np.full(n_steps, rng.uniform(0.5, 1.0)))
        img = gaussian_filter(img, 1.0)
    elif style == "puncta":
        n_spots = max(4, round(H * W / 150))
        _splat(img, rng.uniform(0, H - 1, n_spots), rng.uniform(0, W - 1, n_spots), rng.uniform(0.3, 1.0, n_spots))
        img = gaussian_filter(img, 1.5)
    else:
        raise ConfigError(f"unknown specimen style {style!r}")
    peak = img.max()
    if peak > 0:
        img = img / peak
    return np.clip(img, 0.0, 1.0)[None, None]


# ---------------------------------------------------------------- forward model

def illumination(shape: tuple[int, int], angle: float, phase: float, optics: OpticsConfig) -> np.ndarray:
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    arg = 2 * math.pi * optics.pattern_freq * (x * math.cos(angle) + y * math.sin(angle)) + phase
    return (1 + optics.modulation * np.cos(arg)) / 2


def render_si_frame(gt: np.ndarray, angle: float, phase: float, optics: OpticsConfig) -> np.ndarray:
    """Noise-free camera frame (1, 1, H/2, W/2) in [0, 1] for one illumination setting."""
    gt = np.asarray(gt, dtype=float)
    if gt.ndim != 4 or gt.shape[:2] != (1, 1):
        raise ContractError(f"ground truth must be shaped (1, 1, H, W), got {gt.shape}")
    if gt.min() < 0 or gt.max() > 1:
        raise ContractError(f"ground truth must lie in [0, 1], got [{gt.min()}, {gt.max()}]")
    H, W = gt.shape[2:]
    if H % 2 or W % 2:
        raise ContractError(f"ground truth must have even size, got {H}x{W}")
    emission = gt[0, 0] * illumination((H, W), angle, phase, optics)
    if optics.psf_sigma_lr > 0:
        emission = gaussian_filter(emission, 2 * optics.psf_sigma_lr, mode="reflect")
    frame = emission.reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3))
    return np.clip(frame, 0.0, 1.0)[None, None]


def apply_noise(frame: np.ndarray, noise: NoiseConfig, seed: int) -> np.ndarray:
    """Photon + read noise, scaled to camera units and clamped to [0, 65535]."""
    rng = np.random.default_rng(seed)
    frame = np.asarray(frame, dtype=float)
    counts = rng.poisson(frame * noise.photon_scale).astype(float)
    if noise.read_sigma > 0:
        counts += rng.normal(0.0, noise.read_sigma, size=frame.shape)
    return np.clip(np.rint(counts * DATA_MAX / (noise.photon_scale * 1.2)), 0.0, DATA_MAX)


def make_sample(
    seed: int, lr_size: tuple[int, int], optics: OpticsConfig, noise: NoiseConfig, style: str = "filaments"
) -> SimSample:
    h, w = lr_size
    gt = gen_ground_truth(derive_seed(seed, 0), (2 * h, 2 * w), style)
    frames = []
    for a, angle in enumerate(optics.angles):
        for p, phase in enumerate(optics.phases):
            clean = render_si_frame(gt, angle, phase, optics)
            frames.append(apply_noise(clean, noise, derive_seed(seed, 1, a, p)).astype(np.float32))
    hr = np.rint(gt * DATA_MAX).astype(np.float32)
    meta = {
        "seed": str(seed),
        "style": style,
        "lr_height": str(h),
        "lr_width": str(w),
        "regime": noise.regime,
        "photon_scale": repr(float(noise.photon_scale)),
        "read_sigma": repr(float(noise.read_sigma)),
        "psf_sigma_lr": repr(float(optics.psf_sigma_lr)),
        "pattern_freq": repr(float(optics.pattern_freq)),
        "modulation": repr(float(optics.modulation)),
        "angles": ",".join(repr(a) for a in optics.angles),
        "phases": ",".join(repr(p) for p in optics.phases),
    }
    return SimSample(frames, hr, meta)


# ---------------------------------------------------------------- disk layout

def frame_name(a: int, p: int) -> str:
    return f"frame_{a}_{p}.flt"


def write_sample(sample: SimSample, sample_dir: str | os.PathLike, n_phases: int = 5) -> None:
    if len(sample.frames) != N_FRAMES:
        raise DatasetError(f"a sample holds exactly {N_FRAMES} frames, got {len(sample.frames)}")
    d = Path(sample_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise LoadError(f"cannot create {d}: {e}") from e
    write_tensor(d / "hr.flt", sample.hr)
    for i, frame in enumerate(sample.frames):
        write_tensor(d / frame_name(i // n_phases, i % n_phases), frame)
    text = "".join(f"{k}={v}\n" for k, v in sample.meta.items())
    try:
        (d / "meta.txt").write_text(text, encoding="utf-8")
    except OSError as e:
        raise LoadError(f"cannot write {d / 'meta.txt'}: {e}") from e


_FRAME_RE = re.compile(r"frame_(\d+)_(\d+)\.flt$")


def load_sample(sample_dir: str | os.PathLike) -> SimSample:
    d = Path(sample_dir)
    if not d.is_dir():
        raise LoadError(f"sample directory {d} does not exist")
    found = sorted(
        (int(m.group(1)), int(m.group(2)), p) for p in d.iterdir() if (m := _FRAME_RE.match(p.name))
    )
    if len(found) != N_FRAMES:
        raise DatasetError(f"{d}: expected {N_FRAMES} frame files, found {len(found)}")
    frames = [read_tensor(p) for _, _, p in found]
    hr = read_tensor(d / "hr.flt")
    meta = {}
    meta_path = d / "meta.txt"
    if meta_path.exists():
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    h, w = frames[0].shape[2:]
    if any(f.shape != (1, 1, h, w) for f in frames) or hr.shape != (1, 1, 2 * h, 2 * w):
        raise DatasetError(f"{d}: inconsistent frame/HR shapes")
    return SimSample(frames, hr, meta)


def read_manifest(root: str | os.PathLike, split: str | None = None) -> list[Path]:
    root = Path(root)
    path = root / "manifest.txt"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise LoadError(f"cannot read manifest {path}: {e}") from e
    entries = [ln for ln in lines if ln.strip()]
    if split is not None:
        entries = [e for e in entries if e.split("/")[0] == split]
    return [root / e for e in entries]


def build_dataset(
    n_samples: int,
    split: str,
    optics: OpticsConfig,
    noise: NoiseConfig,
    out_dir: str | os.PathLike,
    seed: int,
    lr_size: tuple[int, int] = (64, 64),
    style: str = "filaments",
) -> Path:
    """Write ``n_samples`` samples under ``out_dir/split`` and refresh the manifest.

    Output bytes are a pure function of the arguments.
    """
    if split not in _SPLITS:
        raise ConfigError(f"split must be one of {sorted(_SPLITS)}, got {split!r}")
    root = Path(out_dir)
    split_dir = root / split
    names = [f"sample_{i:05d}" for i in range(n_samples)]
    if split_dir.exists():
        for stale in split_dir.iterdir():
            if stale.is_dir() and stale.name.startswith("sample_") and stale.name not in names:
                shutil.rmtree(stale)
    for i, name in enumerate(names):
        sample = make_sample(derive_seed(seed, _SPLITS[split], i), lr_size, optics, noise, style)
        write_sample(sample, split_dir / name, n_phases=len(optics.phases))
        log.debug("wrote %s", split_dir / name)

    manifest = root / "manifest.txt"
    keep = []
    if manifest.exists():
        keep = [ln for ln in manifest.read_text(encoding="utf-8").splitlines() if ln and ln.split("/")[0] != split]
    entries = sorted(keep + [f"{split}/{n}" for n in names])
    try:
        manifest.write_text("".join(e + "\n" for e in entries), encoding="utf-8")
    except OSError as e:
        raise LoadError(f"cannot write manifest {manifest}: {e}") from e
    return manifest
