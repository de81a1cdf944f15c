"""RMSE / SSIM evaluation and model cost accounting."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DimensionError, GeometryError, LoadError
from .model import FLSN
from .synth import DATA_MAX, N_FRAMES, SimSample, load_sample, normalize
from .tensor import Tensor

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def rmse(pred, target) -> float:
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise DimensionError(f"rmse: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _gauss_window() -> np.ndarray:
    r = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    a = sliding_window_view(img, len(g), axis=-2) @ g
    return sliding_window_view(a, len(g), axis=-1) @ g


def ssim(pred, target, data_range: float = DATA_MAX) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5).

    Rank-4 inputs are scored per (sample, channel) image and averaged.
    """
    x, y = _arr(pred), _arr(target)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: {x.shape} vs {y.shape}")
    if x.shape[-1] < SSIM_WIN or x.shape[-2] < SSIM_WIN:
        raise GeometryError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape[-2]}x{x.shape[-1]}")
    g = _gauss_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def count_params(model: FLSN) -> int:
    return int(sum(t.size for t in model.parameters()))


def count_flops(model: FLSN, input_size: tuple[int, int], batch: int = 1) -> int:
    """Floating-point operations of one forward pass on a (batch, 1, h, w) frame.

    Counted by tracing a forward pass on zeros. Conventions: a multiply-add
    is 2 ops, so a conv costs 2*out*in_c*kh*kw plus out for the bias; the
    fixed Haar filters count the same way. Pointwise add/mul/scale/relu/abs
    cost 1 per element, sigmoid 4, instance norm 5, pooling and 2x2 average
    1 per input element, bilinear upsampling 7 per output element; channel
    slicing, concatenation and depth-to-space are free.
    """
    with T.no_grad(), T.count_flops() as counter:
        model(Tensor(np.zeros((batch, 1) + tuple(input_size)), dtype=np.float32))
    return counter.total


def flop_breakdown(model: FLSN, input_size: tuple[int, int]) -> dict[str, int]:
    with T.no_grad(), T.count_flops() as counter:
        model(Tensor(np.zeros((1, 1) + tuple(input_size)), dtype=np.float32))
    return dict(counter.by_op)


def bilinear_baseline(frame: Tensor) -> Tensor:
    """Reference "model": plain 2x bilinear upsampling of the input."""
    return T.bilinear_upsample(frame, 2)


@dataclass
class EvalRow:
    sample: str
    frame: int
    rmse: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    param_count: int | None = None
    flop_count: int | None = None

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([r.rmse for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def write_csv(self, path: str | os.PathLike) -> None:
        try:
            with open(path, "w", encoding="utf-8", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["sample", "frame", "rmse", "ssim"])
                for r in self.rows:
                    w.writerow([r.sample, r.frame, repr(r.rmse), repr(r.ssim)])
                w.writerow(["ALL", "-", repr(self.mean_rmse), repr(self.mean_ssim)])
        except OSError as e:
            raise LoadError(f"cannot write report {path}: {e}") from e


def _resolve_frames(frames) -> list[int]:
    if frames is None or frames == "all":
        return list(range(N_FRAMES))
    idx = sorted(set(int(i) for i in frames))
    if not idx or idx[0] < 0 or idx[-1] >= N_FRAMES:
        raise ValueError(f"frame indices must lie in [0, {N_FRAMES}), got {idx}")
    return idx


def evaluate(
    model: Callable[[Tensor], Tensor],
    dataset: Iterable[str | os.PathLike | tuple[str, SimSample]],
    report_path: str | os.PathLike | None = None,
    frames: Sequence[int] | str | None = "all",
) -> EvalReport:
    """Score ``model`` on every selected frame of every sample.

    ``dataset`` yields sample directories or (label, SimSample) pairs.
    Predictions are denormalized to the 0..65535 scale before scoring.
    """
    idx = _resolve_frames(frames)
    report = EvalReport()
    if isinstance(model, FLSN):
        report.param_count = count_params(model)
    for item in dataset:
        if isinstance(item, tuple):
            label, sample = item
        else:
            p = Path(item)
            label, sample = f"{p.parent.name}/{p.name}", load_sample(p)
        batch = np.concatenate([normalize(sample.frames[i].astype(np.float32)) for i in idx])
        with T.no_grad():
            pred = model(Tensor(batch, dtype=np.float32)).data.astype(np.float64) * DATA_MAX
        hr = sample.hr.astype(np.float64)
        if pred.shape[2:] != hr.shape[2:]:
            raise DimensionError(f"{label}: prediction {pred.shape[2:]} vs reference {hr.shape[2:]}")
        for k, i in enumerate(idx):
            report.rows.append(EvalRow(label, i, rmse(pred[k : k + 1], hr), ssim(pred[k : k + 1], hr, DATA_MAX)))
    if report_path is not None:
        report.write_csv(report_path)
    return report
