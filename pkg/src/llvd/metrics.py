"""PSNR, SSIM and the composite MSE + L1 + (1 - SSIM) training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 3")
        if self.peak <= 0:
            raise ValueError("peak must be positive")


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB over all elements; ``inf`` when the inputs match."""
    a, b = _array(a).astype(np.float64), _array(b).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: dims {a.shape} and {b.shape} differ")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_per_frame(a, b, peak: float = 1.0) -> list[float]:
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: dims {a.shape} and {b.shape} differ")
    return [psnr(x, y, peak) for x, y in zip(a, b)]


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _blur(x: Tensor, window: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = T.conv2d(T.reshape(x, (n * c, 1, h, w)), window, None, stride=1, padding=0)
    return T.reshape(y, (n, c) + y.shape[2:])


def ssim_map(a: Tensor, b: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """Per-pixel, per-channel SSIM over valid Gaussian windows; inputs are [N, C, H, W]."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim: dims {a.shape} and {b.shape} differ")
    if a.ndim != 4:
        raise ShapeError(f"ssim expects [N, C, H, W], got {a.shape}")
    if min(a.shape[2:]) < params.window_size:
        raise ShapeError(f"ssim: frame {a.shape[2]}x{a.shape[3]} is smaller than the {params.window_size} window")
    win = Tensor._wrap(gaussian_window(params.window_size, params.window_sigma).astype(a.dtype)[None, None])
    c1 = (params.k1 * params.peak) ** 2
    c2 = (params.k2 * params.peak) ** 2
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    mu_ab = mu_a * mu_b
    var_a = _blur(a * a, win) - mu_a * mu_a
    var_b = _blur(b * b, win) - mu_b * mu_b
    cov = _blur(a * b, win) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, params: SsimParams = SsimParams()):
    """Mean SSIM. Returns a scalar Tensor for Tensor inputs, a float otherwise."""
    as_float = not (isinstance(a, Tensor) or isinstance(b, Tensor))
    ta, tb = _as4d(a), _as4d(b)
    if as_float:
        with T.no_grad():
            return float(T.mean(ssim_map(ta, tb, params)).data)
    return T.mean(ssim_map(ta, tb, params))


def ssim_per_frame(a, b, params: SsimParams = SsimParams()) -> list[float]:
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: dims {a.shape} and {b.shape} differ")
    return [ssim(x, y, params) for x, y in zip(a, b)]


def _as4d(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=np.asarray(x).dtype
                                                if np.asarray(x).dtype.kind == "f" else None)
    if t.ndim == 3:
        t = T.reshape(t, (1,) + t.shape)
    elif t.ndim == 2:
        t = T.reshape(t, (1, 1) + t.shape)
    return t


def _stack(frames) -> Tensor:
    if isinstance(frames, Tensor):
        return frames
    frames = list(frames)
    if not frames:
        raise ValueError("empty sequence")
    return frames[0] if len(frames) == 1 else T.concat([_as4d(f) for f in frames], axis=0)


def composite_loss(pred: Sequence[Tensor] | Tensor, gt: Sequence[Tensor] | Tensor,
                   weights: LossWeights = LossWeights(), ssim_params: SsimParams = SsimParams()) -> Tensor:
    """MSE + lambda1 * MAE + lambda2 * (1 - SSIM), each a mean over frames and pixels.

    ``pred`` and ``gt`` are equal-length lists of [N, C, H, W] frames (or one
    pre-stacked tensor). The SSIM term is skipped entirely when lambda2 is 0.
    """
    if not isinstance(pred, Tensor) and not isinstance(gt, Tensor) and len(pred) != len(gt):
        raise ValueError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    p, g = _stack(pred), _stack(gt)
    if p.shape != g.shape:
        raise ShapeError(f"loss: dims {p.shape} and {g.shape} differ")
    diff = p - g
    loss = T.mean(T.square(diff))
    if weights.lambda1:
        loss = loss + weights.lambda1 * T.mean(T.absolute(diff))
    if weights.lambda2:
        loss = loss + weights.lambda2 * (1.0 - T.mean(ssim_map(p, g, ssim_params)))
    return loss
