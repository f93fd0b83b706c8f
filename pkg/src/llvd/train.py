"""Adam training with full backpropagation through time, and evaluation reports."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import MODEL_KEYS, ConfigError, _coerce, model_config_from_pairs, parse_pairs, read_config_text
from .data import (
    VideoSequence,
    add_awgn,
    load_sequence,
    mirror_extend,
    pack_bayer,
    random_crop,
    read_manifest,
    rng_for,
)
from .metrics import LossWeights, SsimParams, composite_loss, psnr, ssim
from .model import Model, denoise_sequence, forward_sequence, save_checkpoint
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    sequence_length: int = 25
    sigma_range: tuple[float, ...] = (10.0, 20.0, 30.0, 40.0, 50.0)
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    loss_weights: LossWeights = LossWeights()
    crop_size: int = 128
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.sequence_length < 1:
            raise ConfigError("batch_size and sequence_length must be >= 1")
        if not self.sigma_range or min(self.sigma_range) < 0:
            raise ConfigError("sigma_range must list non-negative noise levels")
        if self.steps < 0 or self.checkpoint_every < 0 or self.crop_size < 0 or self.grad_clip < 0:
            raise ConfigError("steps, checkpoint_every, crop_size and grad_clip must be >= 0")


TRAIN_KEYS = {
    "learning_rate": float,
    "batch_size": int,
    "sequence_length": int,
    "sigma_range": "floats",
    "steps": int,
    "seed": int,
    "checkpoint_every": int,
    "lambda1": float,
    "lambda2": float,
    "crop_size": int,
    "grad_clip": float,
}


def load_train_config(path):
    """Parse a combined model + training config file -> (ModelConfig, TrainConfig)."""
    text, origin = read_config_text(path)
    pairs = parse_pairs(text, origin)
    unknown = set(pairs) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"{origin}: unknown keys {sorted(unknown)}")
    tk = {k: _coerce(v, TRAIN_KEYS[k], k) for k, v in pairs.items() if k in TRAIN_KEYS}
    weights = LossWeights(tk.pop("lambda1", 0.1), tk.pop("lambda2", 0.01))
    return model_config_from_pairs(pairs), TrainConfig(loss_weights=weights, **tk)


# ------------------------------------------------------------------------ Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """One bias-corrected Adam update; returns (new_params, state)."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter {missing[0]!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1**state.t, 1 - b2**state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - step).astype(p.dtype)
    return out, state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        grads = {k: g * g.dtype.type(s) for k, g in grads.items()}
    return grads, norm


# -------------------------------------------------------------------- training


@dataclass
class TrainRecord:
    step: int
    loss: float
    wall_ms: float

    def line(self) -> str:
        return f"{self.step} {self.loss:.8g} {self.wall_ms:.1f}"


def _load_dataset(data) -> list[VideoSequence]:
    if isinstance(data, VideoSequence):
        return [data]
    if isinstance(data, (str, Path)):
        return [load_sequence(e.directory, e.layout) for e in read_manifest(data)]
    data = list(data)
    if not data:
        raise TrainingError("empty dataset")
    return data


def sample_batch(dataset: list[VideoSequence], cfg: TrainConfig, step: int):
    """Clean/noisy batches as arrays [T, B, C, H, W] (Bayer packed to 4 channels).

    Each item's randomness is keyed by (seed, step, item) so batches do not
    depend on what was sampled before. The noise level is used here only.
    """
    rng = rng_for(cfg.seed, step, 2)
    clean, noisy = [], []
    for b in range(cfg.batch_size):
        stream = step * cfg.batch_size + b
        seq = dataset[int(rng.integers(len(dataset)))]
        L = cfg.sequence_length
        if len(seq) < L:
            seq = mirror_extend(seq, L)
        elif len(seq) > L:
            start = int(rng.integers(len(seq) - L + 1))
            seq = seq.replace(seq.frames[start : start + L])
        if cfg.crop_size and cfg.crop_size < min(seq.height, seq.width):
            seq = random_crop(seq, cfg.crop_size, seq.layout == "bayer_rggb", cfg.seed, stream)
        sigma = float(cfg.sigma_range[int(rng.integers(len(cfg.sigma_range)))])
        y = add_awgn(seq, sigma, cfg.seed, stream)
        x, n = seq.frames, y.frames
        if seq.layout == "bayer_rggb":
            x, n = pack_bayer(x), pack_bayer(n)
        clean.append(x)
        noisy.append(n)
    shapes = {c.shape for c in clean}
    if len(shapes) > 1:
        raise TrainingError(f"batch items have different dims {sorted(shapes)}; set crop_size")
    return np.stack(clean, axis=1), np.stack(noisy, axis=1)


def train_step(model: Model, clean: np.ndarray, noisy: np.ndarray, cfg: TrainConfig,
               state: OptimizerState) -> tuple[Model, float]:
    dtype = model.dtype
    with Tape() as tape:
        outs, _ = forward_sequence(model, [Tensor(f, dtype=dtype) for f in noisy])
        loss = composite_loss(outs, [Tensor(f, dtype=dtype) for f in clean], cfg.loss_weights)
    value = loss.item()
    if not math.isfinite(value):
        tape.reset()
        return model, value
    grads = backward(tape, loss)
    by_name = {name: grads[t].data for name, t in model.params.items()}
    by_name, _ = clip_by_global_norm(by_name, cfg.grad_clip)
    new, _ = adam_step({k: t.data for k, t in model.params.items()}, by_name, state, cfg.learning_rate)
    return model.with_params(new), value


def train(model: Model, cfg: TrainConfig, data, out=None, log_path=None,
          state: OptimizerState | None = None,
          on_step: Callable[[TrainRecord], None] | None = None) -> tuple[Model, list[TrainRecord]]:
    """Run ``cfg.steps`` optimisation steps; returns the trained model and per-step records.

    ``data`` is a manifest path, a VideoSequence or a list of them. When ``out``
    is given a checkpoint is written every ``checkpoint_every`` steps and at the
    end; a non-finite loss aborts with the last good checkpoint left in place.
    """
    dataset = _load_dataset(data)
    state = state or OptimizerState()
    records: list[TrainRecord] = []
    logf = open(log_path, "a") if log_path else None
    try:
        if out is not None:
            save_checkpoint(model, out)
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            clean, noisy = sample_batch(dataset, cfg, step)
            new_model, loss = train_step(model, clean, noisy, cfg, state)
            if not math.isfinite(loss):
                if out is not None:
                    save_checkpoint(model, out)
                raise TrainingError(f"non-finite loss at step {step}; kept last good checkpoint")
            model = new_model
            rec = TrainRecord(step, loss, (time.perf_counter() - t0) * 1e3)
            records.append(rec)
            if logf:
                logf.write(rec.line() + "\n")
                logf.flush()
            if on_step:
                on_step(rec)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, out)
        if out is not None:
            save_checkpoint(model, out)
    finally:
        if logf:
            logf.close()
    return model, records


# ------------------------------------------------------------------ evaluation


@dataclass
class SequenceMetrics:
    id: str
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


@dataclass
class MetricsReport:
    sequences: list[SequenceMetrics]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.mean_psnr for s in self.sequences]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.mean_ssim for s in self.sequences]))

    def to_text(self) -> str:
        lines = ["# sequence frame psnr_db ssim"]
        for s in self.sequences:
            for i, (p, q) in enumerate(zip(s.psnr, s.ssim)):
                lines.append(f"{s.id} {i} {_fmt(p)} {q:.6f}")
            lines.append(f"{s.id} mean {_fmt(s.mean_psnr)} {s.mean_ssim:.6f}")
        lines.append(f"all mean {_fmt(self.mean_psnr)} {self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "mean_psnr_db": _jsonable(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "sequences": [
                {
                    "id": s.id,
                    "mean_psnr_db": _jsonable(s.mean_psnr),
                    "mean_ssim": s.mean_ssim,
                    "frames": [{"index": i, "psnr_db": _jsonable(p), "ssim": q}
                               for i, (p, q) in enumerate(zip(s.psnr, s.ssim))],
                }
                for s in self.sequences
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"


def _jsonable(x: float):
    return "inf" if math.isinf(x) else x


def evaluate(model, noisy: Sequence[VideoSequence], clean: Sequence[VideoSequence],
             ssim_params: SsimParams = SsimParams(), ids: Sequence[str] | None = None) -> MetricsReport:
    """Per-frame PSNR/SSIM of denoised outputs (clamped to [0, 1]) against clean frames.

    ``model`` is a :class:`Model` or any callable mapping a VideoSequence to its
    restored VideoSequence.
    """
    noisy, clean = list(noisy), list(clean)
    if len(noisy) != len(clean):
        raise ValueError(f"{len(noisy)} noisy sequences but {len(clean)} clean ones")
    results = []
    for k, (y, x) in enumerate(zip(noisy, clean)):
        if len(y) != len(x) or y.frames.shape != x.frames.shape:
            raise ValueError(f"sequence {k}: noisy {y.frames.shape} and clean {x.frames.shape} do not pair")
        out = denoise_sequence(model, y)[0] if isinstance(model, Model) else model(y)
        pred = np.clip(out.frames, 0.0, 1.0)
        ps = [psnr(p, c) for p, c in zip(pred, x.frames)]
        ss = [ssim(p, c, ssim_params) for p, c in zip(pred, x.frames)]
        results.append(SequenceMetrics(ids[k] if ids else str(k), ps, ss))
    return MetricsReport(results)
