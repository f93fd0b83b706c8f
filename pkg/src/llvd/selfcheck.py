"""Built-in verification suite run by ``llvd selfcheck``."""

from __future__ import annotations

import copy
import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig, load_model_config
from .flops import count_flops, empirical_mac_probe
from .gradcheck import check_directional, check_gradients
from .metrics import LossWeights, composite_loss, psnr, ssim
from .model import (
    build_model,
    checkpoint_bytes,
    decode_frame,
    encode_frame,
    forward_sequence,
    load_checkpoint,
    save_checkpoint,
    _lstm_cell,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def adjoint_error(shape, cout: int, k: int, stride: int, padding: int, seed: int = 0) -> float:
    """|<conv2d(a), b> - <a, conv2d_transpose(b)>| / |<conv2d(a), b>| in float32."""
    rng = np.random.default_rng(seed)
    n, cin, h, w = shape
    a = T.Tensor(rng.standard_normal(shape))
    wt = T.Tensor(rng.standard_normal((cout, cin, k, k)))
    y = T.conv2d(a, wt, None, stride, padding)
    b = T.Tensor(rng.standard_normal(y.shape))
    op = (h + 2 * padding - k) % stride
    at = T.conv2d_transpose(b, wt, None, stride, padding, output_padding=op)
    lhs = float(np.sum(y.data.astype(np.float64) * b.data))
    rhs = float(np.sum(a.data.astype(np.float64) * at.data))
    return abs(lhs - rhs) / abs(lhs)


def _grad_primitives(seed=0) -> float:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    worst = 0.0
    cases = [
        (lambda x, w, b: T.sum_all(T.tanh(T.conv2d(x, w, b, 1, 1))), [r(1, 2, 6, 6), r(3, 2, 3, 3), r(3)]),
        (lambda x, w, b: T.sum_all(T.tanh(T.conv2d(x, w, b, 2, 1))), [r(2, 2, 5, 5), r(2, 2, 3, 3), r(2)]),
        (lambda x, w, b: T.sum_all(T.tanh(T.conv2d_transpose(x, w, b, 2, 1, 1))), [r(1, 2, 3, 3), r(2, 3, 3, 3), r(3)]),
        (lambda x, y: T.sum_all(T.pixel_shuffle(x, 2) * T.pixel_shuffle(y, 2)), [r(1, 8, 2, 3), r(1, 8, 2, 3)]),
        (lambda x, y: T.sum_all(T.pixel_unshuffle(x * y, 2) * T.pixel_unshuffle(x, 2)), [r(1, 2, 4, 4), r(1, 2, 4, 4)]),
        (lambda x, y: T.mean(T.sigmoid(x) * T.tanh(y) + (x - y) / (T.square(y) + 1.0)), [r(1, 2, 3, 3), r(1, 2, 3, 3)]),
        (lambda x, y: T.sum_all(T.concat_channels(T.relu(x), y) * T.concat_channels(y, x)), [r(1, 2, 3, 3) + 0.5, r(1, 2, 3, 3)]),
    ]
    for fn, arrays in cases:
        worst = max(worst, check_gradients(fn, arrays, eps=1e-5))
    return worst


def _grad_lstm_cell(seed=0) -> float:
    cfg = ModelConfig(in_channels=4, stage_widths=(4, 4, 4), lstm_hidden=4, lstm_layers=1)
    model = build_model(cfg, seed).astype(np.float64)
    spec = model.layers("lstm")[0]
    rng = np.random.default_rng(seed)

    def fn(x, h, c, w, b):
        m = copy.copy(model)
        m.params = {**model.params, "lstm0.weight": w, "lstm0.bias": b}
        hn, cn = _lstm_cell(m, spec, x, h, c)
        return T.sum_all(hn * hn) + T.sum_all(cn)

    arrays = [rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 4, 4, 4)),
              rng.standard_normal((1, 4, 4, 4)), model["lstm0.weight"].data * 3, rng.standard_normal(16)]
    return check_gradients(fn, arrays, eps=1e-6, max_entries=60, seed=seed)


def he_scaled_params(model, seed: int = 0) -> list[np.ndarray]:
    """Random float64 parameters with He-scaled weights and small biases.

    Glorot init through fifteen ReLU layers leaves the deepest partials below
    what a finite difference of an O(0.1) loss can resolve, so gradient checks
    run at a point where activations stay O(1).
    """
    rng = np.random.default_rng(seed + 7919)
    out = []
    for name in model.params:
        shape = model[name].shape
        if len(shape) == 4:
            out.append(rng.standard_normal(shape) * np.sqrt(2.0 / np.prod(shape[1:])))
        else:
            out.append(0.1 * rng.standard_normal(shape))
    return out


def llvd_s_gradient_error(seed: int = 0, size: int = 16, frames: int = 3, entries: int = 4,
                          config: ModelConfig | None = None) -> tuple[float, float]:
    """Finite-difference check of the composite loss through a tiny LLVD-S over a short clip.

    Returns (coordinate error, directional error).  The coordinate check
    samples ``entries`` partials per parameter plus each one's largest and
    floors denominators at 1e-4 of the network-wide gradient scale.
    """
    cfg = config or load_model_config("llvd-s-tiny")
    model = build_model(cfg, seed).astype(np.float64)
    names = list(model.params)
    rng = np.random.default_rng(seed)
    noisy = [rng.random((1, cfg.in_channels, size, size)) for _ in range(frames)]
    clean = [rng.random((1, cfg.in_channels, size, size)) for _ in range(frames)]
    weights = LossWeights(0.1, 0.01) if size >= 11 else LossWeights(0.1, 0.0)

    def fn(*ps):
        m = copy.copy(model)
        m.params = dict(zip(names, ps))
        outs, _ = forward_sequence(m, [T.Tensor(f, dtype=np.float64) for f in noisy])
        return composite_loss(outs, [T.Tensor(f, dtype=np.float64) for f in clean], weights)

    arrays = he_scaled_params(model, seed)
    coord = check_gradients(fn, arrays, eps=1e-6, max_entries=entries, seed=seed, global_floor=True)
    direc = check_directional(fn, arrays, directions=4, eps=1e-6, seed=seed)
    return coord, direc


def _shuffle_roundtrip() -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for r in (1, 2, 4):
        x = T.Tensor(rng.standard_normal((2, 3, 8, 8)))
        y = T.Tensor(rng.standard_normal((2, 3 * r * r, 2, 2)))
        worst = max(worst, float(np.max(np.abs(T.pixel_shuffle(T.pixel_unshuffle(x, r), r).data - x.data))),
                    float(np.max(np.abs(T.pixel_unshuffle(T.pixel_shuffle(y, r), r).data - y.data))))
    return worst


def _flop_probe() -> list[tuple[str, int, int]]:
    toy = ModelConfig(use_encoder_decoder=False, lstm_layers=1, lstm_hidden=1, in_channels=1)
    cases = [
        ("llvd-s-tiny@32", load_model_config("llvd-s-tiny"), 32),
        ("lstm-only@16", load_model_config("ablation-lstm-only"), 16),
        ("toy@8", toy, 8),
    ]
    return [(name, count_flops(cfg, s, s).total_macs, empirical_mac_probe(cfg, s, s)) for name, cfg, s in cases]


def _structure() -> str:
    cfg = load_model_config("llvd-s-tiny")
    model = build_model(cfg, 0)
    frame = T.Tensor(np.random.default_rng(0).random((1, 3, 64, 64)))
    with T.no_grad():
        latent, skips = encode_frame(model, frame)
        out = decode_frame(model, latent, skips, frame)
    problems = []
    if latent.shape[2:] != (8, 8):
        problems.append(f"latent {latent.shape}")
    if not (np.all(out.data > 0) and np.all(out.data < 1)):
        problems.append("output outside (0,1)")
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "m.ckpt")
        save_checkpoint(model, p)
        if checkpoint_bytes(load_checkpoint(p)) != checkpoint_bytes(model):
            problems.append("checkpoint round trip")
    return "; ".join(problems)


def run_checks(quick: bool = False) -> list[CheckResult]:
    results: list[CheckResult] = []

    def check(name: str, fn: Callable[[], tuple[bool, str]]):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))

    def grads():
        e = _grad_primitives()
        return e < 1e-4, f"max rel err {e:.2e} (< 1e-4)"

    def lstm():
        e = _grad_lstm_cell()
        return e < 1e-3, f"max rel err {e:.2e} (< 1e-3)"

    def model_grad():
        e, d = llvd_s_gradient_error(entries=1 if quick else 4)
        return max(e, d) < 1e-3, f"coordinate rel err {e:.2e}, directional rel err {d:.2e} (< 1e-3)"

    def shuffle():
        e = _shuffle_roundtrip()
        return e == 0.0, f"max abs diff {e:g}"

    def adjoint():
        errs = [adjoint_error((1, 2, 5, 5), 3, 3, 1, 1), adjoint_error((1, 2, 6, 6), 3, 3, 2, 1),
                adjoint_error((2, 3, 7, 7), 2, 3, 2, 0), adjoint_error((1, 2, 5, 5), 2, 1, 1, 0)]
        return max(errs) <= 1e-5, f"max rel err {max(errs):.2e} (<= 1e-5)"

    def probe():
        rows = _flop_probe()
        bad = [f"{n}: {a} vs {b}" for n, a, b in rows if a != b]
        return not bad, "; ".join(bad) or ", ".join(f"{n}={a}" for n, a, _ in rows)

    def calibration():
        L = count_flops(load_model_config("llvd-l"), 480, 854, pad=True).gflops
        S = count_flops(load_model_config("llvd-s"), 480, 854, pad=True).gflops
        ok = abs(L - 116.5) <= 0.15 * 116.5 and 0.24 <= S / L <= 0.27
        return ok, f"LLVD-L {L:.2f} GFLOPs, S/L {S / L:.4f}"

    def structure():
        problems = _structure()
        return not problems, problems or "latent H/8 (r=2), output in (0,1), checkpoint bit-exact"

    def metrics():
        a = np.full((3, 16, 16), 0.6)
        b = np.full((3, 16, 16), 0.5)
        p = psnr(a, b)
        x = np.random.default_rng(0).random((3, 16, 16))
        s = ssim(x, x)
        z = composite_loss([T.Tensor(x[None])], [T.Tensor(x[None])]).item()
        ok = abs(p - 20.0) < 1e-9 and s == 1.0 and z == 0.0
        return ok, f"psnr {p:.9f} dB, ssim(x,x) {s}, loss(x,x) {z}"

    check("gradients: primitive ops", grads)
    check("gradients: ConvLSTM cell", lstm)
    check("gradients: LLVD-S sequence", model_grad)
    check("pixel shuffle round trip", shuffle)
    check("conv/transposed-conv adjointness", adjoint)
    check("FLOP probe equivalence", probe)
    check("FLOP calibration", calibration)
    check("model structure", structure)
    check("metrics", metrics)
    return results
