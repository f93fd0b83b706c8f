"""Analytic per-layer cost model for any :class:`ModelConfig`.

Convolution cost is k^2 * Cin * Cout MACs per output pixel; a transposed
convolution is charged as the dense convolution it is the adjoint of (k^2 * Cin
* Cout per *input* pixel). Bias adds, activations, LSTM gate arithmetic and
residual adds are tallied separately at one FLOP per output element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ModelConfig
from .model import build_model, denoise_frame, layer_plan
from .tensor import Tensor, count_macs, no_grad


@dataclass(frozen=True)
class FlopEntry:
    name: str
    out_dims: tuple[int, int, int]  # C, H, W
    macs: int
    flops: int  # arithmetic of the MACs under the report's convention
    elementwise: int = 0


@dataclass
class FlopReport:
    entries: list[FlopEntry]
    convention: str
    height: int
    width: int
    padded: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def conv_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def elementwise(self) -> int:
        return sum(e.elementwise for e in self.entries)

    @property
    def total_flops(self) -> int:
        return self.conv_flops + self.elementwise

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def table(self) -> str:
        rows = [("layer", "out (CxHxW)", "MACs", "FLOPs", "elementwise")]
        for e in self.entries:
            rows.append((e.name, "x".join(map(str, e.out_dims)), f"{e.macs:,}", f"{e.flops:,}", f"{e.elementwise:,}"))
        rows.append(("total", "", f"{self.total_macs:,}", f"{self.conv_flops:,}", f"{self.elementwise:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = []
        for i, r in enumerate(rows):
            lines.append("  ".join(c.ljust(widths[j]) if j < 2 else c.rjust(widths[j]) for j, c in enumerate(r)))
            if i == 0 or i == len(rows) - 2:
                lines.append("-" * len(lines[-1]))
        return "\n".join(lines)

    def totals(self) -> dict:
        d = {
            "convention": self.convention,
            "height": self.height,
            "width": self.width,
            "total_macs": self.total_macs,
            "conv_flops": self.conv_flops,
            "elementwise_flops": self.elementwise,
            "total_flops": self.total_flops,
            "gflops": self.gflops,
        }
        if self.padded:
            d["padded_height"], d["padded_width"] = self.padded
        return d


def conv_macs(cin: int, cout: int, k: int, out_h: int, out_w: int) -> int:
    """Multiply-accumulates of one dense k x k convolution producing cout x out_h x out_w."""
    return k * k * cin * cout * out_h * out_w


def count_flops(config: ModelConfig, height: int, width: int, convention: str | None = None,
                pad: bool = False) -> FlopReport:
    """Per-layer cost of denoising one frame of ``height`` x ``width``.

    With ``pad=True`` dims that are not a multiple of the model's spatial
    multiple are rounded up first, which is what the network has to execute.
    """
    convention = convention or config.flop_convention
    if convention not in ("mac", "flop2"):
        raise ConfigError(f"unknown convention {convention!r}")
    m = config.spatial_multiple
    h, w = height, width
    if h % m or w % m:
        if not pad:
            raise ConfigError(f"dims {height}x{width} must be divisible by {m} (or count with pad=True)")
        h, w = -(-h // m) * m, -(-w // m) * m
    factor = 2 if convention == "flop2" else 1
    r = config.shuffle_factor
    c_img = config.in_channels * r * r
    base_h, base_w = h // r, w // r

    entries: list[FlopEntry] = []

    def add(name, dims, macs, elementwise):
        entries.append(FlopEntry(name, dims, int(macs), int(macs) * factor, int(elementwise)))

    if r > 1:
        add("pixel_unshuffle", (c_img, base_h, base_w), 0, 0)
    k = config.kernel_size
    for spec in layer_plan(config):
        oh, ow = base_h // spec.level, base_w // spec.level
        area = oh * ow
        s = spec.stride if spec.kind == "tconv" else 1
        if spec.name.startswith("dec") and spec.name.endswith(".0"):
            # the encoder skip is added to the decoder stage input
            add(f"skip{spec.name[3]}", (spec.cin, oh // s, ow // s), 0, spec.cin * (oh // s) * (ow // s))
        if spec.kind == "lstm":
            hid = spec.cout
            macs = conv_macs(spec.cin + hid, 4 * hid, k, oh, ow)
            # bias 4h, activations 4h, c' = f*c + i*g (3h), l' = o*tanh(c') (2h)
            add(spec.name, (hid, oh, ow), macs, (4 + 4 + 3 + 2) * hid * area)
            continue
        macs = conv_macs(spec.cin, spec.cout, spec.k, oh // s, ow // s)
        add(spec.name, (spec.cout, oh, ow), macs, spec.cout * area * (2 if spec.relu else 1))
    add("residual_add", (c_img, base_h, base_w), 0, c_img * base_h * base_w)
    if r > 1:
        add("pixel_shuffle", (config.in_channels, h, w), 0, 0)
    add("sigmoid", (config.in_channels, h, w), 0, config.in_channels * h * w)
    return FlopReport(entries, convention, height, width, padded=(h, w) if (h, w) != (height, width) else None)


def empirical_mac_probe(config: ModelConfig, height: int, width: int, seed: int = 0) -> int:
    """Run one frame through the model with instrumented convolution kernels; returns executed MACs."""
    if height > 64 or width > 64:
        raise ValueError("probe resolution is limited to 64x64")
    model = build_model(config, seed)
    frame = Tensor(np.random.default_rng(seed).random((1, config.in_channels, height, width)))
    with no_grad(), count_macs() as counter:
        denoise_frame(model, frame)
    return counter.macs
