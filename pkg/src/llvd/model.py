"""LLVD network: spatial encoder, latent ConvLSTM recurrence, spatial decoder.

Every frame goes through ``encode_frame -> recurrence_step -> decode_frame``.
Only the recurrent state crosses frame boundaries, so a sequence can be
processed in arbitrary chunks with identical results.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .config import ConfigError, ModelConfig, model_config_to_text, model_config_from_pairs, parse_pairs
from .data import VideoSequence, pack_bayer, unpack_bayer
from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    conv2d_transpose,
    no_grad,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    sigmoid,
    split_channels,
    tanh,
)

CKPT_MAGIC = b"LLVC"
STATE_MAGIC = b"LLVS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | tconv | lstm
    cin: int
    cout: int
    k: int
    stride: int = 1
    relu: bool = True
    # spatial divisor of the layer's output relative to the (unshuffled) input
    level: int = 1

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "tconv":
            return (self.cin, self.cout, self.k, self.k)
        if self.kind == "lstm":
            return (4 * self.cout, self.cin + self.cout, self.k, self.k)
        return (self.cout, self.cin, self.k, self.k)

    def bias_shape(self) -> tuple[int, ...]:
        return (4 * self.cout,) if self.kind == "lstm" else (self.cout,)


def layer_plan(cfg: ModelConfig) -> list[LayerSpec]:
    """Ordered layer list implied by a config; parameter shapes and FLOP counts derive from it."""
    r2 = cfg.shuffle_factor**2
    c_img = cfg.in_channels * r2
    k = cfg.kernel_size
    plan: list[LayerSpec] = []
    if cfg.use_encoder_decoder:
        w = cfg.stage_widths
        cin, level = c_img, 1
        for s in range(3):
            for i in range(5):
                down = i == 4 and s < 2
                plan.append(LayerSpec(f"enc{s + 1}.{i}", "conv", cin if i == 0 else w[s], w[s], k,
                                      stride=2 if down else 1, level=level * 2 if down else level))
            cin = w[s]
            level = min(level * 2, 4)
        latent = w[2]
        for j in range(cfg.lstm_layers):
            plan.append(LayerSpec(f"lstm{j}", "lstm", latent if j == 0 else cfg.lstm_hidden, cfg.lstm_hidden, k,
                                  relu=False, level=4))
        level = 4
        for s in (2, 1, 0):
            for i in range(5):
                up = i == 0 and s < 2
                if up:
                    level //= 2
                last = i == 4
                cout = (w[s - 1] if s else c_img) if last else w[s]
                plan.append(LayerSpec(f"dec{s + 1}.{i}", "tconv" if up else "conv", w[s], cout, k,
                                      stride=2 if up else 1, relu=not (last and s == 0), level=level))
    else:
        h = cfg.lstm_hidden
        plan.append(LayerSpec("in_proj", "conv", c_img, h, 1))
        for j in range(cfg.lstm_layers):
            plan.append(LayerSpec(f"lstm{j}", "lstm", h, h, k, relu=False))
        plan.append(LayerSpec("out_proj", "conv", h, c_img, 1, relu=False))
    plan.append(LayerSpec("residual", "conv", c_img, c_img, 1, relu=False))
    return plan


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for spec in layer_plan(cfg):
        shapes[f"{spec.name}.weight"] = spec.weight_shape()
        shapes[f"{spec.name}.bias"] = spec.bias_shape()
    return shapes


@dataclass
class RecurrentState:
    """Per-LSTM-layer (hidden, cell) pairs carried from frame to frame."""

    layers: tuple[tuple[Tensor, Tensor], ...] = ()

    @classmethod
    def zeros(cls, cfg: ModelConfig, n: int, h: int, w: int, dtype=np.float32) -> "RecurrentState":
        z = np.zeros((n, cfg.lstm_hidden, h, w), dtype=dtype)
        return cls(tuple((Tensor._wrap(z.copy()), Tensor._wrap(z.copy())) for _ in range(cfg.lstm_layers)))

    def detach(self) -> "RecurrentState":
        return RecurrentState(tuple((h.detach(), c.detach()) for h, c in self.layers))

    def to_bytes(self) -> bytes:
        out = [STATE_MAGIC, struct.pack("<BB", FORMAT_VERSION, len(self.layers))]
        for h, c in self.layers:
            out += [container.encode(h.data), container.encode(c.data)]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RecurrentState":
        s = io.BytesIO(blob)
        if s.read(4) != STATE_MAGIC:
            raise container.FormatError("not a recurrent-state file")
        version, n = struct.unpack("<BB", s.read(2))
        if version != FORMAT_VERSION:
            raise container.FormatError(f"unsupported state version {version}")
        layers = []
        for _ in range(n):
            h = container.read_from(s)
            c = container.read_from(s)
            layers.append((Tensor._wrap(h), Tensor._wrap(c)))
        return cls(tuple(layers))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RecurrentState":
        return cls.from_bytes(Path(path).read_bytes())


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.plan = layer_plan(config)
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected {shape}, got {params[name].shape}")
        self.params = {name: params[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: Tensor(v.data, requires_grad=True, dtype=dtype) for k, v in self.params.items()})

    def with_params(self, arrays: dict[str, np.ndarray]) -> "Model":
        return Model(self.config, {k: Tensor(arrays[k], requires_grad=True, dtype=arrays[k].dtype) for k in self.params})

    def layer(self, spec: LayerSpec, x: Tensor) -> Tensor:
        w, b = self.params[f"{spec.name}.weight"], self.params[f"{spec.name}.bias"]
        if spec.kind == "tconv":
            y = conv2d_transpose(x, w, b, stride=spec.stride, padding=spec.k // 2, output_padding=spec.stride - 1)
        else:
            y = conv2d(x, w, b, stride=spec.stride, padding=spec.k // 2)
        return relu(y) if spec.relu else y

    def layers(self, prefix: str) -> list[LayerSpec]:
        return [s for s in self.plan if s.name.startswith(prefix)]


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Glorot-uniform weights, zero biases, forget-gate bias +1; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for spec in layer_plan(config):
        shape = spec.weight_shape()
        if spec.kind == "tconv":
            fan_in, fan_out = shape[0] * spec.k**2, shape[1] * spec.k**2
        else:
            fan_in, fan_out = shape[1] * spec.k**2, shape[0] * spec.k**2
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{spec.name}.weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True,
                                               dtype=np.float32)
        bias = np.zeros(spec.bias_shape(), dtype=np.float32)
        if spec.kind == "lstm":
            bias[spec.cout : 2 * spec.cout] = 1.0
        params[f"{spec.name}.bias"] = Tensor(bias, requires_grad=True, dtype=np.float32)
    return Model(config, params)


def _check_frame(model: Model, frame: Tensor):
    cfg = model.config
    if frame.ndim != 4 or frame.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected frame [N,{cfg.in_channels},H,W], got {frame.shape}")
    m = cfg.spatial_multiple
    h, w = frame.shape[2:]
    if h % m or w % m:
        raise ShapeError(f"frame dims {h}x{w} must be divisible by {m}; pad the input to a multiple of {m}")


def encode_frame(model: Model, frame: Tensor) -> tuple[Tensor, list[Tensor]]:
    _check_frame(model, frame)
    x = pixel_unshuffle(frame, model.config.shuffle_factor)
    if not model.config.use_encoder_decoder:
        return model.layer(model.plan[0], x), []
    skips = []
    for s in range(1, 4):
        for spec in model.layers(f"enc{s}."):
            x = model.layer(spec, x)
        skips.append(x)
    return x, skips


def _lstm_cell(model: Model, spec: LayerSpec, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    gates = conv2d(concat_channels(x, h), model[f"{spec.name}.weight"], model[f"{spec.name}.bias"],
                   padding=spec.k // 2)
    i, f, o, g = split_channels(gates, 4)
    c_new = sigmoid(f) * c + sigmoid(i) * tanh(g)
    h_new = sigmoid(o) * tanh(c_new)
    return h_new, c_new


def recurrence_step(model: Model, latent: Tensor, state: RecurrentState | None = None
                    ) -> tuple[Tensor, RecurrentState]:
    cfg = model.config
    if cfg.lstm_layers == 0:
        raise ConfigError("recurrence_step needs lstm_layers >= 1")
    n, _, h, w = latent.shape
    if state is None or not state.layers:
        state = RecurrentState.zeros(cfg, n, h, w, dtype=latent.dtype)
    if len(state.layers) != cfg.lstm_layers:
        raise ShapeError(f"state has {len(state.layers)} layers, model has {cfg.lstm_layers}")
    x, new = latent, []
    for spec, (hp, cp) in zip(model.layers("lstm"), state.layers):
        if hp.shape != (n, cfg.lstm_hidden, h, w) or cp.shape != hp.shape:
            raise ShapeError(f"state dims {hp.shape} do not match latent {latent.shape}")
        hn, cn = _lstm_cell(model, spec, x, hp, cp)
        new.append((hn, cn))
        x = hn
    return x, RecurrentState(tuple(new))


def decode_frame(model: Model, out_latent: Tensor, skips: list[Tensor], input_frame: Tensor) -> Tensor:
    cfg = model.config
    x_in = pixel_unshuffle(input_frame, cfg.shuffle_factor)
    if cfg.use_encoder_decoder:
        if len(skips) != 3:
            raise ShapeError(f"expected 3 skip tensors, got {len(skips)}")
        d = out_latent
        for s in (3, 2, 1):
            if skips[s - 1].shape != d.shape:
                raise ShapeError(f"skip {s} has dims {skips[s - 1].shape}, decoder stage input has {d.shape}")
            d = d + skips[s - 1]
            for spec in model.layers(f"dec{s}."):
                d = model.layer(spec, d)
    else:
        d = model.layer(model.layers("out_proj")[0], out_latent)
    pre = d + model.layer(model.plan[-1], x_in)
    return sigmoid(pixel_shuffle(pre, cfg.shuffle_factor))


def denoise_frame(model: Model, frame: Tensor, state: RecurrentState | None = None
                  ) -> tuple[Tensor, RecurrentState]:
    latent, skips = encode_frame(model, frame)
    if model.config.lstm_layers:
        latent, state = recurrence_step(model, latent, state)
    else:
        state = RecurrentState()
    return decode_frame(model, latent, skips, frame), state


def forward_sequence(model: Model, frames: list[Tensor], state: RecurrentState | None = None
                     ) -> tuple[list[Tensor], RecurrentState]:
    """Tensor-level sequence pass (records on the active tape, if any)."""
    if not frames:
        raise ValueError("empty sequence")
    outs = []
    for frame in frames:
        if frame.shape != frames[0].shape:
            raise ShapeError(f"mixed frame dims {frames[0].shape} and {frame.shape}")
        out, state = denoise_frame(model, frame, state)
        outs.append(out)
    return outs, state


def denoise_sequence(model: Model, seq: VideoSequence, state: RecurrentState | None = None
                     ) -> tuple[VideoSequence, RecurrentState]:
    """Denoise frames in order, one at a time; output t depends on inputs 1..t only."""
    if len(seq) == 0:
        raise ValueError("empty sequence")
    bayer = seq.layout == "bayer_rggb"
    frames = pack_bayer(seq.frames) if bayer else seq.frames
    outs = []
    with no_grad():
        for f in frames:
            out, state = denoise_frame(model, Tensor(f[None], dtype=model.dtype), state)
            outs.append(out.data[0])
    result = np.stack(outs).astype(np.float32)
    if bayer:
        result = unpack_bayer(result)
    return VideoSequence(result, seq.layout, dict(seq.meta)), state


# --------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: Model) -> bytes:
    cfg_text = model_config_to_text(model.config).encode()
    out = [CKPT_MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<I", len(cfg_text)), cfg_text,
           struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        out += [struct.pack("<H", len(raw)), raw, container.encode(t.data)]
    return b"".join(out)


def save_checkpoint(model: Model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    s = io.BytesIO(Path(path).read_bytes())
    if s.read(4) != CKPT_MAGIC:
        raise container.FormatError(f"{path}: not an LLVD checkpoint")
    (version,) = struct.unpack("<B", s.read(1))
    if version != FORMAT_VERSION:
        raise container.FormatError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", s.read(4))
    cfg = model_config_from_pairs(parse_pairs(s.read(n).decode(), str(path)))
    (count,) = struct.unpack("<I", s.read(4))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", s.read(2))
        name = s.read(ln).decode()
        params[name] = Tensor(container.read_from(s), requires_grad=True, dtype=np.float32)
    return Model(cfg, params)
