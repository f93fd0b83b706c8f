"""Frame-sequence I/O, AWGN synthesis, cropping and temporal mirroring."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

LAYOUTS = ("rgb", "bayer_rggb")
FORMATS = {"ppm8": ".ppm", "ppm16": ".ppm", "llvt": ".llvt"}


class DataError(ValueError):
    pass


@dataclass
class VideoSequence:
    """Frames stacked as a float32 array [T, C, H, W] with values nominally in [0, 1].

    Bayer sequences are single-channel RGGB mosaics ([T, 1, H, W]).
    """

    frames: np.ndarray
    layout: str = "rgb"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise DataError(f"frames must be [T, C, H, W], got {self.frames.shape}")
        if self.layout not in LAYOUTS:
            raise DataError(f"unknown layout {self.layout!r}")
        if self.layout == "bayer_rggb" and self.frames.shape[1] != 1:
            raise DataError("bayer_rggb sequences hold single-channel mosaics")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[2]

    @property
    def width(self):
        return self.frames.shape[3]

    def replace(self, frames, **meta) -> "VideoSequence":
        return VideoSequence(frames, self.layout, {**self.meta, **meta})


def rng_for(seed: int, *stream) -> np.random.Generator:
    """PCG64 stream keyed by (seed, stream ids); independent of call order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1], keeps log finite
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
    return z[:n]


# ----------------------------------------------------------------- Bayer packing


def pack_bayer(mosaic: np.ndarray) -> np.ndarray:
    """[..., 1, H, W] RGGB mosaic -> [..., 4, H/2, W/2] planes (R, G1, G2, B)."""
    h, w = mosaic.shape[-2:]
    if h % 2 or w % 2:
        raise DataError(f"Bayer mosaic dims {h}x{w} must be even")
    m = mosaic[..., 0, :, :]
    return np.stack([m[..., 0::2, 0::2], m[..., 0::2, 1::2], m[..., 1::2, 0::2], m[..., 1::2, 1::2]], axis=-3)


def unpack_bayer(planes: np.ndarray) -> np.ndarray:
    h, w = planes.shape[-2:]
    out = np.empty(planes.shape[:-3] + (1, 2 * h, 2 * w), dtype=planes.dtype)
    m = out[..., 0, :, :]
    m[..., 0::2, 0::2] = planes[..., 0, :, :]
    m[..., 0::2, 1::2] = planes[..., 1, :, :]
    m[..., 1::2, 0::2] = planes[..., 2, :, :]
    m[..., 1::2, 1::2] = planes[..., 3, :, :]
    return out


# ---------------------------------------------------------------------- PPM/PGM


def _ppm_tokens(raw: bytes, path):
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Binary P6 (RGB) or P5 (grey) file -> float32 [C, H, W] in [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), off = _ppm_tokens(raw, path)
    if magic not in (b"P6", b"P5"):
        raise DataError(f"{path}: unsupported magic {magic!r}")
    c = 3 if magic == b"P6" else 1
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * c
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
    img = data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float32)
    return img / np.float32(maxval)


def quantize(frame: np.ndarray, maxval: int) -> np.ndarray:
    """Clamp to [0, 1] and round half up onto the integer grid."""
    v = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * maxval + 0.5).astype(np.int64)


def write_ppm(path, frame: np.ndarray, bits: int = 8):
    c, h, w = frame.shape
    if c not in (1, 3):
        raise DataError(f"PPM output needs 1 or 3 channels, got {c}")
    maxval = 255 if bits == 8 else 65535
    q = quantize(frame, maxval).transpose(1, 2, 0)
    body = q.astype("u1" if bits == 8 else ">u2").tobytes()
    magic = b"P6" if c == 3 else b"P5"
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + body)


# ------------------------------------------------------------------ sequence IO


_INDEX = re.compile(r"(\d+)")


def _frame_index(p: Path) -> int:
    digits = _INDEX.findall(p.stem)
    if not digits:
        raise DataError(f"{p}: frame file name has no numeric index")
    return int(digits[-1])


def load_sequence(path, layout: str = "rgb") -> VideoSequence:
    """Load ``*.ppm``/``*.pgm``/``*.llvt`` frames from a directory, ordered by numeric index."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    files = [p for p in root.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".llvt")]
    if not files:
        raise DataError(f"{root}: no frame files")
    files.sort(key=lambda p: (_frame_index(p), p.name))
    kinds = {p.suffix.lower() != ".llvt" for p in files}
    if len(kinds) > 1:
        odd = next(p for p in files if (p.suffix.lower() != ".llvt") != (files[0].suffix.lower() != ".llvt"))
        raise DataError(f"{odd}: mixed frame formats in {root}")
    frames = []
    for p in files:
        f = read_ppm(p) if p.suffix.lower() != ".llvt" else container.load(p)
        if f.ndim != 3:
            raise DataError(f"{p}: expected a [C, H, W] frame, got {f.shape}")
        if frames and f.shape != frames[0].shape:
            raise DataError(f"{p}: dims {f.shape} differ from {frames[0].shape}")
        frames.append(f)
    if files[0].suffix.lower() == ".llvt":
        fmt = "llvt"
    else:
        (_, _, _, maxval), _ = _ppm_tokens(files[0].read_bytes()[:64], files[0])
        fmt = "ppm8" if int(maxval) <= 255 else "ppm16"
    meta = {"source": str(root), "names": [p.stem for p in files], "format": fmt}
    return VideoSequence(np.stack(frames), layout, meta)


def save_sequence(seq: VideoSequence, path, format: str = "ppm8"):
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; choose from {sorted(FORMATS)}")
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        names = seq.meta.get("names")
        if not names or len(names) != len(seq):
            names = [f"{i:05d}" for i in range(len(seq))]
        for name, frame in zip(names, seq.frames):
            target = root / f"{name}{FORMATS[format]}"
            if format == "llvt":
                container.save(target, frame)
            else:
                write_ppm(target, frame, bits=8 if format == "ppm8" else 16)
    except OSError as exc:
        raise DataError(f"cannot write {root}: {exc.strerror or exc}") from exc


# ------------------------------------------------------------------ augmentation


def add_awgn(seq: VideoSequence, sigma_255: float, seed: int, stream: int = 0) -> VideoSequence:
    """Add i.i.d. N(0, (sigma/255)^2) noise; results stay unclipped."""
    if sigma_255 < 0:
        raise DataError(f"sigma must be >= 0, got {sigma_255}")
    if sigma_255 == 0:
        return seq.replace(seq.frames.copy(), sigma=0.0, seed=seed)
    z = box_muller(rng_for(seed, stream), seq.frames.size).reshape(seq.frames.shape)
    noisy = (seq.frames.astype(np.float64) + z * (sigma_255 / 255.0)).astype(np.float32)
    return seq.replace(noisy, sigma=float(sigma_255), seed=seed)


def random_crop(seq: VideoSequence, size: int, bayer_aware: bool | None = None, seed: int = 0,
                stream: int = 0) -> VideoSequence:
    """One size x size window shared by all frames; even offsets keep the RGGB phase."""
    if bayer_aware is None:
        bayer_aware = seq.layout == "bayer_rggb"
    h, w = seq.height, seq.width
    if size < 1 or size > h or size > w:
        raise DataError(f"crop size {size} does not fit {h}x{w}")
    if bayer_aware and size % 2:
        raise DataError("Bayer-aware crops need an even size")
    rng = rng_for(seed, stream, 1)
    if bayer_aware:
        y = 2 * int(rng.integers(0, (h - size) // 2 + 1))
        x = 2 * int(rng.integers(0, (w - size) // 2 + 1))
    else:
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
    return seq.replace(seq.frames[:, :, y : y + size, x : x + size].copy(), crop=(y, x))


def mirror_indices(length: int, target_len: int) -> list[int]:
    if target_len < length:
        raise DataError(f"target length {target_len} is shorter than the sequence ({length})")
    if length == 1:
        if target_len != 1:
            raise DataError("mirroring needs at least two frames")
        return [0]
    period = 2 * (length - 1)
    out = []
    for i in range(target_len):
        m = i % period
        out.append(m if m < length else period - m)
    return out


def mirror_extend(seq: VideoSequence, target_len: int) -> VideoSequence:
    """Ping-pong extension [1..T, T-1..1, 2..T, ...] without repeating the turning frames."""
    idx = mirror_indices(len(seq), target_len)
    return seq.replace(seq.frames[idx])


# ---------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    directory: Path
    layout: str
    frame_count: int


def read_manifest(path) -> list[ManifestEntry]:
    """Plain text, one sequence per line: ``id directory layout frame_count``."""
    path = Path(path)
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[2] not in LAYOUTS:
            raise DataError(f"{path}:{lineno}: expected 'id directory layout frame_count'")
        d = Path(parts[1])
        if not d.is_absolute():
            d = path.parent / d
        entries.append(ManifestEntry(parts[0], d, parts[2], int(parts[3])))
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return entries


def write_manifest(path, entries):
    lines = [f"{e.id} {e.directory} {e.layout} {e.frame_count}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def synthetic_clip(length: int = 8, size: int = 32, seed: int = 0, layout: str = "rgb") -> VideoSequence:
    """Deterministic moving test pattern: drifting gradients, a translating bar and a disc."""
    rng = rng_for(seed, 99)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.random(3) * 2 * np.pi
    frames = []
    for t in range(length):
        dx = t / size * 1.5
        base = np.stack([
            0.5 + 0.25 * np.sin(2 * np.pi * (xx - dx) * 1.5 + phase[0]),
            0.5 + 0.25 * np.cos(2 * np.pi * (yy + 0.5 * dx) * 1.2 + phase[1]),
            0.45 + 0.2 * np.sin(2 * np.pi * (xx + yy - dx) + phase[2]),
        ])
        bar = (np.abs(xx - (0.3 + dx) % 1.0) < 0.08)
        disc = (xx - 0.65) ** 2 + (yy - 0.4 - 0.5 * dx) ** 2 < 0.02
        base[:, bar] = np.array([0.9, 0.85, 0.2])[:, None]
        base[:, disc] = np.array([0.15, 0.3, 0.8])[:, None]
        frames.append(base)
    frames = np.clip(np.stack(frames), 0, 1).astype(np.float32)
    if layout == "bayer_rggb":
        planes = np.stack([frames[:, 0], frames[:, 1], frames[:, 1], frames[:, 2]], axis=1)[..., ::2, ::2]
        frames = unpack_bayer(planes)
    return VideoSequence(frames, layout, {"source": "synthetic", "seed": seed})
