"""Flat ``key = value`` config files with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    stage_widths: tuple[int, int, int] = (16, 32, 64)
    kernel_size: int = 3
    lstm_layers: int = 2
    lstm_hidden: int = 64
    use_encoder_decoder: bool = True
    shuffle_factor: int = 1
    flop_convention: str = "flop2"

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        self.validate()

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if len(self.stage_widths) != 3 or min(self.stage_widths) < 1:
            raise ConfigError("stage_widths must be three positive ints")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd int")
        if self.shuffle_factor not in (1, 2):
            raise ConfigError("shuffle_factor must be 1 or 2")
        if not 0 <= self.lstm_layers <= 2:
            raise ConfigError("lstm_layers must be 0, 1 or 2")
        if not self.use_encoder_decoder and self.lstm_layers < 1:
            raise ConfigError("lstm_layers must be >= 1 when use_encoder_decoder is false")
        if self.lstm_layers and self.lstm_hidden < 1:
            raise ConfigError("lstm_hidden must be >= 1")
        if self.use_encoder_decoder and self.lstm_layers and self.lstm_hidden != self.stage_widths[2]:
            raise ConfigError(
                f"lstm_hidden ({self.lstm_hidden}) must equal stage_widths[2] ({self.stage_widths[2]})"
            )
        if self.flop_convention not in ("mac", "flop2"):
            raise ConfigError("flop_convention must be 'mac' or 'flop2'")

    @property
    def spatial_multiple(self) -> int:
        """Frame dims must be divisible by this."""
        return self.shuffle_factor * (4 if self.use_encoder_decoder else 1)


def parse_pairs(text: str, origin: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: missing key before '='")
        if key in pairs:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _coerce(value: str, kind, key: str):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind == "ints":
            return tuple(int(v) for v in value.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(v) for v in value.replace(",", " ").split())
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


MODEL_KEYS = {
    "in_channels": int,
    "stage_widths": "ints",
    "kernel_size": int,
    "lstm_layers": int,
    "lstm_hidden": int,
    "use_encoder_decoder": bool,
    "shuffle_factor": int,
    "flop_convention": str,
}


def model_config_from_pairs(pairs: dict[str, str]) -> ModelConfig:
    kwargs = {k: _coerce(v, MODEL_KEYS[k], k) for k, v in pairs.items() if k in MODEL_KEYS}
    return ModelConfig(**kwargs)


def model_config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def builtin_names() -> list[str]:
    root = resources.files("llvd") / "configs"
    return sorted(p.name[: -len(".cfg")] for p in root.iterdir() if p.name.endswith(".cfg"))


def read_config_text(path_or_name) -> tuple[str, str]:
    """Read a config file, falling back to the shipped reference configs by name."""
    p = Path(path_or_name)
    if p.is_file():
        return p.read_text(), str(p)
    name = p.name[: -len(".cfg")] if p.name.endswith(".cfg") else p.name
    ref = resources.files("llvd") / "configs" / f"{name}.cfg"
    if ref.is_file():
        return ref.read_text(), f"<builtin {name}>"
    raise ConfigError(f"config not found: {path_or_name} (builtin: {', '.join(builtin_names())})")


def load_model_config(path_or_name) -> ModelConfig:
    text, origin = read_config_text(path_or_name)
    pairs = parse_pairs(text, origin)
    unknown = set(pairs) - set(MODEL_KEYS)
    if unknown:
        raise ConfigError(f"{origin}: unknown model keys {sorted(unknown)}")
    return model_config_from_pairs(pairs)
