"""Model configuration, ablation switches and the flat key=value file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

# Exact switch strings accepted by ``--ablate`` and the ``ablate`` config key.
DOWNSAMPLERS = ("lsd", "avg_pool", "half_resolution", "resampler")
POSITIONS = ("lsd_after_lste", "lsd_before_lste")
STRUCTURE_SWITCHES = ("no_fsra", "no_gstra", "no_lste", "no_row", "gstra_pre_lsd")
LOSS_SWITCHES = ("cosine", "mse", "no_distill", "distill_spatial_only")
ALL_SWITCHES = DOWNSAMPLERS + POSITIONS + STRUCTURE_SWITCHES + LOSS_SWITCHES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Switches:
    downsample: str = "lsd"
    position: str = "lsd_after_lste"
    no_fsra: bool = False
    no_gstra: bool = False
    no_lste: bool = False
    no_row: bool = False
    gstra_pre_lsd: bool = False
    distill: str = "cosine"  # cosine | mse | none
    distill_spatial_only: bool = False

    @classmethod
    def parse(cls, text: str | None) -> "Switches":
        """Parse a comma separated switch list such as ``"no_row,no_gstra"``."""
        kw: dict = {}
        if not text:
            return cls()
        for name in (s.strip() for s in text.split(",")):
            if not name:
                continue
            if name not in ALL_SWITCHES:
                raise ConfigError(f"unknown ablation switch: {name!r}")
            if name in DOWNSAMPLERS:
                kw["downsample"] = name
            elif name in POSITIONS:
                kw["position"] = name
            elif name == "cosine":
                kw["distill"] = "cosine"
            elif name == "mse":
                kw["distill"] = "mse"
            elif name == "no_distill":
                kw["distill"] = "none"
            else:
                kw[name] = True
        sw = cls(**kw)
        sw.validate()
        return sw

    def validate(self) -> None:
        if self.no_fsra and self.no_gstra:
            raise ConfigError("no_fsra and no_gstra together leave no context token")
        if self.position == "lsd_before_lste" and self.downsample != "lsd":
            raise ConfigError("lsd_before_lste only applies to the lsd downsampler")
        if self.gstra_pre_lsd and self.no_gstra:
            raise ConfigError("gstra_pre_lsd conflicts with no_gstra")

    def names(self) -> list[str]:
        out = []
        if self.downsample != "lsd":
            out.append(self.downsample)
        if self.position != "lsd_after_lste":
            out.append(self.position)
        for name in STRUCTURE_SWITCHES:
            if getattr(self, name):
                out.append(name)
        if self.distill == "mse":
            out.append("mse")
        elif self.distill == "none":
            out.append("no_distill")
        if self.distill_spatial_only:
            out.append("distill_spatial_only")
        return out

    def __str__(self) -> str:
        return ",".join(self.names())


@dataclass(frozen=True)
class ModelConfig:
    T_max: int = 8
    H_max: int = 448
    W_max: int = 448
    p: int = 16
    d: int = 64
    r: int = 4
    d_lm: int = 64
    vocab_size: int = 64
    seed: int = 0
    # knobs beyond the core contract
    d_mlp: int = 0  # 0 means d_lm
    lm_layers: int = 2
    lm_heads: int = 4
    lm_context: int = 512
    lste_activation: bool = False
    distill_weight: float = 1.0
    teacher_mode: str = "linear_probe"
    ablate: Switches = field(default_factory=Switches)

    def __post_init__(self):
        self.validate()

    @property
    def mlp_width(self) -> int:
        return self.d_mlp or self.d_lm

    @property
    def h_max(self) -> int:
        return self.H_max // self.p

    @property
    def w_max(self) -> int:
        return self.W_max // self.p

    def validate(self) -> None:
        if self.p <= 0 or self.H_max % self.p or self.W_max % self.p:
            raise ConfigError(f"H_max={self.H_max}, W_max={self.W_max} must be multiples of p={self.p}")
        if (self.H_max // self.p) % 2 or (self.W_max // self.p) % 2:
            raise ConfigError("patch grid sides must be even so LSD can halve them")
        if self.d <= 0 or self.d_lm <= 0:
            raise ConfigError("d and d_lm must be positive")
        if self.r <= 0 or self.d % self.r:
            raise ConfigError(f"r={self.r} must divide d={self.d}")
        if self.T_max < 1:
            raise ConfigError("T_max must be >= 1")
        if self.d_lm % self.lm_heads:
            raise ConfigError("lm_heads must divide d_lm")
        if self.teacher_mode not in ("linear_probe", "frozen_random"):
            raise ConfigError(f"unknown teacher_mode {self.teacher_mode!r}")
        self.ablate.validate()

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = int(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha1(self.to_text().encode()).hexdigest()[:12]

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in kv.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(k, v, types[k])
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        model_kv, _ = split_config_text(text)
        return cls.from_mapping(model_kv)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())


def toy_config(**kw) -> ModelConfig:
    """32x32 frames, p=4: 8x8 patches, 4x4 after LSD."""
    base = dict(T_max=8, H_max=32, W_max=32, p=4, d=32, r=4, d_lm=64, vocab_size=64)
    base.update(kw)
    return ModelConfig(**base)


def parse_kv(text: str) -> dict[str, str]:
    kv = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


def split_config_text(text: str) -> tuple[dict[str, str], dict[str, str]]:
    """Split a combined config file into model keys and everything else."""
    kv = parse_kv(text)
    model = {k: v for k, v in kv.items() if k in _MODEL_KEYS}
    rest = {k: v for k, v in kv.items() if k not in _MODEL_KEYS}
    return model, rest


def _coerce(key: str, value: str, typ) -> object:
    typ = str(typ)
    try:
        if key == "ablate":
            return Switches.parse(value)
        if "bool" in typ:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if "int" in typ:
            return int(value)
        if "float" in typ:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value
