"""Front-end configuration bundling the analysis/synthesis parameters.

Serialized as key=value text inside weight files and checkpoint headers, and
accepted from plain-text config files by the command-line tools.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .dsp import StftConfig, build_mel_filterbank


def parse_kv_text(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    hop_length: int = 80
    mel_window: int = 400
    filter_window: int = 160
    fft_length: int = 512
    preemphasis: float = 0.97
    mel_floor: float = 1e-5
    envelope_eps: float = 1e-5
    lp_order: int = 24

    @property
    def mel_stft(self) -> StftConfig:
        return StftConfig(self.mel_window, self.hop_length, self.fft_length)

    @property
    def filter_stft(self) -> StftConfig:
        return StftConfig(self.filter_window, self.hop_length, self.fft_length)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    def filterbank(self):
        return build_mel_filterbank(
            self.n_mels, self.fft_length, self.sample_rate, self.fmin, self.fmax
        )

    def to_text(self, prefix: str = "feature.") -> str:
        return "".join(
            f"{prefix}{f.name}={getattr(self, f.name)}\n" for f in fields(self)
        )

    @classmethod
    def from_items(cls, items: dict, prefix: str = "feature.") -> "FeatureConfig":
        kwargs = {}
        for f in fields(cls):
            raw = items.get(prefix + f.name)
            if raw is None:
                continue
            kwargs[f.name] = type(f.default)(raw)
        return cls(**kwargs)

    def override(self, **kwargs) -> "FeatureConfig":
        return replace(self, **kwargs)
