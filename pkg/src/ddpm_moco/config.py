"""Flat ``key=value`` run configuration.

Blank lines and lines starting with ``#`` are ignored. Every key except the
path keys has a default; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .diffusion import DdpmConfig, SamplerConfig
from .errors import ConfigError, DdpmMocoError
from .moco import ContrastConfig


def _counts(text: str) -> tuple[int, ...]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 4
    if len(parts) != 4:
        raise ValueError("counts takes one value or four comma-separated values")
    return tuple(parts)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    H: int = 16
    counts: tuple[int, ...] = (400, 400, 400, 400)
    train_frac: float = 0.8
    # diffusion
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddpm_width: int = 16
    ddpm_lr: float = 1e-3
    ddpm_steps: int = 2000
    ddpm_batch: int = 16
    sampler_mode: str = "standard"
    sigma_mode: str = "beta"
    n_samples: int = 64
    # contrastive pretraining
    lr0: float = 0.03
    total_steps: int = 2000
    lr_granularity: str = "step"
    K: int = 512
    m: float = 0.999
    tau: float = 0.07
    batch: int = 32
    loss_mode: str = "improved"
    width: int = 16
    dim: int = 64
    # probe
    probe_epochs: int = 100
    probe_lr: float = 0.1
    # paths
    data: str | None = None
    out: str | None = None

    def ddpm(self) -> DdpmConfig:
        return DdpmConfig(
            self.T, self.beta_start, self.beta_end, self.ddpm_width, self.ddpm_lr, self.ddpm_steps, self.ddpm_batch, self.lr_granularity
        )

    def contrast(self) -> ContrastConfig:
        return ContrastConfig(
            tau=self.tau,
            m=self.m,
            K=self.K,
            n=self.batch,
            loss_mode=self.loss_mode,
            dim=self.dim,
            width=self.width,
            lr0=self.lr0,
            total_steps=self.total_steps,
            lr_granularity=self.lr_granularity,
        )

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.sampler_mode, self.sigma_mode)

    def validate(self) -> RunConfig:
        """Build every derived config once so bad values surface as ConfigError."""
        try:
            self.ddpm().schedule()
            self.contrast()
            self.sampler()
        except DdpmMocoError as exc:
            raise ConfigError(str(exc)) from None
        if len(self.counts) != 4 or min(self.counts) < 1:
            raise ConfigError("counts must give at least one image per class")
        return self

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def dump(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            out[f.name] = ",".join(map(str, value)) if isinstance(value, tuple) else str(value)
        return out


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, text: str):
    kind = _FIELDS[name].type
    if name == "counts":
        return _counts(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values).validate()


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
