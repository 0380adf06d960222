"""Versioned key=value run configuration: model, data, and optimizer settings
in one flat file. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    # model
    c: int = 256
    l: int = 6
    m: int = 3
    n_s: int = 6
    n_q: int = 60
    n_r: int = 8
    lam1: float = 0.5
    lam2: float = 0.2
    variant: str = "deformtrace"
    heads: int = 4
    k_points: int = 0
    state_dim: int = 8
    enc_layers: int = 1
    omega: float = 1.0
    dc_flatten: str = "scale_major"
    # data
    c_in: int = 8
    n_1: int = 200
    fps: float = 25.0
    difficulty: float = 0.5
    ramp: int = 2
    n_train: int = 5000
    n_eval: int = 1000
    # optimization
    epochs: int = 50
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    clip_norm: float = 0.1
    eval_every: int = 5
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            c=self.c,
            l=self.l,
            m=self.m,
            n_s=self.n_s,
            n_q=self.n_q,
            n_r=self.n_r,
            lam1=self.lam1,
            lam2=self.lam2,
            variant=self.variant,
            heads=self.heads,
            k_points=self.k_points,
            state_dim=self.state_dim,
            enc_layers=self.enc_layers,
            c_in=self.c_in,
            fps=self.fps,
            omega=self.omega,
            dc_flatten=self.dc_flatten,
        )


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"version={CONFIG_VERSION}"]
    for f in fields(cfg):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    seen: dict[str, str] = {}
    version = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "version":
            if int(value) != CONFIG_VERSION:
                raise ValueError(f"unsupported config version {value}")
            version = int(value)
            continue
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = value
    if version is None:
        raise ValueError("missing version=1 header")
    kwargs = {}
    for key, value in seen.items():
        ftype = known[key]
        if ftype in ("int", int):
            kwargs[key] = int(value)
        elif ftype in ("float", float):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
