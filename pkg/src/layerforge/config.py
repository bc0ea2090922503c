"""Run configuration: one flat, schema-checked record.

Defaults follow the reference hyperparameters (T=1000 linear schedule,
50-step DDIM, injection until step 850, harmonization window [400, 600],
unit loss weights); dims default to the toy scale. Unknown keys are
rejected rather than ignored so a typo cannot silently fall back to a
default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .attention import MASK_MODES


@dataclass
class RunConfig:
    seed: int = 0
    # model dims
    h: int = 16
    w: int = 16
    d: int = 32
    s: int = 16
    f_hidden: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    cal_blocks: int = 1
    map_block: int = 0
    max_layers: int = 4
    canvas: int = 32
    # schedule
    t_max: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ddim_steps: int = 50
    # mechanism knobs
    t_g: int = 850
    t_h: int = 600
    t_h_prime: int = 400
    lambda_noise: float = 1.0
    lambda_context: float = 1.0
    lambda_layout: float = 1.0
    mask_mode: str = "none"
    inject: bool = True
    oracle_alphas: bool = False  # IRH uses scene alphas instead of the head
    # training
    lr: float = 2e-4
    alpha_lr: float = 0.05
    train_kv_only: bool = False
    train_alpha: bool = True

    def validate(self) -> "RunConfig":
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        for name in ("h", "w", "d", "s", "f_hidden", "n_blocks", "n_heads",
                     "canvas", "t_max", "ddim_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.map_block < self.n_blocks:
            raise ValueError(f"map_block {self.map_block} outside blocks")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if not 1 <= self.ddim_steps <= self.t_max:
            raise ValueError(f"ddim_steps {self.ddim_steps} outside [1, t_max]")
        if not 0 <= self.t_g <= self.t_max:
            raise ValueError(f"t_g {self.t_g} outside [0, {self.t_max}]")
        if not 0 <= self.t_h_prime <= self.t_h <= self.t_max:
            raise ValueError(
                f"window [{self.t_h_prime}, {self.t_h}] invalid for T={self.t_max}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if not 2 <= self.max_layers <= 8:
            raise ValueError("max_layers must be 2..8")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, val in data.items():
        want = RunConfig.__dataclass_fields__[key].type
        if want == "int" and (isinstance(val, bool) or not isinstance(val, int)):
            raise ValueError(f"config key {key} wants int, got {type(val).__name__}")
        if want == "float" and (isinstance(val, bool)
                                or not isinstance(val, (int, float))):
            raise ValueError(f"config key {key} wants number")
        if want == "bool" and not isinstance(val, bool):
            raise ValueError(f"config key {key} wants bool")
        if want == "str" and not isinstance(val, str):
            raise ValueError(f"config key {key} wants string")
    return RunConfig(**data).validate()


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return config_from_dict(data)
