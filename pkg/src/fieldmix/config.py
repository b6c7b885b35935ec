"""Run configuration: one flat `key = value` file drives the whole pipeline.

Unknown keys are an error (typo safety); parsing and re-serialization
round-trip. The config hash stamped into artifact directories is the sha256
of the canonical serialization.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass


@dataclass
class RunConfig:
    # shared
    seed: int = 0
    box_size: int = 32
    pixel_size: float = 6.0
    # simulator
    n_images: int = 600
    snr: float = 0.1  # math.inf for noiseless stacks
    phantom_set: str = "arms3"
    class_proportions: tuple = (1.0, 1.0, 1.0)
    trans_extent_px: float = 10.0
    defocus_min: float = 8000.0
    defocus_max: float = 20000.0
    astig_max: float = 200.0
    voltage_kv: float = 300.0
    cs_mm: float = 2.7
    amplitude_contrast: float = 0.1
    phase_shift: float = 0.0
    # pose grid
    s2_points: int = 48
    inplane_points: int = 96
    trans_points_per_axis: int = 7
    # pose-search schedule
    k_min: float = 6.0
    k_max: float = 16.0
    hps_image_budget: int = 2400
    # trainer
    n_classes: int = 3
    conf_dim: int = 2
    sigma: float = 0.1
    hps_batch_size: int = 32
    sgd_batch_size: int = 64
    sgd_epochs: int = 15
    lr_scores: float = 0.1
    lr_conf: float = 0.01
    lr_poses: float = 0.001
    lr_weights: float = 0.0001
    field_width: int = 128
    n_frequencies: int = 64
    # metrics
    fsc_images_per_class: int = 20

    def validate(self):
        if self.box_size % 2 or self.box_size < 16 or self.box_size & (self.box_size - 1):
            raise ValueError(f"box_size must be an even power of two >= 16, got {self.box_size}")
        if self.n_classes < 1 or self.conf_dim < 0 or self.sigma <= 0:
            raise ValueError("need n_classes >= 1, conf_dim >= 0, sigma > 0")
        if not 0 < self.k_min <= self.k_max <= self.box_size / 2:
            raise ValueError(
                f"need 0 < k_min <= k_max <= D/2, got {self.k_min}, {self.k_max}, D={self.box_size}"
            )
        if len(self.class_proportions) == 0 or any(p < 0 for p in self.class_proportions):
            raise ValueError("class_proportions must be non-negative and non-empty")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name, raw):
    ftype = type(getattr(RunConfig(), name))
    if ftype is int:
        return int(raw)
    if ftype is float:
        if raw.lower() in ("inf", "infinity"):
            return math.inf
        return float(raw)
    if ftype is tuple:
        return tuple(float(v) for v in raw.split(",") if v.strip() != "")
    return raw


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        try:
            setattr(cfg, key, _parse_value(key, raw))
        except ValueError as e:
            raise ValueError(f"config line {ln}: bad value for {key!r}: {e}") from e
    return cfg.validate()


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]
