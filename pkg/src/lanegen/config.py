"""Flat key=value configuration shared by every pipeline stage.

Two scale presets: ``paper`` (full-size defaults) and ``desk`` (small model
and raster that trains in minutes on a CPU). Every run writes its fully
resolved config next to its outputs; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError


@dataclass
class Config:
    # scene synthesis
    layout: str = "grid"
    density: float = 5.0
    noise_sigma: float = 0.3
    lane_width: float = 3.5

    # tiling
    extent: float = 60.0
    m_points: int = 20
    tau_align: float = 2.0
    delta_prune: float = 2.0
    n_extra_per_tile: int = 2
    jitter_radius: float = 15.0

    # rasterization
    raster_size: int = 512
    v_max: float = 30.0
    intensity_scale: float = 1000.0

    # model
    d_model: int = 256
    n_heads: int = 8
    ffn_dim: int = 512
    n_encoder_layers: int = 6
    n_decoder_layers: int = 6
    n_queries: int = 50
    n_o2m_queries: int = 150
    backbone_width: int = 16
    dropout: float = 0.1

    # training
    batch_size: int = 32
    n_steps: int = 2000
    lr: float = 1e-4
    backbone_lr_factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 100.0
    o2m_repeat: int = 3
    lambda_class: float = 1.0
    lambda_point: float = 1.0
    lambda_dir: float = 1.0
    lambda_o2o: float = 1.0
    lambda_o2m: float = 1.0
    lambda_aux: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    augment: bool = True
    p_augment: float = 0.3
    aug_noise_sigma: float = 0.2
    aug_shift_range: float = 3.0
    eval_every: int = 0
    query_pruning: bool = False
    prune_warmup_frac: float = 0.5
    prune_keep: int = 25

    # evaluation
    ap_thresholds: str = "0.5,1.0,1.5"
    score_threshold: float = 0.5

    seed: int = 0
    threads: int = 0  # 0 -> machine parallelism

    def thresholds(self) -> tuple[float, ...]:
        return tuple(float(t) for t in self.ap_thresholds.split(","))


# overrides that shrink the pipeline to something a laptop CPU trains fast
DESK_OVERRIDES = {
    "raster_size": 128,
    "d_model": 64,
    "n_heads": 4,
    "ffn_dim": 128,
    "n_encoder_layers": 2,
    "n_decoder_layers": 2,
    "n_queries": 20,
    "n_o2m_queries": 40,
    "backbone_width": 8,
    "dropout": 0.0,
    "batch_size": 8,
    "n_steps": 1200,
    "lr": 1e-3,
    "density": 4.0,
    "prune_keep": 10,
}

PRESETS = {"paper": {}, "desk": DESK_OVERRIDES}


def preset_config(name: str = "desk") -> Config:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(Config(), **PRESETS[name])


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    types = {f.name: f.type for f in fields(Config)}
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(Config)}
    out = cfg
    for key, raw in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        value = raw if not isinstance(raw, str) else _coerce(key, kinds[key], raw)
        out = replace(out, **{key: value})
    return out


def load_config(path, base: Config | None = None) -> Config:
    cfg = base or Config()
    overrides = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key == "preset":
                cfg = preset_config(raw.strip())
                continue
            overrides[key] = raw.strip()
    return apply_overrides(cfg, overrides)


def write_config(cfg: Config, path) -> None:
    with open(path, "w") as f:
        for fld in sorted(fields(Config), key=lambda x: x.name):
            value = getattr(cfg, fld.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            f.write(f"{fld.name}={value}\n")
