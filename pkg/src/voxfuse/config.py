"""Flat key=value configuration covering every tunable knob.

File format: one ``section.key = value`` per line, ``#`` comments. CLI
flags override file values. Length-like defaults (beta, sigma_c, trunc,
occlusion margin) are expressed as multiples of the fine voxel edge and
resolved once the grid level is known.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import DataError
from .feat2d import AttentionConfig
from .geomreg import PatchSpec


@dataclass
class RenderConfig:
    samples_per_interval: int = 1
    alpha_valid_min: float = 0.5


@dataclass
class TsdfConfig:
    level: int = 6
    coarse_levels: tuple[int, ...] = (5, 4)
    trunc_scale: float = 4.0  # x fine voxel edge
    tau_q: float = 0.3
    temperature: float = 0.5
    density_peak_scale: float = 7.0  # sigma_max = scale / edge
    density_sharpness: float = 0.5  # transition width, x edge


@dataclass
class FuseConfig:
    beta_scale: float = 2.0  # x voxel edge
    sigma_c_scale: float = 1.0  # x voxel edge
    eps: float = 1e-8
    margin_scale: float = 2.0  # x voxel edge
    batch_size: int = 4096


@dataclass
class StitchConfig:
    crop_size: int = 64
    sigma_g: float | None = None  # None: crop extent / 4
    eps: float = 1e-8


@dataclass
class QueryConfig:
    threshold: float = 0.6
    knn: int = 8
    # evaluation universe: fused voxels within this many voxel edges of the
    # analytic surface (benchmark ground truth covers physical surfaces)
    surface_shell: float = 1.0


@dataclass
class PipelineConfig:
    render: RenderConfig = field(default_factory=RenderConfig)
    tsdf: TsdfConfig = field(default_factory=TsdfConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    stitch: StitchConfig = field(default_factory=StitchConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    patch: PatchSpec = field(default_factory=PatchSpec)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    _SECTIONS = ("render", "tsdf", "fuse", "stitch", "query", "patch", "attention")

    def apply(self, dotted_key: str, raw: str):
        if "." not in dotted_key:
            raise DataError(f"config key '{dotted_key}' must be 'section.key'")
        section, key = dotted_key.split(".", 1)
        if section not in self._SECTIONS:
            raise DataError(f"unknown config section '{section}'")
        target = getattr(self, section)
        fld = {f.name: f for f in fields(target)}.get(key)
        if fld is None:
            raise DataError(f"unknown config key '{dotted_key}'")
        cur = getattr(target, key)
        try:
            if isinstance(cur, bool):
                val = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, int):
                val = int(raw)
            elif isinstance(cur, tuple):
                val = tuple(int(v) for v in raw.replace(",", " ").split())
            elif cur is None or isinstance(cur, float):
                val = None if raw.strip().lower() == "none" else float(raw)
            else:
                val = raw
        except ValueError as exc:
            raise DataError(f"config key '{dotted_key}': bad value {raw!r}") from exc
        setattr(target, key, val)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{ln}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                cfg.apply(key, raw)
            except DataError as exc:
                raise DataError(f"{path}:{ln}: {exc}") from exc
    return cfg
