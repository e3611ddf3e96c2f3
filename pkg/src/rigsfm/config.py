"""Pipeline configuration and its versioned key = value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["PipelineConfig", "load_config", "save_config"]

CONFIG_MAGIC = "rigsfm-config"
CONFIG_VERSION = 1


@dataclass
class PipelineConfig:
    """Every tunable the pipeline uses, with its default value.

    The dotted names in the config file map 1:1 onto these field names.
    """

    # deterministic seeding of all sampling-based stages
    seed: int = 0

    # pair selection by prior frustum overlap
    overlap_grid_cols: int = 8
    overlap_grid_rows: int = 4
    overlap_depth_samples: int = 4
    overlap_near_m: float = 2.0
    overlap_far_m: float = 60.0
    overlap_threshold: float = 0.15

    # semantic match filtering
    dynamic_classes: tuple[str, ...] = ("vehicle", "pedestrian", "rider")

    # geometric verification (essential matrix RANSAC, normalized coords)
    verify_sampson_threshold: float = 4e-3
    verify_min_inliers: int = 15
    verify_max_iterations: int = 200
    verify_min_iterations: int = 2
    verify_confidence: float = 0.9999

    # initialization
    init_min_baseline_m: float = 1.0
    init_min_correspondences: int = 100
    init_min_points: int = 50
    init_tri_error_px: float = 24.0

    # registration
    pnp_threshold_px: float = 4.0
    pnp_min_inliers: int = 12
    pnp_max_iterations: int = 200
    pnp_min_iterations: int = 5
    pnp_confidence: float = 0.9999
    register_min_visible: int = 15
    register_retry_budget: int = 3
    register_grid_cells: int = 8
    register_pyramid_levels: int = 2
    fuse_rotation_scale_deg: float = 2.0
    fuse_translation_scale_m: float = 0.5
    fuse_irls_tol: float = 1e-8
    fuse_irls_max_iterations: int = 50
    fuse_weight_by_inliers: bool = False
    use_camera_set_registration: bool = True

    # triangulation
    tri_min_angle_deg: float = 1.5
    tri_max_error_px: float = 4.0

    # road-plane filtering
    road_label: str = "road"
    plane_inlier_threshold_m: float = 0.15
    plane_lo_iterations: int = 10
    plane_ransac_iterations: int = 100
    road_window_units: int = 5
    road_min_points: int = 30
    enable_road_filter: bool = True

    # bundle adjustment
    ba_loss: str = "cauchy"
    ba_cauchy_scale_px: float = 1.0
    ba_local_min_shared: int = 20
    ba_global_ratio: float = 0.1
    ba_global_cap: int = 25
    ba_min_units_for_rig: int = 8
    lm_max_iterations: int = 50
    lm_rel_decrease_tol: float = 1e-8
    lm_gradient_tol: float = 1e-10
    lm_init_lambda: float = 1e-6

    # final anchoring of the model to the prior trajectory
    final_prior_alignment: str = "rigid"  # rigid | sim3 | none

    # multi-scene aggregation
    agg_num_candidates: int = 3
    agg_batch_units: int = 1
    agg_use_scale: bool = False
    agg_min_cross_matches: int = 20
    agg_coarse_loss_scale_px: float = 8.0

    def derived_seed(self, *tags: int) -> int:
        """Stable per-component seed independent of call order."""
        h = self.seed & 0xFFFFFFFF
        for tag in tags:
            h = (h * 1000003 + (int(tag) & 0xFFFFFFFF) + 0x9E3779B9) & 0xFFFFFFFF
        return h


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(text: str, ftype, path: Path, line_no: int):
    from .errors import ParseError

    text = text.strip()
    try:
        if ftype is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is str:
            return text
        if ftype == tuple[str, ...]:
            return tuple(s.strip() for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ParseError(path, line_no, f"bad value {text!r}") from exc
    raise ParseError(path, line_no, f"unsupported config type {ftype}")


def save_config(config: PipelineConfig, path: str | Path) -> None:
    path = Path(path)
    lines = [f"{CONFIG_MAGIC} {CONFIG_VERSION}"]
    for f in dataclasses.fields(config):
        lines.append(f"{f.name} = {_format_value(getattr(config, f.name))}")
    path.write_text("\n".join(lines) + "\n")


def load_config(path: str | Path) -> PipelineConfig:
    from .errors import ParseError

    path = Path(path)
    fields_by_name = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    config = PipelineConfig()
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(CONFIG_MAGIC):
        raise ParseError(path, 1, f"expected '{CONFIG_MAGIC} <version>' header")
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, line_no, "expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in fields_by_name:
            raise ParseError(path, line_no, f"unknown config key {key!r}")
        f = fields_by_name[key]
        ftype = f.type if not isinstance(f.type, str) else eval(f.type)  # noqa: S307
        setattr(config, key, _parse_value(value, ftype, path, line_no))
    return config
