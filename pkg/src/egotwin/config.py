"""Pipeline configuration as a flat ``key = value`` text file."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import InvalidSpec


@dataclass(frozen=True)
class PipelineConfig:
    # track gates
    epsilon_s: float = 0.02
    epsilon_f: float = 0.03
    visibility_floor: float = 0.5
    # motion clustering
    cluster_eps: float = 1.0
    cluster_min_pts: int = 4
    sigma_ang_deg: float = 15.0
    sigma_piv: float = 0.10
    # segmentation
    eta_m: float = 0.6
    ratio_epsilon: float = 1e-6
    keyframes: int = 5
    closing_radius: int = 2
    mask_depth_tolerance: float = 0.03
    # part registration and graph
    part_inlier_threshold: float = 0.02
    ransac_iterations: int = 1024
    part_mu: float = 0.1
    lm_iterations: int = 100
    # camera graph
    camera_inlier_threshold: float = 0.02
    camera_level_iterations: int = 8
    camera_stride: int = 8
    camera_object_weight: float = 0.2
    camera_mu: float = 10.0
    # fusion
    voxel_size: float = 0.01
    truncation: float = 0.04
    max_depth: float = 3.0
    # alignment
    rmse_threshold: float = 0.03
    trim_fraction: float = 0.8
    icp_iterations: int = 100
    submap_points: int = 20000
    # evaluation
    add_fraction: float = 0.1
    chamfer_samples: int = 10000
    scene_chamfer_samples: int = 200000
    # run control
    seed: int = 0
    workers: int = 1

    def validate(self) -> "PipelineConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise InvalidSpec(f"{f.name} must be finite")
            if f.name != "seed" and v <= 0:
                raise InvalidSpec(f"{f.name} must be positive, got {v}")
        if self.seed < 0:
            raise InvalidSpec("seed must be non-negative")
        if not 0 < self.trim_fraction <= 1 or not 0 < self.visibility_floor <= 1 or not 0 < self.eta_m <= 1:
            raise InvalidSpec("fractions must lie in (0, 1]")
        if self.truncation < 2 * self.voxel_size:
            raise InvalidSpec("truncation must be at least two voxels")
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidSpec(f"line {n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise InvalidSpec(f"line {n}: unknown key {key!r}")
            try:
                values[key] = int(val) if types[key] in (int, "int") else float(val)
            except ValueError as exc:
                raise InvalidSpec(f"line {n}: bad value for {key}: {val!r}") from exc
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise InvalidSpec(f"cannot read config {path}: {exc}") from exc

    def with_seed(self, seed: int | None) -> "PipelineConfig":
        return self if seed is None else replace(self, seed=int(seed)).validate()
