"""Run configuration, read from a flat JSON object of key/value pairs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from ..errors import SchemaError


@dataclass
class Config:
    T: int = 4  # keyframe period in frames
    min_obs: int = 10
    min_bbox_area: float = 400.0  # px^2
    min_descriptors: int = 8
    theta_assoc: float = 0.0
    max_reprojection_error: float = 100.0
    sigma_px: float = 4.0
    sigma_rot: float = 0.002  # rad per frame of odometry
    sigma_trans: float = 0.002  # m per frame of odometry
    ba_enabled: bool = True
    ba_sync: bool = False
    lm_max_iters: int = 10
    lm_initial_damping: float = 1e-4
    lm_rel_tol: float = 1e-9

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.min_obs < 1:
            raise ValueError("min_obs must be at least 1")
        if min(self.sigma_px, self.sigma_rot, self.sigma_trans) <= 0:
            raise ValueError("noise scales must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise SchemaError(f"unknown config keys: {', '.join(unknown)}")
        vals = {}
        for key, value in d.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise SchemaError(f"{key} must be true or false")
                vals[key] = value
            elif isinstance(default, int):
                vals[key] = int(value)
            else:
                vals[key] = float(value)
        return cls(**vals)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise SchemaError("config file must hold a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes):
        return Config(**{**asdict(self), **changes})
