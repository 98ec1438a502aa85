import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

import pydantic
from dotenv import load_dotenv, dotenv_values
from pydantic import BaseModel, ConfigDict, Field, model_validator

from error_handlers import ValidationError

# Load environment variables from .env file
load_dotenv()

TOOL_NAME = "hybridseg"
TOOL_VERSION = "1.0.0"

# Process-wide defaults
THREADS = int(os.getenv("HYBRIDSEG_THREADS", "1"))
INDEX_BACKEND = os.getenv("HYBRIDSEG_INDEX_BACKEND", "kdtree").lower()
KNN_CLAMP = os.getenv("HYBRIDSEG_KNN_CLAMP", "true").lower() in ("1", "true", "yes")

# Above this size: approximate diameter, sparse adjacency, Lanczos, sampled entropy
DENSE_LIMIT = int(os.getenv("HYBRIDSEG_DENSE_LIMIT", "4096"))
SPARSE_ROW_KEEP = int(os.getenv("HYBRIDSEG_SPARSE_ROW_KEEP", "256"))

RESOLVED_CONFIG_NAME = "config.resolved.env"


class RunConfig(BaseModel):
    """Declarative run configuration; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # io
    input: Optional[str] = None
    format: Optional[Literal["xyz", "ply"]] = None
    out: str = "out"
    gt_labels: Optional[str] = None
    labels: Optional[str] = None
    pred: Optional[str] = None
    seed: int = 0
    threads: int = Field(default=THREADS, ge=1)
    normalize: bool = True

    # local features
    neighborhood: Literal["radius", "knn", "adaptive"] = "adaptive"
    radius: float = Field(default=0.1, gt=0)
    k_neighbors: int = Field(default=128, ge=3)
    orient_k: int = Field(default=10, ge=1)

    # primitives
    fit_type: Literal["auto", "plane", "sphere", "cylinder", "cone"] = "auto"
    primitive_types: str = "plane,sphere,cylinder,cone"
    ransac_iters: int = Field(default=300, ge=1)
    ransac_tol: float = Field(default=0.01, gt=0)
    detect_min_points: int = Field(default=50, ge=3)
    detect_max_primitives: int = Field(default=16, ge=1)

    # spectral
    smooth_k: int = Field(default=50, ge=1)
    sigma_edge: float = Field(default=0.5, gt=0)
    sigma_plane: Optional[float] = Field(default=None, gt=0)
    sigma_sphere: Optional[float] = Field(default=None, gt=0)
    sigma_cylinder: Optional[float] = Field(default=None, gt=0)
    sigma_cone: Optional[float] = Field(default=None, gt=0)
    d_c: Optional[int] = Field(default=None, ge=1)
    d_s: Optional[int] = Field(default=None, ge=1)
    max_descriptor_dims: int = Field(default=16, ge=1)
    segment_normal_k: int = Field(default=30, ge=3)
    # comma-separated FMAT files, one row per point, fused with the spectral descriptors
    extra_descriptors: Optional[str] = None
    export_adjacency: bool = False

    # clustering
    bandwidth: Optional[float] = Field(default=None, gt=0)
    bandwidth_scale: float = Field(default=0.3, gt=0)
    mean_shift_iters: int = Field(default=300, ge=1)
    mean_shift_tol: float = Field(default=1e-6, gt=0)
    min_size: int = Field(default=20, ge=1)
    merge_tol: float = Field(default=0.01, ge=0)
    block_mode: bool = False

    # implicit
    query_count: int = Field(default=10000, ge=1)
    query_uniform: float = Field(default=0.5, ge=0, le=1)
    query_near: float = Field(default=0.5, ge=0, le=1)
    query_sigma: float = Field(default=0.01, gt=0)
    crop_ratio: float = Field(default=0.0, ge=0, le=0.5)
    occupancy_tau: float = Field(default=0.01, gt=0)

    # masking
    patch_count: int = Field(default=128, ge=1)
    patch_k: int = Field(default=32, ge=1)
    mask_ratio: float = Field(default=0.6, gt=0, lt=1)

    # evaluation
    epsilon_coverage: float = Field(default=0.01, gt=0)

    # linear autoencoder lab
    ae_n: int = Field(default=20, ge=2)
    ae_m: int = Field(default=4, ge=1)
    ae_samples: int = Field(default=200, ge=3)
    ae_noise: float = Field(default=0.5, ge=0)
    ae_trials: int = Field(default=100, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _drop_blank_values(cls, data: Any) -> Any:
        # A key with an empty value means "use the default"
        if isinstance(data, dict):
            return {k: v for k, v in data.items() if v is not None and v != ""}
        return data

    @model_validator(mode="after")
    def _check_query_mix(self) -> "RunConfig":
        if abs(self.query_uniform + self.query_near - 1.0) > 1e-9:
            raise ValueError("query_uniform + query_near must equal 1")
        if not self.ae_samples > self.ae_n > self.ae_m:
            raise ValueError("linear AE dimensions need ae_samples > ae_n > ae_m")
        return self

    def type_sigmas(self) -> Dict[str, Optional[float]]:
        return {
            "plane": self.sigma_plane,
            "sphere": self.sigma_sphere,
            "cylinder": self.sigma_cylinder,
            "cone": self.sigma_cone,
        }


def build_run_config(values: Dict[str, Any]) -> RunConfig:
    """Validate raw key/values into a RunConfig, mapping pydantic failures to ValidationError."""
    try:
        return RunConfig(**values)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first.get("loc", ())) or None
        raise ValidationError(f"invalid config: {first.get('msg')}", field=field,
                              details={"errors": len(e.errors())})


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a key=value run configuration and apply overrides.

    Args:
        path: Optional config file; keys are the RunConfig field names
        overrides: Values taking precedence over the file (e.g. CLI flags); None entries ignored

    Returns:
        Validated RunConfig
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}", field="config")
        values.update({k.strip().lower(): v for k, v in dotenv_values(path).items()})
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return build_run_config(values)


def dump_run_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    """Write the fully-resolved configuration as key=value text."""
    path = Path(path)
    lines = []
    for key, value in cfg.model_dump().items():
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
