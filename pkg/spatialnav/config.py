"""
Agent configuration and remote endpoint settings.

Numeric defaults live in AgentConfig (loadable from a JSON file); endpoint
settings are read from the environment so secrets never end up in config files.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .geometry import CameraIntrinsics, GridParams

load_dotenv()


class AgentConfig(BaseModel):
    """Every tunable parameter of the memory, retrieval and navigation stack."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Cognitive map
    tau: float = Field(0.5, ge=0.0, le=1.0)
    voxel_size: float = Field(0.1, gt=0.0)
    grid_dim: int = Field(1000, gt=0)
    buffer_capacity: int = Field(10, ge=1)
    hop: int = Field(1, ge=0)
    feature_dim: int = Field(64, ge=2)

    # Landmark memory
    overlap_distance: float = Field(1.0, gt=0.0)
    confidence_floor: float = Field(0.55, ge=0.0, le=1.0)

    # Working memory
    priority_lambda: float = Field(0.5, ge=0.0, le=1.0)
    landmark_k: int = Field(3, ge=1)
    cognitive_q: int = Field(3, ge=1)
    pooling_alpha: float = Field(0.01, ge=0.0)
    dbscan_eps: float = Field(3.0, gt=0.0)
    dbscan_min_pts: int = Field(1, ge=1)
    voxel_topk: int = Field(10, ge=1)
    match_floor: float = Field(0.5, ge=-1.0, le=1.0)
    imagined_images: int = Field(3, ge=1)
    candidate_merge_radius: float = Field(0.5, ge=0.0)
    merge_branches: bool = False

    # Sensor
    min_range: float = Field(0.3, ge=0.0)
    max_range: float = Field(8.0, gt=0.0)
    fov_deg: float = Field(87.0, gt=0.0, lt=180.0)
    image_columns: int = Field(64, ge=2)
    image_rows: int = Field(48, ge=2)
    patch_stride: int = Field(8, ge=2)
    camera_height: float = Field(1.5, gt=0.0)

    # Planner / runtime
    planner_resolution: float = Field(0.25, gt=0.0)
    forward_step: float = Field(0.25, gt=0.0)
    turn_deg: float = Field(30.0, gt=0.0, le=180.0)
    success_distance: float = Field(1.0, gt=0.0)
    step_budget: int = Field(500, ge=1)
    verify_forward_limit: int = Field(3, ge=0)
    approach_radius: float = Field(0.6, gt=0.0)
    inflate_obstacles: bool = True

    @model_validator(mode="after")
    def _check_domains(self) -> "AgentConfig":
        if self.grid_dim % 2:
            raise ValueError("grid_dim must be even")
        if self.max_range <= self.min_range:
            raise ValueError("max_range must exceed min_range")
        if self.patch_stride % 2:
            raise ValueError("patch_stride must be even")
        if self.image_columns % self.patch_stride or self.image_rows % self.patch_stride:
            raise ValueError("image size must be a multiple of patch_stride")
        return self

    @property
    def grid(self) -> GridParams:
        return GridParams(delta=self.voxel_size, g=self.grid_dim)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.image_columns, self.image_rows, self.fov_deg)


def load_config(path: Optional[str] = None, **overrides) -> AgentConfig:
    """Load an AgentConfig from a JSON file (or defaults) plus keyword overrides."""
    data = {}
    if path:
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must hold a JSON object")
    data.update(overrides)
    try:
        return AgentConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def config_hash(config: AgentConfig) -> str:
    canonical = json.dumps(config.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EndpointSettings:
    """Connection settings for the OpenAI-compatible remote adapters."""
    base_url: str
    api_key: str
    chat_model: str
    image_model: str
    encoder_url: str
    timeout_s: float
    max_retries: int
    backoff_s: float
    transcript_path: Optional[str]

    @classmethod
    def from_env(cls) -> "EndpointSettings":
        base_url = os.getenv("SPATIALNAV_API_BASE") or os.getenv("OPENAI_API_BASE", "")
        base_url = base_url.strip().rstrip("/")
        try:
            timeout_s = float(os.getenv("SPATIALNAV_TIMEOUT_S", 30))
            max_retries = int(os.getenv("SPATIALNAV_MAX_RETRIES", 3))
            backoff_s = float(os.getenv("SPATIALNAV_BACKOFF_S", 0.5))
        except ValueError as e:
            raise ConfigError(f"Invalid numeric endpoint setting: {e}") from e
        return cls(
            base_url=base_url,
            api_key=os.getenv("OPENAI_API_KEY", ""),
            chat_model=os.getenv("SPATIALNAV_CHAT_MODEL", "gpt-4o"),
            image_model=os.getenv("SPATIALNAV_IMAGE_MODEL", "stable-diffusion-3.5-medium"),
            encoder_url=os.getenv("SPATIALNAV_ENCODER_URL", f"{base_url}/patch-features" if base_url else ""),
            timeout_s=timeout_s,
            max_retries=max(1, max_retries),
            backoff_s=backoff_s,
            transcript_path=os.getenv("SPATIALNAV_TRANSCRIPT") or None,
        )

    def validate(self) -> None:
        if not self.base_url:
            raise ConfigError(
                "Remote mode needs SPATIALNAV_API_BASE (or OPENAI_API_BASE) to be set"
            )
