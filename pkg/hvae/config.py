"""
Run Configuration
=================
Flat, validated run configuration plus the ``key = value`` file format it is
stored in. Resolution order is defaults < config file < command-line flags.

Usage:
    cfg = RunConfig.from_sources("config/default.cfg", {"variant": "nvmp", "seed": 3})
    print(cfg.to_text())
"""

import hashlib
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import ContractViolation, DataError

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    """The four prior parameterisations"""

    VAE = "vae"
    NVAE = "nvae"
    NVMP = "nvmp"
    NVMP_PLUS = "nvmp+"

    @property
    def is_residual(self) -> bool:
        return self is not Variant.VAE

    @property
    def uses_vamprior(self) -> bool:
        return self in (Variant.NVMP, Variant.NVMP_PLUS)


class ScheduleConfig(BaseModel):
    """Cyclical KL annealing schedule"""

    model_config = ConfigDict(frozen=True)

    cycle_length: int = 10000
    beta_init: float = 2e-7
    ramp_fraction: float = 0.5

    @field_validator("cycle_length")
    @classmethod
    def _positive_cycle(cls, v: int) -> int:
        if v < 1:
            raise ValueError("cycle_length must be >= 1")
        return v

    @field_validator("beta_init")
    @classmethod
    def _beta_range(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("beta_init must lie in (0, 1]")
        return v

    @field_validator("ramp_fraction")
    @classmethod
    def _ramp_range(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("ramp_fraction must lie in (0, 1]")
        return v


class SupervisionConfig(BaseModel):
    """Lesion supervision of the pathological layer z_P"""

    model_config = ConfigDict(frozen=True)

    enabled: bool = False
    target_layer: int = 2
    loss_weight: float = 1.0

    @field_validator("loss_weight")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("loss_weight must be non-negative")
        return v


class RunConfig(BaseModel):
    """Everything needed to reproduce a training run"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # model
    variant: Variant = Variant.NVAE
    levels: int = 4
    latent_channels: int = 2
    k: int = 16
    base_channels: int = 32
    max_channels: int = 128
    resolution: int = 64
    supervise_layer: Optional[int] = None
    supervision_weight: float = 1.0

    # optimisation
    lr: float = 5e-5
    weight_decay: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 100.0
    batch_size: int = 16
    max_iters: int = 2000
    seed: int = 0

    # loss re-weighting
    cycle_length: int = 10000
    beta_init: float = 2e-7
    ramp_fraction: float = 0.5
    kl_balancing: bool = True
    mc_samples: int = 1

    # data and bookkeeping
    data: str = "data/phantoms"
    checkpoint_every: int = 1000
    log_every: int = 50

    @field_validator("variant", mode="before")
    @classmethod
    def _parse_variant(cls, v: Any) -> Any:
        if isinstance(v, str):
            return v.strip().lower()
        return v

    @field_validator("supervise_layer", mode="before")
    @classmethod
    def _parse_optional_layer(cls, v: Any) -> Any:
        if isinstance(v, str) and v.strip().lower() in ("", "none", "off"):
            return None
        return v

    @model_validator(mode="after")
    def _check_ranges(self) -> "RunConfig":
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.latent_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.resolution % (2 ** self.levels) != 0:
            raise ValueError(
                f"resolution {self.resolution} is not divisible by 2^levels = {2 ** self.levels}"
            )
        if self.variant.uses_vamprior and self.k < 1:
            raise ValueError("VamPrior variants need k >= 1")
        if self.supervise_layer is not None and not 0 <= self.supervise_layer <= self.levels:
            raise ValueError(f"supervise_layer must lie in [0, {self.levels}]")
        if self.batch_size < 1 or self.mc_samples < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, mc_samples and checkpoint_every must be >= 1")
        # the schedule carries its own invariants
        ScheduleConfig(
            cycle_length=self.cycle_length,
            beta_init=self.beta_init,
            ramp_fraction=self.ramp_fraction,
        )
        return self

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            cycle_length=self.cycle_length,
            beta_init=self.beta_init,
            ramp_fraction=self.ramp_fraction,
        )

    @property
    def supervision(self) -> SupervisionConfig:
        if self.supervise_layer is None:
            return SupervisionConfig(enabled=False, loss_weight=self.supervision_weight)
        return SupervisionConfig(
            enabled=True,
            target_layer=self.supervise_layer,
            loss_weight=self.supervision_weight,
        )

    def to_flat_dict(self) -> Dict[str, Any]:
        values = self.model_dump()
        values["variant"] = self.variant.value
        return values

    def to_text(self) -> str:
        """Serialise to sorted ``key = value`` lines"""
        lines = []
        for key, value in sorted(self.to_flat_dict().items()):
            if value is None:
                value = "none"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self, length: int = 10) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:length]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        try:
            return cls(**dict(values))
        except ValidationError as e:
            raise ContractViolation(_summarise_validation(e)) from e

    @classmethod
    def from_sources(
        cls,
        config_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "RunConfig":
        values: Dict[str, Any] = {}
        if config_path is not None:
            values.update(load_config_file(config_path))
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.from_mapping(values)


def _summarise_validation(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item.get("loc", ())) or "config"
        parts.append(f"{loc}: {item.get('msg')}")
    return "invalid configuration: " + "; ".join(parts)


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a flat ``key = value`` config file (values stay strings, pydantic coerces)"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in RunConfig.model_fields:
                raise ContractViolation(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value
    return values


def resolve_threads() -> int:
    """Worker/thread cap from HVAE_THREADS (environment or .env), default 1"""
    load_dotenv()
    raw = os.getenv("HVAE_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ContractViolation(f"HVAE_THREADS must be an integer, got {raw!r}") from e
    if threads < 1:
        raise ContractViolation("HVAE_THREADS must be >= 1")
    return threads
