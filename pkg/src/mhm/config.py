"""Run configuration shared by the runtime and the command line."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigurationError

MODES = ("dynamic", "static", "sequential")
CHECKPOINT_MODES = ("off", "coarse", "fine")
MAX_N = 256
MAX_WORKERS = 256


@dataclass(frozen=True)
class Discretization:
    """Coarse grid ``n``, submesh level ``r``, multiplier space (``l``, ``m``), local degree ``k``."""

    n: int = 4
    r: int = 1
    l: int = 0
    m: int = 1
    k: int = 2

    def validate(self) -> "Discretization":
        for name in ("n", "m", "k"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.n > MAX_N:
            raise ConfigurationError(f"n must be <= {MAX_N}")
        if self.l < 0 or self.r < 0:
            raise ConfigurationError("l and r must be >= 0")
        if self.r > 8:
            raise ConfigurationError("r must be <= 8")
        if self.k < self.l + 1:
            raise ConfigurationError(
                f"local degree k={self.k} must be at least l+1={self.l + 1} for a well-posed global problem")
        return self


@dataclass(frozen=True)
class RunConfig:
    n: int = 4
    r: int = 1
    l: int = 0
    m: int = 1
    k: int = 2
    problem: str = "sine"
    mode: str = "dynamic"
    workers: int = 1
    failure_plan: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_mode: str = "off"
    seed: int = 0
    output_dir: str | None = None
    heartbeat_interval: float = 0.25
    missed_heartbeats: int = 4
    max_attempts: int = 10
    grace_period: float = 2.0
    # test hook: "locals:<count>", "post_split" or "post_locals"
    inject_master_crash: str | None = None
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def discretization(self) -> Discretization:
        return Discretization(self.n, self.r, self.l, self.m, self.k)

    def validate(self) -> "RunConfig":
        self.discretization.validate()
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.checkpoint_mode not in CHECKPOINT_MODES:
            raise ConfigurationError(f"checkpoint mode must be one of {CHECKPOINT_MODES}")
        if not 1 <= self.workers <= MAX_WORKERS:
            raise ConfigurationError(f"workers must be in [1, {MAX_WORKERS}]")
        if self.checkpoint_mode != "off" and not self.checkpoint_dir:
            raise ConfigurationError("checkpointing requires a checkpoint directory")
        if self.heartbeat_interval <= 0 or self.missed_heartbeats < 1:
            raise ConfigurationError("heartbeat settings must be positive")
        if self.max_attempts < 1:
            raise ConfigurationError("max_attempts must be >= 1")
        return self

    def numeric_identity(self) -> dict:
        """Fields that determine the numerical result."""
        return {"n": self.n, "r": self.r, "l": self.l, "m": self.m, "k": self.k, "problem": self.problem}

    def config_hash(self) -> str:
        blob = json.dumps(self.numeric_identity(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "extra"]
