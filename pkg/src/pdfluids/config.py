"""Run configuration: JSON parsing, validation and round-tripping.

A run config bundles the scene parameterization with solver choices.  The
JSON schema mirrors the dataclass fields; unknown keys are rejected so typos
fail loudly before a run starts.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .pressure import CgConfig
from .scenes import BC_MODES, SceneSpec

METHODS = ("pd", "admm", "iop", "direct")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: SceneSpec
    method: str = "pd"
    bc_mode: str = "regular"
    frames: int = 50
    out_dir: str = "out"
    seed: int = 0
    # solver overrides; None means the guiding-weight defaults
    tau: float | None = None
    sigma: float | None = None
    theta: float | None = None
    rho: float | None = None
    max_iters: int = 300
    eps_abs: float = 1e-3
    eps_rel: float = 1e-3
    eps_cg_start: float = 1e-2
    eps_cg_final: float = 1e-5
    max_cg_iters: int = 10000
    exact_prox: bool = False
    save_velocity: bool = False
    save_pgm: bool = False
    save_logs: bool = False
    upres_factor: int = 4
    coarse_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.bc_mode not in BC_MODES:
            raise ConfigError(f"bc_mode must be one of {BC_MODES}, got {self.bc_mode!r}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if not (0 < self.eps_cg_final <= self.eps_cg_start):
            raise ConfigError("need 0 < eps_cg_final <= eps_cg_start")
        for name in ("tau", "sigma", "theta", "rho"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name} must be positive when given")
        if self.max_iters < 1 or self.max_cg_iters < 1:
            raise ConfigError("iteration caps must be >= 1")
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ConfigError("stop tolerances must be non-negative")
        if self.upres_factor < 1:
            raise ConfigError("upres_factor must be >= 1")

    @property
    def cg(self) -> CgConfig:
        return CgConfig(self.eps_cg_start, self.eps_cg_final, self.max_cg_iters)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["scene"] = {k: v for k, v in dataclasses.asdict(self.scene).items()
                        if v is not None}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        scene_data = data.pop("scene", None)
        if not isinstance(scene_data, dict) or "name" not in scene_data:
            raise ConfigError("config needs a scene object with a name")
        scene_fields = {f.name for f in dataclasses.fields(SceneSpec)}
        unknown = set(scene_data) - scene_fields
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        run_fields = {f.name for f in dataclasses.fields(cls)} - {"scene"}
        unknown = set(data) - run_fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "obstacle" in scene_data and scene_data["obstacle"] is not None:
            scene_data["obstacle"] = tuple(scene_data["obstacle"])
        if "emitter" in scene_data and scene_data["emitter"] is not None:
            scene_data["emitter"] = tuple(scene_data["emitter"])
        try:
            scene = SceneSpec(**scene_data)
            return cls(scene=scene, **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                return cls.from_json(f.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def thread_cap() -> int:
    """Value of PDFLUIDS_THREADS (0 = auto).  All sweeps currently run on one
    thread, which trivially respects any cap; the variable is validated here
    so configs relying on it fail fast."""
    raw = os.environ.get("PDFLUIDS_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"PDFLUIDS_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError("PDFLUIDS_THREADS must be >= 0")
    return n
