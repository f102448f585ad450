import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .arrow import ArrowConfig
from .evaluation import ScorecardThresholds
from .ingest import DEFAULT_FRACTIONS, PreprocessSpec, WindowConfig
from .mapinfer import MapConfig
from .models import METHODS, TrainConfig
from .procgen import CASES

PROJECT_ROOT = Path(__file__).resolve().parents[2]


@dataclass
class Settings:
    runs_dir: Path
    log_level: str
    jobs: int
    progress: bool


def _env_int(name: str, default: int) -> int:
    raw = (os.getenv(name, "") or "").strip()
    if raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        return default


def load_config() -> Settings:
    # Load .env if present
    load_dotenv()

    runs_dir = Path(os.getenv("RETROFORECAST_RUNS_DIR", PROJECT_ROOT / "runs"))
    runs_dir.mkdir(parents=True, exist_ok=True)

    level = (os.getenv("RETROFORECAST_LOG_LEVEL", "INFO") or "INFO").strip().upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "INFO"

    progress = (os.getenv("RETROFORECAST_PROGRESS", "1") or "1").strip().lower() not in ("0", "false", "no")

    return Settings(
        runs_dir=runs_dir,
        log_level=level,
        jobs=max(1, _env_int("RETROFORECAST_JOBS", 1)),
        progress=progress,
    )


class FileCaseSpec(BaseModel):
    """A case backed by a user-supplied CSV export (e.g. ERA5)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(..., min_length=1)
    path: Path
    value_column: str
    timestamp_column: Optional[str] = None
    preprocess: PreprocessSpec = PreprocessSpec()
    optional: bool = True


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    cases: Tuple[str, ...] = CASES
    T: int = Field(20000, ge=1)
    seed: int = 42
    case_params: Dict[str, Dict[str, float]] = {}
    file_cases: List[FileCaseSpec] = []
    window: WindowConfig = WindowConfig()
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    arrow: ArrowConfig = ArrowConfig()
    train: TrainConfig = TrainConfig()
    map: MapConfig = MapConfig()
    methods: Tuple[str, ...] = METHODS
    test_subsample: Optional[int] = Field(256, ge=1)
    out_dir: Path = PROJECT_ROOT / "runs" / "default"
    thresholds: ScorecardThresholds = ScorecardThresholds()

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if not self.cases:
            raise ValueError("case set is empty")
        if len(set(self.cases)) != len(self.cases):
            raise ValueError("case names must be unique")
        file_names = [f.name for f in self.file_cases]
        if len(set(file_names)) != len(file_names):
            raise ValueError("file case names must be unique")
        unknown = [c for c in self.cases if c not in CASES and c not in file_names]
        if unknown:
            raise ValueError(f"unknown case(s) {', '.join(unknown)}; declare them under file_cases")
        bad_params = [c for c in self.case_params if c not in CASES]
        if bad_params:
            raise ValueError(f"case_params given for non-synthetic case(s): {', '.join(bad_params)}")
        bad_methods = [m for m in self.methods if m not in METHODS]
        if bad_methods:
            raise ValueError(f"unknown method(s): {', '.join(bad_methods)}")
        for spec in self.file_cases:
            if spec.name in self.cases and not spec.optional and not spec.path.is_file():
                raise ValueError(f"file case {spec.name}: {spec.path} does not exist")
        return self

    def file_case(self, name: str) -> Optional[FileCaseSpec]:
        return next((f for f in self.file_cases if f.name == name), None)

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[Path] = None) -> "RunConfig":
        """Apply CLI overrides; the run seed is pushed into every stage config."""
        seed = self.seed if seed is None else int(seed)
        update = {
            "seed": seed,
            "arrow": self.arrow.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
            "map": self.map.model_copy(update={"seed": seed}),
        }
        if out_dir is not None:
            update["out_dir"] = Path(out_dir)
        return self.model_copy(update=update)


def load_run_config(path: Optional[Path] = None, seed: Optional[int] = None, out_dir: Optional[Path] = None) -> RunConfig:
    config = RunConfig() if path is None else RunConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    return config.with_overrides(seed, out_dir)
