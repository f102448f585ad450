"""API config from environment."""
import os
from pathlib import Path

# Project root (parent of backend/)
PROJECT_ROOT = Path(__file__).resolve().parents[1]


def get_runs_dir() -> Path:
    raw = (os.getenv("RETROFORECAST_RUNS_DIR") or "").strip()
    return Path(raw) if raw else PROJECT_ROOT / "runs"


def get_allowed_origins():
    raw = (os.getenv("RETROFORECAST_CORS_ORIGINS") or "*").strip()
    return [o.strip() for o in raw.split(",") if o.strip()] or ["*"]
