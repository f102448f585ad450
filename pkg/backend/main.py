"""
FastAPI backend for retroforecast run results (read-only).
Run: uvicorn backend.main:app --reload --host 0.0.0.0 --port 8000

Runs are produced offline by `python retroforecast.py reproduce`; set
RETROFORECAST_RUNS_DIR to point the API at their parent directory.
"""
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
try:
    from dotenv import load_dotenv
    load_dotenv(ROOT / ".env")
except Exception:
    pass

if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from backend.config import get_allowed_origins
from backend.routers import health, runs

app = FastAPI(
    title="Retroforecast API",
    description="Arrow-of-time verdicts, forecast evaluations and scorecards of completed runs",
    version="1.0.0",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=get_allowed_origins(),
    allow_credentials=False,  # must be False with "*"
    allow_methods=["GET"],
    allow_headers=["*"],
)

app.include_router(health.router, tags=["health"])
app.include_router(runs.router, prefix="/api/runs", tags=["runs"])
