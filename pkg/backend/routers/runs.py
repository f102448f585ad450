"""Read-only access to run directories produced by `retroforecast reproduce`."""
import re
from pathlib import Path
from typing import List, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from backend.config import get_runs_dir
from backend.core import storage
from backend.core.errors import IncompleteRunError, RetroforecastError
from backend.core.pipeline import TABLES, read_table

router = APIRouter()

_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


class RunSummary(BaseModel):
    run_id: str
    cases: List[str] = []
    skipped: List[str] = []
    has_scorecard: bool = False
    all_pass: Optional[bool] = None


def _checked(value: str, what: str) -> str:
    if not _ID.match(value) or ".." in value:
        raise HTTPException(status_code=400, detail=f"invalid {what} '{value}'")
    return value


def _run_dir(run_id: str) -> Path:
    path = get_runs_dir() / _checked(run_id, "run id")
    if not path.is_dir():
        raise HTTPException(status_code=404, detail=f"run '{run_id}' not found")
    return path


def _artifact(path: Path):
    try:
        return storage.read_json(path)
    except IncompleteRunError:
        raise HTTPException(status_code=404, detail=f"{path.name} not found")


@router.get("", response_model=List[RunSummary])
def list_runs():
    """Run directories that carry a manifest, newest name last."""
    root = get_runs_dir()
    if not root.is_dir():
        return []
    runs = []
    for path in sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").is_file()):
        manifest = storage.read_json(path / "manifest.json")
        card_path = path / "scorecard.json"
        card = storage.read_json(card_path) if card_path.is_file() else None
        runs.append(RunSummary(
            run_id=path.name,
            cases=manifest.get("cases", []),
            skipped=manifest.get("skipped", []),
            has_scorecard=card is not None,
            all_pass=None if card is None else card.get("all_pass"),
        ))
    return runs


@router.get("/{run_id}/manifest")
def get_manifest(run_id: str):
    return _artifact(_run_dir(run_id) / "manifest.json")


@router.get("/{run_id}/scorecard")
def get_scorecard(run_id: str):
    return _artifact(_run_dir(run_id) / "scorecard.json")


@router.get("/{run_id}/cases/{case}/arrow")
def get_arrow(run_id: str, case: str):
    return _artifact(_run_dir(run_id) / "cases" / _checked(case, "case") / "arrow.json")


@router.get("/{run_id}/cases/{case}/eval")
def get_eval(run_id: str, case: str):
    return _artifact(_run_dir(run_id) / "cases" / _checked(case, "case") / "eval.json")


@router.get("/{run_id}/tables/{table}")
def get_table(run_id: str, table: str):
    if table not in TABLES:
        raise HTTPException(status_code=400, detail=f"table must be one of: {', '.join(TABLES)}")
    run_dir = _run_dir(run_id)
    try:
        rows = read_table(run_dir, table)
    except IncompleteRunError:
        raise HTTPException(status_code=404, detail=f"table '{table}' not exported for run '{run_id}'")
    except RetroforecastError as ex:
        raise HTTPException(status_code=500, detail=str(ex))
    return {"table": table, "rows": rows}
