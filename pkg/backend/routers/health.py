from fastapi import APIRouter

from backend.config import get_runs_dir

router = APIRouter()


@router.get("/health")
def health():
    return {"status": "healthy", "service": "retroforecast-api"}


@router.get("/health/ready")
def ready():
    """Ready once the runs directory exists; reports how many runs it holds."""
    root = get_runs_dir()
    if not root.is_dir():
        return {"ready": False, "runs_dir": str(root), "runs": 0}
    runs = sum(1 for p in root.iterdir() if p.is_dir() and (p / "manifest.json").is_file())
    return {"ready": True, "runs_dir": str(root), "runs": runs}
