import os
from pydantic import BaseModel
from dotenv import load_dotenv

load_dotenv()


def _flag(name: str, default: str = "0") -> bool:
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


class Settings(BaseModel):
    ENV: str = os.getenv("ENV", "development")

    # Lifetime law / branching
    RATE: float = float(os.getenv("BRANCHWAVE_RATE", "1.0"))
    PARTICLE_CAP: int = int(os.getenv("BRANCHWAVE_PARTICLE_CAP", "1000000"))
    CHECK_INVARIANTS: bool = _flag("BRANCHWAVE_CHECK_INVARIANTS")

    # Monte Carlo driver
    SEED: int = int(os.getenv("BRANCHWAVE_SEED", "20240601"))
    WORKERS: int = int(os.getenv("BRANCHWAVE_WORKERS", "1"))
    CHUNK_SIZE: int = int(os.getenv("BRANCHWAVE_CHUNK_SIZE", "2048"))
    PARALLEL_BACKEND: str = os.getenv("BRANCHWAVE_PARALLEL_BACKEND", "loky")

    # Numerics
    FD_STEP: float = float(os.getenv("BRANCHWAVE_FD_STEP", "1e-4"))
    ABS_TOL: float = float(os.getenv("BRANCHWAVE_ABS_TOL", "1e-10"))
    MAX_SUBDIVISIONS: int = int(os.getenv("BRANCHWAVE_MAX_SUBDIVISIONS", "50"))
    SPHERE_POINTS: int = int(os.getenv("BRANCHWAVE_SPHERE_POINTS", "2048"))
    LINE_NODES: int = int(os.getenv("BRANCHWAVE_LINE_NODES", "64"))
    RADIAL_NODES: int = int(os.getenv("BRANCHWAVE_RADIAL_NODES", "48"))
    ANGULAR_NODES: int = int(os.getenv("BRANCHWAVE_ANGULAR_NODES", "64"))

    # Distillation
    NU_MEASURE: str = os.getenv("BRANCHWAVE_NU_MEASURE", "uniform")
    MC_CONFIDENCE: float = float(os.getenv("BRANCHWAVE_MC_CONFIDENCE", "1.0"))
    DENSE_JSON_LIMIT: int = int(os.getenv("BRANCHWAVE_DENSE_JSON_LIMIT", "4000000"))

    LOG_LEVEL: str = os.getenv("BRANCHWAVE_LOG_LEVEL", "INFO")

    # Allow extra .env variables without throwing validation errors
    model_config = {"extra": "allow"}


settings = Settings()
