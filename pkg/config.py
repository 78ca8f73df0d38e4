import os
import logging
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent
DEFAULT_PLAN_FILE = REPO_ROOT / "data" / "plans.json"
DEFAULT_REPOSITORY_FILE = REPO_ROOT / "data" / "component_repository.json"

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass(frozen=True)
class Settings:
    host: str = "127.0.0.1"
    base_port: int = 18080
    log_level: str = "INFO"
    provision_timeout_s: float = 60.0
    detector_window_s: float = 10.0
    detector_threshold: float = 50.0
    placement_k: int = 10
    backoff_s: float = 30.0
    registration_retries: int = 3
    required_instances: int = 2
    plan_file: Path = DEFAULT_PLAN_FILE
    repository_file: Path = DEFAULT_REPOSITORY_FILE


def _env_number(name: str, default, cast):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return cast(raw)
    except ValueError:
        raise EnvironmentError(f"{name} must be a number, got '{raw}'")


def load_settings() -> Settings:
    """
    Build Settings from CDN_FLYPROV_* environment variables (a .env file is honoured).

    Returns:
        Settings with defaults for every unset variable
    """
    base_port = _env_number("CDN_FLYPROV_BASE_PORT", Settings.base_port, int)
    if base_port != 0 and not 1 <= base_port <= 65535 - 64:
        raise EnvironmentError(f"CDN_FLYPROV_BASE_PORT out of range: {base_port}")

    required_instances = _env_number("CDN_FLYPROV_REQUIRED_INSTANCES", Settings.required_instances, int)
    if required_instances < 1:
        raise EnvironmentError(f"CDN_FLYPROV_REQUIRED_INSTANCES must be at least 1: {required_instances}")

    settings = Settings(
        host=os.getenv("CDN_FLYPROV_HOST", Settings.host),
        base_port=base_port,
        log_level=os.getenv("CDN_FLYPROV_LOG_LEVEL", Settings.log_level).upper(),
        provision_timeout_s=_env_number("CDN_FLYPROV_PROVISION_TIMEOUT_S", Settings.provision_timeout_s, float),
        detector_window_s=_env_number("CDN_FLYPROV_DETECTOR_WINDOW_S", Settings.detector_window_s, float),
        detector_threshold=_env_number("CDN_FLYPROV_DETECTOR_THRESHOLD", Settings.detector_threshold, float),
        placement_k=_env_number("CDN_FLYPROV_PLACEMENT_K", Settings.placement_k, int),
        backoff_s=_env_number("CDN_FLYPROV_BACKOFF_S", Settings.backoff_s, float),
        registration_retries=_env_number("CDN_FLYPROV_REGISTRATION_RETRIES", Settings.registration_retries, int),
        required_instances=required_instances,
        plan_file=Path(os.getenv("CDN_FLYPROV_PLAN_FILE", str(DEFAULT_PLAN_FILE))),
        repository_file=Path(os.getenv("CDN_FLYPROV_REPOSITORY_FILE", str(DEFAULT_REPOSITORY_FILE))),
    )
    logger.debug(f"Loaded settings: {settings}")
    return settings


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)
    # Per-request access lines drown the provisioning story.
    for noisy in ("uvicorn", "uvicorn.access", "uvicorn.error", "urllib3", "httpx"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
