"""
Runtime plumbing: logging setup, environment defaults, counter-based random
streams, content hashes, the on-disk table cache and the parallel map helper.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional

import joblib
import numpy as np
from dotenv import load_dotenv

load_dotenv()

__version__ = "0.1.0"

LOGGER_NAME = "branchcap"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

# Stream tags keep the random streams of different consumers disjoint.
STREAM_TREE = 1
STREAM_SIZE_BLOCK = 2
STREAM_HIT = 3
STREAM_ESCAPE = 4
STREAM_SPINE = 5


def get_logger(module: str) -> logging.Logger:
    return logging.getLogger(f"{LOGGER_NAME}.{module}")


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """Console handler on stderr, optional UTF-8 file handler, shared format."""
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    formatter = logging.Formatter(LOG_FORMAT)
    ch = logging.StreamHandler()
    ch.setFormatter(formatter)
    logger.addHandler(ch)

    if log_file:
        try:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            fh = logging.FileHandler(log_file, encoding="utf-8")
            fh.setFormatter(formatter)
            logger.addHandler(fh)
        except OSError as e:
            logger.warning("Log file %s could not be opened (%s); console only", log_file, e)
    logger.propagate = False
    return logger


def env_default(name: str, fallback: Any) -> Any:
    """Read BRANCHCAP_<NAME> from the environment, cast to the fallback's type."""
    raw = os.getenv(f"BRANCHCAP_{name.upper()}")
    if raw is None or raw == "":
        return fallback
    if isinstance(fallback, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(fallback, int):
        return int(raw)
    if isinstance(fallback, float):
        return float(raw)
    return raw


# =============================================================================
# RANDOM STREAMS
# =============================================================================

def rng_stream(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Generator whose draws depend on (seed, stream, index) only."""
    if seed < 0 or index < 0 or stream < 0:
        raise ValueError("seed, index and stream must be non-negative")
    bitgen = np.random.Philox(key=int(seed), counter=[0, 0, int(stream), int(index)])
    return np.random.Generator(bitgen)


# =============================================================================
# HASHING AND CACHE
# =============================================================================

def content_hash(payload: Dict[str, Any]) -> str:
    text = json.dumps(payload, sort_keys=True, default=json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"Not serializable: {type(obj).__name__}")


class TableCache:
    """joblib-backed store of computed tables keyed by a content digest."""

    def __init__(self, cache_dir: Optional[str] = None, enabled: bool = True):
        self.cache_dir = Path(cache_dir or env_default("cache_dir", ".branchcap_cache"))
        self.enabled = enabled
        self._log = get_logger("cache")

    def path_for(self, kind: str, digest: str) -> Path:
        return self.cache_dir / f"{kind}-{digest[:24]}.joblib"

    def load(self, kind: str, digest: str) -> Optional[Dict[str, Any]]:
        if not self.enabled:
            return None
        path = self.path_for(kind, digest)
        if not path.exists():
            return None
        try:
            payload = joblib.load(path)
        except Exception as e:
            self._log.warning("Discarding unreadable cache entry %s: %s", path, e)
            return None
        if payload.get("header", {}).get("digest") != digest:
            self._log.warning("Cache entry %s has a mismatching header; ignored", path)
            return None
        self._log.debug("Cache hit %s", path)
        return payload

    def store(self, kind: str, digest: str, header: Dict[str, Any], data: Dict[str, Any]) -> None:
        if not self.enabled:
            return
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        payload = {"header": dict(header, digest=digest), **data}
        joblib.dump(payload, self.path_for(kind, digest), compress=3)


# =============================================================================
# PARALLEL MAP
# =============================================================================

def default_workers() -> int:
    return int(env_default("workers", 1))


def parallel_map(func: Callable[..., Any], items: Iterable[Any], workers: Optional[int] = None,
                 prefer: str = "threads") -> List[Any]:
    """Ordered map over items; results come back in input order."""
    items = list(items)
    n_jobs = workers if workers is not None else default_workers()
    if n_jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    return joblib.Parallel(n_jobs=n_jobs, prefer=prefer)(joblib.delayed(func)(item) for item in items)
