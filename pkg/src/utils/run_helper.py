"""
Run bookkeeping shared by the CLI commands: logging setup, stage timers, the thread cap
read from the environment, and the JSON run manifest written next to every output.
"""

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from src.domd_bench import __version__
from src.domd_bench.errors import ParameterError

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(asctime)s] p%(process)s {%(filename)s:%(lineno)d} %(levelname)s - %(message)s"
THREADS_ENV = "DOMD_BENCH_THREADS"


def configure_logging(level: Optional[str] = None) -> str:
    """Configure the root logger once; ``level`` overrides the LOG_LEVEL environment variable."""
    level = (level or os.environ.get("LOG_LEVEL", "INFO")).strip().upper()
    # getLevelNamesMapping() is 3.11+; it returns a copy of logging._nameToLevel.
    names = logging.getLevelNamesMapping() if hasattr(logging, "getLevelNamesMapping") else logging._nameToLevel
    if level not in names:
        raise ParameterError(f"unknown log level '{level}'")
    logging.basicConfig(format=LOG_FORMAT)
    logging.getLogger().setLevel(level)
    return level


def thread_cap() -> int:
    """Worker count for suite runs, capped by DOMD_BENCH_THREADS when set."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ParameterError(f"{THREADS_ENV} must be a positive integer, got '{raw}'") from None
    if value < 1:
        raise ParameterError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    return value


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.timings: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.timings[name] = self.timings.get(name, 0.0) + elapsed
            logger.debug("stage %s took %.3fs", name, elapsed)

    def merge(self, other: Dict[str, float]) -> None:
        for name, seconds in other.items():
            self.timings[name] = self.timings.get(name, 0.0) + seconds


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str = __version__
    timings: Dict[str, float] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    def add_output(self, path) -> None:
        self.outputs.append(os.path.basename(str(path)))

    def write(self, directory) -> str:
        path = os.path.join(str(directory), "manifest.json")
        payload = asdict(self)
        payload["outputs"] = sorted(self.outputs)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info("wrote manifest %s", path)
        return path
