import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from dotenv import load_dotenv
from loguru import logger

load_dotenv()

_UINT64_MASK = (1 << 64) - 1


def get_threads(default: int = 1) -> int:
    """Return the worker count from ``VMPARSE_THREADS``.

    Missing, non-numeric or non-positive values fall back to ``default``.
    """

    raw = os.getenv("VMPARSE_THREADS")
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring malformed VMPARSE_THREADS={!r}", raw)
        return default
    return value if value >= 1 else default


def resolve_threads(cli_value: Optional[int], config_value: int = 1) -> int:
    """``--threads`` flag first, then the environment, then the config file."""

    if cli_value is not None:
        return max(1, int(cli_value))
    return get_threads(default=config_value)


def get_log_level(default: str = "INFO") -> str:
    return os.getenv("VMPARSE_LOG_LEVEL", default).upper()


def fast_nondeterministic() -> bool:
    """True when ``VMPARSE_FAST_NONDETERMINISTIC`` opts out of bit-stable reductions."""

    return os.getenv("VMPARSE_FAST_NONDETERMINISTIC", "").strip().lower() in {"1", "true", "yes", "on"}


def setup_logging(level: Optional[str] = None, log_file: Optional[Union[str, Path]] = None) -> None:
    """Configure loguru sinks.

    Standard output stays free for JSON summaries, so the console sink writes
    to stderr. A file sink is added when ``log_file`` is given.
    """

    level = (level or get_log_level()).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <8} | {name}:{line} - {message}")
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(str(log_file), level="DEBUG", encoding="utf-8", enqueue=False)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_json(obj: Any) -> str:
    """Hash of the canonical JSON form of ``obj``."""

    return sha256_bytes(canonical_json(obj).encode("utf-8"))


def sha256_file(path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def derive_seed(*parts: Any) -> int:
    """Deterministic 63-bit seed from arbitrary JSON-serialisable parts."""

    digest = hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, index)``.

    Streams do not depend on the order in which examples are processed.
    """

    key = np.array([int(seed) & _UINT64_MASK, int(index) & _UINT64_MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def write_json(path: Union[str, Path], obj: Any, indent: Optional[int] = 2) -> Path:
    """Write JSON with sorted keys (stable bytes across reruns)."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, sort_keys=True, indent=indent, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_json(path: Union[str, Path]) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
