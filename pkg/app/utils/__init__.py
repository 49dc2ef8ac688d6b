"""Configuration, logging and small shared helpers"""
import hashlib
import logging
import logging.handlers
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Union

import torch
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process settings from environment"""

    # App
    APP_NAME: str = "ImbalancedSSL"
    APP_VERSION: str = "0.1.0"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Artifacts
    ARTIFACT_ROOT: str = "artifacts"

    # Compute
    DEVICE: str = "cpu"
    NUM_WORKERS: int = 0
    MAX_PARALLEL_RUNS: int = 1

    class Config:
        env_file = ".env"
        case_sensitive = True


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_level: str = "INFO", log_dir: Optional[Union[str, Path]] = None) -> None:
    """Setup console + rotating file logging

    Calling again with a new log_dir swaps the file handler, so each run
    directory gets its own run.log.
    """
    formatter = logging.Formatter(LOG_FORMAT)
    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)

    for handler in list(root_logger.handlers):
        if getattr(handler, "_ssl_managed", False):
            root_logger.removeHandler(handler)
            handler.close()

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler._ssl_managed = True
    root_logger.addHandler(console_handler)

    # File handler
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_dir / "run.log",
            maxBytes=10485760,  # 10MB
            backupCount=5
        )
        file_handler.setFormatter(formatter)
        file_handler._ssl_managed = True
        root_logger.addHandler(file_handler)


def derive_seed(seed: int, *tags) -> int:
    """Derive an independent 63-bit seed from a master seed and tags

    derive_seed(7, "expert", 2) is stable across processes and platforms.
    """
    key = ":".join([str(seed)] + [str(t) for t in tags]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int) -> torch.Generator:
    """CPU torch generator seeded deterministically"""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


_RNG_LOCK = threading.Lock()


@contextmanager
def seeded(seed: int):
    """Seed torch's global CPU RNG for the block, then restore it

    Module constructors draw from the global RNG, so concurrent runs (grid
    threads, parallel experts) take turns here; anything that constructs
    modules must do so inside this block.
    """
    with _RNG_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def parameter_hash(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order"""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def resolve_device(device: Optional[str] = None) -> torch.device:
    """Resolve configured device, falling back to CPU when CUDA is absent"""
    name = device or settings.DEVICE
    if name.startswith("cuda") and not torch.cuda.is_available():
        logging.getLogger(__name__).warning(f"{name} requested but unavailable, using cpu")
        name = "cpu"
    return torch.device(name)


settings = Settings()
