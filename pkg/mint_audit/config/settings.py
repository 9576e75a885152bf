"""
Application Configuration
Centralized settings with environment variable support, plus the preset
catalogues (dataset sources, training regimes, run scales) used by the pipeline.
"""

import logging
from pathlib import Path
from typing import Optional, Dict, Any

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings with environment variable support (prefix MINT_)"""

    model_config = SettingsConfigDict(
        env_prefix="MINT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application Info
    environment: str = Field(default="development")

    # Logging Configuration
    log_level: str = Field(default="INFO")
    log_format: str = Field(default="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    log_json: bool = Field(default=False)
    log_file: Optional[str] = Field(default=None)

    # Storage Configuration
    data_root: Path = Field(default=Path("~/.cache/mint_audit/datasets"))

    # Dataset download
    allow_download: bool = Field(default=False)
    download_timeout: float = Field(default=60.0)
    download_retries: int = Field(default=3)

    # Compute
    torch_threads: int = Field(default=1)

    @field_validator("environment")
    @classmethod
    def validate_environment(cls, v):
        allowed_environments = ["development", "testing", "production"]
        if v not in allowed_environments:
            raise ValueError(f"Environment must be one of: {allowed_environments}")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        allowed_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in allowed_levels:
            raise ValueError(f"Log level must be one of: {allowed_levels}")
        return v.upper()

    @field_validator("data_root")
    @classmethod
    def expand_paths(cls, v):
        return Path(v).expanduser()

    def setup_logging(self, level: Optional[str] = None):
        """Configure toolkit logging"""
        level_name = (level or self.log_level).upper()
        handlers = [logging.StreamHandler()]
        if self.log_file:
            handlers.append(logging.FileHandler(self.log_file))

        if self.log_json:
            from pythonjsonlogger import jsonlogger

            formatter = jsonlogger.JsonFormatter(self.log_format)
        else:
            formatter = logging.Formatter(self.log_format)
        for handler in handlers:
            handler.setFormatter(formatter)

        logging.basicConfig(level=getattr(logging, level_name), handlers=handlers, force=True)

        # Suppress noisy third-party loggers
        logging.getLogger("httpx").setLevel(logging.WARNING)
        logging.getLogger("httpcore").setLevel(logging.WARNING)


class DatasetSources:
    """Official dataset archives and their published MD5 digests"""

    MNIST_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist"
    # Digests are those of the gzip archives (`<name>.gz`).
    MNIST_FILES = {
        "train_images": ("train-images-idx3-ubyte", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
        "train_labels": ("train-labels-idx1-ubyte", "d53e105ee54ea40749a09fcbcd1e9432"),
        "test_images": ("t10k-images-idx3-ubyte", "9fb629c4189551a2d022fa330f9573f3"),
        "test_labels": ("t10k-labels-idx1-ubyte", "ec29112dd5afa0611ce80d1b7f02629c"),
    }

    CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
    CIFAR10_ARCHIVE = "cifar-10-binary.tar.gz"
    CIFAR10_ARCHIVE_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"
    CIFAR10_DIR = "cifar-10-batches-bin"
    CIFAR10_TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
    CIFAR10_TEST_BATCH = "test_batch.bin"

    # (H, W, C, num_classes)
    SHAPES = {
        "mnist": (28, 28, 1, 10),
        "cifar10": (32, 32, 3, 10),
    }


class RegimePresets:
    """MINT head and loss regimes for small (E1) and large (E2) audits"""

    E1: Dict[str, Any] = {
        "mint_head": {"per_path_conv_channels": [256], "dropout": 0.4, "hidden_dim": 256},
        "weights": {"lambda1": 1.0, "lambda2": 10.0, "l2_coeff": 1e-4},
    }
    E2: Dict[str, Any] = {
        "mint_head": {"per_path_conv_channels": [1024, 2048], "dropout": 0.2, "hidden_dim": 1024},
        "weights": {"lambda1": 1.0, "lambda2": 10000.0, "l2_coeff": 1e-5},
    }

    @classmethod
    def get(cls, name: str) -> Dict[str, Any]:
        presets = {"e1": cls.E1, "e2": cls.E2}
        if name.lower() not in presets:
            raise ValueError(f"Unknown regime: {name}. Available: {list(presets)}")
        return presets[name.lower()]


class ScalePresets:
    """Run sizes for the reproduce pipeline"""

    # Desk backbones train from scratch, so the scale sets the learning rate and batch size
    SMOKE: Dict[str, Any] = {
        "members": 1000,
        "externals": 1000,
        "max_epochs": 3,
        "early_stop_patience": 2,
        "learning_rate": 1e-3,
        "batch_size": 64,
    }
    DESK: Dict[str, Any] = {
        "members": 10000,
        "externals": 10000,
        "max_epochs": 50,
        "early_stop_patience": 5,
        "learning_rate": 1e-3,
        "batch_size": 64,
    }
    SEEDS_PER_CELL = 3

    @classmethod
    def get(cls, name: str) -> Dict[str, Any]:
        presets = {"smoke": cls.SMOKE, "desk": cls.DESK}
        if name.lower() not in presets:
            raise ValueError(f"Unknown scale: {name}. Available: {list(presets)}")
        return presets[name.lower()]


# Global settings instance
settings = Settings()
