"""Service configuration: TOML file with environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib


@dataclass(frozen=True)
class ServiceConfig:
    listen_addr: str = "127.0.0.1:8040"
    data_dir: Path = Path("labelaid-data")
    study_seed: int = 0

    @property
    def host(self) -> str:
        return self.listen_addr.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen_addr.rsplit(":", 1)[1])


def load_service_config(path: Optional[str | Path] = None) -> ServiceConfig:
    """Read the TOML config (if any), then apply LISTEN_ADDR, DATA_DIR
    and STUDY_SEED environment overrides."""
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    server = raw.get("server", {})
    study = raw.get("study", {})
    listen = os.environ.get("LISTEN_ADDR", server.get("listen_addr", "127.0.0.1:8040"))
    data_dir = os.environ.get("DATA_DIR", server.get("data_dir", "labelaid-data"))
    seed = int(os.environ.get("STUDY_SEED", study.get("seed", 0)))
    return ServiceConfig(listen_addr=listen, data_dir=Path(data_dir), study_seed=seed)
