"""Application configuration: TOML file, environment, CLI flags.

Precedence is flags > environment > file > defaults. The file path itself
comes from --config or the ELLMA_CONFIG environment variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .core import ConfigurationError, SessionConfig
from .gateway import BackendConfig

ENV_CONFIG_PATH = "ELLMA_CONFIG"
DEFAULT_SERVICE_PORT = 8787


@dataclass(frozen=True)
class AppConfig:
    """Everything the CLI and service need to run sessions."""

    session: SessionConfig = field(default_factory=SessionConfig)
    backend: Optional[BackendConfig] = None
    log_dir: str = "./logs"
    memory_path: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = DEFAULT_SERVICE_PORT
    stt_url: Optional[str] = None
    tts_url: Optional[str] = None

    def resolved_memory_path(self) -> str:
        return self.memory_path or os.path.join(self.log_dir, "memory.jsonl")


def _read_file(path: str) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid TOML: {exc}")


def load_config(
    path: Optional[str] = None, overrides: Optional[dict[str, Any]] = None
) -> AppConfig:
    """Build the AppConfig; ``overrides`` holds flag-level values (highest wins)."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    path = path or os.environ.get(ENV_CONFIG_PATH)
    data: dict[str, Any] = _read_file(path) if path else {}

    session_data = dict(data.get("session", {}))
    for key in (
        "silence_threshold_s",
        "max_turns_per_phase",
        "prompt_mode",
        "voice_id",
        "token_window_budget",
        "osc_target",
        "max_session_s",
    ):
        if key in overrides:
            session_data[key] = overrides[key]
    try:
        session = SessionConfig(**session_data)
    except TypeError as exc:
        raise ConfigurationError(f"bad [session] config: {exc}")

    backend_data = dict(data.get("backend", {}))
    for key in ("endpoint_url", "model_id"):
        if key in overrides:
            backend_data[key] = overrides[key]
    backend = None
    if backend_data.get("endpoint_url"):
        backend_data.setdefault("model_id", "gpt-4")
        try:
            backend = BackendConfig(**backend_data)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad [backend] config: {exc}")

    paths = data.get("paths", {})
    service = data.get("service", {})
    speech = data.get("speech", {})
    return AppConfig(
        session=session,
        backend=backend,
        log_dir=overrides.get("log_dir", paths.get("log_dir", "./logs")),
        memory_path=overrides.get("memory_path", paths.get("memory_store")),
        host=overrides.get("host", service.get("host", "127.0.0.1")),
        port=int(overrides.get("port", service.get("port", DEFAULT_SERVICE_PORT))),
        stt_url=overrides.get("stt_url", speech.get("stt_url")),
        tts_url=overrides.get("tts_url", speech.get("tts_url")),
    )
