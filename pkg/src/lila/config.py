"""Client and server configuration.

Configuration files are TOML. A file may hold both roles in ``[client]``
and ``[server]`` tables, or the keys of a single role at top level.
Relative paths are resolved against the file's directory. Environment
variables override file values.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .model import DEFAULT_STORE_PREFIX, LilaError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(LilaError):
    pass


@dataclass
class ClientConfig:
    server_url: str
    token: str
    key_file: Path
    spool_dir: Path
    store_prefix: str = DEFAULT_STORE_PREFIX
    timeout: float = 10.0


@dataclass
class ServerConfig:
    database: Path = Path("lila.db")
    listen: str = "127.0.0.1:8080"
    reports_dir: Path | None = None
    ci_user: str | None = None
    ci_key_file: Path | None = None
    store_prefix: str = DEFAULT_STORE_PREFIX
    synchronous: str = "NORMAL"

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0] or "127.0.0.1"

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])


_CLIENT_ENV = {
    "server_url": "LILA_SERVER_URL",
    "token": "LILA_TOKEN",
    "key_file": "LILA_KEY_FILE",
    "spool_dir": "LILA_SPOOL_DIR",
    "store_prefix": "LILA_STORE_PREFIX",
}
_SERVER_ENV = {
    "database": "LILA_DATABASE",
    "listen": "LILA_LISTEN",
    "reports_dir": "LILA_REPORTS_DIR",
    "ci_user": "LILA_CI_USER",
    "ci_key_file": "LILA_CI_KEY_FILE",
    "store_prefix": "LILA_STORE_PREFIX",
}
_PATH_FIELDS = {"key_file", "spool_dir", "database", "reports_dir", "ci_key_file"}


def config_path(explicit: str | os.PathLike[str] | None, env: Mapping[str, str] = os.environ) -> Path | None:
    if explicit:
        return Path(explicit)
    value = env.get("LILA_CONFIG")
    return Path(value) if value else None


def _read_table(path: Path | None, section: str) -> tuple[dict[str, Any], Path]:
    if path is None:
        return {}, Path.cwd()
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from None
    table = doc.get(section, doc) if isinstance(doc.get(section), dict) else doc
    return {k: v for k, v in table.items() if not isinstance(v, dict)}, path.parent


def _build(cls: type, table: dict[str, Any], base: Path, env_names: Mapping[str, str],
           env: Mapping[str, str]) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = dict(table)
    for key, var in env_names.items():
        if env.get(var):
            values[key] = env[var]
    for key in _PATH_FIELDS & set(values):
        if values[key] is not None:
            p = Path(values[key]).expanduser()
            values[key] = p if p.is_absolute() else base / p
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"incomplete {cls.__name__}: {exc}") from None


def load_client_config(path: str | os.PathLike[str] | None = None,
                       env: Mapping[str, str] = os.environ) -> ClientConfig:
    table, base = _read_table(config_path(path, env), "client")
    return _build(ClientConfig, table, base, _CLIENT_ENV, env)


def load_server_config(path: str | os.PathLike[str] | None = None,
                       env: Mapping[str, str] = os.environ) -> ServerConfig:
    table, base = _read_table(config_path(path, env), "server")
    return _build(ServerConfig, table, base, _SERVER_ENV, env)
