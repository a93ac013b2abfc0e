"""SQLite persistence for users, tokens, attestations and report definitions.

Attestations are append-only. The uniqueness of
(drv_path, output_path, user_id, output_hash) is enforced by the database,
so racing duplicate inserts resolve to a single row without any
application-side pre-check.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import os
import secrets
import sqlite3
import threading
import time
from collections.abc import Iterable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass

from .model import (
    Attestation,
    DrvId,
    LilaError,
    Observation,
    OutputHash,
    Signature,
    Submission,
    from_unix,
    parse_store_path,
)
from .signing import PublicKey, verify

logger = logging.getLogger(__name__)

_MIGRATIONS = [
    """
    CREATE TABLE users (
        user_id TEXT PRIMARY KEY,
        public_key TEXT NOT NULL,
        created_at INTEGER NOT NULL
    );
    CREATE TABLE tokens (
        token_id TEXT PRIMARY KEY,
        secret_hash TEXT NOT NULL,
        user_id TEXT NOT NULL REFERENCES users(user_id)
    );
    CREATE TABLE attestations (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        drv_path TEXT NOT NULL,
        drv_hash TEXT NOT NULL,
        output_path TEXT NOT NULL,
        user_id TEXT NOT NULL REFERENCES users(user_id),
        output_hash TEXT NOT NULL,
        output_sig TEXT NOT NULL,
        received_at INTEGER NOT NULL,
        UNIQUE (drv_path, output_path, user_id, output_hash)
    );
    CREATE INDEX attestations_drv_hash ON attestations (drv_hash);
    CREATE INDEX attestations_output_path ON attestations (output_path, received_at, id);
    CREATE TABLE reports (
        name TEXT PRIMARY KEY,
        definition_document TEXT NOT NULL
    );
    """,
]

_ATTESTATION_COLUMNS = "id, drv_path, output_path, user_id, output_hash, output_sig, received_at"

_INSERT_SQL = """
    INSERT INTO attestations
        (drv_path, drv_hash, output_path, user_id, output_hash, output_sig, received_at)
    VALUES (?, ?, ?, ?, ?, ?, ?)
    ON CONFLICT (drv_path, output_path, user_id, output_hash) DO NOTHING
"""


class StorageError(LilaError):
    pass


@dataclass(frozen=True)
class DrvRow:
    drv_hash: str
    drv_path: str
    attestation_count: int
    distinct_builders: int


def hash_token_secret(secret: str, salt: bytes | None = None) -> str:
    # Secrets are 256-bit random values, so a salted sha256 is sufficient.
    salt = os.urandom(16) if salt is None else salt
    digest = hashlib.sha256(salt + secret.encode()).hexdigest()
    return f"sha256${salt.hex()}${digest}"


def _check_token_secret(secret: str, stored: str) -> bool:
    try:
        _, salt_hex, _ = stored.split("$")
        salt = bytes.fromhex(salt_hex)
    except ValueError:
        return False
    return hmac.compare_digest(hash_token_secret(secret, salt), stored)


_DUMMY_TOKEN_HASH = hash_token_secret("")


class Store:
    """A SQLite database file, with one connection per thread.

    ``synchronous`` trades durability against latency: in WAL mode
    ``NORMAL`` keeps every committed row across a process crash, ``FULL``
    also across power loss.
    """

    def __init__(self, path: str | os.PathLike[str], *, store_prefix: str = "/nix/store",
                 synchronous: str = "NORMAL", busy_timeout_ms: int = 30_000) -> None:
        if synchronous.upper() not in ("OFF", "NORMAL", "FULL", "EXTRA"):
            raise StorageError(f"invalid synchronous mode {synchronous!r}")
        self.path = os.fspath(path)
        self.store_prefix = store_prefix
        self.synchronous = synchronous.upper()
        self.busy_timeout_ms = busy_timeout_ms
        self._local = threading.local()
        self._connections: list[sqlite3.Connection] = []
        self._lock = threading.Lock()
        self._migrate()

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            try:
                conn = sqlite3.connect(self.path, isolation_level=None, check_same_thread=False)
                conn.execute(f"PRAGMA busy_timeout = {int(self.busy_timeout_ms)}")
                conn.execute("PRAGMA journal_mode = WAL")
                conn.execute(f"PRAGMA synchronous = {self.synchronous}")
                conn.execute("PRAGMA foreign_keys = ON")
            except sqlite3.Error as exc:
                raise StorageError(f"cannot open database {self.path}: {exc}") from exc
            self._local.conn = conn
            with self._lock:
                self._connections.append(conn)
        return conn

    def close(self) -> None:
        with self._lock:
            for conn in self._connections:
                conn.close()
            self._connections.clear()
        self._local = threading.local()

    @contextmanager
    def _tx(self, mode: str = "DEFERRED") -> Iterator[sqlite3.Connection]:
        conn = self._conn()
        try:
            conn.execute(f"BEGIN {mode}")
            try:
                yield conn
            except BaseException:
                conn.execute("ROLLBACK")
                raise
            conn.execute("COMMIT")
        except sqlite3.Error as exc:
            raise StorageError(str(exc)) from exc

    def _migrate(self) -> None:
        with self._tx("IMMEDIATE") as conn:
            conn.execute("CREATE TABLE IF NOT EXISTS schema_version (version INTEGER NOT NULL)")
            row = conn.execute("SELECT MAX(version) FROM schema_version").fetchone()
            current = row[0] or 0
            for version, script in enumerate(_MIGRATIONS[current:], start=current + 1):
                for statement in script.split(";"):
                    if statement.strip():
                        conn.execute(statement)
                conn.execute("INSERT INTO schema_version (version) VALUES (?)", (version,))
                logger.info("applied schema migration %d", version)

    def schema_version(self) -> int:
        return self._conn().execute("SELECT MAX(version) FROM schema_version").fetchone()[0]

    # users and tokens

    def upsert_user(self, user_id: str, public_key: PublicKey) -> None:
        if public_key.name != user_id:
            raise StorageError(f"public key is named {public_key.name!r}, not {user_id!r}")
        with self._tx("IMMEDIATE") as conn:
            conn.execute(
                """INSERT INTO users (user_id, public_key, created_at) VALUES (?, ?, ?)
                   ON CONFLICT (user_id) DO UPDATE SET public_key = excluded.public_key""",
                (user_id, public_key.render(), int(time.time())),
            )

    def get_public_key(self, user_id: str) -> PublicKey | None:
        row = self._conn().execute(
            "SELECT public_key FROM users WHERE user_id = ?", (user_id,)
        ).fetchone()
        return PublicKey.parse(row[0]) if row else None

    def list_users(self) -> list[PublicKey]:
        rows = self._conn().execute("SELECT public_key FROM users ORDER BY user_id").fetchall()
        return [PublicKey.parse(r[0]) for r in rows]

    def create_token(self, user_id: str) -> str:
        """Issue a bearer token for ``user_id``; only its salted hash is kept."""
        token_id = secrets.token_hex(8)
        secret = secrets.token_urlsafe(32)
        with self._tx("IMMEDIATE") as conn:
            if conn.execute("SELECT 1 FROM users WHERE user_id = ?", (user_id,)).fetchone() is None:
                raise StorageError(f"unknown user {user_id!r}")
            conn.execute(
                "INSERT INTO tokens (token_id, secret_hash, user_id) VALUES (?, ?, ?)",
                (token_id, hash_token_secret(secret), user_id),
            )
        return f"{token_id}.{secret}"

    def verify_token(self, token: str) -> str | None:
        token_id, _, secret = token.partition(".")
        row = self._conn().execute(
            "SELECT secret_hash, user_id FROM tokens WHERE token_id = ?", (token_id,)
        ).fetchone()
        if row is None:
            _check_token_secret(secret, _DUMMY_TOKEN_HASH)
            return None
        return row[1] if _check_token_secret(secret, row[0]) else None

    # attestations

    def _row_to_attestation(self, row: tuple) -> Attestation:
        id_, drv_path, output_path, user_id, output_hash, output_sig, received_at = row
        return Attestation(
            id=id_,
            output_path=parse_store_path(output_path, self.store_prefix),
            user_id=user_id,
            drv_id=DrvId.parse(drv_path, self.store_prefix),
            output_hash=OutputHash.parse(output_hash),
            output_sig=Signature.parse(output_sig),
            received_at=from_unix(received_at),
        )

    def _params(self, record: Submission, user_id: str, received_at: int) -> tuple:
        return (
            record.drv_id.render(),
            record.drv_id.drv_hash,
            record.output_path.render(),
            user_id,
            record.output_hash.render(),
            record.output_sig.render(),
            received_at,
        )

    def insert_attestation(self, record: Submission, user_id: str,
                           received_at: int | None = None) -> tuple[Attestation, bool]:
        """Insert a verified record; returns (row, created).

        An existing row with the same uniqueness tuple is returned with
        ``created=False``.
        """
        when = int(time.time()) if received_at is None else int(received_at)
        params = self._params(record, user_id, when)
        try:
            conn = self._conn()
            cur = conn.execute(_INSERT_SQL, params)
            if cur.rowcount == 1:
                row = conn.execute(
                    f"SELECT {_ATTESTATION_COLUMNS} FROM attestations WHERE id = ?", (cur.lastrowid,)
                ).fetchone()
                return self._row_to_attestation(row), True
            row = conn.execute(
                f"""SELECT {_ATTESTATION_COLUMNS} FROM attestations
                    WHERE drv_path = ? AND output_path = ? AND user_id = ? AND output_hash = ?""",
                (params[0], params[2], user_id, params[4]),
            ).fetchone()
        except sqlite3.Error as exc:
            raise StorageError(str(exc)) from exc
        if row is None:
            raise StorageError("insert was ignored but no conflicting row exists")
        return self._row_to_attestation(row), False

    def insert_many(self, records: Iterable[Submission], user_id: str,
                    received_at: int | None = None) -> int:
        """Insert records in one transaction; returns how many rows were created."""
        when = int(time.time()) if received_at is None else int(received_at)
        params = [self._params(r, user_id, when) for r in records]
        with self._tx("IMMEDIATE") as conn:
            before = conn.total_changes
            conn.executemany(_INSERT_SQL, params)
            return conn.total_changes - before

    def count_attestations(self) -> int:
        return self._conn().execute("SELECT COUNT(*) FROM attestations").fetchone()[0]

    def query_by_output(self, output_path: str, limit: int | None = None,
                        after_id: int | None = None) -> list[Attestation]:
        sql = f"SELECT {_ATTESTATION_COLUMNS} FROM attestations WHERE output_path = ?"
        params: list = [output_path]
        with self._tx() as conn:
            if after_id is not None:
                anchor = conn.execute(
                    "SELECT received_at FROM attestations WHERE id = ?", (after_id,)
                ).fetchone()
                if anchor is not None:
                    sql += " AND (received_at, id) > (?, ?)"
                    params += [anchor[0], after_id]
                else:
                    sql += " AND id > ?"
                    params.append(after_id)
            sql += " ORDER BY received_at, id"
            if limit is not None:
                sql += " LIMIT ?"
                params.append(limit)
            rows = conn.execute(sql, params).fetchall()
        return [self._row_to_attestation(r) for r in rows]

    def query_by_drv(self, drv_hash: str) -> list[Attestation]:
        rows = self._conn().execute(
            f"""SELECT {_ATTESTATION_COLUMNS} FROM attestations WHERE drv_hash = ?
                ORDER BY output_path, received_at, id""",
            (drv_hash,),
        ).fetchall()
        return [self._row_to_attestation(r) for r in rows]

    def list_drvs(self, limit: int | None = None, after: str | None = None
                  ) -> tuple[list[DrvRow], list[Observation]]:
        """One page of derivations plus every observation for them, from one snapshot."""
        sql = """SELECT drv_hash, MIN(drv_path), COUNT(*), COUNT(DISTINCT user_id)
                 FROM attestations"""
        params: list = []
        if after is not None:
            sql += " WHERE drv_hash > ?"
            params.append(after)
        sql += " GROUP BY drv_hash ORDER BY drv_hash"
        if limit is not None:
            sql += " LIMIT ?"
            params.append(limit)
        with self._tx() as conn:
            drvs = [DrvRow(*r) for r in conn.execute(sql, params).fetchall()]
            observations: list[Observation] = []
            hashes = [d.drv_hash for d in drvs]
            for i in range(0, len(hashes), 500):
                chunk = hashes[i:i + 500]
                observations += self._observations(
                    conn, f"WHERE drv_hash IN ({','.join('?' * len(chunk))})", chunk
                )
        return drvs, observations

    @staticmethod
    def _observations(conn: sqlite3.Connection, where: str = "", params: Iterable = ()) -> list[Observation]:
        rows = conn.execute(
            f"""SELECT id, drv_path, drv_hash, output_path, user_id, output_hash, received_at
                FROM attestations {where} ORDER BY id""",
            list(params),
        ).fetchall()
        return [Observation(*r) for r in rows]

    def snapshot(self) -> list[Observation]:
        """Every stored attestation, read in a single transaction."""
        with self._tx() as conn:
            return self._observations(conn)

    def iter_attestations(self, batch: int = 5000) -> Iterator[Attestation]:
        last = 0
        while True:
            rows = self._conn().execute(
                f"SELECT {_ATTESTATION_COLUMNS} FROM attestations WHERE id > ? ORDER BY id LIMIT ?",
                (last, batch),
            ).fetchall()
            if not rows:
                return
            for r in rows:
                yield self._row_to_attestation(r)
            last = rows[-1][0]

    def audit(self) -> list[int]:
        """Ids of stored rows whose signature no longer verifies, or whose
        signing key name differs from the submitting user."""
        keys = {k.name: k for k in self.list_users()}
        bad = []
        for a in self.iter_attestations():
            pub = keys.get(a.user_id)
            if (pub is None or a.output_sig.key_name != a.user_id
                    or not verify(pub, a.output_sig, a.drv_id, a.output_path, a.output_hash)):
                bad.append(a.id)
        return bad

    # report definitions

    def put_report(self, name: str, document: str) -> None:
        with self._tx("IMMEDIATE") as conn:
            conn.execute(
                """INSERT INTO reports (name, definition_document) VALUES (?, ?)
                   ON CONFLICT (name) DO UPDATE SET definition_document = excluded.definition_document""",
                (name, document),
            )

    def get_report(self, name: str) -> str | None:
        row = self._conn().execute(
            "SELECT definition_document FROM reports WHERE name = ?", (name,)
        ).fetchone()
        return row[0] if row else None

    def list_reports(self) -> list[tuple[str, str]]:
        return self._conn().execute(
            "SELECT name, definition_document FROM reports ORDER BY name"
        ).fetchall()

