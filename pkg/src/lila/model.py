"""Value types shared by the client, the server and the report engine.

Everything here is immutable and renders to the exact string forms used on
the wire and in the database.
"""

from __future__ import annotations

import base64
import binascii
import enum
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, NamedTuple

DEFAULT_STORE_PREFIX = "/nix/store"

# Nix base32 alphabet: no e, o, u, t.
DIGEST_ALPHABET = "0123456789abcdfghijklmnpqrsvwxyz"
DIGEST_LEN = 32

_DIGEST_RE = re.compile(f"[{DIGEST_ALPHABET}]{{{DIGEST_LEN}}}")
_NAME_RE = re.compile(r"[A-Za-z0-9+._?=-]+")
_HEX_RE = re.compile(r"[0-9a-f]{64}")


class LilaError(Exception):
    """Base class for every error raised by this package."""


class MalformedStorePath(LilaError, ValueError):
    pass


class MalformedOutputHash(LilaError, ValueError):
    pass


class MalformedSignature(LilaError, ValueError):
    pass


class MalformedBody(LilaError, ValueError):
    """A submission document does not follow the wire schema."""


def _normalize_prefix(store_prefix: str) -> str:
    prefix = str(store_prefix)
    if len(prefix) > 1:
        prefix = prefix.rstrip("/")
    return prefix


@dataclass(frozen=True, order=True)
class StorePath:
    store_prefix: str
    digest: str
    name: str

    def __post_init__(self) -> None:
        if not _DIGEST_RE.fullmatch(self.digest):
            raise MalformedStorePath(f"invalid store digest {self.digest!r}")
        if not _NAME_RE.fullmatch(self.name) or self.name.startswith("."):
            raise MalformedStorePath(f"invalid store path name {self.name!r}")

    def render(self) -> str:
        return f"{self.store_prefix}/{self.digest}-{self.name}"

    def __str__(self) -> str:
        return self.render()


def parse_store_path(s: str, store_prefix: str = DEFAULT_STORE_PREFIX) -> StorePath:
    """Parse ``<store_prefix>/<digest>-<name>``.

    Raises MalformedStorePath for a wrong prefix, a digest that is not 32
    characters of the Nix base32 alphabet, or an empty or invalid name.
    """
    if not isinstance(s, str):
        raise MalformedStorePath(f"store path must be a string, got {type(s).__name__}")
    prefix = _normalize_prefix(store_prefix)
    head = prefix + "/" if prefix != "/" else "/"
    if not s.startswith(head):
        raise MalformedStorePath(f"{s!r} is not under store prefix {prefix!r}")
    base = s[len(head):]
    if "/" in base:
        raise MalformedStorePath(f"{s!r} names a path inside a store object")
    digest, sep, name = base[:DIGEST_LEN], base[DIGEST_LEN:DIGEST_LEN + 1], base[DIGEST_LEN + 1:]
    if sep != "-":
        raise MalformedStorePath(f"{s!r} lacks a {DIGEST_LEN}-character digest followed by '-'")
    return StorePath(prefix, digest, name)


@dataclass(frozen=True, order=True)
class DrvId:
    """A derivation, identified by its ``.drv`` store path."""

    path: StorePath

    def __post_init__(self) -> None:
        if not self.path.name.endswith(".drv"):
            raise MalformedStorePath(f"{self.path} is not a derivation (.drv) path")

    @classmethod
    def parse(cls, s: str, store_prefix: str = DEFAULT_STORE_PREFIX) -> DrvId:
        return cls(parse_store_path(s, store_prefix))

    @property
    def drv_hash(self) -> str:
        return self.path.digest

    @property
    def name(self) -> str:
        """Package name without the ``.drv`` suffix."""
        return self.path.name[: -len(".drv")]

    def render(self) -> str:
        return self.path.render()

    def __str__(self) -> str:
        return self.render()


def drv_hash_of(d: DrvId) -> str:
    return d.drv_hash


@dataclass(frozen=True)
class OutputHash:
    """Content hash of a canonical archive, rendered ``sha256:<hex>``."""

    value: str
    algo: str = "sha256"

    def __post_init__(self) -> None:
        if self.algo != "sha256":
            raise MalformedOutputHash(f"unsupported hash algorithm {self.algo!r}")
        if not _HEX_RE.fullmatch(self.value):
            raise MalformedOutputHash(f"expected 64 lowercase hex characters, got {self.value!r}")

    @classmethod
    def parse(cls, s: str) -> OutputHash:
        if not isinstance(s, str):
            raise MalformedOutputHash("output hash must be a string")
        algo, sep, value = s.partition(":")
        if not sep:
            raise MalformedOutputHash(f"{s!r} lacks an algorithm prefix")
        return cls(value, algo)

    @classmethod
    def from_digest(cls, digest: bytes) -> OutputHash:
        if len(digest) != 32:
            raise MalformedOutputHash("sha256 digest must be 32 bytes")
        return cls(digest.hex())

    @property
    def digest(self) -> bytes:
        return bytes.fromhex(self.value)

    def render(self) -> str:
        return f"{self.algo}:{self.value}"

    def __str__(self) -> str:
        return self.render()


def split_named_b64(s: str, expected_len: int, what: str) -> tuple[str, bytes]:
    """Split ``<name>:<base64>`` and check the decoded length."""
    if not isinstance(s, str):
        raise MalformedSignature(f"{what} must be a string")
    name, sep, b64 = s.partition(":")
    if not sep or not name:
        raise MalformedSignature(f"{what} {s!r} is not of the form name:base64")
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedSignature(f"{what} has invalid base64: {exc}") from None
    if len(raw) != expected_len:
        raise MalformedSignature(f"{what} decodes to {len(raw)} bytes, expected {expected_len}")
    return name, raw


@dataclass(frozen=True)
class Signature:
    key_name: str
    bytes: bytes

    def __post_init__(self) -> None:
        if len(self.bytes) != 64:
            raise MalformedSignature("an Ed25519 signature is 64 bytes")
        if not self.key_name or ":" in self.key_name:
            raise MalformedSignature(f"invalid key name {self.key_name!r}")

    @classmethod
    def parse(cls, s: str) -> Signature:
        name, raw = split_named_b64(s, 64, "signature")
        return cls(name, raw)

    def render(self) -> str:
        return f"{self.key_name}:{base64.b64encode(self.bytes).decode()}"

    def __str__(self) -> str:
        return self.render()


class ReproStatus(str, enum.Enum):
    UNKNOWN = "unknown"
    UNCONFIRMED = "unconfirmed"
    REPRODUCIBLE = "reproducible"
    NONREPRODUCIBLE = "nonreproducible"

    def __str__(self) -> str:
        return self.value


SUBMISSION_FIELDS = frozenset({"output_path", "output_hash", "output_sig", "drv_path"})


@dataclass(frozen=True)
class Submission:
    """A signed attestation as produced by a builder, before the server stores it.

    ``to_body`` yields the POST body, which is also the spool file schema.
    """

    drv_id: DrvId
    output_path: StorePath
    output_hash: OutputHash
    output_sig: Signature

    def to_body(self) -> dict[str, str]:
        return {
            "output_path": self.output_path.render(),
            "output_hash": self.output_hash.render(),
            "output_sig": self.output_sig.render(),
            "drv_path": self.drv_id.render(),
        }

    @classmethod
    def from_body(cls, body: Any, store_prefix: str = DEFAULT_STORE_PREFIX) -> Submission:
        if not isinstance(body, dict):
            raise MalformedBody("submission must be a JSON object")
        keys = set(body)
        if keys != SUBMISSION_FIELDS:
            extra = sorted(keys - SUBMISSION_FIELDS)
            missing = sorted(SUBMISSION_FIELDS - keys)
            raise MalformedBody(f"unexpected members {extra}, missing members {missing}")
        try:
            return cls(
                drv_id=DrvId.parse(body["drv_path"], store_prefix),
                output_path=parse_store_path(body["output_path"], store_prefix),
                output_hash=OutputHash.parse(body["output_hash"]),
                output_sig=Signature.parse(body["output_sig"]),
            )
        except LilaError as exc:
            raise MalformedBody(str(exc)) from exc


@dataclass(frozen=True)
class Attestation:
    id: int
    output_path: StorePath
    user_id: str
    drv_id: DrvId
    output_hash: OutputHash
    output_sig: Signature
    received_at: datetime

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "output_path": self.output_path.render(),
            "user_id": self.user_id,
            "drv_id": self.drv_id.render(),
            "drv_hash": self.drv_id.drv_hash,
            "output_hash": self.output_hash.render(),
            "output_sig": self.output_sig.render(),
            "received_at": format_timestamp(self.received_at),
        }

    def observation(self) -> Observation:
        return Observation(self.id, self.drv_id.render(), self.drv_id.drv_hash, self.output_path.render(),
                           self.user_id, self.output_hash.render(), int(self.received_at.timestamp()))


def format_timestamp(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def from_unix(seconds: int) -> datetime:
    return datetime.fromtimestamp(seconds, tz=timezone.utc)


class Observation(NamedTuple):
    """One stored attestation in plain string form, as read for reports."""

    id: int
    drv_id: str
    drv_hash: str
    output_path: str
    user_id: str
    output_hash: str
    received_at: int
