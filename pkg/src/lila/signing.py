"""Builder identities and Ed25519 attestation signatures.

Key strings follow the convention used for Nix signing keys:
``<name>:<base64(public)>`` for public keys and
``<name>:<base64(seed ++ public)>`` for secret keys.
"""

from __future__ import annotations

import base64
import os
import re
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .model import (
    DrvId,
    LilaError,
    MalformedSignature,
    OutputHash,
    Signature,
    StorePath,
    split_named_b64,
)

FINGERPRINT_VERSION = "lila-1"

_KEY_NAME_RE = re.compile(r"[a-zA-Z0-9._-]{1,64}")


class InvalidKeyName(LilaError, ValueError):
    pass


class MissingSecretKey(LilaError):
    pass


def check_key_name(name: str) -> str:
    if not isinstance(name, str) or not _KEY_NAME_RE.fullmatch(name):
        raise InvalidKeyName(f"invalid key name {name!r}: expected [a-zA-Z0-9._-]{{1,64}}")
    return name


def _raw_public(private: Ed25519PrivateKey) -> bytes:
    return private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


@dataclass(frozen=True)
class PublicKey:
    name: str
    key: bytes

    def __post_init__(self) -> None:
        check_key_name(self.name)
        if len(self.key) != 32:
            raise MalformedSignature("an Ed25519 public key is 32 bytes")

    @classmethod
    def parse(cls, s: str) -> PublicKey:
        name, raw = split_named_b64(s.strip(), 32, "public key")
        return cls(check_key_name(name), raw)

    def render(self) -> str:
        return f"{self.name}:{base64.b64encode(self.key).decode()}"


@dataclass(frozen=True)
class BuilderKey:
    name: str
    public_key: bytes
    secret_key: bytes | None = None

    def __post_init__(self) -> None:
        check_key_name(self.name)
        if len(self.public_key) != 32:
            raise MalformedSignature("an Ed25519 public key is 32 bytes")
        if self.secret_key is not None:
            if len(self.secret_key) != 32:
                raise MalformedSignature("an Ed25519 secret seed is 32 bytes")
            derived = _raw_public(Ed25519PrivateKey.from_private_bytes(self.secret_key))
            if derived != self.public_key:
                raise MalformedSignature("secret key does not match its public key")

    @property
    def public(self) -> PublicKey:
        return PublicKey(self.name, self.public_key)

    def render_public(self) -> str:
        return self.public.render()

    def render_secret(self) -> str:
        if self.secret_key is None:
            raise MissingSecretKey(f"key {self.name!r} has no secret part")
        return f"{self.name}:{base64.b64encode(self.secret_key + self.public_key).decode()}"

    @classmethod
    def parse_secret(cls, s: str) -> BuilderKey:
        name, raw = split_named_b64(s.strip(), 64, "secret key")
        return cls(check_key_name(name), raw[32:], raw[:32])


def keygen(name: str, seed: bytes | None = None) -> BuilderKey:
    """Create an Ed25519 key pair; deterministic when ``seed`` is given."""
    check_key_name(name)
    if seed is None:
        seed = os.urandom(32)
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    private = Ed25519PrivateKey.from_private_bytes(seed)
    return BuilderKey(name, _raw_public(private), bytes(seed))


def write_key_file(key: BuilderKey, path: str | os.PathLike[str]) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as f:
        f.write(key.render_secret() + "\n")


def load_key_file(path: str | os.PathLike[str]) -> BuilderKey:
    return BuilderKey.parse_secret(Path(path).read_text())


def fingerprint(drv_id: DrvId, output_path: StorePath, output_hash: OutputHash) -> bytes:
    return f"{FINGERPRINT_VERSION};{drv_id.render()};{output_path.render()};{output_hash.render()}".encode("ascii")


def raw_sign(secret_seed: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(secret_seed).sign(message)


def raw_verify(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def sign(key: BuilderKey, drv_id: DrvId, output_path: StorePath, output_hash: OutputHash) -> Signature:
    if key.secret_key is None:
        raise MissingSecretKey(f"key {key.name!r} cannot sign without its secret part")
    return Signature(key.name, raw_sign(key.secret_key, fingerprint(drv_id, output_path, output_hash)))


def verify(
    pub: PublicKey,
    sig: Signature,
    drv_id: DrvId,
    output_path: StorePath,
    output_hash: OutputHash,
) -> bool:
    if sig.key_name != pub.name:
        return False
    return raw_verify(pub.key, sig.bytes, fingerprint(drv_id, output_path, output_hash))
