"""Decentralized build reproducibility monitoring for functional package managers."""

from .model import (
    Attestation,
    DrvId,
    LilaError,
    OutputHash,
    ReproStatus,
    Signature,
    StorePath,
    Submission,
    drv_hash_of,
    parse_store_path,
)
from .nar import decode_tree, encode_tree, hash_tree
from .signing import BuilderKey, PublicKey, fingerprint, keygen, sign, verify

__version__ = "0.1.0"

__all__ = [
    "Attestation",
    "BuilderKey",
    "DrvId",
    "LilaError",
    "OutputHash",
    "PublicKey",
    "ReproStatus",
    "Signature",
    "StorePath",
    "Submission",
    "decode_tree",
    "drv_hash_of",
    "encode_tree",
    "fingerprint",
    "hash_tree",
    "keygen",
    "parse_store_path",
    "sign",
    "verify",
]
