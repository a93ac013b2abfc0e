"""Builder-side agent run from the package manager's post-build hook.

For every output of a finished build it hashes the output tree, signs an
attestation and POSTs it to the aggregation server. Records that cannot be
delivered because of a network problem or a server error are spooled to
disk and retried later by ``flush_spool``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import httpx

from .config import ClientConfig
from .model import DrvId, LilaError, StorePath, Submission, parse_store_path
from .nar import hash_tree
from .signing import BuilderKey, fingerprint, sign, verify

logger = logging.getLogger(__name__)


class MissingEnvVar(LilaError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class HookEnv:
    drv_path: DrvId
    out_paths: tuple[StorePath, ...]


def read_hook_env(env: Mapping[str, str], store_prefix: str = "/nix/store") -> HookEnv:
    """Parse ``DRV_PATH`` and the space-separated ``OUT_PATHS``."""
    drv = env.get("DRV_PATH", "").strip()
    if not drv:
        raise MissingEnvVar("DRV_PATH is not set")
    outs = env.get("OUT_PATHS", "").split()
    if not outs:
        raise MissingEnvVar("OUT_PATHS is not set or empty")
    return HookEnv(DrvId.parse(drv, store_prefix), tuple(parse_store_path(p, store_prefix) for p in outs))


def build_attestations(env: HookEnv, key: BuilderKey) -> list[Submission]:
    """One signed record per output, in OUT_PATHS order.

    Hashing errors propagate before anything is returned, so a build is
    attested completely or not at all.
    """
    records = []
    for out in env.out_paths:
        digest = hash_tree(out.render())
        sig = sign(key, env.drv_path, out, digest)
        if not verify(key.public, sig, env.drv_path, out, digest):
            raise LilaError(f"self-check failed for {out}")
        records.append(Submission(env.drv_path, out, digest, sig))
    return records


@dataclass
class SubmitSummary:
    sent: int = 0
    spooled: int = 0
    rejected: int = 0

    def to_json(self) -> dict[str, int]:
        return {"sent": self.sent, "spooled": self.spooled, "rejected": self.rejected}


@dataclass
class FlushSummary:
    sent: int = 0
    remaining: int = 0
    rejected: int = 0

    def to_json(self) -> dict[str, int]:
        return {"sent": self.sent, "remaining": self.remaining, "rejected": self.rejected}


SENT, REJECTED, TRANSIENT = "sent", "rejected", "transient"


def _http(config: ClientConfig) -> httpx.Client:
    return httpx.Client(base_url=config.server_url, timeout=config.timeout)


def post_record(http: httpx.Client, token: str, record: Submission) -> str:
    """POST one record; returns SENT, REJECTED (4xx) or TRANSIENT."""
    try:
        resp = http.post(
            f"/attestation/{record.drv_id.drv_hash}",
            json=record.to_body(),
            headers={"Authorization": f"Bearer {token}"},
        )
    except httpx.HTTPError as exc:
        logger.warning("cannot reach server for %s: %s", record.output_path, exc)
        return TRANSIENT
    if resp.status_code in (200, 201):
        return SENT
    if 400 <= resp.status_code < 500:
        logger.error("server permanently rejected %s: %d %s",
                     record.output_path, resp.status_code, resp.text[:500])
        return REJECTED
    logger.warning("server error %d for %s", resp.status_code, record.output_path)
    return TRANSIENT


def spool_name(record: Submission) -> str:
    fp = fingerprint(record.drv_id, record.output_path, record.output_hash)
    return hashlib.sha256(fp + b";" + record.output_sig.key_name.encode()).hexdigest() + ".json"


def spool_record(record: Submission, spool_dir: Path) -> Path:
    """Write the record atomically; re-spooling the same record is a no-op."""
    spool_dir.mkdir(parents=True, exist_ok=True)
    target = spool_dir / spool_name(record)
    fd, tmp = tempfile.mkstemp(dir=spool_dir, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(record.to_body(), f, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


def load_spooled(path: Path, store_prefix: str = "/nix/store") -> Submission:
    return Submission.from_body(json.loads(path.read_text(encoding="utf-8")), store_prefix)


def submit_or_spool(records: Sequence[Submission], config: ClientConfig,
                    http: httpx.Client | None = None) -> SubmitSummary:
    summary = SubmitSummary()
    own = http is None
    http = _http(config) if http is None else http
    try:
        for record in records:
            outcome = post_record(http, config.token, record)
            if outcome == SENT:
                summary.sent += 1
            elif outcome == REJECTED:
                summary.rejected += 1
            else:
                spool_record(record, config.spool_dir)
                summary.spooled += 1
    finally:
        if own:
            http.close()
    return summary


def _spooled_files(spool_dir: Path) -> list[Path]:
    entries = []
    for p in spool_dir.glob("*.json"):
        try:
            entries.append((p.stat().st_mtime_ns, p.name, p))
        except FileNotFoundError:
            continue
    return [p for _, _, p in sorted(entries)]


def flush_spool(config: ClientConfig, http: httpx.Client | None = None) -> FlushSummary:
    """Retry spooled records oldest first.

    Delivered and permanently rejected files are removed; files another
    flusher removed concurrently are skipped.
    """
    summary = FlushSummary()
    if not config.spool_dir.is_dir():
        return summary
    own = http is None
    http = _http(config) if http is None else http
    try:
        for path in _spooled_files(config.spool_dir):
            try:
                record = load_spooled(path, config.store_prefix)
            except FileNotFoundError:
                continue
            except (LilaError, ValueError) as exc:
                logger.error("unreadable spool file %s: %s", path, exc)
                path.replace(path.with_suffix(".bad"))
                summary.rejected += 1
                continue
            outcome = post_record(http, config.token, record)
            if outcome == TRANSIENT:
                summary.remaining += 1
                continue
            path.unlink(missing_ok=True)
            if outcome == SENT:
                summary.sent += 1
            else:
                summary.rejected += 1
    finally:
        if own:
            http.close()
    return summary


def run_hook(env: Mapping[str, str], config: ClientConfig, key: BuilderKey,
             http: httpx.Client | None = None) -> SubmitSummary:
    hook_env = read_hook_env(env, config.store_prefix)
    return submit_or_spool(build_attestations(hook_env, key), config, http)
