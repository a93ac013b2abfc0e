"""Reproducibility classification, package-set reports and CI ingestion."""

from __future__ import annotations

import fnmatch
import json
import logging
import re
import sys
import time
from collections import defaultdict
from collections.abc import Collection, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from .model import (
    DIGEST_ALPHABET,
    DIGEST_LEN,
    DrvId,
    LilaError,
    Observation,
    OutputHash,
    ReproStatus,
    Submission,
    format_timestamp,
    from_unix,
    parse_store_path,
)
from .signing import BuilderKey, sign

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger(__name__)

DEFAULT_QUORUM = 3

_VERSION_SUFFIX_RE = re.compile(r"-[0-9][A-Za-z0-9.]*")
_DRV_HASH_RE = re.compile(f"[{DIGEST_ALPHABET}]{{{DIGEST_LEN}}}")


class MixedKeyInput(LilaError, ValueError):
    pass


class EmptyInput(LilaError, ValueError):
    pass


class UnknownUser(LilaError, LookupError):
    pass


class InvalidReportDefinition(LilaError, ValueError):
    pass


class _Attested(Protocol):
    drv_id: Any
    output_path: Any
    user_id: str
    output_hash: Any


# classification


def classify_output(records: Iterable[_Attested]) -> ReproStatus:
    """Status of one (derivation, output path) from its attestations.

    Any two differing content hashes make the output nonreproducible, even
    from a single builder; agreement needs at least two distinct builders.
    """
    key = None
    hashes: set[str] = set()
    users: set[str] = set()
    for r in records:
        k = (str(r.drv_id), str(r.output_path))
        if key is None:
            key = k
        elif k != key:
            raise MixedKeyInput(f"attestations for {key} and {k} cannot be classified together")
        hashes.add(str(r.output_hash))
        users.add(r.user_id)
    if not hashes:
        return ReproStatus.UNKNOWN
    if len(hashes) >= 2:
        return ReproStatus.NONREPRODUCIBLE
    if len(users) >= 2:
        return ReproStatus.REPRODUCIBLE
    return ReproStatus.UNCONFIRMED


def classify_derivation(statuses: Mapping[str, ReproStatus] | Iterable[ReproStatus]) -> ReproStatus:
    values = list(statuses.values() if isinstance(statuses, Mapping) else statuses)
    if not values:
        raise EmptyInput("a derivation needs at least one observed output")
    if ReproStatus.NONREPRODUCIBLE in values:
        return ReproStatus.NONREPRODUCIBLE
    if ReproStatus.UNCONFIRMED in values or ReproStatus.UNKNOWN in values:
        return ReproStatus.UNCONFIRMED
    return ReproStatus.REPRODUCIBLE


@dataclass
class DrvObservations:
    """Everything the snapshot holds about one derivation."""

    drv_hash: str
    drv_path: str
    outputs: dict[str, list[Observation]] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return drv_name(self.drv_path)

    @property
    def users(self) -> set[str]:
        return {o.user_id for obs in self.outputs.values() for o in obs}

    @property
    def first_seen(self) -> int:
        return min(o.received_at for obs in self.outputs.values() for o in obs)

    @property
    def last_seen(self) -> int:
        return max(o.received_at for obs in self.outputs.values() for o in obs)

    @property
    def attestation_count(self) -> int:
        return sum(len(obs) for obs in self.outputs.values())

    def output_statuses(self) -> dict[str, ReproStatus]:
        return {path: classify_output(obs) for path, obs in sorted(self.outputs.items())}

    def status(self) -> ReproStatus:
        return classify_derivation(self.output_statuses())


def drv_name(drv_path: str) -> str:
    base = drv_path.rsplit("/", 1)[-1][DIGEST_LEN + 1:]
    return base[: -len(".drv")] if base.endswith(".drv") else base


def group_by_drv(snapshot: Iterable[Observation]) -> dict[str, DrvObservations]:
    drvs: dict[str, DrvObservations] = {}
    for o in snapshot:
        d = drvs.get(o.drv_hash)
        if d is None:
            d = drvs[o.drv_hash] = DrvObservations(o.drv_hash, o.drv_id)
        d.outputs.setdefault(o.output_path, []).append(o)
    return drvs


# report definitions


@dataclass(frozen=True)
class Selector:
    kind: str  # "drv_hash" or "name"
    pattern: str

    def __post_init__(self) -> None:
        if self.kind == "drv_hash":
            if not _DRV_HASH_RE.fullmatch(self.pattern):
                raise InvalidReportDefinition(f"{self.pattern!r} is not a 32-character derivation hash")
        elif self.kind != "name" or not self.pattern:
            raise InvalidReportDefinition(f"unknown selector {self.kind!r}: {self.pattern!r}")

    def matches(self, drv_hash: str, name: str) -> bool:
        if self.kind == "drv_hash":
            return drv_hash == self.pattern
        return fnmatch.fnmatchcase(name, self.pattern) or fnmatch.fnmatchcase(name + ".drv", self.pattern)


@dataclass(frozen=True)
class ReportDefinition:
    name: str
    description: str
    selectors: tuple[Selector, ...]
    quorum: int = DEFAULT_QUORUM

    def __post_init__(self) -> None:
        if not self.name or "/" in self.name:
            raise InvalidReportDefinition(f"invalid report name {self.name!r}")
        if not self.selectors:
            raise InvalidReportDefinition(f"report {self.name!r} has no selectors")
        if self.quorum < 1:
            raise InvalidReportDefinition("quorum must be at least 1")

    def in_scope(self, drv_hash: str, name: str) -> bool:
        return any(s.matches(drv_hash, name) for s in self.selectors)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ReportDefinition:
        try:
            selectors = tuple(Selector(s["kind"], s["pattern"]) for s in doc["selectors"])
            return cls(str(doc["name"]), str(doc.get("description", "")), selectors,
                       int(doc.get("quorum", DEFAULT_QUORUM)))
        except (KeyError, TypeError) as exc:
            raise InvalidReportDefinition(f"malformed report definition: {exc!r}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "quorum": self.quorum,
            "selectors": [{"kind": s.kind, "pattern": s.pattern} for s in self.selectors],
        }


def parse_report_definition(text: str, fmt: str = "json") -> ReportDefinition:
    """Parse a report document, either JSON or TOML::

        name = "core"
        description = "Core tools"
        [[selectors]]
        kind = "name"
        pattern = "jq-*"
    """
    try:
        doc = tomllib.loads(text) if fmt == "toml" else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise InvalidReportDefinition(f"cannot parse report definition: {exc}") from None
    if not isinstance(doc, dict):
        raise InvalidReportDefinition("report definition must be a document")
    return ReportDefinition.from_dict(doc)


def load_report_dir(directory: str | Path) -> list[ReportDefinition]:
    defs = []
    for path in sorted(Path(directory).iterdir()):
        if path.suffix in (".json", ".toml"):
            defs.append(parse_report_definition(path.read_text(encoding="utf-8"), path.suffix[1:]))
    return defs


def sync_report_dir(store: Any, reports_dir: str | Path) -> list[str]:
    """Copy every parseable definition in ``reports_dir`` into the store."""
    loaded = []
    for path in sorted(Path(reports_dir).iterdir()):
        if path.suffix not in (".json", ".toml"):
            continue
        try:
            defn = parse_report_definition(path.read_text(encoding="utf-8"), path.suffix[1:])
        except (OSError, InvalidReportDefinition) as exc:
            logger.error("skipping report definition %s: %s", path, exc)
            continue
        store.put_report(defn.name, json.dumps(defn.to_dict(), sort_keys=True))
        loaded.append(defn.name)
    return loaded


# reports


@dataclass(frozen=True)
class ReportRow:
    drv_hash: str
    drv_path: str
    name: str
    status: ReproStatus
    distinct_builders: int
    last_seen: int


@dataclass(frozen=True)
class Regression:
    stem: str
    earlier_drv_hash: str
    later_drv_hash: str
    earlier_name: str
    later_name: str


@dataclass(frozen=True)
class ComputedReport:
    name: str
    description: str
    generated_at: int
    totals: dict[ReproStatus, int]
    rate: float | None
    rows: list[ReportRow]
    regressions: list[Regression]

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "generated_at": format_timestamp(from_unix(self.generated_at)),
            "totals": {s.value: n for s, n in self.totals.items()},
            "rate": self.rate,
            "rows": [
                {
                    "drv_hash": r.drv_hash,
                    "drv_path": r.drv_path,
                    "name": r.name,
                    "status": r.status.value,
                    "distinct_builders": r.distinct_builders,
                    "last_seen": format_timestamp(from_unix(r.last_seen)),
                }
                for r in self.rows
            ],
            "regressions": [
                {
                    "stem": g.stem,
                    "earlier_drv_hash": g.earlier_drv_hash,
                    "later_drv_hash": g.later_drv_hash,
                    "earlier_name": g.earlier_name,
                    "later_name": g.later_name,
                }
                for g in self.regressions
            ],
        }


def _scoped(defn: ReportDefinition, snapshot: Iterable[Observation] | Mapping[str, DrvObservations]
            ) -> list[DrvObservations]:
    drvs = snapshot if isinstance(snapshot, Mapping) else group_by_drv(snapshot)
    return [d for h, d in sorted(drvs.items()) if defn.in_scope(h, d.name)]


def reproducibility_rate(totals: Mapping[ReproStatus, int]) -> float | None:
    decided = totals[ReproStatus.REPRODUCIBLE] + totals[ReproStatus.NONREPRODUCIBLE]
    if decided == 0:
        return None
    return totals[ReproStatus.REPRODUCIBLE] / decided


def compute_report(defn: ReportDefinition, snapshot: Iterable[Observation] | Mapping[str, DrvObservations],
                   now: int | None = None) -> ComputedReport:
    drvs = snapshot if isinstance(snapshot, Mapping) else group_by_drv(snapshot)
    scope = _scoped(defn, drvs)
    totals = {s: 0 for s in ReproStatus}
    rows = []
    for d in scope:
        status = d.status()
        totals[status] += 1
        rows.append(ReportRow(d.drv_hash, d.drv_path, d.name, status, len(d.users), d.last_seen))
    return ComputedReport(
        name=defn.name,
        description=defn.description,
        generated_at=int(time.time()) if now is None else now,
        totals=totals,
        rate=reproducibility_rate(totals),
        rows=rows,
        regressions=detect_regressions(defn, drvs),
    )


def name_stem(name: str) -> str:
    """Strip the longest trailing version-like suffix: ``jq-1.8.1`` -> ``jq``."""
    for i, ch in enumerate(name):
        if ch == "-" and i > 0 and _VERSION_SUFFIX_RE.fullmatch(name, i):
            return name[:i]
    return name


def detect_regressions(defn: ReportDefinition,
                       snapshot: Iterable[Observation] | Mapping[str, DrvObservations]) -> list[Regression]:
    """Nonreproducible derivations first seen strictly after a reproducible
    derivation of the same package stem.

    Each nonreproducible derivation is paired with the most recently first
    seen reproducible one before it.
    """
    groups: dict[str, list[tuple[int, str, ReproStatus, DrvObservations]]] = defaultdict(list)
    for d in _scoped(defn, snapshot):
        groups[name_stem(d.name)].append((d.first_seen, d.drv_hash, d.status(), d))
    found = []
    for stem in sorted(groups):
        history = sorted(groups[stem], key=lambda e: (e[0], e[1]))
        for seen, _, status, d in history:
            if status is not ReproStatus.NONREPRODUCIBLE:
                continue
            earlier = [e for e in history if e[0] < seen and e[2] is ReproStatus.REPRODUCIBLE]
            if earlier:
                prev = earlier[-1][3]
                found.append(Regression(stem, prev.drv_hash, d.drv_hash, prev.name, d.name))
    return found


@dataclass(frozen=True)
class Suggestion:
    drv_hash: str
    drv_path: str
    distinct_builders: int

    def to_json(self) -> dict[str, Any]:
        return {"drv_hash": self.drv_hash, "drv_path": self.drv_path,
                "distinct_builders": self.distinct_builders}


def suggest_rebuilds(defn: ReportDefinition,
                     snapshot: Iterable[Observation] | Mapping[str, DrvObservations],
                     requesting_user: str, limit: int = 100, *,
                     known_users: Collection[str] | None = None,
                     quorum: int | None = None) -> list[Suggestion]:
    """In-scope derivations the requester has not built that still need
    independent confirmation, least-confirmed first."""
    if known_users is not None and requesting_user not in known_users:
        raise UnknownUser(f"unknown user {requesting_user!r}")
    target = defn.quorum if quorum is None else quorum
    picks = []
    for d in _scoped(defn, snapshot):
        users = d.users
        if requesting_user in users:
            continue
        status = d.status()
        if status is ReproStatus.UNCONFIRMED or (
            status is ReproStatus.REPRODUCIBLE and len(users) < target
        ):
            picks.append(Suggestion(d.drv_hash, d.drv_path, len(users)))
    picks.sort(key=lambda s: (s.distinct_builders, s.drv_hash))
    return picks[:limit]


# CI ingestion


@dataclass
class IngestResult:
    accepted: int = 0
    created: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "created": self.created,
            "rejected": [{"line": n, "reason": r} for n, r in self.rejected],
        }


class _AttestationSink(Protocol):
    store_prefix: str

    def get_public_key(self, user_id: str) -> Any: ...

    def insert_many(self, records: Iterable[Submission], user_id: str) -> int: ...


def parse_ci_line(line: str, store_prefix: str) -> tuple[DrvId, Any, OutputHash]:
    """``<drv_path> <output_path> <sha256:hex>`` separated by single spaces."""
    fields = line.split(" ")
    if len(fields) < 3:
        raise ValueError("missing field")
    if len(fields) > 3:
        raise ValueError("too many fields")
    drv, out, digest = fields
    try:
        return DrvId.parse(drv, store_prefix), parse_store_path(out, store_prefix), OutputHash.parse(digest)
    except LilaError as exc:
        raise ValueError(str(exc)) from None


def ingest_ci_file(lines: Iterable[str], ci_user_id: str, signing_key: BuilderKey,
                   store: _AttestationSink, batch_size: int = 5000) -> IngestResult:
    """Sign CI-reported hashes under the CI identity and store them idempotently.

    Bad lines are reported with their 1-based line number and skipped.
    """
    registered = store.get_public_key(ci_user_id)
    if registered is None:
        raise UnknownUser(f"CI identity {ci_user_id!r} is not registered")
    if signing_key.name != ci_user_id or registered.key != signing_key.public_key:
        raise UnknownUser(f"signing key {signing_key.name!r} is not the registered key of {ci_user_id!r}")
    result = IngestResult()
    batch: list[Submission] = []

    def flush() -> None:
        if batch:
            result.created += store.insert_many(batch, ci_user_id)
            batch.clear()

    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        try:
            drv, out, digest = parse_ci_line(line, store.store_prefix)
        except ValueError as exc:
            result.rejected.append((lineno, str(exc)))
            continue
        batch.append(Submission(drv, out, digest, sign(signing_key, drv, out, digest)))
        result.accepted += 1
        if len(batch) >= batch_size:
            flush()
    flush()
    return result
