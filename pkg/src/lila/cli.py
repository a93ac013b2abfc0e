"""``lila`` command line: builder, server and administrator roles.

Exit codes: 0 success, 1 operational failure, 2 usage or configuration
error. JSON goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any
from urllib.parse import quote

import httpx

from . import __version__
from .client import MissingEnvVar, build_attestations, flush_spool, read_hook_env, submit_or_spool
from .config import ConfigError, load_client_config, load_server_config
from .model import LilaError, MalformedSignature, MalformedStorePath
from .nar import IoError
from .reports import UnknownUser, compute_report, ingest_ci_file, parse_report_definition, sync_report_dir
from .signing import InvalidKeyName, PublicKey, keygen, load_key_file, write_key_file
from .store import Store

logger = logging.getLogger("lila")


class UsageError(Exception):
    pass


def _emit(doc: Any) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _open_store(args: argparse.Namespace) -> Store:
    cfg = load_server_config(args.config)
    return Store(cfg.database, store_prefix=cfg.store_prefix, synchronous=cfg.synchronous)


def _load_key(path: Path) -> Any:
    try:
        return load_key_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read key file {path}: {exc.strerror}") from None
    except LilaError as exc:
        raise UsageError(f"invalid key file {path}: {exc}") from None


def cmd_keygen(args: argparse.Namespace) -> int:
    seed = bytes.fromhex(args.seed_hex) if args.seed_hex else None
    key = keygen(args.name, seed)
    out = Path(args.out)
    write_key_file(key, out)
    pub = out.with_name(out.name + ".pub")
    pub.write_text(key.render_public() + "\n")
    _emit({"name": key.name, "public_key": key.render_public(), "secret_key_file": str(out),
           "public_key_file": str(pub)})
    return 0


def cmd_hook(args: argparse.Namespace) -> int:
    cfg = load_client_config(args.config)
    key = _load_key(cfg.key_file)
    try:
        env = read_hook_env(os.environ, cfg.store_prefix)
    except (MissingEnvVar, MalformedStorePath) as exc:
        raise UsageError(str(exc)) from None
    records = build_attestations(env, key)
    _emit(submit_or_spool(records, cfg).to_json())
    return 0


def cmd_attest(args: argparse.Namespace) -> int:
    drv = args.drv or os.environ.get("DRV_PATH")
    if not drv:
        raise UsageError("attest needs --drv or DRV_PATH")
    if args.key:
        key_file, prefix = Path(args.key), args.store_prefix
    else:
        cfg = load_client_config(args.config)
        key_file, prefix = cfg.key_file, args.store_prefix or cfg.store_prefix
    prefix = prefix or "/nix/store"
    key = _load_key(key_file)
    try:
        env = read_hook_env({"DRV_PATH": drv, "OUT_PATHS": " ".join(args.paths)}, prefix)
    except (MissingEnvVar, MalformedStorePath) as exc:
        raise UsageError(str(exc)) from None
    _emit([r.to_body() for r in build_attestations(env, key)])
    return 0


def cmd_flush(args: argparse.Namespace) -> int:
    cfg = load_client_config(args.config)
    _emit(flush_spool(cfg).to_json())
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import create_app

    cfg = load_server_config(args.config)
    if args.listen:
        cfg.listen = args.listen
    store = Store(cfg.database, store_prefix=cfg.store_prefix, synchronous=cfg.synchronous)
    app = create_app(store, reports_dir=cfg.reports_dir)
    logger.warning("serving on http://%s:%d (database %s)", cfg.host, cfg.port, cfg.database)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning", access_log=False)
    return 0


def cmd_admin_add_user(args: argparse.Namespace) -> int:
    text = args.pubkey
    if os.path.isfile(text):
        text = Path(text).read_text().strip()
    try:
        pub = PublicKey.parse(text)
    except (MalformedSignature, InvalidKeyName) as exc:
        raise UsageError(f"invalid public key: {exc}") from None
    if pub.name != args.name:
        raise UsageError(f"public key is named {pub.name!r}, expected {args.name!r}")
    _open_store(args).upsert_user(args.name, pub)
    _emit({"user": args.name, "public_key": pub.render()})
    return 0


def cmd_admin_new_token(args: argparse.Namespace) -> int:
    token = _open_store(args).create_token(args.name)
    _emit({"user": args.name, "token": token})
    return 0


def cmd_admin_audit(args: argparse.Namespace) -> int:
    store = _open_store(args)
    bad = store.audit()
    _emit({"checked": store.count_attestations(), "violations": bad})
    return 1 if bad else 0


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = load_server_config(args.config)
    key_file = Path(args.key) if args.key else cfg.ci_key_file
    if key_file is None:
        raise UsageError("ingest needs --key or ci_key_file in the server config")
    key = _load_key(key_file)
    store = Store(cfg.database, store_prefix=cfg.store_prefix, synchronous=cfg.synchronous)
    before = store.count_attestations()
    try:
        with open(args.file, encoding="utf-8") as f:
            result = ingest_ci_file(f, args.user, key, store)
    except OSError as exc:
        raise UsageError(f"cannot read {args.file}: {exc.strerror}") from None
    doc = result.to_json()
    doc["rows_before"] = before
    doc["rows_after"] = store.count_attestations()
    _emit(doc)
    return 0


def _server_url(args: argparse.Namespace) -> str:
    if args.server:
        return args.server
    try:
        return load_client_config(args.config).server_url
    except ConfigError:
        raise UsageError("no --server given and no client config with server_url") from None


def _get(url: str, path: str, params: dict | None = None) -> httpx.Response:
    try:
        return httpx.get(url.rstrip("/") + path, params=params, timeout=60)
    except httpx.HTTPError as exc:
        raise LilaError(f"cannot reach {url}: {exc}") from None


def cmd_report(args: argparse.Namespace) -> int:
    if args.server:
        resp = _get(args.server, f"/reports/{quote(args.name, safe='')}", {"format": args.format})
        if resp.status_code != 200:
            print(f"lila: server answered {resp.status_code}: {resp.text[:300]}", file=sys.stderr)
            return 1
        if args.format == "html":
            sys.stdout.write(resp.text)
        else:
            _emit(resp.json())
        return 0
    cfg = load_server_config(args.config)
    store = Store(cfg.database, store_prefix=cfg.store_prefix, synchronous=cfg.synchronous)
    if cfg.reports_dir is not None:
        sync_report_dir(store, cfg.reports_dir)
    doc = store.get_report(args.name)
    if doc is None:
        print(f"lila: no report named {args.name!r}", file=sys.stderr)
        return 1
    report = compute_report(parse_report_definition(doc), store.snapshot())
    if args.format == "html":
        from .dashboard import render_report_html

        sys.stdout.write(render_report_html(report))
    else:
        _emit(report.to_json())
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    url = _server_url(args)
    if args.kind == "drv":
        path = f"/derivations/{quote(args.value, safe='')}"
    else:
        path = f"/attestations/by-output/{quote(args.value, safe='')}"
    resp = _get(url, path)
    if resp.status_code != 200:
        print(f"lila: server answered {resp.status_code}: {resp.text[:300]}", file=sys.stderr)
        return 1
    _emit(resp.json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (default: $LILA_CONFIG)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="lila", description="Decentralized build reproducibility monitoring.")
    parser.add_argument("--version", action="version", version=f"lila {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", parents=[common], help="create a builder signing key")
    p.add_argument("--name", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed-hex", help="32-byte seed in hex (deterministic keys for testing)")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("hook", parents=[common], help="post-build-hook entry point")
    p.set_defaults(func=cmd_hook)

    p = sub.add_parser("attest", parents=[common], help="print attestations without submitting")
    p.add_argument("paths", nargs="+", metavar="PATH")
    p.add_argument("--drv", help="derivation path (default: $DRV_PATH)")
    p.add_argument("--key", help="secret key file (default: key_file from the client config)")
    p.add_argument("--store-prefix")
    p.set_defaults(func=cmd_attest)

    p = sub.add_parser("flush", parents=[common], help="retry spooled attestations")
    p.set_defaults(func=cmd_flush)

    p = sub.add_parser("serve", parents=[common], help="run the aggregation server")
    p.add_argument("--listen", help="host:port, overrides the config")
    p.set_defaults(func=cmd_serve)

    admin = sub.add_parser("admin", help="database administration").add_subparsers(dest="admin_command", required=True)
    p = admin.add_parser("add-user", parents=[common], help="register a builder public key")
    p.add_argument("name")
    p.add_argument("pubkey", help="rendered public key name:base64, or a file holding it")
    p.set_defaults(func=cmd_admin_add_user)
    p = admin.add_parser("new-token", parents=[common], help="issue an API token for a builder")
    p.add_argument("name")
    p.set_defaults(func=cmd_admin_new_token)
    p = admin.add_parser("audit", parents=[common], help="re-verify every stored attestation")
    p.set_defaults(func=cmd_admin_audit)

    p = sub.add_parser("ingest", parents=[common], help="ingest CI build hashes")
    p.add_argument("file")
    p.add_argument("--user", required=True, help="registered CI identity")
    p.add_argument("--key", help="CI secret key file (default: ci_key_file from the server config)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("report", parents=[common], help="compute a report")
    p.add_argument("name")
    p.add_argument("--format", choices=["json", "html"], default="json")
    p.add_argument("--server", help="query this server instead of the local database")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("query", parents=[common], help="query a server")
    p.add_argument("kind", choices=["drv", "output"])
    p.add_argument("value", metavar="HASH|PATH")
    p.add_argument("--server")
    p.set_defaults(func=cmd_query)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * getattr(args, "verbose", 0)
    logging.basicConfig(level=level, stream=sys.stderr, format="lila: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidKeyName) as exc:
        print(f"lila: {exc}", file=sys.stderr)
        return 2
    except (LilaError, IoError, UnknownUser) as exc:
        print(f"lila: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
