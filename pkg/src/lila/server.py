"""HTTP aggregation service.

Routes::

    POST /attestation/{drv_hash}                 submit (token)
    GET  /attestations/by-output/{output_path}
    GET  /derivations/
    GET  /derivations/{drv_hash}
    GET  /reports
    GET  /reports/{name}                         JSON, or ?format=html
    GET  /reports/{name}/suggested               (token)
    GET  /keys

Collections answer with an empty list when nothing matches; single
resources answer 404.
"""

from __future__ import annotations

import json
import logging
import re
import time
from collections.abc import Callable
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Query, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.exceptions import RequestValidationError
from fastapi.responses import HTMLResponse, JSONResponse

from .dashboard import render_report_html
from .model import (
    DIGEST_ALPHABET,
    DIGEST_LEN,
    MalformedBody,
    MalformedStorePath,
    Submission,
    parse_store_path,
)
from .reports import (
    ReportDefinition,
    compute_report,
    group_by_drv,
    parse_report_definition,
    suggest_rebuilds,
    sync_report_dir,
)
from .signing import verify
from .store import Store

logger = logging.getLogger(__name__)

MAX_PAGE = 1000
_DRV_HASH_RE = re.compile(f"[{DIGEST_ALPHABET}]{{{DIGEST_LEN}}}")


class ApiError(Exception):
    def __init__(self, status: int, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.message = message


def _bearer(request: Request) -> str | None:
    header = request.headers.get("authorization", "")
    scheme, _, token = header.partition(" ")
    if scheme.lower() != "bearer" or not token.strip():
        return None
    return token.strip()


def _check_page(limit: int | None) -> int | None:
    if limit is not None and not 1 <= limit <= MAX_PAGE:
        raise ApiError(400, f"limit must be between 1 and {MAX_PAGE}")
    return limit


def create_app(store: Store, *, reports_dir: str | Path | None = None,
               clock: Callable[[], float] = time.time) -> FastAPI:
    app = FastAPI(title="lila", docs_url=None, redoc_url=None, openapi_url=None)
    app.state.store = store

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError) -> JSONResponse:
        headers = {"WWW-Authenticate": "Bearer"} if exc.status == 401 else None
        return JSONResponse({"error": exc.message}, status_code=exc.status, headers=headers)

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse({"error": "invalid request parameters",
                             "details": json.loads(json.dumps(exc.errors(), default=str))},
                            status_code=400)

    def refresh_reports() -> None:
        if reports_dir is not None:
            sync_report_dir(store, reports_dir)

    def authenticate(request: Request) -> str:
        token = _bearer(request)
        user = store.verify_token(token) if token else None
        if user is None:
            raise ApiError(401, "missing or invalid bearer token")
        return user

    def load_report(name: str) -> ReportDefinition:
        refresh_reports()
        doc = store.get_report(name)
        if doc is None:
            raise ApiError(404, f"no report named {name!r}")
        return parse_report_definition(doc)

    refresh_reports()

    def submit(user: str, drv_hash: str, raw: bytes) -> tuple[dict[str, Any], bool]:
        try:
            body = json.loads(raw)
        except (ValueError, UnicodeDecodeError):
            raise ApiError(400, "body is not valid UTF-8 JSON") from None
        try:
            record = Submission.from_body(body, store.store_prefix)
        except MalformedBody as exc:
            raise ApiError(400, str(exc)) from None
        if record.drv_id.drv_hash != drv_hash:
            raise ApiError(400, f"URL hash {drv_hash!r} does not match drv_path {record.drv_id}")
        if record.output_sig.key_name != user:
            raise ApiError(422, f"signature key {record.output_sig.key_name!r} does not belong to token user {user!r}")
        pub = store.get_public_key(user)
        if pub is None or not verify(pub, record.output_sig, record.drv_id,
                                     record.output_path, record.output_hash):
            raise ApiError(422, "signature does not verify under the registered key")
        row, created = store.insert_attestation(record, user, int(clock()))
        return row.to_json(), created

    @app.post("/attestation/{drv_hash}")
    async def post_attestation(drv_hash: str, request: Request) -> JSONResponse:
        user = await run_in_threadpool(authenticate, request)
        raw = await request.body()
        doc, created = await run_in_threadpool(submit, user, drv_hash, raw)
        return JSONResponse(doc, status_code=201 if created else 200)

    @app.get("/attestations/by-output/{output_path:path}")
    def by_output(output_path: str, limit: int | None = None, after_id: int | None = None) -> list[dict]:
        if not output_path.startswith("/"):
            output_path = "/" + output_path
        try:
            parse_store_path(output_path, store.store_prefix)
        except MalformedStorePath as exc:
            raise ApiError(400, str(exc)) from None
        rows = store.query_by_output(output_path, _check_page(limit), after_id)
        return [a.to_json() for a in rows]

    @app.get("/derivations/")
    def list_derivations(limit: int = 100, after: str | None = None) -> list[dict]:
        drvs, observations = store.list_drvs(_check_page(limit), after)
        grouped = group_by_drv(observations)
        return [
            {
                "drv_hash": d.drv_hash,
                "drv_path": d.drv_path,
                "status": grouped[d.drv_hash].status().value,
                "attestation_count": d.attestation_count,
                "distinct_builders": d.distinct_builders,
            }
            for d in drvs
        ]

    @app.get("/derivations/{drv_hash}")
    def get_derivation(drv_hash: str, summary: bool = False) -> dict:
        if not _DRV_HASH_RE.fullmatch(drv_hash):
            raise ApiError(400, f"{drv_hash!r} is not a derivation hash")
        rows = store.query_by_drv(drv_hash)
        if not rows:
            raise ApiError(404, f"derivation {drv_hash} has no attestations")
        d = group_by_drv(a.observation() for a in rows)[drv_hash]
        outputs = d.output_statuses()
        doc: dict[str, Any] = {
            "drv_hash": drv_hash,
            "drv_path": d.drv_path,
            "summary": {
                "outputs": {path: s.value for path, s in outputs.items()},
                "overall": d.status().value,
            },
        }
        if not summary:
            grouped: dict[str, list[dict]] = {}
            for a in rows:
                grouped.setdefault(a.output_path.render(), []).append(a.to_json())
            doc["attestations"] = grouped
        return doc

    @app.get("/reports")
    def list_reports() -> list[dict]:
        refresh_reports()
        out = []
        for name, doc in store.list_reports():
            defn = parse_report_definition(doc)
            out.append({"name": name, "description": defn.description})
        return out

    @app.get("/reports/{name}")
    def get_report(name: str, format: str = Query("json", pattern="^(json|html)$")):
        defn = load_report(name)
        report = compute_report(defn, store.snapshot(), now=int(clock()))
        if format == "html":
            return HTMLResponse(render_report_html(report))
        return report.to_json()

    @app.get("/reports/{name}/suggested")
    def get_suggested(name: str, request: Request, limit: int = 100) -> list[dict]:
        user = authenticate(request)
        defn = load_report(name)
        picks = suggest_rebuilds(defn, store.snapshot(), user, _check_page(limit))
        return [p.to_json() for p in picks]

    @app.get("/keys")
    def list_keys() -> list[dict]:
        return [{"name": k.name, "public_key": k.render()} for k in store.list_users()]

    return app
