import json

import pytest
from fastapi.testclient import TestClient

from lila.model import Signature
from lila.server import create_app
from support import drv_path, out_path, submission


def post(client, builder, rec, headers=None):
    return client.post(f"/attestation/{rec.drv_id.drv_hash}", json=rec.to_body(),
                       headers=builder.auth if headers is None else headers)


def test_created_then_idempotent(client, builders, prefix, clock):
    b = builders[0]
    rec = submission(b.key, prefix, "jq-1.8.1")
    r = post(client, b, rec)
    assert r.status_code == 201
    body = r.json()
    assert body["id"] >= 1 and body["user_id"] == b.name and body["drv_hash"] == rec.drv_id.drv_hash
    assert body["output_sig"] == rec.output_sig.render()
    clock.tick(100)
    again = post(client, b, rec)
    assert again.status_code == 200 and again.json() == body


@pytest.mark.parametrize("header", [None, "Bearer", "Basic abc", "Bearer nope.nope", "bearer x"])
def test_bad_token(client, builders, prefix, header):
    rec = submission(builders[0].key, prefix, "jq")
    headers = {} if header is None else {"Authorization": header}
    r = post(client, builders[0], rec, headers)
    assert r.status_code == 401
    assert r.headers["www-authenticate"] == "Bearer"


def test_token_checked_before_body(client, prefix):
    r = client.post("/attestation/x", content=b"garbage")
    assert r.status_code == 401


@pytest.mark.parametrize("raw", [b"{", b"[]", b"\xff", json.dumps({"drv_path": 1}).encode()])
def test_malformed_body(client, builders, prefix, raw):
    r = client.post(f"/attestation/{'a' * 32}", content=raw, headers=builders[0].auth)
    assert r.status_code == 400


def test_url_hash_must_match(client, builders, prefix):
    b = builders[0]
    rec = submission(b.key, prefix, "jq")
    other = submission(b.key, prefix, "sed").drv_id.drv_hash
    r = client.post(f"/attestation/{other}", json=rec.to_body(), headers=b.auth)
    assert r.status_code == 400


def test_wrong_key_and_foreign_key_name(client, builders, prefix, store):
    a, b = builders[0], builders[1]
    # signed by b's key but submitted with a's token
    r = post(client, a, submission(b.key, prefix, "jq"))
    assert r.status_code == 422
    # a's key name but the bytes of b's signature
    rec = submission(a.key, prefix, "jq")
    forged = submission(b.key, prefix, "jq")
    body = rec.to_body() | {"output_sig": Signature(a.name, forged.output_sig.bytes).render()}
    r = client.post(f"/attestation/{rec.drv_id.drv_hash}", json=body, headers=a.auth)
    assert r.status_code == 422
    assert store.count_attestations() == 0


def test_by_output(client, builders, prefix, clock):
    recs = []
    for b in builders:
        rec = submission(b.key, prefix, "jq", content=b"x")
        recs.append(post(client, b, rec).json())
        clock.tick()
    path = out_path(prefix, "jq")
    assert client.get(f"/attestations/by-output{path}").json() == recs
    page = client.get(f"/attestations/by-output{path}", params={"limit": 2}).json()
    rest = client.get(f"/attestations/by-output{path}", params={"after_id": page[-1]["id"]}).json()
    assert page + rest == recs
    assert client.get(f"/attestations/by-output{out_path(prefix, 'nothing')}").json() == []
    assert client.get("/attestations/by-output/etc/passwd").status_code == 400
    assert client.get(f"/attestations/by-output{path}", params={"limit": 0}).status_code == 400
    assert client.get(f"/attestations/by-output{path}", params={"limit": "x"}).status_code == 400


def test_derivations(client, builders, prefix):
    assert client.get("/derivations/").json() == []
    for b in builders[:2]:
        post(client, b, submission(b.key, prefix, "jq"))
    post(client, builders[0], submission(builders[0].key, prefix, "sed"))
    rows = client.get("/derivations/").json()
    by_path = {r["drv_path"]: r for r in rows}
    assert by_path[drv_path(prefix, "jq")]["status"] == "reproducible"
    assert by_path[drv_path(prefix, "jq")]["distinct_builders"] == 2
    assert by_path[drv_path(prefix, "sed")]["status"] == "unconfirmed"
    assert by_path[drv_path(prefix, "sed")]["attestation_count"] == 1
    first = client.get("/derivations/", params={"limit": 1}).json()
    second = client.get("/derivations/", params={"limit": 1, "after": first[0]["drv_hash"]}).json()
    assert [r["drv_hash"] for r in first + second] == [r["drv_hash"] for r in rows]


def test_derivation_detail(client, builders, prefix):
    b0, b1 = builders[0], builders[1]
    post(client, b0, submission(b0.key, prefix, "jq", "out", b"1"))
    post(client, b1, submission(b1.key, prefix, "jq", "out", b"2"))
    post(client, b0, submission(b0.key, prefix, "jq", "dev", b"d"))
    h = submission(b0.key, prefix, "jq").drv_id.drv_hash
    doc = client.get(f"/derivations/{h}").json()
    assert doc["summary"]["overall"] == "nonreproducible"
    assert doc["summary"]["outputs"] == {out_path(prefix, "jq"): "nonreproducible",
                                         out_path(prefix, "jq", "dev"): "unconfirmed"}
    assert len(doc["attestations"][out_path(prefix, "jq")]) == 2
    short = client.get(f"/derivations/{h}", params={"summary": "true"}).json()
    assert "attestations" not in short and short["summary"] == doc["summary"]
    assert client.get(f"/derivations/{'z' * 32}").status_code == 404
    assert client.get("/derivations/not-a-hash").status_code == 400


def test_summary_with_unconfirmed_output(client, builders, prefix):
    b0, b1 = builders[0], builders[1]
    post(client, b0, submission(b0.key, prefix, "jq-1.8.1", "out", b"o"))
    post(client, b1, submission(b1.key, prefix, "jq-1.8.1", "out", b"o"))
    post(client, b0, submission(b0.key, prefix, "jq-1.8.1", "dev", b"d"))
    h = submission(b0.key, prefix, "jq-1.8.1").drv_id.drv_hash
    summary = client.get(f"/derivations/{h}", params={"summary": "true"}).json()["summary"]
    assert summary == {"outputs": {out_path(prefix, "jq-1.8.1"): "reproducible",
                                   out_path(prefix, "jq-1.8.1", "dev"): "unconfirmed"},
                       "overall": "unconfirmed"}


def test_reports_and_keys(client, builders, reports_dir, prefix):
    assert client.get("/reports").json() == []
    (reports_dir / "core.toml").write_text(
        'name = "core"\ndescription = "<b>tools</b>"\n[[selectors]]\nkind = "name"\npattern = "jq*"\n')
    (reports_dir / "broken.json").write_text("{")
    assert client.get("/reports").json() == [{"name": "core", "description": "<b>tools</b>"}]
    for b in builders[:2]:
        post(client, b, submission(b.key, prefix, "jq-1.8.1"))
    doc = client.get("/reports/core").json()
    assert doc["rate"] == 1.0 and doc["totals"]["reproducible"] == 1
    html = client.get("/reports/core", params={"format": "html"})
    assert html.headers["content-type"].startswith("text/html")
    assert "&lt;b&gt;tools&lt;/b&gt;" in html.text and "<b>tools</b>" not in html.text
    assert client.get("/reports/core", params={"format": "xml"}).status_code == 400
    assert client.get("/reports/none").status_code == 404
    keys = client.get("/keys").json()
    assert [k["name"] for k in keys] == [b.name for b in builders]


def test_suggested(client, builders, reports_dir, prefix):
    (reports_dir / "all.json").write_text(json.dumps(
        {"name": "all", "description": "", "selectors": [{"kind": "name", "pattern": "*"}]}))
    assert client.get("/reports/all/suggested").status_code == 401
    assert client.get("/reports/none/suggested", headers=builders[0].auth).status_code == 404
    assert client.get("/reports/all/suggested", headers=builders[0].auth).json() == []
    b0, b1 = builders[0], builders[1]
    post(client, b0, submission(b0.key, prefix, "jq"))
    post(client, b0, submission(b0.key, prefix, "sed"))
    post(client, b1, submission(b1.key, prefix, "sed"))
    assert client.get("/reports/all/suggested", headers=b0.auth).json() == []
    got = client.get("/reports/all/suggested", headers=b1.auth).json()
    assert [s["drv_path"] for s in got] == [drv_path(prefix, "jq")]


def test_reports_dir_loaded_at_startup(store, tmp_path, clock):
    d = tmp_path / "defs"
    d.mkdir()
    (d / "a.json").write_text(json.dumps({"name": "a", "selectors": [{"kind": "name", "pattern": "*"}]}))
    create_app(store, reports_dir=d, clock=clock)
    assert store.get_report("a") is not None
    with TestClient(create_app(store, clock=clock)) as c:
        assert c.get("/reports").json() == [{"name": "a", "description": ""}]
