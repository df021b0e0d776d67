"""HTTP front end: ETSI GS QKD 014 shaped key delivery for SAEs plus read and
admin views onto the controller, AAA and manager.

The app drives a simulated :class:`~qkdn.network.Network` in-process: each
request runs the event loop until the exchange it started has an outcome.
SAEs authenticate with an HMAC over method, path and body using the secret
provisioned for them in the topology config.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json

from fastapi import FastAPI, HTTPException, Request

from .aaa import UserProfile
from .domain import EntityId
from .network import ExchangeRecord, Network
from .ukms import MAX_KEY_BITS, MIN_KEY_BITS

HTTP_STATUS = {"UNKNOWN_SAE": 400, "OVERSIZE_REQUEST": 400, "BAD_REQUEST": 400,
               "FORBIDDEN": 401, "UNAUTHORIZED": 401, "NOT_READY": 503}


def sign(secret: str, method: str, path: str, body: bytes = b"") -> str:
    msg = method.upper().encode() + b"\n" + path.encode() + b"\n" + body
    return hmac.new(secret.encode(), msg, hashlib.sha256).hexdigest()


def _fail(code: str, detail: str = "") -> HTTPException:
    return HTTPException(HTTP_STATUS.get(code, 503), {"message": code, "details": [detail] if detail else []})


def create_app(net: Network) -> FastAPI:
    app = FastAPI(title="qkdn")
    secrets = {s["id"]: s.get("secret", "") for s in net.cfg["saes"]}

    async def authenticate(request: Request) -> EntityId:
        sae = request.headers.get("X-SAE-ID", "")
        signature = request.headers.get("X-SAE-Signature", "")
        secret = secrets.get(sae)
        body = await request.body()
        if not secret or not hmac.compare_digest(
                sign(secret, request.method, request.url.path, body), signature):
            raise _fail("UNAUTHORIZED")
        return EntityId.parse(sae)

    def wait(rec: ExchangeRecord, done) -> None:
        net.wait_for(done, net.cfg["kms"]["session_timeout_s"] + 5.0)
        if not done():
            rec.reason = rec.reason or "TIMEOUT"

    @app.get("/api/v1/keys/{slave_sae_id}/status")
    async def status(slave_sae_id: str, request: Request) -> dict:
        me = await authenticate(request)
        slave = EntityId.parse(slave_sae_id)
        ukms = net.ukms[net.sae_ukms[me]]
        st = ukms.status(slave, me)
        return {"source_KME_ID": str(ukms.eid), "target_KME_ID": str(net.sae_ukms.get(slave, "")),
                "master_SAE_ID": str(me), "slave_SAE_ID": str(slave), "key_size": st["key_size"],
                "stored_key_count": st["stored_key_count"], "max_key_count": st["max_key_count"],
                "max_key_per_request": ukms.buffer_per_pair, "max_key_size": MAX_KEY_BITS,
                "min_key_size": MIN_KEY_BITS, "max_SAE_ID_count": 0}

    async def enc(slave_sae_id: str, request: Request, number: int, size: int) -> dict:
        me = await authenticate(request)
        slave = EntityId.parse(slave_sae_id)
        if slave not in net.sae_ukms:
            raise _fail("UNKNOWN_SAE", slave_sae_id)
        rec = net.start_exchange(me, slave, number, size, notify=False)
        wait(rec, lambda: bool(rec.keys_master) or bool(rec.reason))
        if rec.reason:
            raise _fail(rec.reason)
        return {"keys": [{"key_ID": k, "key": _b64(v)} for k, v in rec.keys_master]}

    @app.get("/api/v1/keys/{slave_sae_id}/enc_keys")
    async def enc_get(slave_sae_id: str, request: Request, number: int = 1, size: int = 256) -> dict:
        return await enc(slave_sae_id, request, number, size)

    @app.post("/api/v1/keys/{slave_sae_id}/enc_keys")
    async def enc_post(slave_sae_id: str, request: Request) -> dict:
        body = await _json(request)
        return await enc(slave_sae_id, request, int(body.get("number", 1)), int(body.get("size", 256)))

    async def dec(master_sae_id: str, request: Request, key_ids: list[str]) -> dict:
        me = await authenticate(request)
        if not key_ids:
            raise _fail("BAD_REQUEST", "no key_IDs")
        master = EntityId.parse(master_sae_id)
        rec = ExchangeRecord("dec:" + key_ids[0], master, me, len(key_ids), 0, net.net.now,
                             notify=False, keys_master=[(k, b"") for k in key_ids])
        net.saes[me].fetch(rec, key_ids)
        wait(rec, lambda: rec.t_end is not None or bool(rec.reason))
        if rec.reason:
            raise _fail(rec.reason)
        return {"keys": [{"key_ID": k, "key": _b64(v)} for k, v in rec.keys_slave]}

    @app.get("/api/v1/keys/{master_sae_id}/dec_keys")
    async def dec_get(master_sae_id: str, request: Request, key_ID: str = "") -> dict:
        return await dec(master_sae_id, request, [key_ID] if key_ID else [])

    @app.post("/api/v1/keys/{master_sae_id}/dec_keys")
    async def dec_post(master_sae_id: str, request: Request) -> dict:
        body = await _json(request)
        return await dec(master_sae_id, request, [k["key_ID"] for k in body.get("key_IDs", [])])

    @app.get("/controller/v1/links")
    def links() -> list[dict]:
        return net.controller.links_view()

    @app.get("/controller/v1/paths")
    def paths() -> list[dict]:
        return net.controller.paths_view()

    @app.get("/aaa/v1/accounts/{account_id}/usage")
    def usage(account_id: str) -> dict:
        if account_id not in net.aaa.profiles:
            raise HTTPException(404, {"message": "UNKNOWN_USER"})
        return net.aaa.usage(account_id)

    @app.put("/aaa/v1/profiles/{account_id}")
    async def put_profile(account_id: str, request: Request) -> dict:
        body = await _json(request)
        profile = UserProfile.from_dict({**body, "account_id": account_id})
        net.aaa.put_profile(profile)
        return profile.to_dict()

    @app.get("/manager/v1/alarms")
    def alarms(since: float = 0.0) -> list[dict]:
        return [a.to_dict() for a in net.manager.alarms_since(since)]

    return app


def _b64(bits: bytes) -> str:
    return base64.b64encode(bits).decode()


async def _json(request: Request) -> dict:
    raw = await request.body()
    try:
        return json.loads(raw or b"{}")
    except json.JSONDecodeError:
        raise _fail("BAD_REQUEST", "body is not JSON") from None
