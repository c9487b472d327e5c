"""Northbound HTTP app for one key manager.

Three endpoints: status of servable material toward a slave, key
request by count/size (enc_keys), and key fetch by id (dec_keys).
Material travels base64; an empty pool answers 503 so clients back off
and retry.
"""

from __future__ import annotations

import base64
from typing import Callable

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from ..errors import (
    ExpiredKey,
    InsufficientKeyMaterial,
    InvalidSize,
    UnknownKeyId,
    UnknownSlave,
)
from ..kmm import Kmm
from .schemas import DecKeysRequest, EncKeysRequest, KeysResponse, StatusResponse

STATUS_BY_ERROR = {
    InsufficientKeyMaterial: 503,
    UnknownSlave: 404,
    UnknownKeyId: 404,
    ExpiredKey: 410,
    InvalidSize: 400,
}


def _error_response(exc: Exception) -> JSONResponse:
    code = STATUS_BY_ERROR.get(type(exc), 500)
    return JSONResponse(
        status_code=code,
        content={"detail": str(exc), "error": type(exc).__name__},
    )


def make_kmm_app(kmm: Kmm, now_fn: Callable[[], float]) -> FastAPI:
    """Build the per-node key-delivery app; now_fn supplies virtual time."""
    app = FastAPI(title=f"key-manager {kmm.kmm_id}", docs_url=None, redoc_url=None)

    def caller(explicit) -> str:
        if explicit:
            return explicit
        if len(kmm.local_saes) == 1:
            return next(iter(kmm.local_saes))
        raise UnknownSlave(
            f"{kmm.kmm_id} serves {len(kmm.local_saes)} applications; pass sae_id"
        )

    @app.get("/api/v1/keys/{slave_sae}/status", response_model=StatusResponse)
    def status(slave_sae: str):
        try:
            return kmm.status_for(slave_sae, now_fn())
        except Exception as exc:
            return _error_response(exc)

    @app.post("/api/v1/keys/{slave_sae}/enc_keys", response_model=KeysResponse)
    def enc_keys(slave_sae: str, body: EncKeysRequest):
        try:
            served = kmm.get_key(
                caller(body.sae_id), slave_sae, body.number, body.size, now_fn()
            )
        except Exception as exc:
            return _error_response(exc)
        return {
            "keys": [
                {"key_ID": k["key_id"],
                 "key": base64.b64encode(k["material"]).decode("ascii")}
                for k in served
            ]
        }

    @app.post("/api/v1/keys/{master_sae}/dec_keys", response_model=KeysResponse)
    def dec_keys(master_sae: str, body: DecKeysRequest):
        try:
            served = kmm.get_key_with_ids(
                caller(body.sae_id), master_sae, body.ids(), now_fn()
            )
        except Exception as exc:
            return _error_response(exc)
        return {
            "keys": [
                {"key_ID": k["key_id"],
                 "key": base64.b64encode(k["material"]).decode("ascii")}
                for k in served
            ]
        }

    return app
