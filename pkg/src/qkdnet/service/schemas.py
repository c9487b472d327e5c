"""Request/response bodies for the key-delivery HTTP interface.

Field casing (key_ID, key_IDs) follows the common key-delivery API
convention so off-the-shelf clients can talk to the simulator.
"""

from __future__ import annotations

from typing import Optional, Union

from pydantic import BaseModel, Field


class EncKeysRequest(BaseModel):
    number: int = Field(default=1, ge=1)
    size: int = Field(default=256, ge=8)
    # Caller identity; stands in for transport-level auth.  Optional when
    # the node serves exactly one application.
    sae_id: Optional[str] = None


class KeyIdRef(BaseModel):
    key_ID: str


class DecKeysRequest(BaseModel):
    key_IDs: list[Union[str, KeyIdRef]]
    sae_id: Optional[str] = None

    def ids(self) -> list[str]:
        return [k.key_ID if isinstance(k, KeyIdRef) else k for k in self.key_IDs]


class KeyEntry(BaseModel):
    key_ID: str
    key: str  # base64 material


class KeysResponse(BaseModel):
    keys: list[KeyEntry]


class StatusResponse(BaseModel):
    source_kme_id: str
    target_kme_id: str
    slave_sae_id: str
    key_size: int
    stored_key_count: int
    available_bits: int
