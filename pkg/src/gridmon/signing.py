"""Keyed-hash signing for deployable specs.

Filter specs and supervisor watch specs must verify against a shared trust
key before they are activated. The signature is an HMAC-SHA256 over the
spec's canonical JSON serialization (fixed field order, no whitespace),
hex-encoded.
"""
from __future__ import annotations

import hashlib
import hmac
import json


def canonical_json(obj) -> bytes:
    """Deterministic serialization: sorted keys, no whitespace, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def sign(trust_key: str, payload: bytes) -> str:
    return hmac.new(trust_key.encode("utf-8"), payload, hashlib.sha256).hexdigest()


def verify(trust_key: str, payload: bytes, signature: str) -> bool:
    if not isinstance(signature, str) or not signature:
        return False
    return hmac.compare_digest(sign(trust_key, payload), signature)
