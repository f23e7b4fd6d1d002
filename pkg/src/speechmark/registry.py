"""Persistent user/key registry and the attribution query.

The registry is a single JSON file updated by atomic replace. Every write
bumps a monotonically increasing version that is checked against the file on
disk, so concurrent writers fail loudly instead of silently losing entries.
Attribution scores a clip against every registered key and reports exactly
which classifiers fired: one positive score attributes, none is a no-match,
and two or more are surfaced as ambiguous rather than resolved by max-score.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .audio import AudioClip
from .errors import ConflictError, ContractError, DataError, FormatError
from .keys import Key

REGISTRY_FORMAT_VERSION = 1

VERDICT_ATTRIBUTED = "attributed"
VERDICT_NO_MATCH = "no_match"
VERDICT_AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class RegistryEntry:
    user_id: str
    key: Key
    registered_at: str
    model_ref: str | None = None


@dataclass(frozen=True)
class RegistryStore:
    entries: tuple[RegistryEntry, ...]
    dataset_hash: str
    version: int = 0

    def __post_init__(self) -> None:
        user_ids = [e.user_id for e in self.entries]
        if len(set(user_ids)) != len(user_ids):
            raise ContractError("registry user ids must be unique")
        key_ids = [e.key.id for e in self.entries]
        if len(set(key_ids)) != len(key_ids):
            raise ContractError("registry key ids must be unique")
        dims = {e.key.d_x for e in self.entries}
        if len(dims) > 1:
            raise ContractError("registry keys must share one dimension")

    @property
    def d_x(self) -> int | None:
        return self.entries[0].key.d_x if self.entries else None


@dataclass(frozen=True)
class AttributionResult:
    """Outcome of scoring a clip against every registered key."""

    verdict: str
    user_ids: tuple[str, ...]
    scores: dict[str, float]  # user_id -> margin

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "user_ids": list(self.user_ids),
            "scores": dict(self.scores),
        }


def empty_store(dataset_hash: str) -> RegistryStore:
    return RegistryStore(entries=(), dataset_hash=dataset_hash, version=0)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def register(
    store: RegistryStore,
    user_id: str,
    key: Key,
    registered_at: str | None = None,
    model_ref: str | None = None,
) -> RegistryStore:
    """Return a new store with the user/key pair appended and version bumped."""

    if any(e.user_id == user_id for e in store.entries):
        raise ConflictError(f"user id {user_id!r} is already registered")
    if any(e.key.id == key.id for e in store.entries):
        raise ConflictError(f"key id {key.id} is already registered")
    if store.d_x is not None and key.d_x != store.d_x:
        raise ContractError(f"key dimension {key.d_x} != registry dimension {store.d_x}")
    entry = RegistryEntry(user_id, key, registered_at or _now(), model_ref)
    return RegistryStore(store.entries + (entry,), store.dataset_hash, store.version + 1)


def attribute(store: RegistryStore, clip: AudioClip) -> AttributionResult:
    """Score the clip under every registered key and report which fired."""

    if not store.entries:
        raise DataError("registry is empty; nothing to attribute against")
    if clip.d_x != store.d_x:
        raise ContractError(f"clip length {clip.d_x} != registry key dimension {store.d_x}")
    dirs = np.stack([e.key.direction for e in store.entries])
    biases = np.array([e.key.bias for e in store.entries])
    margins = dirs @ clip.samples + biases
    scores = {e.user_id: float(m) for e, m in zip(store.entries, margins)}
    positive = [e.user_id for e, m in zip(store.entries, margins) if m > 0.0]
    if len(positive) == 1:
        return AttributionResult(VERDICT_ATTRIBUTED, (positive[0],), scores)
    if len(positive) == 0:
        return AttributionResult(VERDICT_NO_MATCH, (), scores)
    return AttributionResult(VERDICT_AMBIGUOUS, tuple(positive), scores)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def store_to_dict(store: RegistryStore) -> dict:
    return {
        "version": store.version,
        "format_version": REGISTRY_FORMAT_VERSION,
        "dataset_hash": store.dataset_hash,
        "entries": [
            {
                "user_id": e.user_id,
                "registered_at": e.registered_at,
                "model_ref": e.model_ref,
                "key": {"id": e.key.id, "bias": e.key.bias,
                        "direction": e.key.direction.tolist()},
            }
            for e in store.entries
        ],
    }


def store_from_dict(payload: dict) -> RegistryStore:
    try:
        if payload.get("format_version", 1) != REGISTRY_FORMAT_VERSION:
            raise FormatError(f"unsupported registry format {payload.get('format_version')}")
        entries = tuple(
            RegistryEntry(
                user_id=e["user_id"],
                key=Key(np.array(e["key"]["direction"], dtype=np.float64),
                        float(e["key"]["bias"]), int(e["key"]["id"])),
                registered_at=e["registered_at"],
                model_ref=e.get("model_ref"),
            )
            for e in payload["entries"]
        )
        return RegistryStore(entries, payload["dataset_hash"], int(payload["version"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed registry file: {exc}") from exc


def load_registry(path: str | Path) -> RegistryStore:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return store_from_dict(payload)


def save_registry(store: RegistryStore, path: str | Path) -> None:
    """Atomically replace the registry file, refusing stale writes.

    The store's version must be strictly greater than the version already on
    disk; the payload is written to a temporary file in the same directory
    and moved into place so readers never observe a partial file.
    """

    path = Path(path)
    if path.exists():
        current = load_registry(path)
        if current.version >= store.version:
            raise ConflictError(
                f"registry on disk is at version {current.version}, "
                f"refusing stale write of version {store.version}"
            )
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(store_to_dict(store), fh, indent=1)
            fh.write("\n")
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
