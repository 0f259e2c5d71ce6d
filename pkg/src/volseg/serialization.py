"""Shared helpers for the on-disk formats: canonical JSON plus raw float/byte payloads.

All container formats in this package follow the same rule set: JSON headers
are serialized canonically (sorted keys, fixed separators) so identical
content yields identical bytes, and numeric payloads are raw little-endian
buffers whose byte counts are fully determined by the header.
"""

from __future__ import annotations

import json

import numpy as np


class FormatError(Exception):
    """Base class for malformed on-disk artifacts."""


class FormatVersionError(FormatError):
    """The artifact declares a format version this code does not read."""


class PayloadSizeError(FormatError):
    """Header-declared payload size disagrees with the bytes actually present."""


class TruncatedPayloadError(PayloadSizeError):
    """The file ends before the declared payload does."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(obj))


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def check_version(found, expected: int, what: str) -> None:
    if found != expected:
        raise FormatVersionError(f"{what}: format_version {found!r} not supported (expected {expected})")


def float64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def float64_from_bytes(buf: bytes, shape: tuple[int, ...], what: str) -> np.ndarray:
    expected = int(np.prod(shape)) * 8
    if len(buf) < expected:
        raise TruncatedPayloadError(f"{what}: expected {expected} bytes, found {len(buf)} (truncated)")
    if len(buf) != expected:
        raise PayloadSizeError(f"{what}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


def uint8_from_bytes(buf: bytes, shape: tuple[int, ...], what: str) -> np.ndarray:
    expected = int(np.prod(shape))
    if len(buf) < expected:
        raise TruncatedPayloadError(f"{what}: expected {expected} bytes, found {len(buf)} (truncated)")
    if len(buf) != expected:
        raise PayloadSizeError(f"{what}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8).reshape(shape).copy()
