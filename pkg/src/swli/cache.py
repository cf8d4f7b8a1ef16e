"""Binary container for inverted trajectories and null-embedding schedules.

Layout (all integers little-endian)::

    b"SWLI" | u16 version | u32 header length | header JSON (UTF-8)
    | payload: float32 values, row-major | u64 checksum

The checksum is the 8-byte BLAKE2b digest of header and payload bytes. Files
are written create-only: the data goes to a temporary file that is then
hard-linked into place, so readers never observe a partial file and an
existing entry is never replaced.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CacheFormatError, StaleCacheError
from .inversion import LatentTrajectory, NullEmbeddingSchedule
from .types import PromptEmbedding

MAGIC = b"SWLI"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_CHECKSUM = struct.Struct("<Q")


def _checksum(data: bytes) -> int:
    return _CHECKSUM.unpack(hashlib.blake2b(data, digest_size=8).digest())[0]


def encode_container(header: dict, arrays) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    body = header_bytes + payload
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + body + _CHECKSUM.pack(_checksum(body))


def decode_container(data: bytes):
    """Returns ``(header, payload float32 array)``; raises CacheFormatError on any damage."""
    if len(data) < _PREFIX.size + _CHECKSUM.size:
        raise CacheFormatError("file too short to be a cache entry")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"unsupported format version {version}")
    body = data[_PREFIX.size:-_CHECKSUM.size]
    if header_len > len(body):
        raise CacheFormatError("header length exceeds file size (truncated file?)")
    (stored,) = _CHECKSUM.unpack(data[-_CHECKSUM.size:])
    if stored != _checksum(body):
        raise CacheFormatError("checksum mismatch: cache entry is corrupted")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheFormatError(f"unreadable header: {exc}") from None
    payload = body[header_len:]
    if len(payload) % 4:
        raise CacheFormatError("payload is not a whole number of float32 values")
    return header, np.frombuffer(payload, dtype="<f4")


def _take(payload, offset, shape):
    n = int(np.prod(shape))
    if offset + n > payload.size:
        raise CacheFormatError("payload shorter than the header declares")
    return payload[offset:offset + n].astype(np.float64).reshape(shape), offset + n


def _write_create_only(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.link(tmp, path)  # fails with FileExistsError instead of overwriting
    finally:
        os.unlink(tmp)


def write_atomic(path, data: bytes) -> None:
    """Write-temp-then-rename for outputs that may legitimately be replaced."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_trajectory(obj, path, key: dict | None = None) -> Path:
    """Persist a LatentTrajectory or NullEmbeddingSchedule; never overwrites."""
    path = Path(path)
    if isinstance(obj, LatentTrajectory):
        header = {
            "kind": "trajectory",
            "latent_shape": list(obj.latents[0].shape),
            "timesteps": list(obj.timesteps),
            "prompt_shape": list(obj.prompt.shape),
            "prompt_text": obj.prompt.source_text,
            "schedule_fingerprint": obj.schedule_fingerprint,
        }
        arrays = [*obj.latents, obj.prompt.tokens]
    elif isinstance(obj, NullEmbeddingSchedule):
        header = {
            "kind": "null_schedule",
            "embedding_shape": list(obj.embeddings[0].shape),
            "timesteps": list(obj.timesteps),
            "per_step_loss": [float(v) for v in obj.per_step_loss],
            "schedule_fingerprint": obj.schedule_fingerprint,
        }
        arrays = [e.tokens for e in obj.embeddings]
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    if key is not None:
        header["key"] = key
    _write_create_only(path, encode_container(header, arrays))
    return path


def load_trajectory(path, schedule_fingerprint: str | None = None):
    """Load what :func:`save_trajectory` wrote, checking the schedule fingerprint if given."""
    data = Path(path).read_bytes()
    header, payload = decode_container(data)
    try:
        kind = header["kind"]
        stored_fp = header["schedule_fingerprint"]
        timesteps = tuple(int(t) for t in header["timesteps"])
        if schedule_fingerprint is not None and stored_fp != schedule_fingerprint:
            raise StaleCacheError(f"{path}: cache entry was built for schedule {stored_fp}, "
                                  f"current schedule is {schedule_fingerprint}")
        offset = 0
        if kind == "trajectory":
            shape = tuple(header["latent_shape"])
            latents = []
            for _ in timesteps:
                z, offset = _take(payload, offset, shape)
                latents.append(z)
            tokens, offset = _take(payload, offset, tuple(header["prompt_shape"]))
            obj = LatentTrajectory(tuple(latents), timesteps, PromptEmbedding(tokens, header["prompt_text"]),
                                   stored_fp)
        elif kind == "null_schedule":
            shape = tuple(header["embedding_shape"])
            embs = []
            for _ in timesteps:
                tokens, offset = _take(payload, offset, shape)
                embs.append(PromptEmbedding(tokens))
            obj = NullEmbeddingSchedule(timesteps, tuple(embs), tuple(header["per_step_loss"]), stored_fp)
        else:
            raise CacheFormatError(f"unknown entry kind {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise CacheFormatError(f"malformed header: {exc}") from None
    if offset != payload.size:
        raise CacheFormatError("payload longer than the header declares")
    return obj


class InversionCache:
    """Directory of inversion results keyed by image, prompt, backend and parameters.

    The schedule is deliberately not part of the key: an entry that matches
    everything but the schedule raises :class:`StaleCacheError`.
    """

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, kind: str, key: dict) -> Path:
        digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:24]
        return self.directory / f"{kind}-{digest}.swli"

    def get_or_create(self, kind, key, schedule, compute):
        """Returns ``(object, hit, path)``."""
        path = self.path_for(kind, key)
        if path.exists():
            return load_trajectory(path, schedule.fingerprint), True, path
        obj = compute()
        try:
            save_trajectory(obj, path, key)
        except FileExistsError:
            # another process won the race; its entry is authoritative
            return load_trajectory(path, schedule.fingerprint), True, path
        return obj, False, path
