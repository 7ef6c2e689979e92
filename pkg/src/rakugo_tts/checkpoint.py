"""Binary checkpoints: named arrays plus config text and RNG state.

File layout, all little-endian::

    8 bytes   magic ``RKGCKPT1``
    8 bytes   uint64 manifest length in bytes
    N bytes   UTF-8 JSON manifest (config text, fingerprint, metadata,
              RNG state, ordered array descriptors)
    ...       raw C-contiguous array data, concatenated in manifest order

Writes go to a temporary file in the target directory followed by an
atomic rename, so a crash never leaves a half-written checkpoint behind.
Loading verifies the magic, the manifest, the stored config fingerprint,
and every array's byte budget; any violation raises
:class:`CorruptCheckpoint` naming the offending section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

MAGIC = b"RKGCKPT1"

# dtype kinds allowed in a checkpoint: float, int, unsigned, bool
_ALLOWED_KINDS = "fiub"


class CorruptCheckpoint(ValueError):
    """A checkpoint file failed validation; ``section`` names where."""

    def __init__(self, section: str, message: str):
        self.section = section
        super().__init__(f"corrupt checkpoint ({section}): {message}")


class FingerprintMismatch(ValueError):
    """The stored config fingerprint differs from the expected one."""

    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(
            f"checkpoint config fingerprint {found} does not match "
            f"expected fingerprint {expected}"
        )


def config_fingerprint(config_text: str) -> str:
    """SHA-256 hex digest of the UTF-8 config text."""
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """One model snapshot: config text, named arrays, optional RNG state.

    ``arrays`` preserves insertion order; ``metadata`` holds JSON-safe
    extras (epoch counters, optimizer scalars, variant name).
    """

    config_text: str
    arrays: Dict[str, np.ndarray]
    rng_state: Optional[dict] = None
    metadata: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.config_text)


def _as_little_endian(value: np.ndarray) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind not in _ALLOWED_KINDS:
        raise ValueError(f"cannot checkpoint arrays of dtype {arr.dtype}")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if not arr.flags.c_contiguous:
        # ascontiguousarray would also promote 0-d arrays to 1-d
        arr = np.ascontiguousarray(arr)
    return arr


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Serialize ``ckpt`` to ``path`` atomically (write temp, then rename)."""
    arrays = {name: _as_little_endian(a) for name, a in ckpt.arrays.items()}
    manifest = {
        "config": ckpt.config_text,
        "fingerprint": ckpt.fingerprint,
        "metadata": ckpt.metadata,
        "rng_state": ckpt.rng_state,
        "arrays": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            for name, arr in arrays.items()
        ],
    }
    manifest_bytes = json.dumps(manifest).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(manifest_bytes)))
            fh.write(manifest_bytes)
            for arr in arrays.values():
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _manifest_key(manifest: dict, key: str):
    if key not in manifest:
        raise CorruptCheckpoint("manifest", f"manifest is missing key {key!r}")
    return manifest[key]


def load_checkpoint(
    path: str,
    expected_config: Optional[str] = None,
    expected_fingerprint: Optional[str] = None,
) -> Checkpoint:
    """Read and validate a checkpoint written by :func:`save_checkpoint`.

    ``expected_config`` (full config text) or ``expected_fingerprint``
    (its SHA-256 hex digest) turns on compatibility checking; a mismatch
    raises :class:`FingerprintMismatch` reporting both digests.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC):
        raise CorruptCheckpoint("magic", "file too short to hold the magic")
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("magic", f"bad magic {blob[:len(MAGIC)]!r}")
    offset = len(MAGIC)
    if len(blob) < offset + 8:
        raise CorruptCheckpoint("manifest", "file ends before the manifest length")
    (manifest_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if len(blob) < offset + manifest_len:
        raise CorruptCheckpoint(
            "manifest",
            f"manifest needs {manifest_len} bytes, file holds {len(blob) - offset}",
        )
    try:
        manifest = json.loads(blob[offset : offset + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint("manifest", f"manifest is not valid JSON: {exc}")
    offset += manifest_len

    config_text = _manifest_key(manifest, "config")
    stored_fingerprint = _manifest_key(manifest, "fingerprint")
    actual = config_fingerprint(config_text)
    if stored_fingerprint != actual:
        raise CorruptCheckpoint(
            "fingerprint",
            f"stored fingerprint {stored_fingerprint} does not match the "
            f"config text (computed {actual})",
        )

    arrays: Dict[str, np.ndarray] = {}
    for entry in _manifest_key(manifest, "arrays"):
        name = entry.get("name")
        if not isinstance(name, str):
            raise CorruptCheckpoint("manifest", f"array entry without a name: {entry!r}")
        section = f"array '{name}'"
        try:
            dtype = np.dtype(entry["dtype"])
        except (KeyError, TypeError) as exc:
            raise CorruptCheckpoint(section, f"unreadable dtype: {exc}")
        if dtype.kind not in _ALLOWED_KINDS:
            raise CorruptCheckpoint(section, f"disallowed dtype {dtype}")
        shape = tuple(int(n) for n in entry.get("shape", ()))
        count = int(np.prod(shape, dtype=np.int64))
        need = dtype.itemsize * count
        if len(blob) - offset < need:
            raise CorruptCheckpoint(
                section, f"expected {need} bytes, got {len(blob) - offset}"
            )
        data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        arrays[name] = data.reshape(shape).copy()
        offset += need
    if offset != len(blob):
        raise CorruptCheckpoint("trailer", f"{len(blob) - offset} unexpected trailing bytes")

    if expected_config is not None and expected_fingerprint is None:
        expected_fingerprint = config_fingerprint(expected_config)
    if expected_fingerprint is not None and expected_fingerprint != actual:
        raise FingerprintMismatch(expected=expected_fingerprint, found=actual)

    return Checkpoint(
        config_text=config_text,
        arrays=arrays,
        rng_state=manifest.get("rng_state"),
        metadata=manifest.get("metadata") or {},
    )


# --------------------------------------------------------------------- #
# module state <-> named arrays
# --------------------------------------------------------------------- #


def collect_state(module) -> Dict[str, np.ndarray]:
    """Copy a module's parameters and buffers into named arrays.

    Parameters land under ``param/<name>``, buffers under ``buffer/<name>``,
    matching :func:`restore_state`.
    """
    arrays: Dict[str, np.ndarray] = {}
    for name, p in module.named_parameters():
        arrays[f"param/{name}"] = p.data.copy()
    for name, buf in module.named_buffers():
        arrays[f"buffer/{name}"] = np.asarray(buf).copy()
    return arrays


def _owner_of(module, dotted: str):
    parts = dotted.split(".")
    obj = module
    for part in parts[:-1]:
        children = getattr(obj, "_children", {})
        if part not in children:
            raise ValueError(f"no submodule {part!r} on the path {dotted!r}")
        obj = children[part]
    return obj, parts[-1]


def restore_state(module, arrays: Dict[str, np.ndarray]) -> None:
    """Load arrays produced by :func:`collect_state` back into ``module``.

    Every parameter and buffer of the module must be present with a
    matching shape; leftover ``param/``/``buffer/`` entries are rejected so
    a checkpoint cannot silently half-apply.
    """
    seen = set()
    for name, p in module.named_parameters():
        key = f"param/{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        value = arrays[key]
        if tuple(value.shape) != tuple(p.data.shape):
            raise ValueError(
                f"parameter {name!r} has shape {tuple(p.data.shape)}, "
                f"checkpoint holds {tuple(value.shape)}"
            )
        # the stored bits are authoritative; keep their dtype
        p.data = np.array(value)
        seen.add(key)
    for name, buf in module.named_buffers():
        key = f"buffer/{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing buffer {name!r}")
        value = arrays[key]
        existing = np.asarray(buf)
        if tuple(value.shape) != tuple(existing.shape):
            raise ValueError(
                f"buffer {name!r} has shape {tuple(existing.shape)}, "
                f"checkpoint holds {tuple(value.shape)}"
            )
        owner, leaf = _owner_of(module, name)
        owner.update_buffer(leaf, np.array(value))
        seen.add(key)
    extra = [
        k for k in arrays
        if (k.startswith("param/") or k.startswith("buffer/")) and k not in seen
    ]
    if extra:
        raise ValueError(f"checkpoint holds state unknown to the model: {sorted(extra)}")


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's bit-generator state."""
    return json.loads(json.dumps(rng.bit_generator.state))


def rng_from_state(state: dict) -> np.random.Generator:
    """Rebuild a generator from a :func:`rng_state` snapshot."""
    name = state.get("bit_generator", "PCG64")
    bit_generator = getattr(np.random, name)()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
