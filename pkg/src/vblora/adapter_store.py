"""Compact adapter files: bank, top-k indices and k-1 admixture weights.

``.vbla`` layout (all integers and floats little-endian)::

    magic           4s   b"VBLA"
    version         u16
    h, b            u32, u32
    k, r            u16, u16
    index_width     u8   (1 or 2 bytes per index)
    n_entries       u32
    config_len      u32
    config          config_len bytes of UTF-8 JSON (sorted keys)
    entries         n_entries x (layer u32, name_len u16, name, side u8, r u16, d_dim u32)
    bank            h*b float32, row-major
    per entry       indices (d_dim/b * r * k) uint8|uint16, then
                    weights (d_dim/b * r * (k-1)) float32
    crc32           u32 over every preceding byte

Sub-vectors inside an entry are ordered like the logit grid ``(d_dim/b, r)``.
Each sub-vector stores its indices in canonical order (descending logit, ties
to the lower index) and drops the last, smallest weight, which is recovered as
``1 - sum(others)``. Logits never enter the file.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from .accounting import default_index_bytes
from .core import (
    ComposedFactors,
    LogitTensor,
    VectorBank,
    _bank_array,
    admix,
    complete_weights,
    merge_delta,
    subvectors_to_A,
    subvectors_to_B,
    topk_selection,
)

MAGIC = b"VBLA"
FORMAT_VERSION = 1
MAX_BANK = 65536

_HEADER = struct.Struct("<4sHIIHHBII")
_ENTRY_HEAD = struct.Struct("<IH")
_ENTRY_TAIL = struct.Struct("<BHI")
_CRC = struct.Struct("<I")
_SIDE_CODE = {"A": 0, "B": 1}
_SIDE_NAME = {0: "A", 1: "B"}


class AdapterError(Exception):
    """Base class for adapter storage failures."""


class AdapterFormatError(AdapterError):
    """The byte stream is not a valid ``.vbla`` file."""


class BadMagicError(AdapterFormatError):
    pass


class UnsupportedVersionError(AdapterFormatError):
    pass


class TruncatedAdapterError(AdapterFormatError):
    pass


class ChecksumError(AdapterFormatError):
    pass


class CorruptAdapterError(AdapterFormatError):
    """Checksum passed but contents violate an invariant (e.g. index >= h)."""


class InvalidAdapterError(AdapterError, ValueError):
    pass


class UnsupportedBankSizeError(AdapterError, ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    layer: int
    module: str
    side: str
    r: int
    d_dim: int

    def num_subvectors(self, b: int) -> int:
        return self.d_dim // b

    @property
    def key(self) -> tuple[int, str, str]:
        return (self.layer, self.module, self.side)


@dataclass
class StoredAdapter:
    bank: np.ndarray
    k: int
    r: int
    manifest: list[ManifestEntry]
    indices: list[np.ndarray]
    weights: list[np.ndarray]
    config: dict = field(default_factory=dict)
    index_width: Optional[int] = None

    def __post_init__(self) -> None:
        self.bank = np.ascontiguousarray(self.bank, dtype=np.float32)
        if self.index_width is None:
            self.index_width = default_index_bytes(self.h)

    @property
    def h(self) -> int:
        return self.bank.shape[0]

    @property
    def b(self) -> int:
        return self.bank.shape[1]

    @property
    def index_dtype(self) -> np.dtype:
        return np.dtype("<u1") if self.index_width == 1 else np.dtype("<u2")

    def payload_bytes(self) -> int:
        n = self.bank.nbytes
        for idx, w in zip(self.indices, self.weights):
            n += idx.size * self.index_width + w.size * 4
        return n

    def validate(self) -> None:
        if self.h > MAX_BANK:
            raise UnsupportedBankSizeError(f"bank size h={self.h} exceeds {MAX_BANK}")
        if self.index_width not in (1, 2) or (self.index_width == 1 and self.h > 256):
            raise InvalidAdapterError(f"index width {self.index_width} cannot address h={self.h}")
        if not 1 <= self.k <= self.h:
            raise InvalidAdapterError(f"k={self.k} outside [1, h={self.h}]")
        if not (len(self.manifest) == len(self.indices) == len(self.weights)):
            raise InvalidAdapterError("manifest, indices and weights differ in length")
        for entry, idx, w in zip(self.manifest, self.indices, self.weights):
            if entry.side not in _SIDE_CODE:
                raise InvalidAdapterError(f"entry {entry.key}: side must be A or B")
            if entry.d_dim % self.b:
                raise InvalidAdapterError(
                    f"entry {entry.key}: d_dim={entry.d_dim} not divisible by b={self.b}"
                )
            n = entry.num_subvectors(self.b)
            if idx.shape != (n, entry.r, self.k) or w.shape != (n, entry.r, self.k - 1):
                raise InvalidAdapterError(f"entry {entry.key}: block shapes do not match manifest")
            if idx.size and int(idx.max()) >= self.h:
                raise CorruptAdapterError(f"entry {entry.key}: index {int(idx.max())} >= h={self.h}")
            if self.k > 1 and np.any(np.sort(idx, axis=-1)[..., 1:] == np.sort(idx, axis=-1)[..., :-1]):
                raise CorruptAdapterError(f"entry {entry.key}: repeated index within a sub-vector")


def adapters_equal(a: StoredAdapter, b: StoredAdapter) -> bool:
    if (a.k, a.r, a.index_width, a.manifest, a.config) != (b.k, b.r, b.index_width, b.manifest, b.config):
        return False
    if a.bank.shape != b.bank.shape or a.bank.tobytes() != b.bank.tobytes():
        return False
    for x, y in zip(a.indices + a.weights, b.indices + b.weights):
        if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# export / reconstruct


def export(
    bank,
    logits: Mapping[tuple[int, str, str], Union[LogitTensor, np.ndarray]],
    k: int,
    config: Optional[dict] = None,
) -> StoredAdapter:
    """Freeze trained logits into indices and weights.

    ``logits`` maps ``(layer, module, side)`` to ``(d/b, r, h)`` arrays; the
    mapping order becomes the manifest order.
    """
    values = np.asarray(_bank_array(bank), dtype=np.float32)
    h, b = values.shape
    if h > MAX_BANK:
        raise UnsupportedBankSizeError(f"bank size h={h} exceeds {MAX_BANK}")
    width = default_index_bytes(h)
    idx_dtype = np.dtype("<u1") if width == 1 else np.dtype("<u2")

    manifest, indices, weights = [], [], []
    rs = set()
    for (layer, module, side), lg in logits.items():
        arr = lg.values if isinstance(lg, LogitTensor) else np.asarray(lg)
        if arr.ndim != 3 or arr.shape[-1] != h:
            raise ValueError(f"logits for {(layer, module, side)} have shape {arr.shape}, want (n, r, {h})")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"logits for {(layer, module, side)} are not finite")
        sel = topk_selection(arr, k, dtype=np.float32)
        n, r, _ = arr.shape
        rs.add(r)
        manifest.append(ManifestEntry(int(layer), str(module), str(side), r, n * b))
        indices.append(sel.indices.astype(idx_dtype))
        weights.append(np.ascontiguousarray(sel.weights[..., :-1], dtype=np.float32))
    adapter = StoredAdapter(
        bank=values,
        k=k,
        r=max(rs) if rs else 0,
        manifest=manifest,
        indices=indices,
        weights=weights,
        config=dict(config or {}),
        index_width=width,
    )
    adapter.validate()
    return adapter


def reconstruct_entries(adapter: StoredAdapter) -> dict[tuple[int, str, str], np.ndarray]:
    """Composed ``A`` or ``B`` matrix for every manifest entry."""
    out = {}
    for entry, idx, w in zip(adapter.manifest, adapter.indices, adapter.weights):
        if entry.d_dim % adapter.b:
            raise InvalidAdapterError(
                f"entry {entry.key}: d_dim={entry.d_dim} not divisible by b={adapter.b}"
            )
        sub = admix(adapter.bank, idx.astype(np.intp), complete_weights(w))
        out[entry.key] = subvectors_to_A(sub) if entry.side == "A" else subvectors_to_B(sub)
    return out


def reconstruct(adapter: StoredAdapter) -> dict[tuple[int, str], ComposedFactors]:
    mats = reconstruct_entries(adapter)
    modules: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    for (layer, module, side), m in mats.items():
        modules.setdefault((layer, module), {})[side] = m
    out = {}
    for key, sides in modules.items():
        if set(sides) != {"A", "B"}:
            raise InvalidAdapterError(f"module {key} lacks an A or B entry")
        out[key] = ComposedFactors(sides["A"], sides["B"], provenance={"source": "stored", "k": adapter.k})
    return out


# ---------------------------------------------------------------------------
# byte stream


def serialize(adapter: StoredAdapter) -> bytes:
    adapter.validate()
    config = json.dumps(adapter.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, adapter.h, adapter.b, adapter.k, adapter.r,
            adapter.index_width, len(adapter.manifest), len(config),
        ),
        config,
    ]
    for e in adapter.manifest:
        name = e.module.encode("utf-8")
        parts += [_ENTRY_HEAD.pack(e.layer, len(name)), name, _ENTRY_TAIL.pack(_SIDE_CODE[e.side], e.r, e.d_dim)]
    parts.append(adapter.bank.astype("<f4").tobytes())
    for idx, w in zip(adapter.indices, adapter.weights):
        parts.append(idx.astype(adapter.index_dtype).tobytes())
        parts.append(w.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        # the last 4 bytes are the checksum, never payload
        if self.pos + n > len(self.data) - _CRC.size:
            raise TruncatedAdapterError(
                f"stream ends inside {what} (need {n} bytes at offset {self.pos}, size {len(self.data)})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))


def deserialize(data: bytes) -> StoredAdapter:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 6:
        raise TruncatedAdapterError("stream ends inside the header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if len(data) < _HEADER.size + _CRC.size:
        raise TruncatedAdapterError(f"stream of {len(data)} bytes ends inside the header")
    # checksum before structure, so any damaged byte reports as corruption
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != crc:
        raise ChecksumError("CRC32 mismatch: adapter file is corrupted or truncated")

    rd = _Reader(data)
    _, _, h, b, k, r, width, n_entries, config_len = rd.unpack(_HEADER, "header")
    config_raw = rd.take(config_len, "config")
    manifest = []
    for _ in range(n_entries):
        layer, name_len = rd.unpack(_ENTRY_HEAD, "manifest")
        name = rd.take(name_len, "manifest")
        side, er, d_dim = rd.unpack(_ENTRY_TAIL, "manifest")
        manifest.append((layer, name, side, er, d_dim))
    if width not in (1, 2):
        raise CorruptAdapterError(f"index width {width} is not 1 or 2")
    if b == 0 or h == 0:
        raise CorruptAdapterError("bank has a zero dimension")
    bank_raw = rd.take(4 * h * b, "bank")
    blocks = []
    for layer, name, side, er, d_dim in manifest:
        if d_dim % b:
            raise CorruptAdapterError(f"entry d_dim={d_dim} not divisible by b={b}")
        n = d_dim // b * er
        blocks.append((rd.take(n * k * width, "indices"), rd.take(n * max(k - 1, 0) * 4, "weights")))
    if rd.pos + _CRC.size != len(data):
        raise CorruptAdapterError(f"{len(data) - rd.pos - _CRC.size} trailing bytes before checksum")

    try:
        config = json.loads(config_raw.decode("utf-8"))
        entries = [
            ManifestEntry(layer, name.decode("utf-8"), _SIDE_NAME[side], er, d_dim)
            for layer, name, side, er, d_dim in manifest
        ]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptAdapterError(f"unreadable header field: {exc}") from exc

    idx_dtype = np.dtype("<u1") if width == 1 else np.dtype("<u2")
    indices, weights = [], []
    for e, (ib, wb) in zip(entries, blocks):
        n = e.d_dim // b
        indices.append(np.frombuffer(ib, dtype=idx_dtype).reshape(n, e.r, k).copy())
        weights.append(np.frombuffer(wb, dtype="<f4").reshape(n, e.r, k - 1).astype(np.float32))
    bank = np.frombuffer(bank_raw, dtype="<f4").reshape(h, b).astype(np.float32)
    adapter = StoredAdapter(bank, k, r, entries, indices, weights, config, width)
    try:
        adapter.validate()
    except InvalidAdapterError as exc:
        raise CorruptAdapterError(str(exc)) from exc
    return adapter


def save(adapter: StoredAdapter, path) -> Path:
    path = Path(path)
    path.write_bytes(serialize(adapter))
    return path


def load(path) -> StoredAdapter:
    return deserialize(Path(path).read_bytes())


def header_bytes(adapter: StoredAdapter) -> int:
    """Size of everything except the payload and checksum."""
    return len(serialize(adapter)) - adapter.payload_bytes() - _CRC.size


# ---------------------------------------------------------------------------
# inspection and merged export


def describe(adapter: StoredAdapter) -> str:
    lines = [
        f"format      VBLA v{FORMAT_VERSION}",
        f"bank        h={adapter.h} b={adapter.b}",
        f"selection   k={adapter.k} r={adapter.r} index_width={adapter.index_width}",
        f"entries     {len(adapter.manifest)}",
        f"payload     {adapter.payload_bytes()} bytes ({adapter.payload_bytes() / 4:g} float32-equiv)",
        f"header      {header_bytes(adapter)} bytes + 4 byte CRC32",
    ]
    if adapter.config:
        lines.append("config      " + json.dumps(adapter.config, sort_keys=True))
    mats = reconstruct_entries(adapter)
    lines.append("layer  module  side  r  d_dim  subvecs  distinct_rows  mean_top_w  norm")
    for e, idx, w in zip(adapter.manifest, adapter.indices, adapter.weights):
        top = complete_weights(w)[..., 0]
        lines.append(
            f"{e.layer:<6} {e.module:<7} {e.side:<5} {e.r:<2} {e.d_dim:<6} "
            f"{idx.shape[0] * idx.shape[1]:<8} {len(np.unique(idx)):<14} "
            f"{float(top.mean()) if top.size else 0.0:<11.4f} {float(np.linalg.norm(mats[e.key])):.4g}"
        )
    return "\n".join(lines)


def module_deltas(adapter: StoredAdapter) -> dict[tuple[int, str], np.ndarray]:
    return {key: merge_delta(f) for key, f in reconstruct(adapter).items()}


def write_tensor_container(path, tensors: Mapping[str, np.ndarray]) -> tuple[Path, Path]:
    """Write tensors as one flat little-endian float32 file plus a JSON sidecar."""
    path = Path(path)
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, t in tensors.items():
            raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(t)), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(
        json.dumps({"dtype": "float32", "byteorder": "little", "tensors": entries}, indent=2) + "\n"
    )
    return path, sidecar


def read_tensor_container(path) -> dict[str, np.ndarray]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    return {
        e["name"]: np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        for e in meta["tensors"]
    }
