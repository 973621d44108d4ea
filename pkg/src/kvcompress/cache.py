"""In-memory KV-cache data model, validation, and the KVDUMP file format.

A dump file is a fixed-width ASCII prefix, a JSON manifest of the declared
byte length, and a raw float32 little-endian payload:

    KVDUMP1 <10-digit manifest byte length>\\n
    <manifest JSON, UTF-8>
    <payload>

The payload stores heads in layer-major, head-major order; within each head
the key rows come first, then the value rows. When observation windows are
embedded (manifest ``W_eff`` > 0) a second block of per-head query matrices
follows in the same order. Payload length is therefore a pure function of
the manifest dimensions and any deviation is rejected at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

MAGIC = b"KVDUMP1 "
DUMP_VERSION = 1
DTYPE_TOKEN = "f32le"

MANIFEST_KEYS = ("version", "L", "H", "T", "D", "window_len", "W_eff", "dtype", "seed", "labels")


class ValidationError(ValueError):
    """A cache failed validation where a clean cache is required."""


class DumpFormatError(ValueError):
    """A dump file's manifest or payload does not match the format."""


def _as_f32_matrix(arr, name: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if out.ndim != 2 or out.shape[0] < 1 or out.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class HeadKV:
    """One attention head's key and value matrices, both seq_len x dim."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "keys", _as_f32_matrix(self.keys, "keys"))
        object.__setattr__(self, "values", _as_f32_matrix(self.values, "values"))
        if self.keys.shape != self.values.shape:
            raise ValueError(
                f"keys shape {self.keys.shape} != values shape {self.values.shape}"
            )

    @property
    def seq_len(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


@dataclass(frozen=True)
class ObservationWindow:
    """Trailing-block query rows used for extrinsic scoring of one head.

    With grouped-query attention the rows of all query heads in the group
    are concatenated, so the row count is window_len * group_size.
    """

    queries: np.ndarray
    layer_index: int = 0
    head_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "queries", _as_f32_matrix(self.queries, "queries"))

    @property
    def n_rows(self) -> int:
        return self.queries.shape[0]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]


@dataclass(frozen=True)
class LayerCache:
    heads: tuple[HeadKV, ...]
    layer_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.heads:
            raise ValueError("a layer needs at least one head")
        if self.layer_index < 0:
            raise ValueError("layer_index must be >= 0")


@dataclass(frozen=True)
class KVCache:
    layers: tuple[LayerCache, ...]
    window_len: int = 32

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a cache needs at least one layer")
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return len(self.layers[0].heads)

    @property
    def seq_len(self) -> int:
        return self.layers[0].heads[0].seq_len

    @property
    def dim(self) -> int:
        return self.layers[0].heads[0].dim

    def head(self, layer: int, head: int) -> HeadKV:
        return self.layers[layer].heads[head]


@dataclass(frozen=True)
class Violation:
    """One validation finding, located by layer/head/position where known."""

    kind: str  # "shape" | "non_finite" | "window"
    layer: int
    head: int
    position: Optional[int]
    detail: str


def validate_cache(cache: KVCache) -> list[Violation]:
    """Check cross-head shape agreement and entry finiteness.

    Violations are returned as data, never raised; an empty list means the
    cache is clean. Shapes are compared against layer 0, head 0.
    """
    out: list[Violation] = []
    ref = cache.layers[0].heads[0]
    ref_shape = ref.keys.shape
    n_heads = len(cache.layers[0].heads)

    for l, layer in enumerate(cache.layers):
        if len(layer.heads) != n_heads:
            out.append(Violation(
                "shape", l, -1, None,
                f"layer {l} has {len(layer.heads)} heads, expected {n_heads}"))
        for h, head in enumerate(layer.heads):
            if head.keys.shape != ref_shape:
                out.append(Violation(
                    "shape", l, h, None,
                    f"head (layer {l}, head {h}) shape {head.keys.shape} != {ref_shape}"))
            for name, mat in (("keys", head.keys), ("values", head.values)):
                bad_rows = np.flatnonzero(~np.isfinite(mat).all(axis=1))
                for pos in bad_rows:
                    out.append(Violation(
                        "non_finite", l, h, int(pos),
                        f"non-finite entry in {name} at (layer {l}, head {h}, position {pos})"))

    if cache.window_len >= ref_shape[0]:
        out.append(Violation(
            "window", -1, -1, None,
            f"window_len {cache.window_len} must be < sequence length {ref_shape[0]}"))
    return out


@dataclass(frozen=True)
class LoadedDump:
    """A loaded dump plus its manifest and any validation findings."""

    cache: KVCache
    windows: Optional[dict[tuple[int, int], ObservationWindow]]
    manifest: dict
    violations: list[Violation] = field(default_factory=list)


def payload_length(manifest: Mapping) -> int:
    """Payload byte count implied by manifest dimensions."""
    n_layers, n_heads = manifest["L"], manifest["H"]
    seq_len, dim = manifest["T"], manifest["D"]
    w_eff = manifest.get("W_eff", 0) or 0
    n = n_layers * n_heads * 2 * seq_len * dim * 4
    if w_eff > 0:
        n += n_layers * n_heads * w_eff * dim * 4
    return n


def write_header(fh, manifest: Mapping) -> int:
    """Write the magic prefix and manifest; returns bytes written."""
    body = json.dumps(dict(manifest), sort_keys=True).encode("utf-8")
    prefix = MAGIC + b"%010d" % len(body) + b"\n"
    fh.write(prefix)
    fh.write(body)
    return len(prefix) + len(body)


def read_header(fh) -> dict:
    prefix = fh.read(len(MAGIC))
    if prefix != MAGIC:
        raise DumpFormatError(f"bad magic {prefix!r}, expected {MAGIC!r}")
    length_field = fh.read(11)
    if len(length_field) != 11 or not length_field.endswith(b"\n"):
        raise DumpFormatError("truncated manifest length field")
    try:
        body_len = int(length_field[:-1])
    except ValueError as exc:
        raise DumpFormatError(f"unparsable manifest length {length_field!r}") from exc
    body = fh.read(body_len)
    if len(body) != body_len:
        raise DumpFormatError("truncated manifest body")
    try:
        manifest = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DumpFormatError(f"corrupt manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise DumpFormatError("manifest must be a JSON object")
    return manifest


def _check_manifest(manifest: Mapping) -> None:
    for key in ("version", "L", "H", "T", "D", "window_len"):
        if not isinstance(manifest.get(key), int):
            raise DumpFormatError(f"manifest key {key!r} missing or not an integer")
    if manifest.get("dtype") != DTYPE_TOKEN:
        raise DumpFormatError(
            f"unsupported dtype {manifest.get('dtype')!r}, expected {DTYPE_TOKEN!r}")
    if min(manifest["L"], manifest["H"], manifest["T"], manifest["D"]) < 1:
        raise DumpFormatError("manifest dimensions must all be >= 1")


def save_dump(
    cache: KVCache,
    windows: Optional[Mapping[tuple[int, int], ObservationWindow]],
    path,
    seed: Optional[int] = None,
    labels: Optional[dict] = None,
) -> int:
    """Write a cache (and optionally its per-head windows) to ``path``.

    Refuses to write a cache that does not validate clean. Returns the total
    number of bytes written.
    """
    violations = validate_cache(cache)
    if violations:
        raise ValidationError(
            f"refusing to dump a malformed cache: {violations[0].detail} "
            f"({len(violations)} violation(s) total)")

    w_eff = 0
    if windows is not None:
        expected = {(l, h) for l in range(cache.n_layers) for h in range(cache.n_heads)}
        if set(windows) != expected:
            raise ValueError("windows must cover every (layer, head) exactly once")
        rows = {w.n_rows for w in windows.values()}
        dims = {w.dim for w in windows.values()}
        if len(rows) != 1 or dims != {cache.dim}:
            raise ValueError("all windows must share one row count and the cache dim")
        w_eff = rows.pop()

    manifest = {
        "version": DUMP_VERSION,
        "L": cache.n_layers,
        "H": cache.n_heads,
        "T": cache.seq_len,
        "D": cache.dim,
        "window_len": cache.window_len,
        "W_eff": w_eff,
        "dtype": DTYPE_TOKEN,
        "seed": seed,
        "labels": labels or {},
    }
    written = 0
    with open(path, "wb") as fh:
        written += write_header(fh, manifest)
        for layer in cache.layers:
            for head in layer.heads:
                written += fh.write(head.keys.astype("<f4", copy=False).tobytes())
                written += fh.write(head.values.astype("<f4", copy=False).tobytes())
        if windows is not None:
            for l in range(cache.n_layers):
                for h in range(cache.n_heads):
                    q = windows[(l, h)].queries.astype("<f4", copy=False)
                    written += fh.write(q.tobytes())
    return written


def load_dump(path) -> LoadedDump:
    """Read a dump; fails loudly on any manifest/payload disagreement.

    Non-finite entries do not fail the load: they are reported through the
    attached validation findings.
    """
    with open(path, "rb") as fh:
        manifest = read_header(fh)
        _check_manifest(manifest)
        payload = fh.read()
    expected = payload_length(manifest)
    if len(payload) != expected:
        raise DumpFormatError(
            f"payload length mismatch: manifest implies {expected} bytes, found {len(payload)}")

    n_layers, n_heads = manifest["L"], manifest["H"]
    seq_len, dim = manifest["T"], manifest["D"]
    w_eff = manifest.get("W_eff", 0) or 0
    head_bytes = seq_len * dim * 4

    offset = 0
    layers = []
    for l in range(n_layers):
        heads = []
        for h in range(n_heads):
            keys = np.frombuffer(payload, dtype="<f4", count=seq_len * dim, offset=offset)
            offset += head_bytes
            values = np.frombuffer(payload, dtype="<f4", count=seq_len * dim, offset=offset)
            offset += head_bytes
            heads.append(HeadKV(keys.reshape(seq_len, dim), values.reshape(seq_len, dim)))
        layers.append(LayerCache(tuple(heads), layer_index=l))
    cache = KVCache(tuple(layers), window_len=manifest["window_len"])

    windows = None
    if w_eff > 0:
        windows = {}
        for l in range(n_layers):
            for h in range(n_heads):
                q = np.frombuffer(payload, dtype="<f4", count=w_eff * dim, offset=offset)
                offset += w_eff * dim * 4
                windows[(l, h)] = ObservationWindow(q.reshape(w_eff, dim), l, h)

    return LoadedDump(cache, windows, manifest, validate_cache(cache))


def cache_from_heads(head_grid: Sequence[Sequence[HeadKV]], window_len: int) -> KVCache:
    """Assemble a cache from an L x H grid of heads."""
    layers = tuple(
        LayerCache(tuple(row), layer_index=l) for l, row in enumerate(head_grid)
    )
    return KVCache(layers, window_len=window_len)
