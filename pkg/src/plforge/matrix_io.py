"""Feature-bundle carrier type, the ``.fbun`` binary format, manifests and CSV import.

Layout of a ``.fbun`` file (little-endian, row-major)::

    "FBUN" | u32 version | u32 N | u32 D | u32 C | u8 has_labels
    | features (N*D f32) | logits (N*C f32) | labels (N i32, iff has_labels)
    | ids (N u32) | u64 FNV-1a checksum of every preceding byte

A sibling ``<stem>.manifest.json`` records the counts and the checksum.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FBUN"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """Raised for malformed bundle/checkpoint files or invalid bundle contents."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        r, c = bad[0]
        raise FormatError(f"non-finite value at row {r}, col {c} ({name})")


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """N samples with D-dim features, C-dim logits, optional labels and unique ids.

    Arrays are copied to their storage dtypes (f32 / i32 / u32) and made
    read-only, so a bundle can be shared freely.
    """

    features: np.ndarray
    logits: np.ndarray
    labels: np.ndarray | None = None
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float32, ndmin=2)
        logits = np.array(self.logits, dtype=np.float32, ndmin=2)
        if feats.ndim != 2 or logits.ndim != 2:
            raise FormatError("features and logits must be 2-D")
        n, d = feats.shape
        c = logits.shape[1]
        if n < 1 or d < 1:
            raise FormatError("need N >= 1 and D >= 1")
        if c < 2:
            raise FormatError("need C >= 2")
        if logits.shape[0] != n:
            raise FormatError(f"length mismatch: {n} feature rows vs {logits.shape[0]} logit rows")
        _check_finite("features", feats)
        _check_finite("logits", logits)

        labels = self.labels
        if labels is not None:
            labels = np.array(labels, dtype=np.int32).reshape(-1)
            if labels.shape[0] != n:
                raise FormatError(f"length mismatch: {labels.shape[0]} labels for {n} rows")
            if labels.size and (labels.min() < 0 or labels.max() >= c):
                raise FormatError(f"labels must lie in [0, {c})")
            labels.setflags(write=False)

        if self.ids is None:
            ids = np.arange(n, dtype=np.uint32)
        else:
            raw = np.asarray(self.ids).reshape(-1)
            if raw.size and raw.min() < 0:
                raise FormatError("ids must be non-negative")
            ids = raw.astype(np.uint32)
        if ids.shape[0] != n:
            raise FormatError(f"length mismatch: {ids.shape[0]} ids for {n} rows")
        if np.unique(ids).size != n:
            raise FormatError("ids must be unique")

        feats.setflags(write=False)
        logits.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def replace(self, **changes) -> "FeatureBundle":
        kw = dict(features=self.features, logits=self.logits, labels=self.labels, ids=self.ids)
        kw.update(changes)
        return FeatureBundle(**kw)

    def take(self, index) -> "FeatureBundle":
        """Sub-bundle (or reordering) given by an integer index array."""
        index = np.asarray(index)
        return FeatureBundle(
            self.features[index],
            self.logits[index],
            None if self.labels is None else self.labels[index],
            self.ids[index],
        )

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        if self.has_labels != other.has_labels:
            return False
        same = (
            self.features.shape == other.features.shape
            and self.logits.shape == other.logits.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.logits.tobytes() == other.logits.tobytes()
            and self.ids.tobytes() == other.ids.tobytes()
        )
        if same and self.has_labels:
            same = self.labels.tobytes() == other.labels.tobytes()
        return same


@dataclass(frozen=True)
class Manifest:
    n_samples: int
    feature_dim: int
    n_classes: int
    domain_name: str
    has_labels: bool
    checksum: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_samples": self.n_samples,
                "feature_dim": self.feature_dim,
                "n_classes": self.n_classes,
                "domain_name": self.domain_name,
                "has_labels": self.has_labels,
                "checksum": f"{self.checksum:016x}",
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        try:
            return cls(
                n_samples=int(d["n_samples"]),
                feature_dim=int(d["feature_dim"]),
                n_classes=int(d["n_classes"]),
                domain_name=str(d["domain_name"]),
                has_labels=bool(d["has_labels"]),
                checksum=int(d["checksum"], 16),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def encode_bundle(bundle: FeatureBundle) -> bytes:
    """Serialize ``bundle`` to the ``.fbun`` byte layout (checksum included)."""
    n, d, c = bundle.n_samples, bundle.feature_dim, bundle.n_classes
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, d, c, int(bundle.has_labels)),
        bundle.features.astype("<f4").tobytes(),
        bundle.logits.astype("<f4").tobytes(),
    ]
    if bundle.has_labels:
        parts.append(bundle.labels.astype("<i4").tobytes())
    parts.append(bundle.ids.astype("<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode_bundle(data: bytes, expected: Manifest | None = None) -> FeatureBundle:
    """Parse ``.fbun`` bytes; validates magic, version, lengths and checksum."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated payload: header incomplete")
    magic, version, n, d, c, has_labels = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != VERSION:
        raise FormatError(f"version mismatch: file has {version}, expected {VERSION}")
    if has_labels not in (0, 1):
        raise FormatError("checksum mismatch: corrupt has_labels flag")
    if expected is not None:
        got = (n, d, c, bool(has_labels))
        want = (expected.n_samples, expected.feature_dim, expected.n_classes, expected.has_labels)
        if got != want:
            raise FormatError(f"length mismatch: manifest says (N, D, C, labels)={want}, payload has {got}")
    size = _HEADER.size + 4 * (n * d + n * c + n * has_labels + n) + 8
    if len(data) != size:
        raise FormatError(f"length mismatch: expected {size} bytes for N={n}, got {len(data)}")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise FormatError("checksum mismatch")
    if expected is not None and expected.checksum != stored:
        raise FormatError("checksum mismatch: manifest disagrees with payload")

    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += 4 * count
        return arr

    feats = take("<f4", n * d).reshape(n, d)
    logits = take("<f4", n * c).reshape(n, c)
    labels = take("<i4", n) if has_labels else None
    ids = take("<u4", n)
    return FeatureBundle(feats, logits, labels, ids)


def save_bundle(bundle: FeatureBundle, path, domain_name: str = "") -> Manifest:
    """Write ``bundle`` to ``path`` and its manifest next to it."""
    path = Path(path)
    data = encode_bundle(bundle)
    manifest = Manifest(
        bundle.n_samples,
        bundle.feature_dim,
        bundle.n_classes,
        domain_name or path.stem,
        bundle.has_labels,
        struct.unpack("<Q", data[-8:])[0],
    )
    path.write_bytes(data)
    manifest_path(path).write_text(manifest.to_json() + "\n")
    return manifest


def load_bundle(path) -> FeatureBundle:
    """Read a ``.fbun`` file, cross-checking the sibling manifest when present."""
    path = Path(path)
    mpath = manifest_path(path)
    expected = Manifest.from_json(mpath.read_text()) if mpath.exists() else None
    return decode_bundle(path.read_bytes(), expected)


def _read_numeric_csv(path, kind: str, cast=float) -> list[list]:
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            vals = []
            for c, cell in enumerate(row):
                try:
                    vals.append(cast(cell.strip()))
                except ValueError:
                    raise FormatError(
                        f"{kind} CSV: non-numeric cell {cell!r} at row {r}, column {c}"
                    ) from None
            if rows and len(vals) != len(rows[0]):
                raise FormatError(
                    f"{kind} CSV: ragged rows, row {r} has {len(vals)} columns, expected {len(rows[0])}"
                )
            rows.append(vals)
    if not rows:
        raise FormatError(f"{kind} CSV is empty")
    return rows


def import_csv(features_csv, logits_csv, labels_csv=None) -> FeatureBundle:
    """Build a bundle from headerless numeric CSVs; ids become ``0..N-1``."""
    feats = _read_numeric_csv(features_csv, "features")
    logits = _read_numeric_csv(logits_csv, "logits")
    if len(feats) != len(logits):
        raise FormatError(f"row-count mismatch: {len(feats)} feature rows vs {len(logits)} logit rows")
    labels = None
    if labels_csv is not None:
        label_rows = _read_numeric_csv(labels_csv, "labels", cast=int)
        if len(label_rows) != len(feats):
            raise FormatError(f"row-count mismatch: {len(label_rows)} label rows vs {len(feats)} feature rows")
        if len(label_rows[0]) != 1:
            raise FormatError("labels CSV must have exactly one column")
        labels = [row[0] for row in label_rows]
    return FeatureBundle(np.array(feats), np.array(logits), labels)


def export_csv(bundle: FeatureBundle, features_csv, logits_csv, labels_csv=None) -> None:
    """Inverse of :func:`import_csv` (floats written with round-trip precision)."""
    np.savetxt(features_csv, bundle.features, delimiter=",", fmt="%.9g")
    np.savetxt(logits_csv, bundle.logits, delimiter=",", fmt="%.9g")
    if labels_csv is not None:
        if not bundle.has_labels:
            raise FormatError("bundle has no labels to export")
        np.savetxt(labels_csv, bundle.labels, fmt="%d")
