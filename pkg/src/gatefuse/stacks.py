"""Layer-representation stacks and their on-disk formats.

A LayerStack is one utterance's (L, T, D) block of per-layer hidden
states plus identity metadata.  Feature files are little-endian binary
(magic ``RSF1``) storing the payload as 32-bit floats in (layer, frame,
dim) order; stacks are widened to float64 on load.  Manifests are JSON
Lines, one object per utterance view.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RSF1"
LABEL_BONAFIDE = 0
LABEL_SPOOF = 1
_LABEL_UNLABELED_BYTE = 255

_HEADER = struct.Struct("<4sIIIBBH")


@dataclass
class LayerStack:
    """Hidden states for one utterance: features[layer, frame, dim].

    ``label`` is 0 (bona fide), 1 (spoof) or None (unlabeled); ``view_id``
    0 marks the clean view, k >= 1 the k-th augmented view.  Layers are
    indexed 0..L-1.
    """

    utt_id: str
    dataset_id: str
    label: int | None
    view_id: int
    features: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError(f"features must be (L, T, D), got shape "
                             f"{self.features.shape}")
        L, T, D = self.features.shape
        if L < 2 or T < 1 or D < 1:
            raise ValueError(f"bad dims L={L}, T={T}, D={D}")
        if not np.isfinite(self.features).all():
            raise ValueError(f"non-finite feature in utterance {self.utt_id!r}")
        if self.label not in (0, 1, None):
            raise ValueError(f"label must be 0, 1 or None, got {self.label!r}")
        if self.view_id < 0:
            raise ValueError("view_id must be >= 0")

    @property
    def n_layers(self) -> int:
        return self.features.shape[0]

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


def write_features(stack: LayerStack, path: str | Path) -> None:
    """Serialize a stack; payload stored as float32, round-trip exact
    whenever the in-memory values are float32-representable."""
    L, T, D = stack.features.shape
    label_byte = _LABEL_UNLABELED_BYTE if stack.label is None else stack.label
    utt = stack.utt_id.encode("utf-8")
    ds = stack.dataset_id.encode("utf-8")
    payload = stack.features.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, L, T, D, label_byte, stack.view_id, 0))
        f.write(struct.pack("<I", len(utt)))
        f.write(utt)
        f.write(struct.pack("<I", len(ds)))
        f.write(ds)
        f.write(payload)


def read_features(path: str | Path) -> LayerStack:
    """Parse a feature file, validating magic, header fields and payload
    size; errors name the offending byte offset or byte counts."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes "
                          f"(need {_HEADER.size}) at offset 0")
    magic, L, T, D, label_byte, view_id, reserved = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if reserved != 0:
        raise FormatError(f"{path}: reserved field nonzero at offset 16")
    if label_byte not in (0, 1, _LABEL_UNLABELED_BYTE):
        raise FormatError(f"{path}: bad label byte {label_byte} at offset 14")
    off = _HEADER.size
    utt_id, off = _read_string(blob, off, path, "utt_id")
    dataset_id, off = _read_string(blob, off, path, "dataset_id")
    n_values = L * T * D
    expected = n_values * 4
    actual = len(blob) - off
    if expected != actual:
        raise FormatError(
            f"{path}: header declares L*T*D={n_values} "
            f"({expected} payload bytes) but {actual} bytes follow offset {off}")
    features = np.frombuffer(blob, dtype="<f4", count=n_values, offset=off)
    features = features.reshape(L, T, D).astype(np.float64)
    label = None if label_byte == _LABEL_UNLABELED_BYTE else int(label_byte)
    return LayerStack(utt_id=utt_id, dataset_id=dataset_id, label=label,
                      view_id=int(view_id), features=features)


def _read_string(blob: bytes, off: int, path, what: str) -> tuple[str, int]:
    if off + 4 > len(blob):
        raise FormatError(f"{path}: truncated {what} length at offset {off}")
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    if off + n > len(blob):
        raise FormatError(f"{path}: truncated {what} at offset {off} "
                          f"(need {n} bytes, have {len(blob) - off})")
    return blob[off:off + n].decode("utf-8"), off + n


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    utt: str
    dataset: str
    label: int
    view: int


def write_manifest(entries: list[ManifestEntry], path: str | Path,
                   fingerprint: str | None = None) -> None:
    """Write a JSON Lines manifest; an optional first header line carries
    the run's config fingerprint."""
    with open(path, "w", encoding="utf-8") as f:
        if fingerprint is not None:
            f.write(json.dumps({"config": fingerprint}) + "\n")
        for e in entries:
            f.write(json.dumps({"path": e.path, "utt": e.utt,
                                "dataset": e.dataset, "label": e.label,
                                "view": e.view}) + "\n")


def read_manifest(path: str | Path) -> tuple[list[ManifestEntry], str | None]:
    """Read a manifest, returning entries and the header fingerprint if
    one is present."""
    entries: list[ManifestEntry] = []
    fingerprint = None
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "path" not in obj and "config" in obj:
                fingerprint = obj["config"]
                continue
            try:
                entries.append(ManifestEntry(
                    path=obj["path"], utt=obj["utt"], dataset=obj["dataset"],
                    label=int(obj["label"]), view=int(obj["view"])))
            except KeyError as exc:
                raise FormatError(f"{path}: line {i + 1} missing key {exc}")
    return entries, fingerprint
