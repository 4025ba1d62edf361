"""Activation stores, manifests and the NPY container they live in.

Activations are exported one ``.npy`` file per layer (``layer_000.npy``,
``layer_001.npy``, ...), float32 little-endian, C order, shape ``(T, D)``.
The manifest is JSONL with one record per utterance::

    {"utterance_id": "u0", "frame_begin": 0, "frame_end": 25,
     "embedding_ref": "emb/u0.npy", "labels": {"gender": "m", "phone": [...]}}
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._atomic import write_npy, write_text
from .exceptions import DataError, FormatError, InputNotFoundError, ManifestError
from .neuron_sets import load_neuron_sets, save_neuron_sets  # noqa: F401  (re-export)

ACTIVATION_DTYPE = np.dtype("<f4")
PATTERN_DTYPE = np.dtype("u1")
_LAYER_FILE = re.compile(r"^layer_(\d+)\.npy$")


def read_npy(path, dtype=ACTIVATION_DTYPE, ndim=2, what=None):
    """Read an NPY file, checking the header before touching the payload."""
    path = Path(path)
    what = what or str(path)
    if not path.exists():
        raise InputNotFoundError(f"{what}: file not found: {path}")
    with open(path, "rb") as fh:
        try:
            version = np.lib.format.read_magic(fh)
            if version == (1, 0):
                shape, fortran, file_dtype = np.lib.format.read_array_header_1_0(fh)
            elif version == (2, 0):
                shape, fortran, file_dtype = np.lib.format.read_array_header_2_0(fh)
            else:
                raise FormatError(f"{what}: unsupported NPY version {version}")
        except ValueError as exc:
            raise FormatError(f"{what}: malformed NPY header ({exc})") from exc
        if fortran:
            raise FormatError(f"{what}: array is Fortran-ordered, expected C order")
        if file_dtype != dtype:
            raise FormatError(f"{what}: dtype {file_dtype.str}, expected {dtype.str}")
        if len(shape) != ndim:
            raise FormatError(f"{what}: shape {shape} has {len(shape)} dims, expected {ndim}")
        count = int(np.prod(shape))
        data = np.fromfile(fh, dtype=file_dtype, count=count)
        if data.size != count:
            raise FormatError(f"{what}: truncated payload ({data.size} of {count} values)")
    return data.reshape(shape)


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    frame_begin: int
    frame_end: int
    embedding_ref: str | None = None
    labels: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.frame_end - self.frame_begin

    def to_dict(self):
        out = {"utterance_id": self.utterance_id, "frame_begin": self.frame_begin,
               "frame_end": self.frame_end}
        if self.embedding_ref is not None:
            out["embedding_ref"] = self.embedding_ref
        if self.labels:
            out["labels"] = self.labels
        return out


@dataclass
class Manifest:
    """Frame-to-utterance binding. ``root`` resolves relative embedding paths."""

    records: list
    root: Path | None = None

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.records)

    @property
    def n_frames(self):
        return self.records[-1].frame_end if self.records else 0

    @property
    def utterance_ids(self):
        return [r.utterance_id for r in self.records]

    def validate(self, n_frames=None):
        if not self.records:
            raise ManifestError("manifest has no records")
        expected = 0
        seen = set()
        for i, rec in enumerate(self.records):
            name = f"record {i} ({rec.utterance_id!r})"
            if rec.utterance_id in seen:
                raise ManifestError(f"{name}: duplicate utterance_id")
            seen.add(rec.utterance_id)
            if rec.frame_end <= rec.frame_begin:
                raise ManifestError(f"{name}: empty or inverted range "
                                    f"[{rec.frame_begin}, {rec.frame_end})")
            if rec.frame_begin > expected:
                raise ManifestError(f"{name}: gap at frame {expected}")
            if rec.frame_begin < expected:
                raise ManifestError(f"{name}: overlap at frame {rec.frame_begin}")
            for key, value in rec.labels.items():
                if isinstance(value, list) and len(value) != rec.n_frames:
                    raise ManifestError(f"{name}: label {key!r} has {len(value)} entries "
                                        f"for {rec.n_frames} frames")
            expected = rec.frame_end
        if n_frames is not None and expected != n_frames:
            if expected < n_frames:
                raise ManifestError(f"gap at frame {expected}: manifest ends before T={n_frames}")
            raise ManifestError(f"manifest covers {expected} frames but T={n_frames}")

    def utterance_index(self):
        """Per-frame utterance position, length ``n_frames``."""
        lengths = [r.n_frames for r in self.records]
        return np.repeat(np.arange(len(self.records)), lengths)

    def label_column(self, name, per="frame"):
        """Labels named ``name`` expanded per frame, or one per utterance.

        Per-utterance strings broadcast over the utterance's frames. Asking
        for ``per="utterance"`` on per-frame labels is an error.
        """
        out = []
        for rec in self.records:
            if name not in rec.labels:
                raise ManifestError(f"utterance {rec.utterance_id!r}: no label {name!r}")
            value = rec.labels[name]
            if per == "frame":
                out.extend(value if isinstance(value, list) else [value] * rec.n_frames)
            elif isinstance(value, list):
                raise ManifestError(f"label {name!r} is per-frame, not per-utterance")
            else:
                out.append(value)
        return np.asarray(out, dtype=object)

    def load_embeddings(self):
        """Stack the utterance embeddings into an ``(n_utterances, F)`` array."""
        rows = []
        for rec in self.records:
            if rec.embedding_ref is None:
                raise ManifestError(f"utterance {rec.utterance_id!r}: no embedding_ref")
            ref = Path(rec.embedding_ref)
            if not ref.is_absolute() and self.root is not None:
                ref = self.root / ref
            vec = read_npy(ref, ndim=1, what=f"embedding of {rec.utterance_id!r}")
            if rows and vec.shape != rows[0].shape:
                raise ManifestError(f"utterance {rec.utterance_id!r}: embedding dim "
                                    f"{vec.shape[0]} != {rows[0].shape[0]}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"utterance {rec.utterance_id!r}: non-finite embedding")
            rows.append(vec)
        return np.stack(rows).astype(np.float64)

    def to_jsonl(self):
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise InputNotFoundError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = ManifestRecord(utterance_id=str(obj["utterance_id"]),
                                 frame_begin=int(obj["frame_begin"]),
                                 frame_end=int(obj["frame_end"]),
                                 embedding_ref=obj.get("embedding_ref"),
                                 labels=dict(obj.get("labels") or {}))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        records.append(rec)
    return Manifest(records, root=path.parent)


def save_manifest(manifest, path):
    write_text(path, manifest.to_jsonl())


@dataclass(frozen=True)
class LayerActivations:
    layer_index: int
    data: np.ndarray

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class ActivationStore:
    """Per-layer ``(T, D)`` activations bound to a manifest.

    Stores are validated on construction and their arrays are made
    read-only, so a store can be shared freely between readers.
    """

    layers: list
    manifest: Manifest
    allow_mixed_widths: bool = False

    def __post_init__(self):
        self.validate()
        for layer in self.layers:
            layer.data.setflags(write=False)

    def validate(self):
        if not self.layers:
            raise DataError("activation store has no layers")
        n_frames = self.layers[0].n_frames
        width = self.layers[0].width
        for layer in self.layers:
            arr = layer.data
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
                raise DataError(f"layer {layer.layer_index}: bad shape {arr.shape}")
            if arr.shape[0] != n_frames:
                raise DataError(f"layer {layer.layer_index}: {arr.shape[0]} frames, "
                                f"layer {self.layers[0].layer_index} has {n_frames}")
            if arr.shape[1] != width and not self.allow_mixed_widths:
                raise DataError(f"layer {layer.layer_index}: width {arr.shape[1]} != {width}")
            bad = ~np.isfinite(arr)
            if bad.any():
                t, d = np.argwhere(bad)[0]
                raise DataError(f"layer {layer.layer_index}: non-finite value "
                                f"{arr[t, d]} at t={t}, d={d}")
        self.manifest.validate(n_frames)

    @property
    def n_frames(self):
        return self.layers[0].n_frames

    @property
    def widths(self):
        return [layer.width for layer in self.layers]

    @property
    def layer_indices(self):
        return [layer.layer_index for layer in self.layers]

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def matrices(self):
        return [layer.data for layer in self.layers]


def _layer_files(path):
    path = Path(path)
    if not path.exists():
        raise InputNotFoundError(f"activations not found: {path}")
    if path.is_file():
        return [(0, path)]
    found = []
    for child in path.iterdir():
        m = _LAYER_FILE.match(child.name)
        if m:
            found.append((int(m.group(1)), child))
    if not found:
        raise FormatError(f"{path}: no layer_NNN.npy files")
    return sorted(found)


def load_layer_matrices(path, dtype=ACTIVATION_DTYPE):
    """Read every ``layer_NNN.npy`` under ``path`` (or a single file)."""
    return [(idx, read_npy(f, dtype=dtype, what=f"layer {idx} ({f.name})"))
            for idx, f in _layer_files(path)]


def load_activations(path, manifest_path, allow_mixed_widths=False):
    """Load and fully validate an :class:`ActivationStore`."""
    manifest = load_manifest(manifest_path)
    layers = [LayerActivations(idx, arr) for idx, arr in load_layer_matrices(path)]
    return ActivationStore(layers, manifest, allow_mixed_widths=allow_mixed_widths)


def save_layer_matrices(matrices, path, indices=None, dtype=ACTIVATION_DTYPE):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    indices = range(len(matrices)) if indices is None else indices
    for idx, arr in zip(indices, matrices):
        write_npy(path / f"layer_{idx:03d}.npy", np.asarray(arr, dtype=dtype))


def save_activations(store, path, manifest_path):
    save_layer_matrices(store.matrices(), path, store.layer_indices)
    save_manifest(store.manifest, manifest_path)
