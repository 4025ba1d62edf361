"""Per-layer sets of FFN hidden-dim indices and their JSON container."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._atomic import write_json
from .exceptions import FormatError, InputNotFoundError, ValidationError

FORMAT_VERSION = 1

FAMILIES = (
    "G_ssl", "P_ssl", "G_ive_joint", "G_ive", "A_ive", "B_ive", "C_ive", "P_ive",
    "protected", "ground_truth",
)


def _normalize(indices, width, layer):
    arr = np.asarray(sorted({int(i) for i in indices}), dtype=np.int64)
    if arr.size and (arr[0] < 0 or (width is not None and arr[-1] >= width)):
        bad = arr[0] if arr[0] < 0 else arr[-1]
        raise ValidationError(
            f"layer {layer}: index {bad} outside [0, {width})")
    return arr


@dataclass
class NeuronSet:
    """Sorted hidden-dim indices per layer.

    ``cluster`` identifies the member of a per-cluster family (``c`` for
    ``G_ssl``, ``g`` for ``G_ive``, ``(g, c)`` for ``G_ive_joint``) and is
    ``None`` for aggregate families such as ``P_ssl``.
    """

    family: str
    layers: dict
    width: int | None = None
    cluster: object = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = {int(k): _normalize(v, self.width, k)
                       for k, v in sorted(self.layers.items())}

    def __getitem__(self, layer):
        return self.layers[layer]

    def __eq__(self, other):
        if not isinstance(other, NeuronSet):
            return NotImplemented
        return (self.family == other.family and self.width == other.width
                and _cluster_key(self.cluster) == _cluster_key(other.cluster)
                and self.layers.keys() == other.layers.keys()
                and all(np.array_equal(self.layers[k], other.layers[k]) for k in self.layers))

    def counts(self):
        return {k: int(v.size) for k, v in self.layers.items()}

    def total(self):
        return sum(self.counts().values())

    def to_dict(self):
        out = {"family": self.family}
        if self.cluster is not None:
            out["cluster"] = _cluster_key(self.cluster)
        if self.width is not None:
            out["width"] = self.width
        if self.provenance:
            out["provenance"] = self.provenance
        out["layers"] = [{"layer": k, "indices": v.tolist()} for k, v in self.layers.items()]
        return out

    @classmethod
    def from_dict(cls, obj, default_family="protected"):
        try:
            layers = {int(e["layer"]): e["indices"] for e in obj["layers"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed neuron-set layers: {exc}") from exc
        cluster = obj.get("cluster")
        if isinstance(cluster, list):
            cluster = tuple(cluster)
        return cls(family=obj.get("family", default_family), layers=layers,
                   width=obj.get("width"), cluster=cluster,
                   provenance=obj.get("provenance", {}))


def _cluster_key(cluster):
    if isinstance(cluster, (tuple, list)):
        return [int(c) for c in cluster]
    return None if cluster is None else int(cluster)


def save_neuron_sets(sets, path, extra=None):
    """Write one set or a list of sets as versioned JSON.

    A single set is stored flat (``{"version": 1, "layers": [...]}``), a
    collection under ``"sets"``. ``extra`` keys are merged at top level.
    """
    if isinstance(sets, NeuronSet):
        obj = {"version": FORMAT_VERSION, **sets.to_dict()}
    else:
        obj = {"version": FORMAT_VERSION, "sets": [s.to_dict() for s in sets]}
    if extra:
        obj.update(extra)
    write_json(path, obj)


def load_neuron_sets(path):
    """Inverse of :func:`save_neuron_sets`; always returns a list."""
    path = Path(path)
    if not path.exists():
        raise InputNotFoundError(f"neuron-set file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if obj.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {obj.get('version')!r}")
    if "sets" in obj:
        return [NeuronSet.from_dict(s) for s in obj["sets"]]
    return [NeuronSet.from_dict(obj)]


def find_set(sets, family, cluster=None):
    for s in sets:
        if s.family == family and _cluster_key(s.cluster) == _cluster_key(cluster):
            return s
    raise KeyError(f"no neuron set with family={family!r} cluster={cluster!r}")
