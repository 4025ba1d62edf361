"""Synthetic activations with planted cluster neurons, and a centroid probe.

Every layer gets background dims drawn from unit Gaussian noise and a few
planted dims that sit far below the noise unless they "fire". A planted
dim fires with probability ``p_boost`` under its own condition and
``p_base`` elsewhere; firing adds ``fire_offset`` so the dim lands in the
frame's top-lambda% with near certainty. Planted families:

* SSL dims: condition is "frame in SSL cluster c";
* i-vector dims: condition is "frame in i-vector cluster g" (every c);
* joint decoys (optional): condition is the single pair (g, c). They are
  exclusive to SSL cluster c, so they belong to P_ssl, and to i-vector
  cluster g only under ``union`` mode.

A block of ``n_general`` speech-general dims (offset ``general_offset``)
is active in most frames of every cluster, like the neurons that respond
to speech as a whole. They fill the top-lambda% slots left over by planted
dims, which keeps plain background dims well under any sensible rho.

The generator also emits clusterable features (per-frame SSL features and
per-utterance embeddings around well-separated centres) and FFN weights in
which planted dims have small L1 norm, so that plain magnitude pruning
removes them.
"""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._atomic import write_npy
from .clustering import FrameClusterLabels
from .exceptions import ParameterError, ValidationError
from .neuron_sets import NeuronSet, save_neuron_sets
from .pruning import FfnLayer, FfnWeights, save_ffn_weights
from .tensor_io import (ActivationStore, LayerActivations, Manifest, ManifestRecord,
                        save_activations)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

PHONE_CLASSES = ("vowel", "semivowel", "consonant")


@dataclass
class SynthSpec:
    n_layers: int = 4
    n_frames: int = 20_000
    width: int = 256
    k_ssl: int = 3
    k_ive: int = 2
    planted_per_cluster: int = 8
    n_joint_decoys: int = 0
    n_general: int = 6
    general_offset: float = 5.0
    p_base: float = 0.005
    p_boost: float = 0.2
    fire_offset: float = 6.0
    rest_offset: float = -6.0
    utterance_frames: int = 100
    ssl_feature_dim: int = 8
    embedding_dim: int = 16
    cluster_separation: float = 6.0
    d_model: int = 32
    planted_weight_scale: float = 0.25
    seed: int = 0
    planted: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_layers", "n_frames", "width", "k_ssl", "k_ive", "utterance_frames",
                     "ssl_feature_dim", "embedding_dim", "d_model"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.planted_per_cluster < 0 or self.n_joint_decoys < 0 or self.n_general < 0:
            raise ValidationError("planted counts must be >= 0")
        if not 0 <= self.p_base <= self.p_boost <= 1:
            raise ValidationError(f"need 0 <= p_base <= p_boost <= 1, got "
                                  f"p_base={self.p_base}, p_boost={self.p_boost}")
        n_utts = math.ceil(self.n_frames / self.utterance_frames)
        if n_utts < self.k_ive:
            raise ValidationError(f"{n_utts} utterances cannot populate k_ive={self.k_ive}")
        if self.planted:
            self._check_explicit()
        elif self.n_planted > self.width:
            raise ValidationError(f"{self.n_planted} planted dims exceed width {self.width}")

    @property
    def n_planted(self):
        return (self.planted_per_cluster * (self.k_ssl + self.k_ive)
                + self.n_joint_decoys * self.k_ssl * self.k_ive + self.n_general)

    def _check_explicit(self):
        seen = set()
        for key, dims in self.planted.items():
            for d in dims:
                if not 0 <= d < self.width:
                    raise ValidationError(f"planted[{key}]: dim {d} outside [0, {self.width})")
                if d in seen:
                    raise ValidationError(f"planted[{key}]: dim {d} planted twice")
                seen.add(d)

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            obj = tomllib.load(fh)
        return cls.from_dict(obj.get("synth", obj))

    @classmethod
    def from_dict(cls, obj):
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


def _layout(spec, rng):
    """Dims per role for one layer.

    Keys are ``("ssl", c)``, ``("ive", g)``, ``("joint", g, c)`` and
    ``("general",)``.
    """
    if spec.planted:
        out = {}
        for key, dims in spec.planted.items():
            family, *ids = key.split("_")
            out[(family, *map(int, ids))] = np.asarray(dims, dtype=np.int64)
        out.setdefault(("general",), np.empty(0, dtype=np.int64))
        return out
    perm = rng.permutation(spec.width)
    out = {}
    pos = 0
    n = spec.planted_per_cluster
    for c in range(spec.k_ssl):
        out[("ssl", c)] = np.sort(perm[pos:pos + n])
        pos += n
    for g in range(spec.k_ive):
        out[("ive", g)] = np.sort(perm[pos:pos + n])
        pos += n
    for g in range(spec.k_ive):
        for c in range(spec.k_ssl):
            out[("joint", g, c)] = np.sort(perm[pos:pos + spec.n_joint_decoys])
            pos += spec.n_joint_decoys
    out[("general",)] = np.sort(perm[pos:pos + spec.n_general])
    return out


def _condition(key, ssl, ive):
    family, *ids = key
    if family == "ssl":
        return ssl == ids[0]
    if family == "ive":
        return ive == ids[0]
    if family == "joint":
        return (ive == ids[0]) & (ssl == ids[1])
    raise ValidationError(f"unknown planted family {family!r}")


@dataclass
class SynthDataset:
    spec: SynthSpec
    store: ActivationStore
    labels: FrameClusterLabels
    truth: dict  # family name -> NeuronSet
    layouts: dict  # layer -> planted layout
    ssl_features: np.ndarray
    utterance_embeddings: np.ndarray
    utterance_classes: np.ndarray
    weights: FfnWeights


def _truth_sets(spec, layouts):
    def collect(keys):
        return {li: np.concatenate([lay[k] for k in keys if k in lay] or [np.empty(0, int)])
                for li, lay in layouts.items()}

    ssl_keys = [("ssl", c) for c in range(spec.k_ssl)]
    ive_keys = [("ive", g) for g in range(spec.k_ive)]
    joint_keys = [("joint", g, c) for g in range(spec.k_ive) for c in range(spec.k_ssl)]
    prov = {"source": "synth", "seed": spec.seed}
    p_ssl = NeuronSet("ground_truth", collect(ssl_keys + joint_keys), spec.width,
                      cluster=None, provenance={**prov, "target": "P_ssl"})
    p_ive = NeuronSet("ground_truth", collect(ive_keys), spec.width,
                      provenance={**prov, "target": "P_ive"})
    p_ive_union = NeuronSet("ground_truth", collect(ive_keys + joint_keys), spec.width,
                            provenance={**prov, "target": "P_ive_union"})
    protected = NeuronSet("ground_truth", {li: np.union1d(p_ssl[li], p_ive[li])
                                           for li in layouts}, spec.width,
                          provenance={**prov, "target": "protected"})
    return {"P_ssl": p_ssl, "P_ive": p_ive, "P_ive_union": p_ive_union,
            "protected": protected}


def _frame_layout(spec, rng):
    n_utts = math.ceil(spec.n_frames / spec.utterance_frames)
    begins = np.arange(n_utts) * spec.utterance_frames
    ends = np.minimum(begins + spec.utterance_frames, spec.n_frames)
    utt_ive = rng.permutation(np.arange(n_utts) % spec.k_ive)
    ssl = rng.integers(spec.k_ssl, size=spec.n_frames)
    ive = np.repeat(utt_ive, ends - begins)
    return begins, ends, utt_ive, ssl, ive


def generate(spec):
    """Draw a :class:`SynthDataset`; fully determined by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    begins, ends, utt_ive, ssl, ive = _frame_layout(spec, rng)

    ssl_centres = rng.normal(scale=spec.cluster_separation, size=(spec.k_ssl, spec.ssl_feature_dim))
    ssl_features = ssl_centres[ssl] + rng.normal(size=(spec.n_frames, spec.ssl_feature_dim))
    ive_centres = rng.normal(scale=spec.cluster_separation, size=(spec.k_ive, spec.embedding_dim))
    embeddings = ive_centres[utt_ive] + rng.normal(size=(len(begins), spec.embedding_dim))

    layers = []
    layouts = {}
    ffn = {}
    for li in range(spec.n_layers):
        layer_rng = np.random.default_rng([spec.seed, li])
        layout = _layout(spec, layer_rng)
        layouts[li] = layout
        acts = layer_rng.standard_normal((spec.n_frames, spec.width), dtype=np.float32)
        for key, dims in layout.items():
            if dims.size == 0:
                continue
            if key == ("general",):
                acts[:, dims] += np.float32(spec.general_offset)
                continue
            p = np.where(_condition(key, ssl, ive), spec.p_boost, spec.p_base)
            fires = layer_rng.random((spec.n_frames, dims.size)) < p[:, None]
            acts[:, dims] += np.where(fires, spec.fire_offset, spec.rest_offset).astype(np.float32)
        layers.append(LayerActivations(li, acts))

        scale = np.ones(spec.width)
        planted = np.concatenate([d for k, d in layout.items() if k != ("general",)]
                                 or [np.empty(0, int)])
        scale[planted] = spec.planted_weight_scale
        w1 = layer_rng.normal(size=(spec.width, spec.d_model)) * scale[:, None]
        b1 = layer_rng.normal(scale=0.1, size=spec.width) * scale
        w2 = layer_rng.normal(size=(spec.d_model, spec.width)) * scale[None, :]
        ffn[li] = FfnLayer(w1, b1, w2)

    records = []
    for u, (b, e) in enumerate(zip(begins, ends)):
        g = int(utt_ive[u])
        records.append(ManifestRecord(
            utterance_id=f"utt{u:05d}", frame_begin=int(b), frame_end=int(e),
            embedding_ref=f"embeddings/utt{u:05d}.npy",
            labels={"speaker_group": f"group{g}",
                    "phone_class": [PHONE_CLASSES[c % len(PHONE_CLASSES)] for c in ssl[b:e]]},
        ))
    store = ActivationStore(layers, Manifest(records))
    labels = FrameClusterLabels(ssl=ssl, ive=ive, k_ssl=spec.k_ssl, k_ive=spec.k_ive)
    return SynthDataset(spec=spec, store=store, labels=labels,
                        truth=_truth_sets(spec, layouts), layouts=layouts,
                        ssl_features=ssl_features, utterance_embeddings=embeddings,
                        utterance_classes=utt_ive.copy(), weights=FfnWeights(ffn))


def save_dataset(ds, out_dir):
    """Write the dataset in the toolkit's on-disk formats under ``out_dir``."""
    out = Path(out_dir)
    save_activations(ds.store, out / "activations", out / "manifest.jsonl")
    for rec, vec in zip(ds.store.manifest.records, ds.utterance_embeddings):
        write_npy(out / rec.embedding_ref, vec.astype("<f4"))
    write_npy(out / "ssl_features.npy", ds.ssl_features.astype("<f4"))
    save_ffn_weights(ds.weights, out / "weights")
    truth = [s for s in ds.truth.values()]
    save_neuron_sets(truth, out / "ground_truth.json", extra={"spec": ds.spec.to_dict()})
    return out


def recall_precision(identified, truth):
    """Micro-averaged over layers."""
    hit = sum(np.intersect1d(identified[li], truth[li]).size for li in truth.layers)
    n_truth = sum(truth[li].size for li in truth.layers)
    n_found = sum(identified[li].size for li in truth.layers)
    recall = hit / n_truth if n_truth else 1.0
    precision = hit / n_found if n_found else 1.0
    return recall, precision


@dataclass
class ProbeResult:
    accuracy: float
    confusion: np.ndarray
    classes: list

    def __post_init__(self):
        total = self.confusion.sum()
        if total and not math.isclose(self.accuracy, np.trace(self.confusion) / total):
            raise ValidationError("accuracy disagrees with the confusion matrix")


def _split(classes, seed, test_fraction):
    """Per-class shuffled split; every class keeps at least one item on each side."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(classes):
        idx = rng.permutation(np.flatnonzero(classes == cls))
        n_test = min(max(1, int(round(test_fraction * idx.size))), idx.size - 1)
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(train), np.sort(test)


def pooled_features(store, mask=None):
    """Per-utterance mean activations, concatenated over layers (kept dims only)."""
    records = store.manifest.records
    begins = np.array([r.frame_begin for r in records])
    counts = np.array([r.n_frames for r in records])[:, None]
    blocks = []
    for layer in store:
        data = layer.data
        if mask is not None:
            data = data[:, mask.kept[layer.layer_index]]
        sums = np.add.reduceat(data.astype(np.float64), begins, axis=0)
        blocks.append(sums / counts)
    return np.concatenate(blocks, axis=1)


def centroid_probe(store, mask=None, labels=None, seed=0, test_fraction=0.2):
    """Nearest-class-centroid accuracy on mean-pooled utterance activations.

    Dropping non-kept dims is equivalent to zeroing them, since zeroed
    coordinates add nothing to any centroid distance.
    """
    classes = np.asarray(labels)
    if classes.shape[0] != len(store.manifest):
        raise ValidationError(f"{classes.shape[0]} labels for {len(store.manifest)} utterances")
    uniq, counts = np.unique(classes, return_counts=True)
    if uniq.size < 2:
        raise ValidationError("probe needs at least 2 classes")
    if counts.min() < 2:
        raise ValidationError(f"class {uniq[counts.argmin()]!r} has fewer than 2 utterances")
    if not 0 < test_fraction < 1:
        raise ParameterError("test_fraction must be in (0, 1)")
    X = pooled_features(store, mask)
    train, test = _split(classes, seed, test_fraction)
    centroids = np.stack([X[train][classes[train] == c].mean(axis=0) for c in uniq])
    d2 = ((X[test][:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = np.argmin(d2, axis=1)
    truth = np.searchsorted(uniq, classes[test])
    confusion = np.zeros((uniq.size, uniq.size), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    return ProbeResult(float(np.trace(confusion) / confusion.sum()), confusion, uniq.tolist())
