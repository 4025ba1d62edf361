"""Lloyd's k-means with k-means++ seeding, label propagation and purity reports."""

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError, ParameterError, ReportError, ValidationError


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int
    inertia_history: tuple = ()
    n_iter: int = 0
    preprocessing: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "k": self.k,
            "seed": self.seed,
            "centroids": self.centroids.tolist(),
            "assignments": self.assignments.tolist(),
            "inertia": self.inertia,
            "n_iter": self.n_iter,
            "inertia_history": list(self.inertia_history),
            "preprocessing": self.preprocessing,
        }

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(k=int(obj["k"]), centroids=np.asarray(obj["centroids"], dtype=np.float64),
                       assignments=np.asarray(obj["assignments"], dtype=np.int64),
                       inertia=float(obj["inertia"]), seed=int(obj["seed"]),
                       inertia_history=tuple(obj.get("inertia_history", ())),
                       n_iter=int(obj.get("n_iter", 0)),
                       preprocessing=dict(obj.get("preprocessing", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed cluster model: {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def squared_distances(X, centers):
    """``(N, k)`` squared Euclidean distances.

    Computed from explicit differences, one center at a time, rather than
    the ``|x|^2 - 2x.c + |c|^2`` expansion, which loses the small distances
    that decide near-ties and breaks the monotone-inertia guarantee.
    """
    d2 = np.empty((X.shape[0], centers.shape[0]))
    for j, c in enumerate(centers):
        diff = X - c
        d2[:, j] = np.einsum("ij,ij->i", diff, diff)
    return d2


def kmeans_plusplus(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = squared_distances(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center; any point will do
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = X[idx]
        closest = np.minimum(closest, squared_distances(X, centers[j:j + 1])[:, 0])
    return centers


def _assign(X, centers):
    d2 = squared_distances(X, centers)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(X.shape[0]), labels]


def _repair_empty(X, centers, labels, dist):
    """Move each empty cluster onto the point farthest from its own centroid."""
    k = centers.shape[0]
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        candidates = np.where(donors, dist, -1.0)
        i = int(np.argmax(candidates))
        counts[labels[i]] -= 1
        counts[j] = 1
        labels[i] = j
        dist[i] = 0.0
        centers[j] = X[i]
    return labels, dist


def _preprocess(X, l2_normalize, standardize):
    info = {}
    if l2_normalize:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
        info["l2_normalize"] = True
    if standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        X = (X - mean) / std
        info["standardize"] = {"mean": mean.tolist(), "std": std.tolist()}
    return X, info


def kmeans_fit(features, k, seed=0, max_iters=300, tol=1e-4, init=None,
               l2_normalize=False, standardize=False):
    """Run Lloyd's algorithm and return a :class:`ClusterModel`.

    ``init`` overrides k-means++ with explicit starting centroids. The
    recorded ``inertia_history`` holds the objective after every
    assignment step, ending with the final one.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"features must be (N, F), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        t, f = np.argwhere(~np.isfinite(X))[0]
        raise DataError(f"non-finite feature at row {t}, column {f}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k!r}")
    if X.shape[0] < k:
        raise ParameterError(f"need at least k={k} items, got N={X.shape[0]}")
    if max_iters < 1 or tol < 0:
        raise ParameterError("max_iters must be >= 1 and tol >= 0")
    X, info = _preprocess(X, l2_normalize, standardize)

    if init is None:
        centers = kmeans_plusplus(X, k, np.random.default_rng(seed))
    else:
        centers = np.array(init, dtype=np.float64)
        if centers.shape != (k, X.shape[1]):
            raise ParameterError(f"init has shape {centers.shape}, expected {(k, X.shape[1])}")

    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels, dist = _assign(X, centers)
        labels, dist = _repair_empty(X, centers, labels, dist)
        history.append(float(dist.sum()))
        new = np.zeros_like(centers)
        np.add.at(new, labels, X)
        new /= np.bincount(labels, minlength=k)[:, None]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break

    labels, dist = _assign(X, centers)
    labels, dist = _repair_empty(X, centers, labels, dist)
    inertia = float(dist.sum())
    history.append(inertia)
    return ClusterModel(k=int(k), centroids=centers, assignments=labels.astype(np.int64),
                        inertia=inertia, seed=int(seed), inertia_history=tuple(history),
                        n_iter=n_iter, preprocessing=info)


def inertia_of(features, centroids, assignments):
    X = np.asarray(features, dtype=np.float64)
    return float(((X - centroids[assignments]) ** 2).sum())


class KMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeans_fit`."""

    def __init__(self, n_clusters=3, seed=0, max_iters=300, tol=1e-4,
                 l2_normalize=False, standardize=False):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iters = max_iters
        self.tol = tol
        self.l2_normalize = l2_normalize
        self.standardize = standardize

    def fit(self, X, y=None, init=None):
        self.model_ = kmeans_fit(X, self.n_clusters, seed=self.seed, max_iters=self.max_iters,
                                 tol=self.tol, init=init, l2_normalize=self.l2_normalize,
                                 standardize=self.standardize)
        self.cluster_centers_ = self.model_.centroids
        self.labels_ = self.model_.assignments
        self.inertia_ = self.model_.inertia
        self.n_iter_ = self.model_.n_iter
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        if self.l2_normalize:
            norms = np.linalg.norm(X, axis=1, keepdims=True)
            X = X / np.where(norms > 0, norms, 1.0)
        if self.standardize:
            std = self.model_.preprocessing["standardize"]
            X = (X - np.asarray(std["mean"])) / np.asarray(std["std"])
        return _assign(X, self.cluster_centers_)[0]


@dataclass(frozen=True)
class FrameClusterLabels:
    ssl: np.ndarray
    ive: np.ndarray
    k_ssl: int
    k_ive: int

    def __post_init__(self):
        if self.ssl.shape != self.ive.shape:
            raise ValidationError(f"ssl labels {self.ssl.shape} vs ive labels {self.ive.shape}")
        for name, arr, k in (("ssl", self.ssl, self.k_ssl), ("ive", self.ive, self.k_ive)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValidationError(f"{name} cluster id outside [0, {k})")

    def __len__(self):
        return self.ssl.shape[0]


def _ids_and_k(model):
    if isinstance(model, ClusterModel):
        return model.assignments, model.k
    ids = np.asarray(model, dtype=np.int64)
    return ids, int(ids.max()) + 1 if ids.size else 0


def propagate_labels(ssl_model, ive_model, manifest):
    """Give each frame its SSL cluster and its utterance's i-vector cluster.

    Either model may also be a plain array of cluster ids.
    """
    ssl, k_ssl = _ids_and_k(ssl_model)
    ive_utt, k_ive = _ids_and_k(ive_model)
    if ssl.shape[0] != manifest.n_frames:
        raise ValidationError(f"ssl assignments cover {ssl.shape[0]} frames, "
                              f"manifest covers {manifest.n_frames}")
    if ive_utt.shape[0] != len(manifest):
        raise ValidationError(f"ive assignments cover {ive_utt.shape[0]} utterances, "
                              f"manifest has {len(manifest)}")
    ive = ive_utt[manifest.utterance_index()]
    return FrameClusterLabels(ssl=ssl.copy(), ive=ive, k_ssl=k_ssl, k_ive=k_ive)


@dataclass
class CompositionTable:
    """Per-cluster reference-label counts. Purity is the majority fraction."""

    counts: dict  # cluster -> {label: count}
    reference: str = ""

    def sizes(self):
        return {c: sum(row.values()) for c, row in self.counts.items()}

    def purity(self):
        return {c: max(row.values()) / sum(row.values()) for c, row in self.counts.items()}

    def majority(self):
        # ties go to the lexicographically smallest label
        return {c: min(row, key=lambda lab: (-row[lab], lab)) for c, row in self.counts.items()}

    def to_dict(self):
        purity = self.purity()
        majority = self.majority()
        return {
            "reference": self.reference,
            "clusters": [
                {"cluster": c, "size": sum(row.values()), "majority": majority[c],
                 "purity": purity[c], "counts": dict(sorted(row.items()))}
                for c, row in sorted(self.counts.items())
            ],
        }

    @classmethod
    def from_dict(cls, obj):
        counts = {int(e["cluster"]): {str(k): int(v) for k, v in e["counts"].items()}
                  for e in obj["clusters"]}
        return cls(counts, obj.get("reference", ""))

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["cluster", "label", "count", "size", "purity"])
        purity = self.purity()
        for c, row in sorted(self.counts.items()):
            size = sum(row.values())
            for label, n in sorted(row.items()):
                writer.writerow([c, label, n, size, repr(purity[c])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, reference=""):
        counts = {}
        for rec in csv.DictReader(io.StringIO(text)):
            counts.setdefault(int(rec["cluster"]), {})[rec["label"]] = int(rec["count"])
        return cls(counts, reference)


def cluster_composition(cluster_ids, reference, reference_name=""):
    """Count reference labels within each cluster.

    ``cluster_ids`` and ``reference`` are aligned per item (frames or
    utterances). Missing reference labels (``None``) are an error.
    """
    if isinstance(cluster_ids, ClusterModel):
        cluster_ids = cluster_ids.assignments
    ids = np.asarray(cluster_ids)
    if reference is None:
        raise ReportError(f"reference label column {reference_name!r} missing")
    ref = list(reference)
    if len(ref) != ids.shape[0]:
        raise ReportError(f"{len(ref)} reference labels for {ids.shape[0]} items")
    if any(r is None for r in ref):
        raise ReportError(f"reference label column {reference_name!r} has missing entries")
    counts = {}
    for c, r in zip(ids.tolist(), ref):
        counts.setdefault(int(c), Counter())[str(r)] += 1
    return CompositionTable({c: dict(v) for c, v in counts.items()}, reference_name)
