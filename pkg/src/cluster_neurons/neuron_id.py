"""SSL-cluster and i-vector-cluster neurons from co-occurrence counts.

A neuron (hidden dim) belongs to a cluster's set when it is active in more
than ``rho_pct`` percent of that cluster's frames. Only dims that land in
exactly one cluster's set survive into the exclusive sets ``P_ssl`` and
``P_ive``; dims that fire for every cluster are speech-general, not
cluster-specific.

The i-vector sets come in four flavours, selected by ``mode``:

``intersect``
    condition on (i-vector cluster, SSL cluster) jointly, then intersect over
    SSL clusters (default).
``union``
    the same joint sets, united over SSL clusters.
``uncond``
    condition on the i-vector cluster alone.
``uncond_intersect``
    ``uncond`` further intersected with every SSL cluster's set.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .binarize import ActivationPattern, binarize_layer
from .clustering import FrameClusterLabels
from .exceptions import ParameterError, ValidationError
from .neuron_sets import NeuronSet
from .tensor_io import LayerActivations

MODES = ("intersect", "union", "uncond", "uncond_intersect")
MODE_FAMILY = {"intersect": "G_ive", "union": "A_ive", "uncond": "B_ive",
               "uncond_intersect": "C_ive"}


@dataclass(frozen=True)
class LayerCounts:
    """Exact co-occurrence counts for one layer.

    ``*_frames`` count frames per condition; ``*_active`` count, per
    condition and dim, the frames in which the dim is active. Joint arrays
    are indexed ``[g, c]``.
    """

    layer_index: int
    ssl_frames: np.ndarray    # (k_ssl,)
    ssl_active: np.ndarray    # (k_ssl, D)
    ive_frames: np.ndarray    # (k_ive,)
    ive_active: np.ndarray    # (k_ive, D)
    joint_frames: np.ndarray  # (k_ive, k_ssl)
    joint_active: np.ndarray  # (k_ive, k_ssl, D)

    @property
    def width(self):
        return self.ssl_active.shape[1]

    def unsupported(self):
        """(g, c) pairs with no frames."""
        return [tuple(int(x) for x in gc) for gc in np.argwhere(self.joint_frames == 0)]


@dataclass(frozen=True)
class CoOccurrenceTable:
    layers: list
    k_ssl: int
    k_ive: int

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


def _onehot(ids, k):
    out = np.zeros((ids.shape[0], k), dtype=np.int64)
    out[np.arange(ids.shape[0]), ids] = 1
    return out


def count_layer(bits, labels, layer_index=0):
    bits = np.asarray(bits)
    if bits.shape[0] != len(labels):
        raise ValidationError(f"layer {layer_index}: pattern has {bits.shape[0]} frames, "
                              f"labels have {len(labels)}")
    k_ive, k_ssl = labels.k_ive, labels.k_ssl
    joint = _onehot(labels.ive * k_ssl + labels.ssl, k_ive * k_ssl)
    # float64 BLAS is exact for integer counts below 2**53 and far faster than int matmul
    joint_active = np.rint(joint.T.astype(np.float64) @ bits.astype(np.float64)).astype(np.int64)
    joint_active = joint_active.reshape(k_ive, k_ssl, bits.shape[1])
    joint_frames = joint.sum(axis=0).reshape(k_ive, k_ssl)
    return LayerCounts(
        layer_index=layer_index,
        ssl_frames=joint_frames.sum(axis=0),
        ssl_active=joint_active.sum(axis=0),
        ive_frames=joint_frames.sum(axis=1),
        ive_active=joint_active.sum(axis=1),
        joint_frames=joint_frames,
        joint_active=joint_active,
    )


def count_cooccurrence(patterns, labels):
    """Count activations per condition for every layer.

    ``patterns`` is a list of :class:`ActivationPattern` or plain ``(T, D)``
    binary arrays; ``labels`` is a :class:`FrameClusterLabels`.
    """
    layers = []
    for i, pat in enumerate(patterns):
        bits = getattr(pat, "bits", pat)
        layers.append(count_layer(bits, labels, getattr(pat, "layer_index", i)))
    indices = [layer.layer_index for layer in layers]
    if len(set(indices)) != len(indices):
        raise ValidationError(f"duplicate layer indices {indices}")
    return CoOccurrenceTable(layers, labels.k_ssl, labels.k_ive)


def _check_rho(rho_pct):
    if not 0 < rho_pct < 100:
        raise ParameterError(f"rho_pct must be in (0, 100), got {rho_pct}")


def above(active, frames, rho_pct):
    """Boolean mask of ``active / frames > rho / 100``; empty conditions are False.

    Compared as ``100 * active > rho * frames`` so an exact tie stays excluded.
    """
    frames = np.asarray(frames)[..., None]
    return (100.0 * active > rho_pct * frames) & (frames > 0)


def exclusive(member):
    """Dims that belong to exactly one set. ``member`` is ``(n_sets, D)`` bool."""
    return np.flatnonzero(member.sum(axis=0) == 1)


def ssl_membership(layer, rho_pct):
    return above(layer.ssl_active, layer.ssl_frames, rho_pct)


def ive_membership(layer, rho_pct, mode="intersect", skip_empty_conditions=False):
    """``(k_ive, D)`` membership of the per-i-vector-cluster sets under ``mode``."""
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("intersect", "union"):
        joint = above(layer.joint_active, layer.joint_frames, rho_pct)
        empty = layer.joint_frames == 0
        if empty.any():
            if not skip_empty_conditions:
                raise ValidationError(
                    f"layer {layer.layer_index}: no frames for (g, c) in "
                    f"{layer.unsupported()}; pass skip_empty_conditions to ignore")
            # neutral element: full set for intersection, empty for union
            joint[empty] = mode == "intersect"
        return joint.all(axis=1) if mode == "intersect" else joint.any(axis=1)
    member = above(layer.ive_active, layer.ive_frames, rho_pct)
    if mode == "uncond_intersect":
        member = member & ssl_membership(layer, rho_pct).all(axis=0)[None, :]
    return member


def _common_width(table):
    widths = {layer.width for layer in table}
    return widths.pop() if len(widths) == 1 else None


def _provenance(rho_pct, k_ssl, k_ive, **extra):
    return {"rho_pct": rho_pct, "k_ssl": k_ssl, "k_ive": k_ive, **extra}


def identify_ssl_neurons(table, rho_pct=1.0, provenance=None):
    """Return ``(per_cluster_sets, p_ssl)``.

    ``per_cluster_sets`` is a list of ``k_ssl`` :class:`NeuronSet` (family
    ``G_ssl``); ``p_ssl`` holds the dims exclusive to one SSL cluster.
    """
    _check_rho(rho_pct)
    prov = provenance or _provenance(rho_pct, table.k_ssl, table.k_ive)
    members = {layer.layer_index: ssl_membership(layer, rho_pct) for layer in table}
    width = _common_width(table)
    per_cluster = [
        NeuronSet("G_ssl", {li: np.flatnonzero(m[c]) for li, m in members.items()},
                  width=width, cluster=c, provenance=prov)
        for c in range(table.k_ssl)
    ]
    p_ssl = NeuronSet("P_ssl", {li: exclusive(m) for li, m in members.items()},
                      width=width, provenance=prov)
    return per_cluster, p_ssl


def identify_ivector_neurons(table, rho_pct=1.0, mode="intersect",
                             skip_empty_conditions=False, provenance=None):
    """Return ``(per_cluster_sets, p_ive)`` for the chosen ``mode``."""
    _check_rho(rho_pct)
    prov = provenance or _provenance(rho_pct, table.k_ssl, table.k_ive, mode=mode)
    members = {layer.layer_index: ive_membership(layer, rho_pct, mode, skip_empty_conditions)
               for layer in table}
    width = _common_width(table)
    family = MODE_FAMILY[mode]
    per_cluster = [
        NeuronSet(family, {li: np.flatnonzero(m[g]) for li, m in members.items()},
                  width=width, cluster=g, provenance=prov)
        for g in range(table.k_ive)
    ]
    p_ive = NeuronSet("P_ive", {li: exclusive(m) for li, m in members.items()},
                      width=width, provenance=prov)
    return per_cluster, p_ive


def joint_ivector_sets(table, rho_pct=1.0, provenance=None):
    """The per-(g, c) sets before any intersection or union."""
    _check_rho(rho_pct)
    width = _common_width(table)
    out = []
    for g in range(table.k_ive):
        for c in range(table.k_ssl):
            layers = {layer.layer_index: np.flatnonzero(
                above(layer.joint_active[g, c], layer.joint_frames[g, c], rho_pct))
                for layer in table}
            out.append(NeuronSet("G_ive_joint", layers, width=width, cluster=(g, c),
                                 provenance=provenance or {}))
    return out


def build_protected_set(p_ssl, p_ive):
    """Per-layer union of the two exclusive sets."""
    if p_ssl.layers.keys() != p_ive.layers.keys():
        raise ValidationError(f"layer mismatch: {sorted(p_ssl.layers)} vs {sorted(p_ive.layers)}")
    if p_ssl.width is not None and p_ive.width is not None and p_ssl.width != p_ive.width:
        raise ValidationError(f"width mismatch: {p_ssl.width} vs {p_ive.width}")
    layers = {li: np.union1d(p_ssl[li], p_ive[li]) for li in p_ssl.layers}
    prov = {"sources": ["P_ssl", "P_ive"], **p_ive.provenance}
    return NeuronSet("protected", layers, width=p_ssl.width or p_ive.width, provenance=prov)


@dataclass
class CountReport:
    rows: list  # (layer, family, count)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "family", "count"])
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_dict(self):
        return {"rows": [{"layer": l, "family": f, "count": n} for l, f, n in self.rows]}

    @classmethod
    def from_csv(cls, text):
        return cls([(int(r["layer"]), r["family"], int(r["count"]))
                    for r in csv.DictReader(io.StringIO(text))])


def _family_label(s):
    if s.cluster is None:
        return s.family
    if isinstance(s.cluster, tuple):
        return f"{s.family}[{','.join(map(str, s.cluster))}]"
    return f"{s.family}[{s.cluster}]"


def neuron_count_report(sets, layers=None):
    """Per-layer counts for each set; layers missing from a set count as zero."""
    if layers is None:
        layers = sorted({li for s in sets for li in s.layers})
    rows = []
    for s in sets:
        for li in layers:
            rows.append((li, _family_label(s), int(s.layers[li].size) if li in s.layers else 0))
    return CountReport(rows)


class ClusterNeuronIdentifier(BaseEstimator):
    """Binarize, count and identify in one estimator.

    ``fit(layers, labels)`` takes a list of ``(T, D)`` activation matrices
    (or an :class:`ActivationStore`) and a :class:`FrameClusterLabels`.
    Fitted attributes: ``table_``, ``ssl_sets_``, ``p_ssl_``, ``ive_sets_``,
    ``p_ive_``, ``protected_``.
    """

    def __init__(self, lambda_pct=1.0, rho_pct=1.0, mode="intersect",
                 skip_empty_conditions=False, binarize=True):
        self.lambda_pct = lambda_pct
        self.rho_pct = rho_pct
        self.mode = mode
        self.skip_empty_conditions = skip_empty_conditions
        self.binarize = binarize

    def fit(self, layers, labels):
        if not isinstance(labels, FrameClusterLabels):
            raise ValidationError("labels must be FrameClusterLabels")
        layers = [layer if hasattr(layer, "layer_index") else LayerActivations(i, np.asarray(layer))
                  for i, layer in enumerate(getattr(layers, "layers", layers))]
        if self.binarize:
            patterns = [binarize_layer(layer, self.lambda_pct) for layer in layers]
        else:
            patterns = [ActivationPattern(layer.layer_index, layer.data, self.lambda_pct)
                        for layer in layers]
        self.table_ = count_cooccurrence(patterns, labels)
        prov = _provenance(self.rho_pct, labels.k_ssl, labels.k_ive, mode=self.mode,
                           lambda_pct=self.lambda_pct)
        self.ssl_sets_, self.p_ssl_ = identify_ssl_neurons(self.table_, self.rho_pct, prov)
        self.ive_sets_, self.p_ive_ = identify_ivector_neurons(
            self.table_, self.rho_pct, self.mode, self.skip_empty_conditions, prov)
        self.protected_ = build_protected_set(self.p_ssl_, self.p_ive_)
        return self

    def neuron_sets(self):
        check_is_fitted(self, "protected_")
        return [*self.ssl_sets_, self.p_ssl_, *self.ive_sets_, self.p_ive_, self.protected_]

    def count_report(self):
        return neuron_count_report(self.neuron_sets())
