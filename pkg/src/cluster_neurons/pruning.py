"""L1-magnitude structured pruning of FFN hidden dims, with protected neurons.

Removing hidden dim ``d`` deletes row ``d`` of the first linear layer, entry
``d`` of its bias and column ``d`` of the second linear layer.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._atomic import write_json, write_npy
from .exceptions import (BudgetConflictError, FormatError, InputNotFoundError,
                         ParameterError, ValidationError)
from .neuron_sets import NeuronSet
from .tensor_io import read_npy

DEFAULT_STEP_INTERVAL = 25_000


@dataclass(frozen=True)
class FfnLayer:
    w1: np.ndarray  # (D, d_model)
    b1: np.ndarray  # (D,)
    w2: np.ndarray  # (d_model, D)

    def __post_init__(self):
        d = self.w1.shape[0]
        if self.w1.ndim != 2 or self.w2.ndim != 2 or self.b1.shape != (d,) or self.w2.shape[1] != d:
            raise ValidationError(f"inconsistent FFN shapes: W1 {self.w1.shape}, "
                                  f"b1 {self.b1.shape}, W2 {self.w2.shape}")
        for name in ("w1", "b1", "w2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite values in {name}")

    @property
    def width(self):
        return self.w1.shape[0]


@dataclass
class FfnWeights:
    """FFN parameters per layer, keyed by layer index.

    ``origin`` maps each layer's current hidden dims back to the original
    indices once the weights have been compacted.
    """

    layers: dict
    origin: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = dict(sorted(self.layers.items()))
        for li, layer in self.layers.items():
            self.origin.setdefault(li, np.arange(layer.width))

    def __getitem__(self, layer):
        return self.layers[layer]

    def __len__(self):
        return len(self.layers)

    def widths(self):
        return {li: layer.width for li, layer in self.layers.items()}


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def ffn_forward(layer, x, activation=gelu, hidden_mask=None):
    """``W2 @ act(W1 @ x + b1)`` for row-stacked inputs ``x`` of shape ``(n, d_model)``.

    ``hidden_mask`` zeroes hidden units after the nonlinearity.
    """
    h = activation(x @ layer.w1.T + layer.b1)
    if hidden_mask is not None:
        h = h * hidden_mask
    return h @ layer.w2.T


def l1_scores(weights):
    """Per-layer score ``|W1[d, :]|_1 + |W2[:, d]|_1 + |b1[d]|``."""
    return {li: (np.abs(layer.w1).sum(axis=1) + np.abs(layer.w2).sum(axis=0)
                 + np.abs(layer.b1))
            for li, layer in weights.layers.items()}


def top_by_score(scores, n, exclude=None):
    """Indices of the ``n`` highest scores; ties prefer the lower index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    if exclude is not None and len(exclude):
        order = order[~np.isin(order, exclude)]
    return np.sort(order[:n])


def bottom_by_score(scores, candidates, n):
    """The ``n`` lowest-scoring ``candidates``; ties prefer the lower index."""
    candidates = np.asarray(candidates)
    order = np.lexsort((candidates, scores[candidates]))
    return np.sort(candidates[order[:n]])


def _round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass
class PruneMask:
    kept: dict  # layer -> sorted kept indices
    target_avg_dims: float
    method_tag: str
    widths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kept = {int(li): np.asarray(sorted(set(np.asarray(v).tolist())), dtype=np.int64)
                     for li, v in sorted(self.kept.items())}
        for li, kept in self.kept.items():
            width = self.widths.get(li)
            if kept.size and (kept[0] < 0 or (width is not None and kept[-1] >= width)):
                raise ValidationError(f"layer {li}: kept index outside [0, {width})")

    def __eq__(self, other):
        if not isinstance(other, PruneMask):
            return NotImplemented
        return (self.method_tag == other.method_tag
                and self.target_avg_dims == other.target_avg_dims
                and self.kept.keys() == other.kept.keys()
                and all(np.array_equal(self.kept[k], other.kept[k]) for k in self.kept))

    @property
    def total_kept(self):
        return int(sum(v.size for v in self.kept.values()))

    @property
    def avg_kept(self):
        return self.total_kept / len(self.kept)

    def pruned(self, layer):
        return np.setdiff1d(np.arange(self.widths[layer]), self.kept[layer])

    def hidden_mask(self, layer):
        m = np.zeros(self.widths[layer])
        m[self.kept[layer]] = 1.0
        return m

    def to_dict(self):
        return {
            "version": 1,
            "target_avg_dims": self.target_avg_dims,
            "method_tag": self.method_tag,
            "layers": [{"layer": li, "width": self.widths.get(li), "indices": v.tolist()}
                       for li, v in self.kept.items()],
        }

    @classmethod
    def from_dict(cls, obj):
        try:
            kept = {int(e["layer"]): e["indices"] for e in obj["layers"]}
            widths = {int(e["layer"]): int(e["width"]) for e in obj["layers"]
                      if e.get("width") is not None}
            return cls(kept, float(obj["target_avg_dims"]), obj["method_tag"], widths)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed mask: {exc}") from exc


def _protected_layers(protected):
    return protected.layers if isinstance(protected, NeuronSet) else {
        int(k): np.asarray(v) for k, v in protected.items()}


def one_shot_protected_mask(protected, weights=None, width=None):
    """Keep exactly the protected dims of each layer.

    A layer with nothing protected keeps ``max(1, round(0.1 * avg))`` of its
    top-L1 dims instead (``avg`` over the non-empty layers), which needs
    ``weights``; a warning is emitted.
    """
    layers = _protected_layers(protected)
    width = width or getattr(protected, "width", None)
    widths = weights.widths() if weights is not None else {li: width for li in layers}
    kept = {li: np.asarray(v, dtype=np.int64) for li, v in layers.items()}
    empty = [li for li, v in kept.items() if v.size == 0]
    if empty:
        filled = [v.size for v in kept.values() if v.size]
        base = sum(filled) / len(filled) if filled else (width or 1)
        n_keep = max(1, _round_half_up(0.1 * base))
        if weights is None:
            raise ValidationError(f"layers {empty} have no protected dims; "
                                  "weights are needed for the fallback")
        scores = l1_scores(weights)
        for li in empty:
            kept[li] = top_by_score(scores[li], n_keep)
        warnings.warn(f"layers {empty} have no protected dims; keeping their top "
                      f"{n_keep} dims by L1 score", stacklevel=2)
    total = sum(v.size for v in kept.values())
    return PruneMask(kept, total / len(kept), "one_shot_protected", widths)


def one_shot_baseline_mask(weights, target_avg_dims):
    """Keep the ``round(target_avg_dims)`` highest-L1 dims in every layer."""
    widths = weights.widths()
    if not 1 <= target_avg_dims <= min(widths.values()):
        raise ParameterError(f"target_avg_dims={target_avg_dims} outside "
                             f"[1, {min(widths.values())}]")
    n_keep = _round_half_up(target_avg_dims)
    scores = l1_scores(weights)
    kept = {li: top_by_score(scores[li], n_keep) for li in weights.layers}
    return PruneMask(kept, float(target_avg_dims), "one_shot_l1", widths)


@dataclass
class ScheduleStep:
    step: int
    apply_at_training_step: int
    mask: PruneMask


@dataclass
class MaskSchedule:
    steps: list
    step_dims: int
    final_dims: int

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def final(self):
        return self.steps[-1].mask

    def to_dict(self):
        return {
            "version": 1,
            "step_dims": self.step_dims,
            "final_dims": self.final_dims,
            "steps": [{"step": s.step, "apply_at_training_step": s.apply_at_training_step,
                       **{k: v for k, v in s.mask.to_dict().items() if k != "version"}}
                      for s in self.steps],
        }

    @classmethod
    def from_dict(cls, obj):
        steps = [ScheduleStep(int(s["step"]), int(s["apply_at_training_step"]),
                              PruneMask.from_dict(s)) for s in obj["steps"]]
        return cls(steps, int(obj["step_dims"]), int(obj["final_dims"]))


def iterative_schedule(weights, protected=None, step_dims=128, final_dims=512,
                       step_interval=DEFAULT_STEP_INTERVAL, refresh=None):
    """Masks that remove ``step_dims`` low-L1 dims per layer per step.

    Pruning stops once ``final_dims`` remain in every layer; the last step
    removes whatever is left over. Protected dims are never removed.

    ``refresh(step, mask)`` is the hook for a trainer that keeps training
    between steps: it receives the mask about to be applied and returns
    updated (uncompacted) weights, whose scores drive the next step. Without
    it, scores are computed once from ``weights``.
    """
    if step_dims < 1:
        raise ParameterError(f"step_dims must be >= 1, got {step_dims}")
    widths = weights.widths()
    if final_dims < 1 or any(final_dims >= w for w in widths.values()):
        raise ParameterError(f"final_dims={final_dims} must be in [1, width) for every layer")
    prot = _protected_layers(protected) if protected is not None else {}
    for li, idx in prot.items():
        if li in widths and len(idx) > final_dims:
            raise BudgetConflictError(f"layer {li}: {len(idx)} protected dims exceed "
                                      f"final_dims={final_dims}")
    kept = {li: np.arange(w) for li, w in widths.items()}
    scores = l1_scores(weights)
    steps = []
    step = 0
    while any(k.size > final_dims for k in kept.values()):
        step += 1
        new_kept = {}
        for li, k in kept.items():
            n_remove = min(step_dims, k.size - final_dims)
            candidates = np.setdiff1d(k, prot.get(li, ()))
            drop = bottom_by_score(scores[li], candidates, n_remove)
            new_kept[li] = np.setdiff1d(k, drop)
        kept = new_kept
        mask = PruneMask(kept, float(final_dims), "iterative_protected" if prot
                         else "iterative_l1", widths)
        steps.append(ScheduleStep(step, step * step_interval, mask))
        if refresh is not None:
            updated = refresh(step, mask)
            if updated is not None:
                scores = l1_scores(updated)
    return MaskSchedule(steps, int(step_dims), int(final_dims))


def apply_mask(weights, mask):
    """Compact each layer to its kept dims (in ascending original order)."""
    layers = {}
    origin = {}
    for li, layer in weights.layers.items():
        kept = mask.kept[li]
        if kept.size and (kept[0] < 0 or kept[-1] >= layer.width):
            raise ValidationError(f"layer {li}: mask index outside [0, {layer.width})")
        layers[li] = FfnLayer(layer.w1[kept], layer.b1[kept], layer.w2[:, kept])
        origin[li] = weights.origin[li][kept]
    return FfnWeights(layers, origin)


class MagnitudePruner(TransformerMixin, BaseEstimator):
    """One-shot pruning as an estimator.

    ``fit(weights, protected=None)`` builds ``mask_``: the protected mask when
    a protected set is given, otherwise the L1 baseline at
    ``target_avg_dims``. ``transform(weights)`` compacts.
    """

    def __init__(self, target_avg_dims=None):
        self.target_avg_dims = target_avg_dims

    def fit(self, weights, protected=None):
        if protected is not None:
            self.mask_ = one_shot_protected_mask(protected, weights)
        elif self.target_avg_dims is None:
            raise ParameterError("target_avg_dims is required without a protected set")
        else:
            self.mask_ = one_shot_baseline_mask(weights, self.target_avg_dims)
        return self

    def transform(self, weights):
        check_is_fitted(self, "mask_")
        return apply_mask(weights, self.mask_)


def save_ffn_weights(weights, path, extra=None):
    """Write ``layer_NNN_{w1,b1,w2}.npy`` plus ``kept_indices.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for li, layer in weights.layers.items():
        for name in ("w1", "b1", "w2"):
            write_npy(path / f"layer_{li:03d}_{name}.npy",
                      np.asarray(getattr(layer, name), dtype="<f4"))
    sidecar = {"version": 1,
               "layers": [{"layer": li, "kept_original_indices": o.tolist()}
                          for li, o in weights.origin.items()]}
    if extra:
        sidecar.update(extra)
    write_json(path / "kept_indices.json", sidecar)


def load_ffn_weights(path):
    path = Path(path)
    if not path.is_dir():
        raise InputNotFoundError(f"weights directory not found: {path}")
    indices = sorted({int(p.name[6:9]) for p in path.glob("layer_???_w1.npy")})
    if not indices:
        raise FormatError(f"{path}: no layer_NNN_w1.npy files")
    layers = {}
    for li in indices:
        parts = {name: read_npy(path / f"layer_{li:03d}_{name}.npy",
                                ndim=1 if name == "b1" else 2,
                                what=f"layer {li} {name}").astype(np.float64)
                 for name in ("w1", "b1", "w2")}
        layers[li] = FfnLayer(**parts)
    origin = {}
    sidecar = path / "kept_indices.json"
    if sidecar.exists():
        obj = json.loads(sidecar.read_text())
        origin = {int(e["layer"]): np.asarray(e["kept_original_indices"])
                  for e in obj["layers"]}
    return FfnWeights(layers, origin)
