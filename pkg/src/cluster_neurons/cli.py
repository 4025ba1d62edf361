"""Command-line entry point: ``cluster-neurons <subcommand> [options]``.

Settings resolve in order: built-in defaults, then the TOML config
(``--config`` or ``$CLUSTER_NEURONS_CONFIG``), then command-line flags.
Every JSON artifact embeds the resolved config under ``"config"``.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from ._atomic import write_json, write_text
from .binarize import binarize_layer, n_active
from .clustering import ClusterModel, cluster_composition, kmeans_fit, propagate_labels
from .exceptions import ClusterNeuronsError, InputNotFoundError, ParameterError, ValidationError
from .neuron_id import (MODES, build_protected_set, count_cooccurrence, identify_ivector_neurons,
                        identify_ssl_neurons, joint_ivector_sets, neuron_count_report)
from .neuron_sets import find_set, load_neuron_sets, save_neuron_sets
from .pruning import (apply_mask, iterative_schedule, load_ffn_weights, one_shot_baseline_mask,
                      one_shot_protected_mask, save_ffn_weights)
from .synth import SynthSpec, generate, save_dataset
from .tensor_io import (PATTERN_DTYPE, load_activations, load_layer_matrices, load_manifest,
                        read_npy, save_layer_matrices)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CONFIG_ENV = "CLUSTER_NEURONS_CONFIG"

EXIT_CODES = """exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, bad argument)
  3  input not found
  4  invalid input (format, manifest, data, validation or report error)
  5  parameter out of range
  6  budget conflict (protected set larger than the pruning target)
"""


@dataclass
class RunConfig:
    lambda_pct: float = 1.0
    rho_pct: float = 1.0
    k_ssl: int = 3
    k_ive: int = 2
    mode: str = "intersect"
    step_dims: int = 128
    final_dims: int = 512
    step_interval: int = 25_000
    seed: int = 0
    max_iters: int = 300
    tol: float = 1e-4
    l2_normalize_embeddings: bool = False
    skip_empty_conditions: bool = False
    report_labels: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def validate(self):
        if not 0 < self.lambda_pct <= 100:
            raise ParameterError(f"lambda_pct must be in (0, 100], got {self.lambda_pct}")
        if not 0 < self.rho_pct < 100:
            raise ParameterError(f"rho_pct must be in (0, 100), got {self.rho_pct}")
        if self.k_ssl < 1 or self.k_ive < 1:
            raise ParameterError("k_ssl and k_ive must be >= 1")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.step_dims < 1 or self.final_dims < 1 or self.step_interval < 1:
            raise ParameterError("step_dims, final_dims and step_interval must be >= 1")
        return self

    def echo(self):
        return asdict(self)


def load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise InputNotFoundError(f"config not found: {path}")
    with open(path, "rb") as fh:
        try:
            obj = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: invalid TOML ({exc})") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    # relative paths in a config file are relative to that file
    paths = {k: str((path.parent / v)) if not Path(v).is_absolute() else v
             for k, v in obj.get("paths", {}).items()}
    obj["paths"] = paths
    return obj


_FLAG_FIELDS = ("lambda_pct", "rho_pct", "k_ssl", "k_ive", "mode", "step_dims", "final_dims",
                "step_interval", "seed", "max_iters", "tol")


def resolve_config(args):
    cfg_path = args.config or os.environ.get(CONFIG_ENV)
    obj = load_config(cfg_path)
    cfg = RunConfig(**obj)
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "skip_empty_conditions", False):
        cfg.skip_empty_conditions = True
    if getattr(args, "l2_normalize", False):
        cfg.l2_normalize_embeddings = True
    if getattr(args, "label", None):
        cfg.report_labels = list(args.label)
    return cfg.validate()


def _path(args, cfg, name, required=True):
    value = getattr(args, name, None) or cfg.paths.get(name)
    if value is None:
        if required:
            raise InputNotFoundError(f"no {name} path given (flag --{name.replace('_', '-')} "
                                     f"or [paths].{name} in the config)")
        return None
    value = Path(value)
    if not value.exists():
        raise InputNotFoundError(f"{name} not found: {value}")
    return value


def _out(args):
    if not args.out:
        raise ParameterError("--out is required")
    return Path(args.out)


# --- stages -----------------------------------------------------------------

def stage_synth(spec, out):
    ds = generate(spec)
    save_dataset(ds, out)
    return ds


def stage_binarize(store, cfg, out):
    patterns = [binarize_layer(layer, cfg.lambda_pct) for layer in store]
    save_layer_matrices([p.bits for p in patterns], out, store.layer_indices, dtype=PATTERN_DTYPE)
    write_json(out / "patterns.json", {
        "version": 1, "lambda_pct": cfg.lambda_pct,
        "k_active": {str(p.layer_index): n_active(p.bits.shape[1], cfg.lambda_pct)
                     for p in patterns},
        "config": cfg.echo()})
    return patterns


def stage_kmeans(features, k, cfg, out, l2_normalize=False):
    model = kmeans_fit(features, k, seed=cfg.seed, max_iters=cfg.max_iters, tol=cfg.tol,
                       l2_normalize=l2_normalize)
    write_json(out, {**model.to_dict(), "config": cfg.echo()})
    return model


def load_cluster_model(path):
    if not Path(path).exists():
        raise InputNotFoundError(f"cluster file not found: {path}")
    return ClusterModel.from_dict(json.loads(Path(path).read_text()))


def stage_identify(patterns, labels, cfg, out):
    table = count_cooccurrence(patterns, labels)
    prov = {"lambda_pct": cfg.lambda_pct, "rho_pct": cfg.rho_pct, "k_ssl": cfg.k_ssl,
            "k_ive": cfg.k_ive, "mode": cfg.mode, "seed": cfg.seed}
    g_ssl, p_ssl = identify_ssl_neurons(table, cfg.rho_pct, prov)
    g_ive, p_ive = identify_ivector_neurons(table, cfg.rho_pct, cfg.mode,
                                            cfg.skip_empty_conditions, prov)
    protected = build_protected_set(p_ssl, p_ive)
    sets = [*g_ssl, p_ssl, *joint_ivector_sets(table, cfg.rho_pct, prov), *g_ive, p_ive,
            protected]
    save_neuron_sets(sets, out, extra={"config": cfg.echo()})
    return sets


def stage_prune(weights, sets, cfg, out, method="all", emit_weights=False):
    protected = find_set(sets, "protected")
    written = {}
    if method in ("one_shot", "all"):
        pm = one_shot_protected_mask(protected, weights)
        write_json(out / "mask_protected.json", {**pm.to_dict(), "config": cfg.echo()})
        bm = one_shot_baseline_mask(weights, pm.target_avg_dims)
        write_json(out / "mask_baseline.json", {**bm.to_dict(), "config": cfg.echo()})
        written.update(protected=pm, baseline=bm)
        if emit_weights:
            save_ffn_weights(apply_mask(weights, pm), out / "weights_protected",
                             extra={"method_tag": pm.method_tag})
            save_ffn_weights(apply_mask(weights, bm), out / "weights_baseline",
                             extra={"method_tag": bm.method_tag})
    if method in ("iterative", "all"):
        schedule = iterative_schedule(weights, protected, cfg.step_dims, cfg.final_dims,
                                      cfg.step_interval)
        write_json(out / "schedule.json", {**schedule.to_dict(), "config": cfg.echo()})
        written["schedule"] = schedule
    return written


def stage_report(sets, cfg, out, manifest=None, ssl_model=None, ive_model=None):
    report = neuron_count_report(sets)
    write_text(out / "neuron_counts.csv", report.to_csv())
    write_json(out / "neuron_counts.json", {**report.to_dict(), "config": cfg.echo()})
    tables = {}
    if manifest is not None:
        names = cfg.report_labels or sorted(manifest.records[0].labels)
        for name in names:
            per_frame = isinstance(manifest.records[0].labels.get(name), list)
            if per_frame and ssl_model is not None:
                ids, ref = ssl_model.assignments, manifest.label_column(name, "frame")
            elif not per_frame and ive_model is not None:
                ids, ref = ive_model.assignments, manifest.label_column(name, "utterance")
            else:
                continue
            table = cluster_composition(ids, ref, name)
            write_text(out / f"composition_{name}.csv", table.to_csv())
            write_json(out / f"composition_{name}.json", {**table.to_dict(), "config": cfg.echo()})
            tables[name] = table
    return report, tables


# --- subcommand handlers ------------------------------------------------------

def cmd_synth(args, cfg):
    spec = SynthSpec.from_toml(args.spec) if args.spec else SynthSpec.from_dict(
        {**cfg.synth, **({"seed": cfg.seed} if "seed" not in cfg.synth else {})})
    stage_synth(spec, _out(args))


def cmd_binarize(args, cfg):
    store = load_activations(_path(args, cfg, "activations"), _path(args, cfg, "manifest"))
    stage_binarize(store, cfg, _out(args))


def cmd_kmeans(args, cfg):
    out = _out(args)
    if args.features:
        features = read_npy(_path(args, cfg, "features"), what="features").astype(np.float64)
        k = args.k or cfg.k_ssl
        stage_kmeans(features, k, cfg, out)
    else:
        manifest = load_manifest(_path(args, cfg, "manifest"))
        k = args.k or cfg.k_ive
        stage_kmeans(manifest.load_embeddings(), k, cfg, out,
                     l2_normalize=cfg.l2_normalize_embeddings)


def _patterns(args, cfg):
    if getattr(args, "patterns", None):
        pdir = _path(args, cfg, "patterns")
        return [bits for _, bits in load_layer_matrices(pdir, dtype=PATTERN_DTYPE)], None
    store = load_activations(_path(args, cfg, "activations"), _path(args, cfg, "manifest"))
    return [binarize_layer(layer, cfg.lambda_pct) for layer in store], store.manifest


def cmd_identify(args, cfg):
    ssl_model = load_cluster_model(_path(args, cfg, "ssl_clusters"))
    ive_model = load_cluster_model(_path(args, cfg, "ive_clusters"))
    patterns, manifest = _patterns(args, cfg)
    if manifest is None:
        manifest = load_manifest(_path(args, cfg, "manifest"))
    labels = propagate_labels(ssl_model, ive_model, manifest)
    stage_identify(patterns, labels, cfg, _out(args))


def cmd_prune(args, cfg):
    weights = load_ffn_weights(_path(args, cfg, "weights"))
    sets = load_neuron_sets(_path(args, cfg, "neuron_sets"))
    stage_prune(weights, sets, cfg, _out(args), args.method, args.emit_weights)


def cmd_report(args, cfg):
    sets = load_neuron_sets(_path(args, cfg, "neuron_sets"))
    manifest_path = _path(args, cfg, "manifest", required=False)
    manifest = load_manifest(manifest_path) if manifest_path else None
    ssl_path = _path(args, cfg, "ssl_clusters", required=False)
    ive_path = _path(args, cfg, "ive_clusters", required=False)
    stage_report(sets, cfg, _out(args), manifest,
                 load_cluster_model(ssl_path) if ssl_path else None,
                 load_cluster_model(ive_path) if ive_path else None)


def cmd_pipeline(args, cfg):
    out = _out(args)
    if cfg.paths.get("activations") or args.activations:
        act_path = _path(args, cfg, "activations")
        manifest_path = _path(args, cfg, "manifest")
        features_path = _path(args, cfg, "features")
        weights_path = _path(args, cfg, "weights")
    elif cfg.synth:
        spec = SynthSpec.from_dict({"seed": cfg.seed, **cfg.synth})
        data = out / "data"
        stage_synth(spec, data)
        act_path, manifest_path = data / "activations", data / "manifest.jsonl"
        features_path, weights_path = data / "ssl_features.npy", data / "weights"
    else:
        raise InputNotFoundError("pipeline needs [paths].activations or a [synth] table")

    store = load_activations(act_path, manifest_path)
    features = read_npy(features_path, what="features").astype(np.float64)
    weights = load_ffn_weights(weights_path)

    patterns = stage_binarize(store, cfg, out / "patterns")
    ssl_model = stage_kmeans(features, cfg.k_ssl, cfg, out / "ssl_clusters.json")
    ive_model = stage_kmeans(store.manifest.load_embeddings(), cfg.k_ive, cfg,
                             out / "ive_clusters.json", l2_normalize=cfg.l2_normalize_embeddings)
    labels = propagate_labels(ssl_model, ive_model, store.manifest)
    sets = stage_identify(patterns, labels, cfg, out / "neuron_sets.json")
    stage_prune(weights, sets, cfg, out / "prune", "all", args.emit_weights)
    stage_report(sets, cfg, out / "report", store.manifest, ssl_model, ive_model)


# --- argument parsing ---------------------------------------------------------

def _common(p):
    p.add_argument("--config", help=f"TOML run config (default: ${CONFIG_ENV})")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("--seed", type=int)


def _hyper(p):
    p.add_argument("--lambda-pct", dest="lambda_pct", type=float,
                   help="percent of dims marked active per frame (default 1)")
    p.add_argument("--rho-pct", dest="rho_pct", type=float,
                   help="co-occurrence threshold in percent (default 1)")
    p.add_argument("--k-ssl", dest="k_ssl", type=int)
    p.add_argument("--k-ive", dest="k_ive", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--skip-empty-conditions", action="store_true")


def _prune_flags(p):
    p.add_argument("--step-dims", dest="step_dims", type=int)
    p.add_argument("--final-dims", dest="final_dims", type=int)
    p.add_argument("--step-interval", dest="step_interval", type=int)
    p.add_argument("--emit-weights", action="store_true",
                   help="also write compacted weights with a kept-index sidecar")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cluster-neurons",
        description="Identify SSL/i-vector cluster neurons in FFN layers and build "
                    "protected pruning masks.",
        epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted neurons")
    _common(p)
    p.add_argument("--spec", help="SynthSpec TOML (a [synth] table or top-level keys)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("binarize", help="top-lambda%% activation patterns")
    _common(p)
    _hyper(p)
    p.add_argument("--activations")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("kmeans", help="k-means over frame features or utterance embeddings")
    _common(p)
    p.add_argument("--features", help="(N, F) float32 NPY; omit to cluster manifest embeddings")
    p.add_argument("--manifest")
    p.add_argument("--k", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--l2-normalize", action="store_true")
    p.set_defaults(func=cmd_kmeans)

    p = sub.add_parser("identify", help="SSL and i-vector cluster neurons")
    _common(p)
    _hyper(p)
    p.add_argument("--activations")
    p.add_argument("--patterns", help="pre-binarized pattern directory")
    p.add_argument("--manifest")
    p.add_argument("--ssl-clusters", dest="ssl_clusters")
    p.add_argument("--ive-clusters", dest="ive_clusters")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("prune", help="one-shot masks and iterative schedule")
    _common(p)
    _prune_flags(p)
    p.add_argument("--weights")
    p.add_argument("--neuron-sets", dest="neuron_sets")
    p.add_argument("--method", choices=("one_shot", "iterative", "all"), default="all")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="per-layer neuron counts and cluster composition")
    _common(p)
    p.add_argument("--neuron-sets", dest="neuron_sets")
    p.add_argument("--manifest")
    p.add_argument("--ssl-clusters", dest="ssl_clusters")
    p.add_argument("--ive-clusters", dest="ive_clusters")
    p.add_argument("--label", action="append", help="manifest label to report purity against")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="synth (optional), binarize, kmeans, identify, prune, report")
    _common(p)
    _hyper(p)
    _prune_flags(p)
    p.add_argument("--activations")
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--weights")
    p.add_argument("--label", action="append")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _report_error(exc, code):
    kind = getattr(exc, "kind", type(exc).__name__)
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.threads is not None:
            if args.threads < 1:
                raise ParameterError("--threads must be >= 1")
            with threadpool_limits(limits=args.threads):
                args.func(args, cfg)
        else:
            args.func(args, cfg)
    except ClusterNeuronsError as exc:
        _report_error(exc, exc.exit_code)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        _report_error(exc, 1)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
