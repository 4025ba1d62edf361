import json

import numpy as np
import pytest

from cluster_neurons.cli import main
from cluster_neurons.neuron_sets import find_set, load_neuron_sets
from cluster_neurons.tensor_io import load_layer_matrices

SYNTH = """
seed = 3
lambda_pct = 2.0
step_dims = 32
final_dims = 64

[synth]
n_layers = 2
n_frames = 2000
width = 128
planted_per_cluster = 4
"""


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(SYNTH)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_writes_dataset(data):
    d = data / "data"
    for name in ("activations", "manifest.jsonl", "ssl_features.npy", "weights",
                 "ground_truth.json", "embeddings"):
        assert (d / name).exists()


def test_stages_end_to_end(data, tmp_path):
    d = data / "data"
    cfg = data / "run.toml"
    assert run("binarize", "--config", cfg, "--activations", d / "activations",
               "--manifest", d / "manifest.jsonl", "--out", tmp_path / "pat") == 0
    bits = load_layer_matrices(tmp_path / "pat", dtype="u1")
    assert all(b.sum(axis=1).tolist() == [3] * 2000 for _, b in bits)  # ceil(2% of 128)
    meta = json.loads((tmp_path / "pat" / "patterns.json").read_text())
    assert meta["config"]["lambda_pct"] == 2.0

    assert run("kmeans", "--config", cfg, "--features", d / "ssl_features.npy",
               "--out", tmp_path / "ssl.json") == 0
    assert run("kmeans", "--config", cfg, "--manifest", d / "manifest.jsonl",
               "--out", tmp_path / "ive.json") == 0
    ssl = json.loads((tmp_path / "ssl.json").read_text())
    assert ssl["k"] == 3 and ssl["config"]["seed"] == 3

    common = ["--config", cfg, "--manifest", d / "manifest.jsonl",
              "--ssl-clusters", tmp_path / "ssl.json", "--ive-clusters", tmp_path / "ive.json"]
    assert run("identify", *common, "--patterns", tmp_path / "pat",
               "--out", tmp_path / "sets.json") == 0
    assert run("identify", *common, "--activations", d / "activations", "--mode", "union",
               "--out", tmp_path / "sets_union.json") == 0
    sets = load_neuron_sets(tmp_path / "sets.json")
    assert find_set(sets, "G_ive", 0) is not None
    union = load_neuron_sets(tmp_path / "sets_union.json")
    assert find_set(union, "A_ive", 0) is not None
    assert json.loads((tmp_path / "sets_union.json").read_text())["config"]["mode"] == "union"

    assert run("prune", "--config", cfg, "--weights", d / "weights",
               "--neuron-sets", tmp_path / "sets.json", "--emit-weights",
               "--out", tmp_path / "prune") == 0
    for name in ("mask_protected.json", "mask_baseline.json", "schedule.json",
                 "weights_protected", "weights_baseline"):
        assert (tmp_path / "prune" / name).exists()
    sched = json.loads((tmp_path / "prune" / "schedule.json").read_text())
    assert len(sched["steps"]) == 2  # 128 -> 96 -> 64

    assert run("report", "--neuron-sets", tmp_path / "sets.json",
               "--manifest", d / "manifest.jsonl", "--ssl-clusters", tmp_path / "ssl.json",
               "--ive-clusters", tmp_path / "ive.json", "--out", tmp_path / "rep") == 0
    csv = (tmp_path / "rep" / "neuron_counts.csv").read_text()
    assert csv.splitlines()[0] == "layer,family,count"
    assert (tmp_path / "rep" / "composition_speaker_group.csv").exists()
    assert (tmp_path / "rep" / "composition_phone_class.json").exists()


def test_missing_input_exit_3(tmp_path, capsys):
    code = run("binarize", "--activations", tmp_path / "nope", "--manifest", tmp_path / "m",
               "--out", tmp_path / "out")
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert err["exit_code"] == 3 and "not found" in err["message"]
    assert not (tmp_path / "out").exists()


def test_parameter_error_exit_5(data, tmp_path, capsys):
    d = data / "data"
    code = run("binarize", "--activations", d / "activations", "--manifest",
               d / "manifest.jsonl", "--lambda-pct", 0, "--out", tmp_path / "o")
    assert code == 5
    assert json.loads(capsys.readouterr().err)["exit_code"] == 5


def test_budget_conflict_exit_6(data, tmp_path):
    d = data / "data"
    sets = tmp_path / "sets.json"
    sets.write_text(json.dumps({"version": 1, "family": "protected", "width": 128,
                                "layers": [{"layer": 0, "indices": list(range(40))},
                                           {"layer": 1, "indices": [1]}]}))
    code = run("prune", "--weights", d / "weights", "--neuron-sets", sets,
               "--method", "iterative", "--final-dims", 16, "--out", tmp_path / "p")
    assert code == 6


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["binarize", "--no-such-flag"])
    assert exc.value.code == 2


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.toml").write_text("lamda_pct = 2\n")
    assert run("synth", "--config", tmp_path / "c.toml", "--out", tmp_path / "o") == 4


def test_env_config_and_threads(data, tmp_path, monkeypatch):
    monkeypatch.setenv("CLUSTER_NEURONS_CONFIG", str(data / "run.toml"))
    d = data / "data"
    assert run("kmeans", "--features", d / "ssl_features.npy", "--threads", 1,
               "--out", tmp_path / "a.json") == 0
    assert json.loads((tmp_path / "a.json").read_text())["config"]["seed"] == 3
    assert run("kmeans", "--features", d / "ssl_features.npy", "--threads", 0,
               "--out", tmp_path / "b.json") == 5


def test_flags_override_config(data, tmp_path):
    d = data / "data"
    assert run("kmeans", "--config", data / "run.toml", "--features", d / "ssl_features.npy",
               "--seed", 7, "--k", 2, "--out", tmp_path / "a.json") == 0
    obj = json.loads((tmp_path / "a.json").read_text())
    assert obj["config"]["seed"] == 7 and obj["k"] == 2


def test_pipeline_is_idempotent(data, tmp_path):
    for out in ("a", "b"):
        assert run("pipeline", "--config", data / "run.toml", "--out", tmp_path / out) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                     if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*")
                     if p.is_file())
    assert files_a == files_b and len(files_a) > 20
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    mask = json.loads((tmp_path / "a" / "prune" / "mask_protected.json").read_text())
    assert mask["method_tag"] and mask["layers"]
    assert np.isfinite(mask["target_avg_dims"])
