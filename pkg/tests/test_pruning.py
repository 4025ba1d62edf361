import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cluster_neurons.exceptions import BudgetConflictError, ParameterError, ValidationError
from cluster_neurons.neuron_sets import NeuronSet
from cluster_neurons.pruning import (FfnLayer, FfnWeights, MagnitudePruner, MaskSchedule,
                                     PruneMask, apply_mask, ffn_forward, gelu, iterative_schedule,
                                     l1_scores, load_ffn_weights, one_shot_baseline_mask,
                                     one_shot_protected_mask, save_ffn_weights)

from oracles import masked_dense_forward, naive_l1


def random_weights(rng, n_layers=3, width=64, d_model=8):
    return FfnWeights({li: FfnLayer(rng.normal(size=(width, d_model)),
                                    rng.normal(size=width),
                                    rng.normal(size=(d_model, width)))
                       for li in range(n_layers)})


def weights_with_scores(scores):
    """One layer whose L1 scores are exactly ``scores`` (bias carries everything)."""
    scores = np.asarray(scores, dtype=float)
    width = scores.size
    return FfnWeights({0: FfnLayer(np.zeros((width, 2)), scores.copy(), np.zeros((2, width)))})


def test_zero_row_scores_zero():
    w = FfnWeights({0: FfnLayer(np.zeros((3, 2)), np.zeros(3), np.zeros((2, 3)))})
    assert l1_scores(w)[0].tolist() == [0, 0, 0]


def test_hand_computed_scores():
    w1 = np.array([[1.0, -1.0], [2.0, 2.0]])
    w2 = np.array([[0.5, -0.5]])
    w = FfnWeights({0: FfnLayer(w1, np.zeros(2), w2)})
    assert l1_scores(w)[0].tolist() == [2.5, 4.5]


def test_scores_match_naive_oracle():
    rng = np.random.default_rng(0)
    w = random_weights(rng)
    for li, layer in w.layers.items():
        np.testing.assert_allclose(l1_scores(w)[li], naive_l1(layer.w1, layer.b1, layer.w2),
                                   rtol=1e-12)


def test_shape_validation():
    with pytest.raises(ValidationError):
        FfnLayer(np.zeros((3, 2)), np.zeros(3), np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        FfnLayer(np.full((3, 2), np.nan), np.zeros(3), np.zeros((2, 3)))


# --- one-shot ---------------------------------------------------------------------

def test_protected_accounting_867():
    sizes = [867] * 12
    protected = NeuronSet("protected", {li: range(n) for li, n in enumerate(sizes)}, 3072)
    mask = one_shot_protected_mask(protected)
    assert sum(sizes) == 10404
    assert mask.target_avg_dims == 867


def test_protected_accounting_uneven():
    protected = NeuronSet("protected", {0: range(800), 1: range(900), 2: range(934)}, 3072)
    mask = one_shot_protected_mask(protected)
    assert mask.target_avg_dims == 878
    assert [mask.kept[li].size for li in range(3)] == [800, 900, 934]


def test_protect_everything_is_identity():
    rng = np.random.default_rng(0)
    w = random_weights(rng, width=16)
    protected = NeuronSet("protected", {li: range(16) for li in range(3)}, 16)
    mask = one_shot_protected_mask(protected, w)
    out = apply_mask(w, mask)
    for li in range(3):
        np.testing.assert_array_equal(out[li].w1, w[li].w1)


def test_empty_protected_layer_falls_back_with_warning():
    w = random_weights(np.random.default_rng(1), n_layers=3, width=64)
    protected = NeuronSet("protected", {0: range(20), 1: range(40), 2: []}, 64)
    with pytest.warns(UserWarning, match="no protected dims"):
        mask = one_shot_protected_mask(protected, w)
    # round(0.1 * mean(20, 40)) = 3
    assert mask.kept[2].size == 3
    top = np.argsort(-l1_scores(w)[2], kind="stable")[:3]
    assert mask.kept[2].tolist() == sorted(top.tolist())
    with pytest.raises(ValidationError):
        one_shot_protected_mask(protected)


def test_baseline_keep_all():
    w = random_weights(np.random.default_rng(0), width=10)
    mask = one_shot_baseline_mask(w, 10)
    assert all(k.tolist() == list(range(10)) for k in mask.kept.values())


def test_baseline_top_two():
    mask = one_shot_baseline_mask(weights_with_scores([3, 1, 4, 2]), 2)
    assert mask.kept[0].tolist() == [0, 2]


def test_baseline_ties_prefer_low_index():
    mask = one_shot_baseline_mask(weights_with_scores([1, 2, 2, 2, 0]), 2)
    assert mask.kept[0].tolist() == [1, 2]


def test_baseline_target_range():
    w = random_weights(np.random.default_rng(0), width=10)
    for bad in (0, 0.4, 11):
        with pytest.raises(ParameterError):
            one_shot_baseline_mask(w, bad)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_budget_matches_within_rounding(seed):
    rng = np.random.default_rng(seed)
    n_layers, width = int(rng.integers(1, 8)), int(rng.integers(4, 40))
    w = random_weights(rng, n_layers=n_layers, width=width)
    protected = NeuronSet("protected", {li: rng.choice(width, rng.integers(1, width + 1),
                                                        replace=False)
                                        for li in range(n_layers)}, width)
    pm = one_shot_protected_mask(protected, w)
    bm = one_shot_baseline_mask(w, pm.target_avg_dims)
    assert abs(pm.total_kept - bm.total_kept) <= n_layers / 2
    assert len({k.size for k in bm.kept.values()}) == 1


def test_mask_json_round_trip():
    w = random_weights(np.random.default_rng(0), width=10)
    mask = one_shot_baseline_mask(w, 4)
    assert PruneMask.from_dict(mask.to_dict()) == mask


# --- iterative --------------------------------------------------------------------

def test_3072_to_512_by_128_has_20_steps():
    rng = np.random.default_rng(0)
    w = FfnWeights({0: FfnLayer(rng.normal(size=(3072, 4)), rng.normal(size=3072),
                                rng.normal(size=(4, 3072)))})
    sched = iterative_schedule(w, None, step_dims=128, final_dims=512)
    assert len(sched) == 20
    assert [s.mask.kept[0].size for s in sched][:3] == [2944, 2816, 2688]
    assert sched.final.kept[0].size == 512
    assert [s.apply_at_training_step for s in sched][:2] == [25_000, 50_000]


def test_last_step_removes_remainder():
    w = random_weights(np.random.default_rng(0), n_layers=1, width=100)
    sched = iterative_schedule(w, None, step_dims=30, final_dims=25)
    assert [s.mask.kept[0].size for s in sched] == [70, 40, 25]


def test_lowest_score_dim_survives_when_protected():
    scores = np.arange(1.0, 17.0)
    w = weights_with_scores(scores)
    protected = NeuronSet("protected", {0: [0]}, 16)
    sched = iterative_schedule(w, protected, step_dims=4, final_dims=4)
    assert 0 in sched.final.kept[0]
    # without protection, dim 0 goes first
    assert 0 not in iterative_schedule(w, None, 4, 4).steps[0].mask.kept[0]


def test_budget_conflict_names_layer():
    w = random_weights(np.random.default_rng(0), n_layers=2, width=32)
    protected = NeuronSet("protected", {0: range(4), 1: range(10)}, 32)
    with pytest.raises(BudgetConflictError, match="layer 1"):
        iterative_schedule(w, protected, step_dims=4, final_dims=8)


def test_schedule_parameter_errors():
    w = random_weights(np.random.default_rng(0), width=32)
    with pytest.raises(ParameterError):
        iterative_schedule(w, None, step_dims=0, final_dims=8)
    with pytest.raises(ParameterError):
        iterative_schedule(w, None, step_dims=4, final_dims=32)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_schedule_nests_and_protects(seed):
    rng = np.random.default_rng(seed)
    width = int(rng.integers(16, 80))
    final = int(rng.integers(4, width // 2))
    step = int(rng.integers(1, 20))
    w = random_weights(rng, n_layers=2, width=width)
    protected = NeuronSet("protected", {li: rng.choice(width, rng.integers(0, final + 1),
                                                        replace=False) for li in range(2)}, width)
    sched = iterative_schedule(w, protected, step, final)
    prev = {li: np.arange(width) for li in range(2)}
    for i, s in enumerate(sched):
        for li in range(2):
            kept = s.mask.kept[li]
            assert set(kept) < set(prev[li])
            removed = prev[li].size - kept.size
            if i < len(sched) - 1:
                assert removed == step
            assert set(protected[li]) <= set(kept)
            prev[li] = kept
    assert all(k.size == final for k in sched.final.kept.values())


def test_refresh_hook_rescores():
    w = weights_with_scores(np.arange(1.0, 9.0))
    calls = []

    def refresh(step, mask):
        calls.append(step)
        # after the first step, make dim 7 the weakest
        return weights_with_scores([9, 9, 9, 9, 9, 9, 9, 0.5])

    sched = iterative_schedule(w, None, step_dims=2, final_dims=4, refresh=refresh)
    assert calls == [1, 2]
    assert sched.steps[0].mask.kept[0].tolist() == [2, 3, 4, 5, 6, 7]
    assert 7 not in sched.steps[1].mask.kept[0]


def test_schedule_json_round_trip():
    w = random_weights(np.random.default_rng(0), width=20)
    sched = iterative_schedule(w, None, 5, 10)
    again = MaskSchedule.from_dict(sched.to_dict())
    assert [s.mask for s in again] == [s.mask for s in sched]
    assert sched.to_dict()["steps"][0]["apply_at_training_step"] == 25_000


# --- apply_mask ---------------------------------------------------------------------

def test_apply_mask_slices():
    w1 = np.arange(6.0).reshape(3, 2)
    w2 = np.arange(6.0).reshape(2, 3)
    w = FfnWeights({0: FfnLayer(w1, np.array([1.0, 2.0, 3.0]), w2)})
    out = apply_mask(w, PruneMask({0: [0, 2]}, 2, "t", {0: 3}))
    np.testing.assert_array_equal(out[0].w1, w1[[0, 2]])
    np.testing.assert_array_equal(out[0].w2, w2[:, [0, 2]])
    np.testing.assert_array_equal(out[0].b1, [1.0, 3.0])
    assert out.origin[0].tolist() == [0, 2]


def test_apply_mask_out_of_range():
    w = random_weights(np.random.default_rng(0), n_layers=1, width=4)
    with pytest.raises(ValidationError):
        apply_mask(w, PruneMask({0: [1, 4]}, 2, "t"))


def test_compact_matches_masked_dense():
    rng = np.random.default_rng(3)
    w = random_weights(rng, width=48, d_model=12)
    for _ in range(5):
        kept = {li: rng.choice(48, rng.integers(1, 48), replace=False) for li in range(3)}
        mask = PruneMask(kept, 0, "random", w.widths())
        compact = apply_mask(w, mask)
        x = rng.normal(size=(7, 12))
        for li in range(3):
            dense = masked_dense_forward(w[li].w1, w[li].b1, w[li].w2, x, mask.kept[li], gelu)
            np.testing.assert_allclose(ffn_forward(compact[li], x), dense, atol=1e-6)
            np.testing.assert_allclose(
                ffn_forward(w[li], x, hidden_mask=mask.hidden_mask(li)), dense, atol=1e-6)


def test_permutation_equivariance():
    rng = np.random.default_rng(6)
    w = random_weights(rng, n_layers=1, width=20)
    perm = rng.permutation(20)
    layer = w[0]
    wp = FfnWeights({0: FfnLayer(layer.w1[perm], layer.b1[perm], layer.w2[:, perm])})
    np.testing.assert_allclose(l1_scores(wp)[0], l1_scores(w)[0][perm])
    kept = one_shot_baseline_mask(w, 7).kept[0]
    kept_p = one_shot_baseline_mask(wp, 7).kept[0]
    assert sorted(perm[kept_p].tolist()) == kept.tolist()


def test_weights_round_trip(tmp_path):
    w = random_weights(np.random.default_rng(0), width=12)
    compact = apply_mask(w, one_shot_baseline_mask(w, 5))
    save_ffn_weights(compact, tmp_path / "w")
    again = load_ffn_weights(tmp_path / "w")
    for li in range(3):
        np.testing.assert_allclose(again[li].w1, compact[li].w1, rtol=1e-6)
        assert again.origin[li].tolist() == compact.origin[li].tolist()


def test_pruner_estimator():
    w = random_weights(np.random.default_rng(0), width=12)
    protected = NeuronSet("protected", {li: [1, 2, 3] for li in range(3)}, 12)
    est = MagnitudePruner().fit(w, protected)
    assert est.mask_.target_avg_dims == 3
    assert est.transform(w)[0].width == 3
    base = MagnitudePruner(target_avg_dims=est.mask_.target_avg_dims).fit(w)
    assert base.mask_.method_tag == "one_shot_l1"
    with pytest.raises(ParameterError):
        MagnitudePruner().fit(w)
