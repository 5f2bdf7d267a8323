from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genefl.genecraft import (
    FisherDiag,
    compose_elastic,
    elastic_mask,
    fisher_diag,
    gamma_schedule,
    layer_scores,
    load_gene,
    normalize_fisher,
    save_gene,
    select_learngene,
)
from genefl.nn import Batch
from genefl.params import Architecture, LayeredParams, init_params


def model_of(values: dict[str, np.ndarray]) -> LayeredParams:
    return LayeredParams(values.items())


def random_model(seed, dims=(4, 6, 3)):
    return init_params(Architecture(dims), seed).astype(np.float64)


# ---------------------------------------------------------------- fisher


def test_fisher_zero_for_dead_path():
    # Second input column never influences the output: its weights sit behind
    # a ReLU unit that never activates.
    w1 = np.array([[1.0, 0.0], [0.0, -5.0]])
    b1 = np.array([0.0, -10.0])  # unit 1 always negative -> dead
    w2 = np.array([[1.0, -1.0], [1.0, -1.0]])
    b2 = np.zeros(2)
    model = model_of(
        {"fc1.weight": w1, "fc1.bias": b1, "fc2.weight": w2, "fc2.bias": b2}
    )
    rng = np.random.default_rng(0)
    batch = Batch(rng.random((12, 2)), rng.integers(0, 2, 12))
    fisher = fisher_diag(model, [batch])
    assert np.all(fisher.values.get("fc1.weight")[:, 1] == 0.0)
    assert fisher.values.get("fc1.bias")[1] == 0.0


def test_fisher_single_logistic_unit_quarter():
    # One input, two logits with the second fixed at 0: a logistic unit.
    # At theta=0, d log p / d theta = 0.5 for (x=1, y=0) -> Fisher 0.25.
    model = model_of(
        {"fc1.weight": np.array([[0.0, 0.0]]), "fc1.bias": np.array([0.0, 0.0])}
    )
    batch = Batch(np.array([[1.0]]), np.array([0]))
    fisher = fisher_diag(model, [batch])
    assert np.allclose(fisher.values.get("fc1.weight"), [[0.25, 0.25]])
    assert np.allclose(fisher.values.get("fc1.bias"), [0.25, 0.25])


def test_fisher_matches_finite_difference_log_likelihood():
    model = random_model(1, dims=(3, 4, 2))
    rng = np.random.default_rng(2)
    batch = Batch(rng.random((5, 3)), rng.integers(0, 2, 5))
    fisher = fisher_diag(model, [batch])

    def log_lik_grad_sq_sum(lid, ix):
        # mean over samples of (d log p(y|x)/d theta_j)^2 via central FD
        eps = 1e-6
        total = 0.0
        for i in range(len(batch)):
            one = Batch(batch.inputs[i : i + 1], batch.labels[i : i + 1])
            up = model.copy()
            up.get(lid)[ix] += eps
            down = model.copy()
            down.get(lid)[ix] -= eps
            from genefl.nn import loss_and_grad

            lu, _ = loss_and_grad(up, one)
            ld, _ = loss_and_grad(down, one)
            # loss is -log p, so d log p = -d loss
            total += ((lu - ld) / (2 * eps)) ** 2
        return total / len(batch)

    for lid in ("fc1.weight", "fc2.bias"):
        tensor = fisher.values.get(lid)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            assert tensor[ix] == pytest.approx(
                log_lik_grad_sq_sum(lid, ix), rel=1e-4, abs=1e-10
            )


def test_fisher_gradients_square_is_exact_per_sample():
    # The vectorized accumulation must equal an explicit per-sample loop.
    from genefl.nn import loss_and_grad

    model = random_model(3, dims=(4, 5, 3))
    rng = np.random.default_rng(4)
    batch = Batch(rng.random((7, 4)), rng.integers(0, 3, 7))
    fisher = fisher_diag(model, [batch])
    acc = {lid: np.zeros_like(t) for lid, t in model.items()}
    for i in range(len(batch)):
        one = Batch(batch.inputs[i : i + 1], batch.labels[i : i + 1])
        _, grads = loss_and_grad(model, one)
        for lid in model.layer_ids:
            acc[lid] += grads.get(lid) ** 2
    for lid in model.layer_ids:
        assert np.allclose(fisher.values.get(lid), acc[lid] / len(batch), atol=1e-12)


def test_fisher_nonnegative_random_cases():
    rng = np.random.default_rng(5)
    for seed in range(20):
        model = random_model(seed)
        batch = Batch(rng.random((6, 4)), rng.integers(0, 3, 6))
        fisher = fisher_diag(model, [batch])
        for _, t in fisher.values.items():
            assert np.all(t >= 0.0)


def test_fisher_requires_samples():
    with pytest.raises(ValueError):
        fisher_diag(random_model(0), [])


# ---------------------------------------------------------- normalization


def test_normalize_direct_arithmetic():
    fisher = FisherDiag(values=model_of({"a": np.array([0.0, 1.0, 2.0])}))
    out = normalize_fisher(fisher)
    assert np.allclose(out.values.get("a"), [0.0, 0.5, 1.0])


def test_normalize_constant_gives_zeros():
    fisher = FisherDiag(values=model_of({"a": np.full(4, 3.0), "b": np.full(2, 3.0)}))
    out = normalize_fisher(fisher)
    assert np.all(out.values.get("a") == 0.0)
    assert np.all(out.values.get("b") == 0.0)


def test_normalize_preserves_order_and_hits_bounds():
    rng = np.random.default_rng(6)
    values = rng.random(50) * 7.0
    out = normalize_fisher(FisherDiag(values=model_of({"a": values})))
    norm = out.values.get("a")
    assert norm.min() == 0.0 and norm.max() == 1.0
    assert np.array_equal(np.argsort(values, kind="stable"), np.argsort(norm, kind="stable"))


# ------------------------------------------------------------ elastic mask


def test_elastic_mask_epsilon_one_keeps_everything():
    fhat = normalize_fisher(FisherDiag(values=model_of({"a": np.array([0.0, 2.0, 5.0])})))
    mask = elastic_mask(fhat, 1.0)
    assert np.all(mask.get("a"))


def test_elastic_mask_boundary_is_inclusive():
    fhat = normalize_fisher(FisherDiag(values=model_of({"a": np.array([0.0, 0.5, 1.0])})))
    mask = elastic_mask(fhat, 0.5)
    assert list(mask.get("a")) == [True, True, False]


def test_compose_elastic_mixes_previous_and_cluster():
    prev = model_of({"a": np.array([1.0, 2.0, 3.0])})
    cluster = model_of({"a": np.array([10.0, 20.0, 30.0])})
    fhat = normalize_fisher(FisherDiag(values=model_of({"a": np.array([0.0, 0.5, 1.0])})))
    mask = elastic_mask(fhat, 0.5)
    composed = compose_elastic(prev, cluster, mask)
    assert np.allclose(composed.get("a"), [1.0, 2.0, 30.0])


# ------------------------------------------------------------ layer scores


def test_layer_scores_identical_models_weighted_by_inverse_dim():
    model = random_model(7)
    scores = layer_scores(model, model)
    dims = {lid: t.size for lid, t in model.items()}
    inv = {lid: 1.0 / d for lid, d in dims.items()}
    total = sum(inv.values())
    for lid in model.layer_ids:
        assert scores.scores[lid] == pytest.approx(inv[lid] / total, abs=1e-12)


def test_layer_scores_orthogonal_layer_scores_minimal():
    current = model_of({"a": np.array([1.0, 0.0]), "b": np.array([1.0, 1.0])})
    previous = model_of({"a": np.array([0.0, 1.0]), "b": np.array([1.0, 1.0])})
    scores = layer_scores(current, previous)
    assert scores.scores["a"] < scores.scores["b"]
    assert scores.scores["a"] == pytest.approx(0.0, abs=1e-12)


def test_layer_scores_match_direct_cosine_oracle():
    rng = np.random.default_rng(8)
    current = model_of({f"l{i}": rng.standard_normal(5 + i) for i in range(3)})
    previous = model_of({f"l{i}": rng.standard_normal(5 + i) for i in range(3)})
    scores = layer_scores(current, previous)
    raw = {}
    for lid in current.layer_ids:
        a, b = current.get(lid), previous.get(lid)
        raw[lid] = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))) / a.size
    shift = min(0.0, min(raw.values()))
    shifted = {k: v - shift for k, v in raw.items()}
    total = sum(shifted.values())
    for lid, expected in shifted.items():
        assert scores.scores[lid] == pytest.approx(expected / total, abs=1e-9)


def test_layer_scores_sum_to_one():
    for seed in range(10):
        model = random_model(seed)
        other = random_model(seed + 100)
        scores = layer_scores(model, other)
        assert sum(scores.scores.values()) == pytest.approx(1.0, abs=1e-9)


def test_layer_scores_zero_norm_layer_is_an_error():
    current = model_of({"a": np.zeros(3), "b": np.ones(2)})
    previous = model_of({"a": np.ones(3), "b": np.ones(2)})
    with pytest.raises(ValueError, match="'a'"):
        layer_scores(current, previous)


def test_layer_scores_permutation_equivariance():
    rng = np.random.default_rng(9)
    tensors = {f"l{i}": rng.standard_normal(4) for i in range(4)}
    prevs = {f"l{i}": rng.standard_normal(4) for i in range(4)}
    forward_order = layer_scores(model_of(tensors), model_of(prevs))
    rev = list(reversed(list(tensors)))
    reversed_order = layer_scores(
        LayeredParams((k, tensors[k]) for k in rev),
        LayeredParams((k, prevs[k]) for k in rev),
    )
    for lid in tensors:
        assert forward_order.scores[lid] == pytest.approx(reversed_order.scores[lid], abs=1e-12)


# ------------------------------------------------------------- selection


def test_select_gamma_equals_layer_count_keeps_all():
    model = random_model(10)
    scores = layer_scores(model, model)
    gene = select_learngene(model, scores, gamma=len(model.layer_ids))
    assert set(gene.layer_ids) == set(model.layer_ids)
    for lid in gene.layer_ids:
        assert np.array_equal(gene.tensors[lid], model.get(lid))


def test_select_gamma_one_takes_argmax():
    model = model_of({"a": np.ones(2), "b": np.ones(2), "c": np.ones(2)})
    from genefl.genecraft import LayerScores

    scores = LayerScores(scores={"a": 0.5, "b": 0.3, "c": 0.2})
    gene = select_learngene(model, scores, gamma=1)
    assert gene.layer_ids == ("a",)


def test_select_breaks_ties_toward_lower_index():
    model = model_of({"a": np.ones(2), "b": np.ones(2), "c": np.ones(2)})
    from genefl.genecraft import LayerScores

    scores = LayerScores(scores={"a": 0.2, "b": 0.4, "c": 0.4})
    gene = select_learngene(model, scores, gamma=1)
    assert gene.layer_ids == ("b",)


def test_select_invert_flag_flips_direction():
    model = model_of({"a": np.ones(2), "b": np.ones(2)})
    from genefl.genecraft import LayerScores

    scores = LayerScores(scores={"a": 0.8, "b": 0.2})
    assert select_learngene(model, scores, 1).layer_ids == ("a",)
    assert select_learngene(model, scores, 1, invert_scores=True).layer_ids == ("b",)


def test_select_rejects_gamma_out_of_range():
    model = random_model(11)
    scores = layer_scores(model, model)
    with pytest.raises(ValueError):
        select_learngene(model, scores, 0)
    with pytest.raises(ValueError):
        select_learngene(model, scores, len(model.layer_ids) + 1)


def test_gene_serialization_round_trip(tmp_path):
    model = init_params(Architecture((4, 6, 3)), 12)
    scores = layer_scores(model, model)
    gene = select_learngene(model, scores, 3, origin=(9, 17))
    path = tmp_path / "gene.ckpt"
    save_gene(path, gene)
    back = load_gene(path)
    assert back.layer_mask == gene.layer_mask
    assert back.gamma == gene.gamma
    assert back.origin == (9, 17)
    for lid in gene.layer_ids:
        assert np.array_equal(back.tensors[lid], gene.tensors[lid].astype(np.float32))


# -------------------------------------------------------------- schedule


def test_gamma_schedule_anchors():
    assert gamma_schedule(0, 6, 2, 8) == 6
    assert gamma_schedule(8, 6, 2, 8) == 2
    assert gamma_schedule(50, 6, 2, 8) == 2


def test_gamma_schedule_linear_interpolation_example():
    assert gamma_schedule(4, 6, 2, 8) == 4


def test_gamma_schedule_matches_table_oracle():
    num_layers, gamma_min, warmup = 6, 2, 8
    table = [
        max(gamma_min, int(np.floor(num_layers - (num_layers - gamma_min) * r / warmup)))
        for r in range(12)
    ]
    got = [gamma_schedule(r, num_layers, gamma_min, warmup) for r in range(12)]
    assert got == table


def test_gamma_schedule_monotone_non_increasing():
    values = [gamma_schedule(r, 6, 2, 8) for r in range(20)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# --------------------------------------------------- hypothesis properties


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1e6), min_size=2, max_size=40), st.floats(0.0, 1.0))
def test_property_mask_monotone_in_epsilon(values, eps):
    arr = np.array(values)
    fhat = normalize_fisher(FisherDiag(values=model_of({"a": arr})))
    smaller = elastic_mask(fhat, eps * 0.5)
    larger = elastic_mask(fhat, eps)
    assert np.all(larger.get("a") | ~smaller.get("a"))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1e9), min_size=1, max_size=50))
def test_property_normalized_fisher_in_unit_interval(values):
    out = normalize_fisher(FisherDiag(values=model_of({"a": np.array(values)})))
    arr = out.values.get("a")
    assert np.all(arr >= 0.0) and np.all(arr <= 1.0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8),
    st.integers(1, 8),
    st.floats(1.001, 100.0),
)
def test_property_selection_invariant_under_positive_rescaling(raws, gamma, scale):
    from genefl.genecraft import LayerScores

    gamma = min(gamma, len(raws))
    total = sum(raws)
    base = {f"l{i}": v / total for i, v in enumerate(raws)}
    rescaled_raw = {k: v * scale for k, v in base.items()}
    rescale_total = sum(rescaled_raw.values())
    rescaled = {k: v / rescale_total for k, v in rescaled_raw.items()}
    model = model_of({k: np.ones(2) for k in base})
    a = select_learngene(model, LayerScores(scores=base), gamma)
    b = select_learngene(model, LayerScores(scores=rescaled), gamma)
    assert a.layer_ids == b.layer_ids


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 20), st.integers(0, 40))
def test_property_schedule_bounds_and_monotonicity(num_layers, warmup, round_index):
    gamma_min = 1 + (num_layers - 1) // 2
    value = gamma_schedule(round_index, num_layers, gamma_min, warmup)
    nxt = gamma_schedule(round_index + 1, num_layers, gamma_min, warmup)
    assert gamma_min <= value <= num_layers
    assert nxt <= value


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_fisher_nonnegative(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed % 1000, dims=(3, 4, 2))
    batch = Batch(rng.random((4, 3)), rng.integers(0, 2, 4))
    fisher = fisher_diag(model, [batch])
    for _, t in fisher.values.items():
        assert np.all(t >= 0.0)
