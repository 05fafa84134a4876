import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapleak.architectures import cnn, small_dense, text_model
from trapleak.attack import (SENTINEL, ConfigurationError, ExtractionCandidate,
                             build_embedding_lookup, extract_candidates, extract_from_model,
                             match_candidates, metrics_from_matches, reconstruct_tokens, score)
from trapleak.initializers import (ForwardingPlan, TrapConfig, init_conv_forwarding,
                                   init_embedding_uniform, init_random, init_trap_layer)
from trapleak.nn import Dense, DimensionError, Model, ReLU, gradients, per_example_gradients


def _model(n_in=20, hidden=16, seed=0):
    m = small_dense(n_in, hidden, 4)
    init_random(m, "xavier_uniform", seed)
    return m


def test_single_input_every_active_row_exact():
    rng = np.random.default_rng(0)
    model = _model()
    x = rng.random((1, 20))
    g = gradients(model, x, [2])
    cands = extract_candidates(g[0]["W"], g[0]["b"])
    assert cands
    for c in cands:
        assert np.linalg.norm(c.x_hat - x[0]) / np.linalg.norm(x[0]) <= 1e-9


def test_all_dead_layer_gives_no_candidates():
    model = Model([Dense(-np.ones((5, 4)), -np.ones(5)), ReLU(), Dense(np.ones((2, 5)))])
    g = gradients(model, np.random.default_rng(1).random((3, 4)), [0, 1, 0])
    assert extract_candidates(g[0]["W"], g[0]["b"]) == []


def test_row_firing_on_one_example_recovers_it():
    # rows 0/1 see only feature 0/1 after the bias, so each fires on one example
    W = np.array([[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    model = Model([Dense(W, np.zeros(3)), ReLU(), Dense(np.ones((2, 3)) * [[1], [-1]])])
    x = np.array([[0.9, 0.1, 0.4], [0.2, 0.8, 0.3]])
    g = gradients(model, x, [0, 1])
    per = per_example_gradients(model, x, [0, 1])
    assert per[1][0]["b"][0] == 0 and per[0][0]["b"][1] == 0  # exclusivity, by inspection
    cands = {c.row: c for c in extract_candidates(g[0]["W"], g[0]["b"])}
    np.testing.assert_allclose(cands[0].x_hat, x[0], rtol=1e-9)
    np.testing.assert_allclose(cands[1].x_hat, x[1], rtol=1e-9)
    assert np.linalg.norm(cands[2].x_hat - x[0]) > 1e-3  # overlay of both


def test_extract_shape_mismatch():
    with pytest.raises(DimensionError):
        extract_candidates(np.zeros((3, 4)), np.zeros(4))


def test_clip_like_scaling_leaves_candidates_unchanged():
    rng = np.random.default_rng(2)
    model = _model()
    g = gradients(model, rng.random((6, 20)), rng.integers(0, 4, 6))
    before = extract_candidates(g[0]["W"], g[0]["b"])
    after = extract_candidates(0.0137 * g[0]["W"], 0.0137 * g[0]["b"])
    assert [c.row for c in before] == [c.row for c in after]
    for a, b in zip(before, after):
        assert np.max(np.abs(a.x_hat - b.x_hat)) <= 1e-12 * max(1.0, np.abs(a.x_hat).max())


def _cand(x, row=0):
    return ExtractionCandidate(row, np.asarray(x, dtype=float), 1.0)


def test_score_all_distinct_matches():
    truth = np.random.default_rng(3).random((5, 7))
    m = score([_cand(t, i) for i, t in enumerate(truth[:3])], truth, n_rows=3)
    assert (m.P, m.R, m.A) == (1.0, 3 / 5, 1.0)
    m = score([_cand(t, i) for i, t in enumerate(truth)], truth, n_rows=5)
    assert m.R == 1.0


def test_score_zero_candidates():
    m = score([], np.ones((4, 3)), 10)
    assert (m.A, m.P, m.R, m.G0, m.B0) == (0, 0, 0, 0, 0)


def test_score_duplicates_and_overlays():
    truth = np.array([[1.0, 0.0], [0.0, 1.0]])
    cands = [_cand([1, 0]), _cand([1, 0], 1), _cand([0.5, 0.5], 2)]
    m = score(cands, truth, 4)
    assert (m.G0, m.B0, m.active) == (2, 1, 3)
    assert m.P == 0.5 and m.R == 0.5 and m.precision_active == pytest.approx(2 / 3)


def test_score_rejects_empty_batch():
    with pytest.raises(ValueError):
        score([], np.zeros((0, 3)), 5)


def test_nonfinite_candidates_never_match():
    truth = np.ones((2, 3))
    nearest, rel = match_candidates([_cand([np.inf, 1, 1]), _cand([np.nan, 1, 1])], truth)
    assert np.all(np.isinf(rel))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), B=st.integers(1, 8), n=st.integers(0, 12))
def test_score_sanity_and_monotonicity(seed, B, n):
    rng = np.random.default_rng(seed)
    truth = rng.random((B, 5))
    cands = []
    for i in range(n):
        j = rng.integers(0, B)
        noise = rng.choice([0.0, 1e-9, 1e-4, 0.3])
        cands.append(_cand(truth[j] + noise * rng.normal(size=5), i))
    nearest, rel = match_candidates(cands, truth)
    prev = None
    for tol in (1e-12, 1e-8, 1e-6, 1e-3, 1.0):
        m = metrics_from_matches(nearest, rel, B, max(n, 1), tol)
        assert 0 <= m.R <= 1 and 0 <= m.P <= 1
        assert m.B0 <= min(B, m.G0)
        if prev is not None:
            assert m.G0 >= prev.G0 and m.B0 >= prev.B0
        prev = m


def test_exclusive_rows_give_full_recall():
    # one-hot inputs, and row i reads only coordinate i, so each row fires on one point
    B = 6
    x = np.eye(B) * np.linspace(0.3, 0.9, B)[:, None]
    model = Model([Dense(np.eye(B), np.zeros(B)), ReLU(), Dense(np.ones((2, B)) * [[1], [-1]])])
    g = gradients(model, x, np.zeros(B, dtype=int))
    m = score(extract_candidates(g[0]["W"], g[0]["b"]), x, B)
    assert m.R == 1.0 and m.P == 1.0


def test_conv_forwarded_single_image_pixel_exact():
    rng = np.random.default_rng(4)
    model = cnn((3, 16, 16), 10, 200, filters=(6, 8))
    init_random(model, "xavier_uniform", rng)
    plan = init_conv_forwarding(model, ForwardingPlan((3, 16, 16)), rng)
    dense = model.dense_indices()[0]
    init_trap_layer(model.layers[dense], TrapConfig(s=0.95), rng)
    x = rng.random((1, 3, 16, 16))
    g = gradients(model, x, [3])
    cands = extract_from_model(model, g, dense, plan=plan)
    assert cands
    for c in cands:
        assert np.max(np.abs(c.x_hat - x[0])) <= 1e-9


def test_extract_behind_conv_needs_plan():
    model = cnn((3, 8, 8), 10, 20, filters=(4,))
    init_random(model, "xavier_uniform", 0)
    g = gradients(model, np.random.default_rng(0).random((1, 3, 8, 8)), [0])
    with pytest.raises(ValueError, match="ForwardingPlan"):
        extract_from_model(model, g)


def test_extract_reshapes_to_input_shape():
    model = _model(n_in=12)
    x = np.random.default_rng(5).random((1, 12))
    g = gradients(model, x, [0])
    cands = extract_from_model(model, g, input_shape=(3, 4))
    assert all(c.x_hat.shape == (3, 4) for c in cands)


# ---------- embeddings ----------

def test_lookup_round_trip_and_small_perturbation():
    table = np.random.default_rng(6).random((500, 8))
    lookup = build_embedding_lookup(table)
    assert all(lookup.lookup(table[t]) == t for t in range(500))
    assert lookup.lookup(table[17] + 4e-8) == 17
    assert lookup.lookup(np.full(8, 7.0)) == SENTINEL


def test_lookup_collision_is_an_error():
    table = np.array([[0.1234561, 0.5], [0.1234559, 0.5]])
    with pytest.raises(ConfigurationError):
        build_embedding_lookup(table)


def test_no_collisions_for_full_vocab_table():
    table = np.random.default_rng(7).random((10000, 250))
    assert len(build_embedding_lookup(table)) == 10000


def test_sentence_through_embedding_and_trap_recovered():
    rng = np.random.default_rng(8)
    model = text_model(vocab=50, seq_len=12, dim=6, N=64)
    init_random(model, "xavier_uniform", rng)
    init_embedding_uniform(model.layers[0], rng)
    init_trap_layer(model.layers[2], TrapConfig(s=0.99), rng)
    sentence = rng.integers(0, 50, (1, 12))
    g = gradients(model, sentence, [1])
    cands = extract_from_model(model, g, 2)
    assert cands
    lookup = build_embedding_lookup(model.layers[0].table)
    for c in cands:
        assert reconstruct_tokens(c, lookup, 12, 6) == sentence[0].tolist()


def test_dead_candidate_gives_sentinels_and_length_check():
    lookup = build_embedding_lookup(np.eye(3))
    assert reconstruct_tokens(np.full(6, np.nan), lookup, 2, 3) == [SENTINEL, SENTINEL]
    assert reconstruct_tokens(np.full(6, 9.0), lookup, 2, 3) == [SENTINEL, SENTINEL]
    with pytest.raises(DimensionError):
        reconstruct_tokens(np.zeros(5), lookup, 2, 3)
