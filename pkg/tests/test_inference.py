import numpy as np
import pytest

from mapspan.data import QAExample
from mapspan.experiments import build_model
from mapspan.inference import (SearchConfig, SpanPrediction, StrategyError, ensemble, predict,
                               search_matrix, search_vector, top_k_pairs)


# ---------------------------------------------------------------- brute-force oracles

def feasible(n, max_len):
    return [(s, e) for s in range(n) for e in range(n)
            if s <= e and (max_len is None or e - s + 1 <= max_len)]


def brute_score(p, P, direction, s, e):
    return p[s] * P[s, e] if direction == "forward" else p[e] * P[e, s]


def brute_best(p, P, direction, max_len=None):
    best = None
    for s, e in feasible(len(p), max_len):  # enumerated in (s, e) order, strict > keeps the first
        sc = brute_score(p, P, direction, s, e)
        if best is None or sc > best[2]:
            best = (s, e, sc)
    return best


def brute_top(p, P, direction, k, max_len=None):
    cells = [(s, e, brute_score(p, P, direction, s, e)) for s, e in feasible(len(p), max_len)]
    cells.sort(key=lambda c: (-c[2], c[0], c[1]))
    return cells[:k]


def brute_ensemble(F, B):
    seen = {(p.s, p.e) for p in F}
    pool = [(p.score, 0, p.s, p.e) for p in F] + [(p.score, 1, p.s, p.e) for p in B if (p.s, p.e) not in seen]
    best = pool[0]
    for cand in pool[1:]:
        if (cand[0] > best[0] or (cand[0] == best[0] and cand[1:] < best[1:])):
            best = cand
    return best


def random_probs(rng, n, coarse):
    if coarse:  # few distinct values so ties are common
        w = rng.integers(1, 4, size=n).astype(float)
        return w / w.sum()
    return rng.dirichlet(np.ones(n))


def random_matrix(rng, n, coarse):
    return np.stack([random_probs(rng, n, coarse) for _ in range(n)])


# ---------------------------------------------------------------- examples

def test_vector_example():
    pred = search_vector([0.1, 0.6, 0.3], [0.5, 0.2, 0.3])
    assert (pred.s, pred.e) == (1, 2) and pred.score == pytest.approx(0.18)


def test_vector_excludes_inverted_spans():
    pred = search_vector([0.0, 1.0], [1.0, 0.0])
    assert pred.s <= pred.e and pred.score == 0.0


def test_matrix_example():
    pred = search_matrix([0.6, 0.4], [[0.3, 0.7], [0.5, 0.5]])
    assert (pred.s, pred.e) == (0, 1) and pred.score == pytest.approx(0.42)


def test_backward_example():
    # p indexes ends, P[e, s]; the only feasible pairs have s <= e
    pred = search_matrix([0.2, 0.8], [[1.0, 0.0], [0.25, 0.75]], direction="backward")
    assert (pred.s, pred.e) == (1, 1) and pred.score == pytest.approx(0.6)


def test_matrix_example_3x3():
    P = [[0.1, 0.7, 0.2], [0.0, 0.5, 0.5], [0.1, 0.1, 0.8]]
    pred = search_matrix([0.6, 0.3, 0.1], P)
    assert (pred.s, pred.e) == (0, 1) and pred.score == pytest.approx(0.42)


def test_one_hot_cases():
    pred = search_vector([1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    assert (pred.s, pred.e, pred.score) == (0, 2, 1.0)
    pred = search_matrix([0.0, 1.0, 0.0], np.eye(3))
    assert (pred.s, pred.e) == (1, 1)


def test_max_span_len():
    pred = search_matrix([0.6, 0.4], [[0.3, 0.7], [0.5, 0.5]], cfg=SearchConfig(max_span_len=1))
    assert (pred.s, pred.e) == (1, 1) and pred.score == pytest.approx(0.2)


def test_top_k_returns_all_when_short():
    top = top_k_pairs([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], cfg=SearchConfig(ensemble_k=20))
    assert len(top) == 3
    assert [t.score for t in top] == sorted((t.score for t in top), reverse=True)


def test_single_position():
    assert search_matrix([1.0], [[1.0]]) == SpanPrediction(0, 0, 1.0, "forward")


def test_invalid_inputs():
    with pytest.raises(ValueError):
        search_matrix([0.5, 0.5], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        search_matrix([1.0], [[1.0]], direction="sideways")
    with pytest.raises(ValueError):
        SearchConfig(max_span_len=0)


def test_ensemble_prunes_duplicates_and_prefers_forward():
    F = [SpanPrediction(2, 3, 0.5, "forward"), SpanPrediction(0, 1, 0.2, "forward")]
    B = [SpanPrediction(2, 3, 0.9, "backward"), SpanPrediction(1, 1, 0.5, "backward")]
    best = ensemble(F, B)
    assert (best.s, best.e, best.direction) == (2, 3, "forward")


def test_ensemble_backward_wins():
    F = [SpanPrediction(0, 0, 0.3, "forward")]
    B = [SpanPrediction(4, 6, 0.31, "backward")]
    assert ensemble(F, B).direction == "backward"


def test_ensemble_needs_forward():
    with pytest.raises(ValueError):
        ensemble([], [SpanPrediction(0, 0, 1.0, "backward")])


# ---------------------------------------------------------------- oracle agreement

@pytest.mark.parametrize("coarse", [False, True])
def test_against_enumeration(coarse):
    rng = np.random.default_rng(0 if coarse else 1)
    for _ in range(300):
        n = int(rng.integers(1, 13))
        max_len = None if rng.random() < 0.5 else int(rng.integers(1, n + 1))
        k = int(rng.integers(1, 25))
        cfg = SearchConfig(max_span_len=max_len, ensemble_k=k)
        p_s, p_e = random_probs(rng, n, coarse), random_probs(rng, n, coarse)

        v = search_vector(p_s, p_e, cfg)
        outer = np.outer(p_s, p_e)
        assert (v.s, v.e, v.score) == brute_best(np.ones(n), outer, "forward", max_len)

        lists = {}
        for direction in ("forward", "backward"):
            p, P = random_probs(rng, n, coarse), random_matrix(rng, n, coarse)
            m = search_matrix(p, P, direction, cfg)
            assert (m.s, m.e, m.score) == brute_best(p, P, direction, max_len)
            top = top_k_pairs(p, P, direction, cfg)
            assert [(t.s, t.e, t.score) for t in top] == brute_top(p, P, direction, k, max_len)
            lists[direction] = top
        best = ensemble(lists["forward"], lists["backward"])
        expected = brute_ensemble(lists["forward"], lists["backward"])
        assert (best.score, 0 if best.direction == "forward" else 1, best.s, best.e) == expected


# ---------------------------------------------------------------- predict on a model

@pytest.fixture(scope="module")
def toy():
    ex = QAExample("x", ["a", "b", "c", "d", "e"], ["b", "c"], [(1, 2)])
    return ex


def test_predict_strategies(toy):
    both = build_model("map", [toy], d=8, directions="both")
    for strategy in ("map-forward", "map-backward", "map-ensemble"):
        pred = predict(both, toy, strategy)
        assert 0 <= pred.s <= pred.e < 5
    assert predict(build_model("ind", [toy], d=8), toy, "ind").s <= 4
    assert predict(build_model("vcp", [toy], d=8), toy, "vcp").s <= 4


def test_predict_mismatches(toy):
    fwd = build_model("map", [toy], d=8)
    with pytest.raises(StrategyError, match="both directions"):
        predict(fwd, toy, "map-ensemble")
    with pytest.raises(StrategyError):
        predict(fwd, toy, "ind")
    with pytest.raises(StrategyError):
        predict(fwd, toy, "beam")


def test_predict_matches_manual_search(toy):
    from mapspan.heads import map_first, map_full_matrix
    model = build_model("map", [toy], d=8, seed=3)
    enc = model.encode(*model.ids(toy))
    mp = model.map_params("forward")
    manual = search_matrix(map_first(enc, mp).data, map_full_matrix(enc, mp).data)
    assert predict(model, toy, "map-forward") == manual
