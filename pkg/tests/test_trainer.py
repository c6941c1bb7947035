import itertools
import math

import numpy as np
import pytest

from mapspan import autodiff as ad
from mapspan.autodiff import ParameterSet, Tensor
from mapspan.data import generate_needle_task
from mapspan.encoder import EncoderConfig, EncoderOutput, Vocabulary
from mapspan.heads import MapParams, init_map, map_first, map_full_matrix
from mapspan.model import ModelConfig, SpanModel
from mapspan.trainer import (
    AdamState, SampledMatrix, TrainConfig, TrainingError, adam_step, build_sampled_matrix,
    gradient_direction_probe, loss_end_sampled, loss_start, sample_indices, sampled_cell_count,
    total_loss, train, write_loss_csv,
)


def dominance_ok(p, truth, chosen):
    """Every chosen non-truth index beats every unchosen one (lower index wins ties)."""
    others = [i for i in chosen if i != truth]
    rest = [j for j in range(len(p)) if j not in chosen]
    return all(p[a] > p[b] or (p[a] == p[b] and a < b) for a in others for b in rest)


def brute_force_top(p, truth, k):
    """Enumerate all candidate subsets; return the unique one satisfying dominance."""
    n = len(p)
    size = min(k, n) - 1
    pool = [i for i in range(n) if i != truth]
    hits = [sorted(list(c) + [truth]) for c in itertools.combinations(pool, size)
            if dominance_ok(p, truth, set(c) | {truth})]
    assert len(hits) == 1
    return hits[0]


class TestSampleIndices:
    def test_spec_example(self):
        assert sample_indices([0.4, 0.1, 0.3, 0.2], 2, 3) == [0, 2, 3]

    def test_truth_not_duplicated(self):
        assert sample_indices([0.7, 0.2, 0.1], 0, 2) == [0, 1]

    def test_clamped(self):
        assert sample_indices([0.2, 0.5, 0.3], 1, 5) == [0, 1, 2]

    def test_ties_lowest_index(self):
        assert sample_indices([0.25, 0.25, 0.25, 0.25], 3, 3) == [0, 1, 3]

    def test_truth_out_of_range(self):
        with pytest.raises(IndexError):
            sample_indices([0.5, 0.5], 2, 1)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(1, 9))
            p = rng.integers(0, 4, size=n) / 4.0  # coarse values force ties
            truth = int(rng.integers(n))
            k = int(rng.integers(1, 11))
            out = sample_indices(p, truth, k)
            assert out == brute_force_top(p, truth, k)
            assert out.count(truth) == 1 and len(set(out)) == min(k, n)


def map_instance(rng, n, d=4, factor=5.0, direction="forward"):
    ps = ParameterSet({k: t.data * factor for k, t in init_map(d, rng, direction).items()})
    enc = EncoderOutput(Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(2, d))))
    return ps, enc


class TestSampledMatrix:
    @pytest.mark.parametrize("norm_mode", ["joint-flat", "row-wise"])
    @pytest.mark.parametrize("shared", [False, True])
    def test_invariants_random(self, norm_mode, shared):
        rng = np.random.default_rng(1)
        cfg = TrainConfig(sample_k=5, norm_mode=norm_mode, shared_columns=shared)
        for _ in range(150):
            n = int(rng.integers(1, 33))
            ps, enc = map_instance(rng, n)
            mp = MapParams.from_params(ps)
            s, e = int(rng.integers(n)), int(rng.integers(n))
            sm = build_sampled_matrix(enc, mp, map_first(enc, mp), s, e, cfg)
            assert sm.check(s, e) == []
            assert sm.k == min(5, n)

    def test_full_sampling_equals_full_matrix(self):
        rng = np.random.default_rng(2)
        n = 9
        ps, enc = map_instance(rng, n)
        mp = MapParams.from_params(ps)
        cfg = TrainConfig(sample_k=n, norm_mode="row-wise")
        sm = build_sampled_matrix(enc, mp, map_first(enc, mp), 3, 5, cfg)
        np.testing.assert_allclose(sm.probs.data, map_full_matrix(enc, mp).data, atol=1e-12)

    def test_cells_at_512(self):
        assert sampled_cell_count(512, 20) == 400
        assert 512 * 512 / sampled_cell_count(512, 20) == pytest.approx(655.36)

    def test_sampled_rows_are_slices_of_full(self):
        rng = np.random.default_rng(3)
        ps, enc = map_instance(rng, 15)
        mp = MapParams.from_params(ps)
        sm = build_sampled_matrix(enc, mp, map_first(enc, mp), 4, 9, TrainConfig(sample_k=4))
        from mapspan.heads import map_full_logits
        full = map_full_logits(enc, mp).data
        for r, i in enumerate(sm.row_indices):
            assert np.array_equal(sm.logits.data[r], full[i, sm.col_indices[r]])


class TestLosses:
    def test_start_ln2(self):
        assert loss_start(Tensor([0.5, 0.25, 0.25]), 0).data == pytest.approx(math.log(2), abs=1e-15)

    def test_start_one_hot(self):
        assert loss_start(Tensor([0.0, 1.0, 0.0]), 1).data == 0.0

    def test_start_random_recomputation(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            p = rng.dirichlet(np.ones(7))
            t = int(rng.integers(7))
            assert float(loss_start(Tensor(p), t).data) == -math.log(p[t])

    def test_start_floor(self):
        events = []
        val = float(loss_start(Tensor([1.0, 0.0]), 1, events).data)
        assert math.isfinite(val) and val == pytest.approx(-math.log(1e-30))
        assert events

    @pytest.mark.parametrize("mode,expected", [("joint-flat", math.log(4)), ("row-wise", math.log(2))])
    def test_end_uniform(self, mode, expected):
        logits = Tensor(np.zeros((2, 2)))
        from mapspan.trainer import _normalize
        sm = SampledMatrix([0, 1], [[0, 1], [0, 1]], logits, _normalize(logits, mode), (1, 0), mode)
        assert float(loss_end_sampled(sm).data) == pytest.approx(expected, abs=1e-15)

    def test_total(self):
        assert total_loss(0.0, 0.0) == 0.0
        assert total_loss(math.log(2), math.log(2)) == math.log(2)
        a, b = 0.37, 1.9
        assert total_loss(2 * a, 2 * b) == 2 * total_loss(a, b)

    @pytest.mark.parametrize("mode", ["joint-flat", "row-wise"])
    @pytest.mark.parametrize("direction", ["forward", "backward"])
    def test_sampled_loss_gradient(self, mode, direction):
        rng = np.random.default_rng(5)
        ps, enc = map_instance(rng, 8, direction=direction)
        ps.add("H", enc.H.data)
        cfg = TrainConfig(sample_k=3, norm_mode=mode)
        mp0 = MapParams.from_params(ps, direction)
        e0 = EncoderOutput(ps["H"], enc.H_Q)
        frozen = build_sampled_matrix(e0, mp0, map_first(e0, mp0), 2, 6, cfg)

        def f(p):
            mp = MapParams.from_params(p, direction)
            e = EncoderOutput(p["H"], enc.H_Q)
            sm = build_sampled_matrix(e, mp, map_first(e, mp), 2, 6, cfg)
            # indices held fixed at their first sampled values
            assert sm.row_indices == frozen.row_indices and sm.col_indices == frozen.col_indices
            return total_loss(loss_start(map_first(e, mp), 2), loss_end_sampled(sm))

        assert ad.grad_check(f, ps) < 1e-4


class TestAdam:
    def test_zero_gradient(self):
        ps = ParameterSet({"w": np.array([1.0, -2.0])})
        adam_step(ps, {"w": np.zeros(2)}, AdamState(), TrainConfig())
        np.testing.assert_array_equal(ps["w"].data, [1.0, -2.0])

    def test_first_step(self):
        ps = ParameterSet({"w": np.zeros(1)})
        cfg = TrainConfig(learning_rate=1e-3)
        adam_step(ps, {"w": np.ones(1)}, AdamState(), cfg)
        assert ps["w"].data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(6)
            ps = ParameterSet({"w": rng.normal(size=(3, 2))})
            state = AdamState()
            for _ in range(10):
                adam_step(ps, {"w": np.sin(ps["w"].data)}, state, TrainConfig())
            return ps["w"].data

        assert np.array_equal(run(), run())

    def test_non_finite_gradient(self):
        ps = ParameterSet({"w": np.zeros(2)})
        with pytest.raises(TrainingError, match="'w'"):
            adam_step(ps, {"w": np.array([1.0, np.nan])}, AdamState(), TrainConfig())


def small_model(head="map", directions="forward", seed=0):
    data = generate_needle_task(12, (6, 10), (1, 3), vocab_size=8, seed=seed)
    vocab = Vocabulary.build(data)
    cfg = ModelConfig(head=head, encoder=EncoderConfig(vocab_size=len(vocab), d=8, embed=8, seed=seed),
                      directions=directions)
    return SpanModel.create(cfg, vocab), data


class TestTrainLoop:
    def test_one_row_per_step(self, tmp_path):
        model, data = small_model()
        res = train(model, data, TrainConfig(batch_size=5, epochs=2, sample_k=4))
        assert len(res.log) == 2 * math.ceil(12 / 5)
        assert [r["step"] for r in res.log] == list(range(1, 7))
        write_loss_csv(res.log, tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,L_s,L_e,L,wall_ms" and len(lines) == 7

    def test_reproducible(self):
        logs = []
        for _ in range(2):
            model, data = small_model()
            res = train(model, data, TrainConfig(batch_size=4, epochs=2, sample_k=3, seed=3))
            logs.append(res.losses())
        assert logs[0] == logs[1]

    @pytest.mark.parametrize("head", ["ind", "vcp"])
    def test_vector_heads_train(self, head):
        model, data = small_model(head)
        res = train(model, data, TrainConfig(batch_size=4, epochs=1, learning_rate=1e-2))
        assert all(math.isfinite(x) for x in res.losses())

    def test_both_directions_need_parameters(self):
        model, data = small_model()
        with pytest.raises(TrainingError):
            train(model, data, TrainConfig(directions="both"))

    def test_both_directions(self):
        model, data = small_model(directions="both")
        res = train(model, data, TrainConfig(directions="both", epochs=1, batch_size=6, sample_k=3))
        assert len(res.log) == 2

    def test_full_mode_refused_above_cap(self):
        model, data = small_model()
        with pytest.raises(TrainingError, match="refused"):
            train(model, data, TrainConfig(matrix_mode="full", max_sequence=4))

    def test_empty_data(self):
        model, _ = small_model()
        with pytest.raises(ValueError):
            train(model, [], TrainConfig())

    def test_invalid_config(self):
        for bad in ({"sample_k": 0}, {"learning_rate": 0.0}, {"norm_mode": "x"}, {"directions": "up"}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestProbe:
    def test_uniform_3x3(self):
        for cell in itertools.product(range(3), range(3)):
            rep = gradient_direction_probe(np.zeros((3, 3)), cell, lr=0.1)
            assert rep.probs_after[cell] > 1 / 9
            mask = np.ones((3, 3), bool)
            mask[cell] = False
            assert (rep.probs_after[mask] < 1 / 9).all()
            assert rep.ok

    def test_vector_gradient(self):
        rep = gradient_direction_probe(np.zeros(3), 0)
        np.testing.assert_allclose(rep.grad, [-2 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_unsampled_cells_get_zero_gradient(self):
        rng = np.random.default_rng(7)
        full = rng.normal(size=(6, 6)) * 0.1
        rows = [1, 3, 4]
        cols = [[0, 2, 5], [1, 2, 3], [0, 4, 5]]
        rep = gradient_direction_probe(None, (1, 1), context=(full, rows, cols))
        assert rep.unsampled_grad_max == 0.0
        assert rep.truth_increased

    def test_row_wise_only_touches_truth_row(self):
        rep = gradient_direction_probe(np.zeros((3, 3)), (2, 1), norm_mode="row-wise")
        np.testing.assert_array_equal(rep.grad[:2], 0.0)
        assert rep.ok

    def test_first_order_condition(self):
        """Non-truth cell j falls iff p_j + p_t exceeds the sum of squared probabilities."""
        rng = np.random.default_rng(8)
        agree = 0
        for _ in range(200):
            z = rng.normal(size=(4, 4)) * 2.0
            t = (int(rng.integers(4)), int(rng.integers(4)))
            rep = gradient_direction_probe(z, t, lr=1e-6)
            p = rep.probs_before
            predicted_up = (p + p[t] < (p * p).sum())
            predicted_up[t] = False
            observed_up = rep.probs_after > rep.probs_before
            observed_up[t] = False
            agree += np.array_equal(predicted_up, observed_up)
            assert rep.truth_increased
        assert agree == 200
