import numpy as np
import pytest
import torch

from noisemark.core import NonSimplexError
from noisemark.models import DTYPE, generator_from_seed
from noisemark.targets import (
    ContributionScorer,
    TargetStore,
    aggregate_targets,
    contribution_scores,
    cosine_similarity_matrix,
    export_targets_csv,
    knn_matrix,
    knn_neighbors,
)


def brute_force_knn(sim_row, k, self_index=None):
    n = len(sim_row)
    order = sorted(range(n), key=lambda j: (-sim_row[j], j))
    if self_index is not None:
        order = [j for j in order if j != self_index]
    return order[:k]


class TestCosineSimilarity:
    def test_known_pair(self):
        s = cosine_similarity_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert s[0, 1] == pytest.approx(0.8, abs=1e-12)
        assert s[1, 0] == pytest.approx(0.8, abs=1e-12)

    def test_diagonal_and_symmetry(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((12, 5))
        s = cosine_similarity_matrix(f)
        assert np.allclose(np.diag(s), 1.0, atol=1e-9)
        assert np.allclose(s, s.T)
        assert s.min() >= -1.0 and s.max() <= 1.0

    def test_opposite_vectors(self):
        s = cosine_similarity_matrix(np.array([[1.0, 0.0], [-2.0, 0.0]]))
        assert s[0, 1] == pytest.approx(-1.0)

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_similarity_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestKnn:
    def test_example_row(self):
        row = np.array([1.0, 0.9, 0.5, 0.1])
        got = knn_neighbors(row, 2, self_index=0)
        assert sorted(got.tolist()) == [1, 2]

    def test_tie_breaks_to_lower_index(self):
        row = np.array([0.3, 0.7, 0.7, 0.7])
        got = knn_neighbors(row, 2, self_index=0)
        assert got.tolist() == [1, 2]

    def test_k_out_of_range(self):
        row = np.array([1.0, 0.5, 0.2])
        with pytest.raises(ValueError):
            knn_neighbors(row, 3, self_index=0)
        with pytest.raises(ValueError):
            knn_neighbors(row, 0, self_index=0)
        knn_neighbors(row, 3, self_index=None)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(3, 33))
            f = rng.standard_normal((n, int(rng.integers(2, 6))))
            if rng.random() < 0.5:
                f = np.round(f, 1)  # force ties
                f[np.linalg.norm(f, axis=1) < 1e-9] += 1.0
            s = cosine_similarity_matrix(f)
            k = int(rng.integers(1, n))
            got = knn_matrix(s, k)
            for i in range(n):
                assert got[i].tolist() == brute_force_knn(s[i], k, self_index=i)

    def test_matrix_requires_square(self):
        with pytest.raises(ValueError):
            knn_matrix(np.zeros((3, 4)), 1)


class TestContributionScorer:
    def test_scores_in_unit_interval(self):
        scorer = ContributionScorer(6, generator_from_seed(0))
        f = torch.randn(10, 6, dtype=DTYPE)
        idx = torch.randint(0, 10, (10, 3))
        scores = scorer.score_neighbors(f, idx)
        assert scores.shape == (10, 3)
        assert torch.all(scores > 0) and torch.all(scores < 1)

    def test_zeroed_final_layer_gives_half(self):
        scorer = ContributionScorer(6, generator_from_seed(0))
        with torch.no_grad():
            scorer.pair_score[-1].weight.zero_()
            scorer.pair_score[-1].bias.zero_()
        f = torch.randn(5, 6, dtype=DTYPE)
        scores = contribution_scores(scorer, f, np.array([[1, 2], [0, 2], [0, 1], [4, 0], [3, 1]]))
        assert torch.allclose(scores, torch.full_like(scores, 0.5))

    def test_saturated_sigmoid_stays_positive(self):
        # drive the final linear layer hard negative; raw sigmoid underflows
        # to 0.0 in float64 below roughly -745 and the floor must catch it
        scorer = ContributionScorer(3, generator_from_seed(0))
        with torch.no_grad():
            scorer.pair_score[-1].weight.zero_()
            scorer.pair_score[-1].bias.fill_(-1000.0)
        f = torch.randn(4, 3, dtype=DTYPE)
        scores = scorer.score_neighbors(f, torch.tensor([[1], [0], [3], [2]]))
        assert torch.all(scores > 0)
        assert torch.all(scores <= ContributionScorer.SCORE_FLOOR)

    def test_deterministic_and_seeded(self):
        a = ContributionScorer(4, generator_from_seed(5))
        b = ContributionScorer(4, generator_from_seed(5))
        f = torch.randn(6, 4, dtype=DTYPE)
        idx = torch.randint(0, 6, (6, 2))
        assert torch.equal(a.score_neighbors(f, idx), b.score_neighbors(f, idx))

    def test_pair_scores_match_score_neighbors(self):
        scorer = ContributionScorer(4, generator_from_seed(2))
        f = torch.randn(6, 4, dtype=DTYPE)
        idx = torch.tensor([[1, 2], [3, 0], [5, 4], [2, 2], [0, 1], [4, 3]])
        grid = scorer.score_neighbors(f, idx)
        anchors = torch.arange(6).repeat_interleave(2)
        flat = scorer.pair_scores(f, anchors, idx.reshape(-1))
        assert torch.allclose(grid.reshape(-1), flat)


class TestAggregateTargets:
    def test_single_neighbor_copies_prediction(self):
        preds = torch.tensor([[0.2, 0.8], [0.9, 0.1]], dtype=DTYPE)
        nb = np.array([[1], [0]])
        sc = torch.tensor([[0.7], [0.3]], dtype=DTYPE)
        d = aggregate_targets(preds, nb, sc)
        assert torch.allclose(d[0], preds[1])
        assert torch.allclose(d[1], preds[0])

    def test_uniform_scores_give_plain_mean(self):
        preds = torch.tensor([[0.2, 0.8], [0.6, 0.4], [1.0, 0.0]], dtype=DTYPE)
        nb = np.array([[1, 2], [0, 2], [0, 1]])
        sc = torch.full((3, 2), 0.5, dtype=DTYPE)
        d = aggregate_targets(preds, nb, sc)
        assert torch.allclose(d[0], (preds[1] + preds[2]) / 2)

    def test_two_neighbor_hand_oracle(self):
        # single space, scores (0.8, 0.2), neighbor preds (0.1, 0.9) and (0.5, 0.5)
        preds = torch.tensor([[0.3, 0.7], [0.1, 0.9], [0.5, 0.5]], dtype=DTYPE)
        nb = np.array([[1, 2], [0, 2], [0, 1]])
        sc = torch.tensor([[0.8, 0.2], [0.5, 0.5], [0.5, 0.5]], dtype=DTYPE)
        d = aggregate_targets(preds, nb, sc)
        expect0 = (0.8 * 0.1 + 0.2 * 0.5) / 1.0, (0.8 * 0.9 + 0.2 * 0.5) / 1.0
        assert d[0, 0].item() == pytest.approx(expect0[0], abs=1e-12)
        assert d[0, 1].item() == pytest.approx(expect0[1], abs=1e-12)

    def test_dual_space_blend(self):
        preds = torch.tensor([[0.2, 0.8], [1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
        nb_u = np.array([[1], [0], [0]])
        nb_v = np.array([[2], [2], [1]])
        ones = torch.ones((3, 1), dtype=DTYPE)
        d = aggregate_targets(preds, nb_u, ones, nb_v, ones)
        assert torch.allclose(d[0], 0.5 * (preds[1] + preds[2]))

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n, c, k = 6, 4, 3
            preds = torch.tensor(rng.dirichlet(np.ones(c), size=n))
            nb = np.stack([rng.choice(n, size=k, replace=False) for _ in range(n)])
            sc = torch.tensor(rng.random((n, k)) * 0.99 + 0.005)
            d = aggregate_targets(preds, nb, sc)
            sums = d.sum(dim=1)
            assert torch.allclose(sums, torch.ones(n, dtype=DTYPE), atol=1e-9)
            assert torch.all(d >= 0)

    def test_gradient_reaches_scores_not_preds(self):
        preds = torch.tensor([[0.2, 0.8], [0.6, 0.4]], dtype=DTYPE, requires_grad=True)
        sc = torch.tensor([[0.5], [0.5]], dtype=DTYPE, requires_grad=True)
        d = aggregate_targets(preds, np.array([[1], [0]]), sc)
        d.sum().backward()
        assert preds.grad is None or torch.all(preds.grad == 0)

    def test_nonpositive_scores_rejected(self):
        preds = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=DTYPE)
        with pytest.raises(ValueError, match="positive"):
            aggregate_targets(preds, np.array([[1], [0]]),
                              torch.tensor([[0.0], [0.5]], dtype=DTYPE))

    def test_empty_neighbors_rejected(self):
        preds = torch.tensor([[0.5, 0.5]], dtype=DTYPE)
        with pytest.raises(ValueError):
            aggregate_targets(preds, np.zeros((1, 0), dtype=int),
                              torch.zeros((1, 0), dtype=DTYPE))


class TestTargetStore:
    def test_smoothed_init(self):
        store = TargetStore.from_labels([10, 11], [0, 1], num_classes=4)
        assert store.get([10])[0, 0] == pytest.approx(0.95 + 0.05 / 4)
        assert store.get([11])[0, 0] == pytest.approx(0.05 / 4)
        assert store.epoch == 0

    def test_ema_blend(self):
        store = TargetStore([1], np.array([[1.0, 0.0]]))
        store.ema_update({1: np.array([0.5, 0.5])}, omega=0.9)
        got = store.get([1])[0]
        assert got == pytest.approx([0.95, 0.05])
        assert store.epoch == 1

    def test_repeated_ema_closed_form(self):
        # constant fresh target a: after e epochs, w^e * t0 + (1 - w^e) * a
        omega = 0.9
        t0 = np.array([1.0, 0.0])
        a = np.array([0.25, 0.75])
        store = TargetStore([0], t0[None, :])
        for e in range(1, 30):
            store.ema_update({0: a}, omega)
            expect = omega ** e * t0 + (1 - omega ** e) * a
            assert store.get([0])[0] == pytest.approx(expect, abs=1e-12)

    def test_untouched_rows_keep_previous(self):
        store = TargetStore.from_labels([0, 1], [0, 1], num_classes=2)
        before = store.get([1]).copy()
        store.ema_update({0: np.array([0.5, 0.5])}, omega=0.5)
        assert np.array_equal(store.get([1]), before)
        assert store.epoch == 1

    def test_unknown_id(self):
        store = TargetStore.from_labels([0], [0], num_classes=2)
        with pytest.raises(KeyError, match="unknown sample id"):
            store.get([5])
        with pytest.raises(KeyError, match="unknown sample id"):
            store.ema_update({5: np.array([0.5, 0.5])}, omega=0.5)

    def test_invalid_fresh_target_rejected(self):
        store = TargetStore.from_labels([0], [0], num_classes=2)
        with pytest.raises(NonSimplexError):
            store.ema_update({0: np.array([0.9, 0.3])}, omega=0.5)

    def test_simplex_preserved_many_epochs(self):
        rng = np.random.default_rng(7)
        store = TargetStore.from_labels(range(6), rng.integers(0, 3, 6), num_classes=3)
        for _ in range(500):
            fresh = {int(i): rng.dirichlet(np.ones(3)) for i in rng.choice(6, 4, replace=False)}
            store.ema_update(fresh, omega=float(rng.uniform(0.0, 0.99)))
        sums = store.distributions.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-6)
        assert np.all(store.distributions >= 0)

    def test_state_round_trip(self):
        store = TargetStore.from_labels([3, 4], [1, 0], num_classes=2)
        store.ema_update({3: np.array([0.4, 0.6])}, 0.9)
        back = TargetStore.from_state(store.state())
        assert np.array_equal(back.distributions, store.distributions)
        assert back.epoch == store.epoch

    def test_export_csv(self, tmp_path):
        store = TargetStore.from_labels([7, 8], [0, 1], num_classes=3)
        path = tmp_path / "targets.csv"
        export_targets_csv(store, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "id,d_1,d_2,d_3"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "7"
        assert float(first[1]) == pytest.approx(0.95 + 0.05 / 3)
