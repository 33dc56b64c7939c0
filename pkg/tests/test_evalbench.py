import numpy as np
import pytest

from regiontok.dataplane import TokenSet
from regiontok.errors import DegenerateDataError, ValidationError
from regiontok.evalbench import (analytic_peak_bytes, ari, average_precision,
                                 bench_forward, fit_r2, groups_to_labels,
                                 map_mrp, miou, paint_predictions,
                                 probe_loss_and_grad, retrieve,
                                 retrieval_precision_at, train_probe)
from regiontok.model import RenConfig, init_params
from regiontok.prompting import SuperpixelMap


class TestProbe:
    def test_separable_data_reaches_full_accuracy(self, rng):
        x = np.concatenate([rng.normal(size=(40, 4)) + 4,
                            rng.normal(size=(40, 4)) - 4])
        y = np.array([0] * 40 + [1] * 40)
        probe = train_probe(x, y, epochs=200, lr=0.5)
        assert (probe.predict(x) == y).mean() == 1.0

    def test_shuffled_labels_chance_level(self, rng):
        x = rng.normal(size=(300, 6))
        y = rng.integers(0, 3, size=300)
        probe = train_probe(x, y, epochs=100, lr=0.2)
        acc = (probe.predict(x) == y).mean()
        assert abs(acc - 1 / 3) < 0.10 + 0.1  # chance plus optimization slack

    def test_single_class_rejected(self, rng):
        with pytest.raises(DegenerateDataError):
            train_probe(rng.normal(size=(10, 4)), np.zeros(10, dtype=int))

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.normal(size=(12, 5))
        y = rng.integers(0, 3, size=12)
        w = rng.normal(size=(3, 5)) * 0.1
        b = rng.normal(size=3) * 0.1
        _, dw, db = probe_loss_and_grad(w, b, x, y)
        eps = 1e-6
        for i in range(3):
            for j in range(5):
                up = w.copy(); up[i, j] += eps
                down = w.copy(); down[i, j] -= eps
                fd = (probe_loss_and_grad(up, b, x, y)[0]
                      - probe_loss_and_grad(down, b, x, y)[0]) / (2 * eps)
                assert abs(dw[i, j] - fd) < 1e-4
            up = b.copy(); up[i] += eps
            down = b.copy(); down[i] -= eps
            fd = (probe_loss_and_grad(w, up, x, y)[0]
                  - probe_loss_and_grad(w, down, x, y)[0]) / (2 * eps)
            assert abs(db[i] - fd) < 1e-4

    def test_non_contiguous_class_labels(self, rng):
        x = np.concatenate([rng.normal(size=(20, 3)) + 3,
                            rng.normal(size=(20, 3)) - 3])
        y = np.array([7] * 20 + [2] * 20)
        probe = train_probe(x, y, epochs=150, lr=0.5)
        assert set(probe.predict(x)) <= {2, 7}
        assert (probe.predict(x) == y).mean() == 1.0


class TestPaintAndMiou:
    def test_perfect_singleton_superpixels(self):
        labels = np.arange(4, dtype=np.int32).reshape(2, 2)
        sp = SuperpixelMap(width=2, height=2, labels=labels,
                           centers=np.zeros((4, 2)) + 0.25, count=4)
        gt = np.array([[0, 1], [2, 3]])
        pred = paint_predictions(np.array([0, 1, 2, 3]), superpixels=sp)
        np.testing.assert_array_equal(pred, gt)
        assert miou(pred, gt) == 1.0

    def test_complement_binary_is_zero(self):
        gt = np.array([[0, 0], [1, 1]])
        assert miou(1 - gt, gt) == 0.0

    def test_three_class_matches_confusion_oracle(self, rng):
        pred = rng.integers(0, 3, size=(16, 16))
        gt = rng.integers(0, 3, size=(16, 16))
        got = miou(pred, gt)
        ious = []
        for cls in range(3):
            inter = ((pred == cls) & (gt == cls)).sum()
            union = ((pred == cls) | (gt == cls)).sum()
            if union:
                ious.append(inter / union)
        assert got == pytest.approx(np.mean(ious))

    def test_grid_painting(self):
        pred = paint_predictions(np.array([5, 6, 7, 8]), patch_grid=(2, 2),
                                 image_size=(4, 4))
        np.testing.assert_array_equal(pred[:2, :2], 5)
        np.testing.assert_array_equal(pred[:2, 2:], 6)
        np.testing.assert_array_equal(pred[2:, :2], 7)
        np.testing.assert_array_equal(pred[2:, 2:], 8)

    def test_relabeling_symmetry(self, rng):
        pred = rng.integers(0, 3, size=(8, 8))
        gt = rng.integers(0, 3, size=(8, 8))
        relabel = {0: 2, 1: 0, 2: 1}
        pred2 = np.vectorize(relabel.get)(pred)
        gt2 = np.vectorize(relabel.get)(gt)
        assert miou(pred, gt) == pytest.approx(miou(pred2, gt2))


def _db_from_tokens(token_rows):
    return [TokenSet(prompts=np.full((row.shape[0], 2), 0.5, np.float32),
                     ren=row.astype(np.float32), aligned=row.astype(np.float32))
            for row in token_rows]


class TestRetrieval:
    def test_single_relevant_database(self, rng):
        db = _db_from_tokens([rng.normal(size=(3, 4))])
        ranking = [i for i, _ in retrieve(rng.normal(size=4), db)]
        assert average_precision(ranking, {0}) == 1.0

    def test_hand_computed_ap(self):
        # relevant items at ranks 1 and 3 of 4: AP = (1/1 + 2/3)/2 = 5/6
        assert average_precision([7, 3, 9, 5], {7, 9}) == pytest.approx(5 / 6)

    def test_exact_copy_ranks_first(self, rng):
        rows = [rng.normal(size=(4, 6)) for _ in range(5)]
        db = _db_from_tokens(rows)
        query = rows[3][2]
        ranking = retrieve(query, db)
        assert ranking[0][0] == 3

    def test_tie_breaks_ascending_id(self):
        token = np.ones((1, 4))
        db = _db_from_tokens([token, token, token])
        ranking = [i for i, _ in retrieve(np.ones(4), db)]
        assert ranking == [0, 1, 2]

    def test_map_mrp(self):
        rankings = [[0, 1, 2, 3], [2, 0, 1, 3]]
        relevance = [{0}, {0, 3}]
        m, rp = map_mrp(rankings, relevance, k=2)
        ap2 = (1 / 2 + 2 / 4) / 2
        assert m == pytest.approx((1.0 + ap2) / 2)
        assert rp == pytest.approx((1.0 + 0.5) / 2)

    def test_mrp_k_smaller_than_relevant(self):
        assert retrieval_precision_at([0, 1, 2], {0, 1, 2}, k=2) == 1.0

    def test_empty_database_rejected(self, rng):
        with pytest.raises(ValidationError):
            retrieve(rng.normal(size=4), [])


class TestAri:
    def test_identical_partitions(self):
        labels = np.array([0, 0, 1, 1, 2])
        assert ari(labels, labels) == 1.0

    def test_singletons_vs_one_cluster(self):
        assert ari(np.arange(4), np.zeros(4)) == 0.0

    def test_matches_pair_counting_oracle(self, rng):
        for _ in range(20):
            a = rng.integers(0, 3, size=8)
            b = rng.integers(0, 3, size=8)
            got = ari(a, b)
            # brute force over all C(8,2) pairs
            both = same_a = same_b = 0
            n_pairs = 0
            for i in range(8):
                for j in range(i + 1, 8):
                    n_pairs += 1
                    sa = a[i] == a[j]
                    sb = b[i] == b[j]
                    same_a += sa
                    same_b += sb
                    both += sa and sb
            expected_index = same_a * same_b / n_pairs
            max_index = (same_a + same_b) / 2
            if max_index == expected_index:
                want = 1.0 if both == expected_index else 0.0
            else:
                want = (both - expected_index) / (max_index - expected_index)
            assert got == pytest.approx(want)

    def test_label_values_irrelevant(self, rng):
        a = rng.integers(0, 3, size=10)
        b = rng.integers(0, 3, size=10)
        assert ari(a, b) == pytest.approx(ari(a + 100, b * 7))

    def test_groups_to_labels(self):
        labels = groups_to_labels([[0, 2], [3]], 5)
        assert labels[0] == labels[2]
        assert len({labels[1], labels[3], labels[4], labels[0]}) == 4


class TestBench:
    def test_smoke_and_linearity_fields(self):
        params = init_params(0, RenConfig(d_model=16, n_blocks=2, n_heads=4,
                                          encoder_dim=16))
        reports = bench_forward(params, [8, 16], h_patches=6, w_patches=6,
                                runs=3, warmup=1)
        assert [r.prompts for r in reports] == [8, 16]
        for r in reports:
            assert r.mean_s > 0 and r.tokens_per_s > 0
            assert r.agg_mean_s is not None and r.agg_mean_s >= 0
            assert r.peak_bytes_analytic > 0

    def test_fit_r2_exact_line(self):
        assert fit_r2([1, 2, 3], [2.0, 4.0, 6.0]) == pytest.approx(1.0)

    def test_analytic_peak_grows_with_prompts(self):
        cfg = RenConfig(d_model=32, n_blocks=4, n_heads=8, encoder_dim=32)
        small = analytic_peak_bytes(256, 1369, cfg)
        big = analytic_peak_bytes(2048, 1369, cfg)
        assert big > small
