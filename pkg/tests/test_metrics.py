import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from fedgr_tools import metrics, nn
from fedgr_tools.datagen import ClientDataset, SampleSet
from fedgr_tools.utils import ParameterError, make_rng


def constant_model(d_in, n_classes, c):
    """Predicts class ``c`` for every input."""
    b = np.zeros(n_classes)
    b[c] = 1.0
    return nn.ModelParams.from_layers([(np.zeros((n_classes, d_in)), b)])


def linear_model(n_classes):
    """Identity head: predicts argmax of the features."""
    return nn.ModelParams.from_layers([(np.eye(n_classes), np.zeros(n_classes))])


class TestAccuracy(unittest.TestCase):
    def setUp(self) -> None:
        labels = np.repeat(np.arange(4), 5)
        X = np.eye(4)[labels] + 0.01 * make_rng(0).standard_normal((20, 4))
        self.test_set = SampleSet(X, labels, labels.copy(), np.arange(20))

    def test_constant_prediction(self):
        self.assertAlmostEqual(metrics.test_accuracy(constant_model(4, 4, 2), self.test_set), 0.25)

    def test_perfect_model(self):
        self.assertEqual(metrics.test_accuracy(linear_model(4), self.test_set), 1.0)

    def test_matches_per_sample_check(self):
        params = nn.init_params((4, 6, 4), make_rng(1))
        hits = 0
        for i in range(len(self.test_set)):
            hits += int(np.argmax(nn.forward(params, self.test_set.features[i]).logits) == self.test_set.true_labels[i])
        self.assertAlmostEqual(metrics.test_accuracy(params, self.test_set), hits / 20)

    def test_empty_test_set(self):
        empty = SampleSet(np.zeros((0, 4)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
        with self.assertRaises(ParameterError):
            metrics.test_accuracy(linear_model(4), empty)


class TestMemorization(unittest.TestCase):
    def setUp(self) -> None:
        X = np.eye(3)[[0, 1, 2, 0, 1, 2]]
        true = np.array([0, 1, 2, 0, 1, 2])
        self.X, self.true = X, true

    def client(self, given):
        return ClientDataset(self.X, np.asarray(given), self.true.copy(), np.arange(6), client_id=0)

    def test_no_noisy_samples(self):
        self.assertEqual(metrics.memorization_fraction(linear_model(3), [self.client(self.true)]), 0.0)

    def test_model_outputs_given_labels(self):
        given = np.array([1, 2, 0, 0, 1, 2])
        client = ClientDataset(np.eye(3)[given], given, self.true.copy(), np.arange(6), client_id=0)
        self.assertEqual(metrics.memorization_fraction(linear_model(3), [client]), 1.0)

    def test_half_memorized(self):
        # noisy samples 0..3; the model predicts the true class everywhere except samples 0 and 1
        given = np.array([1, 2, 0, 1, 1, 2])
        X = self.X.copy()
        X[0] = np.eye(3)[1]
        X[1] = np.eye(3)[2]
        client = ClientDataset(X, given, self.true.copy(), np.arange(6), client_id=0)
        self.assertEqual(int(client.noisy_mask.sum()), 4)
        self.assertEqual(metrics.memorization_fraction(linear_model(3), [client]), 0.5)


class TestSelection(unittest.TestCase):
    def setUp(self) -> None:
        true = np.zeros(10, dtype=int)
        given = true.copy()
        given[:3] = 1
        self.client = ClientDataset(np.zeros((10, 2)), given, true, np.arange(10), client_id=0)

    def test_perfect_sieve(self):
        self.assertEqual(metrics.selection_f1(~self.client.noisy_mask, self.client), (1.0, 1.0, 1.0))

    def test_everything_clean(self):
        p, r, f = metrics.selection_f1(np.ones(10, bool), self.client)
        self.assertAlmostEqual(p, 0.7)
        self.assertEqual(r, 1.0)
        self.assertAlmostEqual(f, 0.8235, places=4)

    def test_no_clean_predictions(self):
        self.assertEqual(metrics.selection_f1(np.zeros(10, bool), self.client)[2], 0.0)


class TestPearson(unittest.TestCase):
    def test_values(self):
        truths = np.array([0.1, 0.4, 0.2, 0.8])
        self.assertAlmostEqual(metrics.noise_ratio_pearson(truths, truths), 1.0)
        self.assertAlmostEqual(metrics.noise_ratio_pearson(1 - truths, truths), -1.0)
        self.assertAlmostEqual(metrics.noise_ratio_pearson([0.1, 0.2, 0.3], [0.2, 0.3, 0.5]), 0.9820, places=4)

    def test_undefined(self):
        self.assertTrue(np.isnan(metrics.noise_ratio_pearson([0.1, 0.2], [0.3, 0.3])))
        self.assertTrue(np.isnan(metrics.noise_ratio_pearson([0.1], [0.3])))


class TestReports(unittest.TestCase):
    def setUp(self) -> None:
        self.reports = [
            metrics.RoundReport(
                t=t,
                test_accuracy=t / 20,
                memorization_fraction=0.1,
                participants=(0, 1),
                clients=[metrics.ClientReport(client_id=k, rho_true=0.2 * k, refined_fraction=1.0) for k in (0, 1)],
            )
            for t in range(15)
        ]

    def test_last10_mean(self):
        self.assertAlmostEqual(metrics.last10_mean_accuracy(self.reports), np.mean(np.arange(5, 15) / 20))
        self.assertAlmostEqual(metrics.last10_mean_accuracy(self.reports[:3]), np.mean([0, 0.05, 0.1]))

    def test_csv_columns(self):
        summary = metrics.summary_row(self.reports, float("nan"), 1, "abc", "fedgr")
        with tempfile.TemporaryDirectory() as tmp:
            metrics.write_run_csvs(tmp, self.reports, summary)
            rounds = pd.read_csv(os.path.join(tmp, "rounds.csv"))
            clients = pd.read_csv(os.path.join(tmp, "clients.csv"))
            memorization = pd.read_csv(os.path.join(tmp, "memorization.csv"))
            out = pd.read_csv(os.path.join(tmp, "summary.csv"))
        self.assertEqual(list(rounds.columns), ["t", "test_accuracy", "memorization_fraction", "n_participants"])
        self.assertEqual(
            list(clients.columns),
            ["t", "client_id", "r_k_est", "rho_true", "precision", "recall", "f1", "refined_fraction"],
        )
        self.assertEqual(list(memorization.columns), ["t", "client_id", "local_memorization", "global_memorization"])
        self.assertEqual(list(out.columns[:4]), ["last10_mean_acc", "pearson", "seed", "config_hash"])
        self.assertEqual(len(rounds), 15)
        self.assertEqual(len(clients), 30)
        self.assertTrue(np.isnan(out["pearson"][0]))

    def test_seed_summary(self):
        rows = [metrics.summary_row(self.reports[: 10 + s], 0.9, s, "abc", "fedgr") for s in range(3)]
        table = metrics.summarize_seeds(rows)
        self.assertEqual(table["n_seeds"][0], 3)
        self.assertAlmostEqual(table["pearson_mean"][0], 0.9)


if __name__ == "__main__":
    unittest.main()
