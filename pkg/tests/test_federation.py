import unittest

import numpy as np

from fedgr_tools import datagen, federation, nn, train
from fedgr_tools.config import AblationConfig, ProtocolConfig
from fedgr_tools.utils import ProtocolError, ShapeError, make_rng


def make_data(K=4, n_samples=240, n_classes=3, phi=0.5, rho=0.4, seed=0):
    samples, test = datagen.generate_dataset(n_classes, n_samples, 4, 4.0, seed=seed, n_test=60)
    clients = datagen.partition_iid(samples, K, seed=seed)
    if phi > 0:
        clients = datagen.inject_noise(clients, datagen.NoiseConfig(phi=phi, rho_min=rho, rho_max=rho, seed=seed))
    return clients, test


def small_config(**kw):
    base = dict(
        n_clients=4, sample_ratio=0.5, rounds=4, alpha=2, delta=1, hidden=8, batch_size=20, local_epochs=1, seed=5
    )
    base.update(kw)
    return ProtocolConfig(**base)


class TestAggregate(unittest.TestCase):
    def setUp(self) -> None:
        self.shape_spec = (2, 3, 2)
        self.p = nn.init_params(self.shape_spec, make_rng(0))

    def test_single_client(self):
        np.testing.assert_array_equal(federation.aggregate([(self.p, 17)]).flat, self.p.flat)

    def test_opposite_models_cancel(self):
        out = federation.aggregate([(self.p, 50), (-self.p, 50)])
        np.testing.assert_array_equal(out.flat, np.zeros_like(self.p.flat))

    def test_weighted_mean(self):
        ones = nn.ModelParams(np.ones(self.p.param_count), self.shape_spec)
        threes = nn.ModelParams(np.full(self.p.param_count, 3.0), self.shape_spec)
        out = federation.aggregate([(ones, 100), (threes, 300)])
        np.testing.assert_allclose(out.flat, 2.5, rtol=0, atol=1e-12)

    def test_errors(self):
        with self.assertRaises(ProtocolError):
            federation.aggregate([])
        other = nn.init_params((2, 4, 2), make_rng(0))
        with self.assertRaises(ShapeError):
            federation.aggregate([(self.p, 1), (other, 1)])

    def test_input_order(self):
        rng = make_rng(1)
        local = [(nn.init_params(self.shape_spec, rng), n) for n in (13, 40, 7, 25)]
        forward = federation.aggregate(local)
        backward = federation.aggregate(local[::-1])
        np.testing.assert_allclose(forward.flat, backward.flat, rtol=1e-12, atol=1e-15)


class TestSampling(unittest.TestCase):
    def setUp(self) -> None:
        datasets, self.test = make_data(K=10, n_samples=300, phi=0.0)
        self.config = small_config(n_clients=10, sample_ratio=0.2, rounds=20, alpha=10)
        self.clients = train.make_clients(datasets, 3, self.config)

    def test_phase_one_cycles_without_replacement(self):
        fed = federation.Federation(self.clients, self.test, self.config)
        seen = []
        for _ in range(5):
            seen += fed.sample_clients()
        self.assertEqual(sorted(seen), list(range(10)))

    def test_cycle_refill_when_short(self):
        config = small_config(n_clients=10, sample_ratio=0.3, rounds=20, alpha=10)
        fed = federation.Federation(self.clients, self.test, config)
        draws = [fed.sample_clients() for _ in range(4)]
        self.assertTrue(all(len(d) == 3 for d in draws))
        self.assertTrue(all(len(set(d)) == 3 for d in draws))
        # the fourth draw finishes the first pass with the one client left
        first_pass = set(sum(draws[:3], []))
        self.assertEqual(len(first_pass), 9)
        self.assertIn((set(range(10)) - first_pass).pop(), draws[3])

    def test_full_participation(self):
        config = small_config(n_clients=10, sample_ratio=1.0, rounds=20, alpha=1)
        fed = federation.Federation(self.clients, self.test, config)
        for t in range(3):
            fed.t = t
            self.assertEqual(fed.sample_clients(), list(range(10)))

    def test_schedule_is_reproducible(self):
        a = federation.Federation(self.clients, self.test, self.config)
        b = federation.Federation(self.clients, self.test, self.config)
        for t in range(15):
            a.t = b.t = t
            self.assertEqual(a.sample_clients(), b.sample_clients())

    def test_dropped_clients(self):
        config = small_config(n_clients=10, sample_ratio=1.0, drop_probability=0.5)
        fed = federation.Federation(self.clients, self.test, config)
        kept = fed.drop_clients(list(range(10)))
        self.assertLess(len(kept), 10)
        self.assertTrue(set(kept) <= set(range(10)))


class TestRun(unittest.TestCase):
    def setUp(self) -> None:
        self.datasets, self.test = make_data()

    def test_reports_and_sieve_freeze(self):
        config = small_config(gmm_min_separation=0.0)
        fed = federation.fedgr(self.datasets, self.test, 3, config)
        self.assertEqual(len(fed.reports), config.rounds)
        self.assertEqual([r.t for r in fed.reports], list(range(config.rounds)))
        self.assertIsNotNone(fed.frozen_sieve)
        self.assertEqual(fed.frozen_sieve.client_ids, [0, 1, 2, 3])
        for report in fed.reports:
            self.assertEqual(report.n_participants, 2)
            self.assertTrue(0.0 <= report.test_accuracy <= 1.0)
            for c in report.clients:
                self.assertFalse(np.isnan(c.r_k_est))

    def test_ledger_stops_after_sniffing(self):
        config = small_config(rounds=6, alpha=2)
        fed = federation.fedgr(self.datasets, self.test, 3, config)
        self.assertEqual(sum(fed.ledger.participations(k) for k in range(4)), 4)

    def test_empty_round_keeps_global_model(self):
        config = small_config(drop_probability=0.999999)
        fed = federation.Federation(train.make_clients(self.datasets, 3, config), self.test, config)
        before = fed.global_params.flat.copy()
        with self.assertLogs("fedgr_tools.federation", level="WARNING"):
            report = fed.run_round()
        self.assertEqual(report.n_participants, 0)
        np.testing.assert_array_equal(fed.global_params.flat, before)

    def test_run_past_the_end(self):
        config = small_config(rounds=1, alpha=1)
        fed = federation.fedgr(self.datasets, self.test, 3, config)
        with self.assertRaises(ProtocolError):
            fed.run_round()

    def test_degenerate_fedgr_equals_fedavg(self):
        config = small_config(rounds=20, alpha=20, delta=0, lambda_b=0.0, lambda_r=0.0, epsilon=1.0)
        a = federation.fedgr(self.datasets, self.test, 3, config)
        b = federation.fedavg(self.datasets, self.test, 3, config)
        np.testing.assert_array_equal(a.global_params.flat, b.global_params.flat)
        self.assertEqual([r.test_accuracy for r in a.reports], [r.test_accuracy for r in b.reports])
        self.assertEqual([r.participants for r in a.reports], [r.participants for r in b.reports])

    def test_seeded_runs_are_identical(self):
        config = small_config()
        a = federation.run_fedavg_baseline(self.datasets, self.test, 3, config)
        b = federation.run_fedavg_baseline(self.datasets, self.test, 3, config)
        self.assertEqual([r.test_accuracy for r in a], [r.test_accuracy for r in b])

    def test_per_client_sieving(self):
        config = small_config()
        fed = federation.fedgr(self.datasets, self.test, 3, config, AblationConfig(disable_cs=True))
        self.assertEqual(len(fed.reports), config.rounds)
        self.assertIsNotNone(fed.frozen_sieve)

    def test_method_registry(self):
        self.assertEqual(sorted(federation.methods), ["central", "fedavg", "fedgr"])
        with self.assertRaises(ProtocolError):
            federation.run_method("fedprox", self.datasets, self.test, 3, small_config())

    def test_client_completion_order(self):
        class ReversedCompletion(federation.Federation):
            def drop_clients(self, selected):
                return list(reversed(super().drop_clients(selected)))

        config = small_config(sample_ratio=0.75)
        a = federation.Federation(train.make_clients(self.datasets, 3, config), self.test, config)
        b = ReversedCompletion(train.make_clients(self.datasets, 3, config), self.test, config)
        a.run(progress=False)
        b.run(progress=False)
        np.testing.assert_array_equal(a.global_params.flat, b.global_params.flat)
        self.assertEqual([r.test_accuracy for r in a.reports], [r.test_accuracy for r in b.reports])
        self.assertEqual(a.frozen_sieve.noise_ratio, b.frozen_sieve.noise_ratio)

    def test_single_sample_clients(self):
        samples, test = datagen.generate_dataset(3, 60, 4, 4.0, seed=0, n_test=30)
        datasets = datagen.partition_iid(samples, 60, seed=0)
        config = small_config(n_clients=60, sample_ratio=0.01, rounds=3, alpha=2)
        fed = federation.fedgr(datasets, test, 3, config)
        self.assertEqual(len(fed.reports), 3)
        self.assertTrue(all(r.n_participants == 1 for r in fed.reports))
        self.assertEqual(len(fed.frozen_sieve.client_ids), 2)

    def test_no_separating_fit_leaves_clients_unsieved(self):
        config = small_config(gmm_min_separation=1e9)
        with self.assertLogs("fedgr_tools.noise_model", level="WARNING"):
            fed = federation.fedgr(self.datasets, self.test, 3, config)
        self.assertEqual(len(fed.reports), config.rounds)
        self.assertEqual(fed.frozen_sieve.client_ids, [])
        for report in fed.reports:
            self.assertTrue(all(np.isnan(c.r_k_est) for c in report.clients))

    def test_fedavg_uses_phase_one_cycle(self):
        config = small_config(rounds=4, alpha=2)
        fed = federation.fedavg(self.datasets, self.test, 3, config)
        first_pass = fed.reports[0].participants + fed.reports[1].participants
        self.assertEqual(sorted(first_pass), [0, 1, 2, 3])

    def test_central_training(self):
        config = small_config(rounds=3)
        fed = federation.central(self.datasets, self.test, 3, config)
        merged = datagen.merge_clients(self.datasets)
        self.assertEqual(len(fed.reports), 3)
        self.assertEqual(fed.client_ids, [0])
        self.assertEqual(fed.clients[0].n_k, sum(d.n_k for d in self.datasets))
        for report in fed.reports:
            self.assertEqual(report.participants, (0,))
            self.assertEqual(report.clients[0].rho_true, merged.true_noise_ratio)
            self.assertTrue(np.isnan(report.clients[0].r_k_est))
            self.assertTrue(0.0 <= report.memorization_fraction <= 1.0)
        again = federation.run_method("central", self.datasets, self.test, 3, config)
        np.testing.assert_array_equal(fed.global_params.flat, again.global_params.flat)


if __name__ == "__main__":
    unittest.main()
