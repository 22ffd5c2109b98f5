"""Desk-scale robustness runs. These take minutes; set FEDGR_SLOW_TESTS=1 to run them."""
import dataclasses
import os
import unittest

import numpy as np

from fedgr_tools import cli
from fedgr_tools.config import AblationConfig, RunConfig, with_overrides

SLOW = os.environ.get("FEDGR_SLOW_TESTS") == "1"
SEEDS = (1, 13, 42)

ABLATIONS = ["disable_cs", "disable_lr", "disable_b", "disable_r", "disable_strong_aug"]


def benchmark_config(method="fedgr", **ablation):
    cfg = RunConfig()
    return with_overrides(
        cfg,
        data={"n_classes": 10, "d_in": 16, "n_samples": 5000, "n_test": 1000, "partition": "iid"},
        noise={"phi": 1.0, "rho_min": 0.5, "rho_max": 1.0, "noise_type": "sym"},
        protocol={"n_clients": 20, "rounds": 150, "sample_ratio": 0.2},
        ablation=ablation,
        run={"method": method, "seeds": SEEDS},
    )


class TestAblationConfigs(unittest.TestCase):
    def test_only_the_flag_differs(self):
        full = benchmark_config()
        for flag in ABLATIONS:
            variant = benchmark_config(**{flag: True})
            self.assertEqual(variant.data, full.data)
            self.assertEqual(variant.noise, full.noise)
            self.assertEqual(variant.protocol, full.protocol)
            self.assertEqual(variant.run, full.run)
            diff = {
                f.name
                for f in dataclasses.fields(AblationConfig)
                if getattr(variant.ablation, f.name) != getattr(full.ablation, f.name)
            }
            self.assertEqual(diff, {flag})


@unittest.skipUnless(SLOW, "set FEDGR_SLOW_TESTS=1 to run the benchmark")
class TestBenchmark(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.runs = {}

    def summaries(self, name, cfg):
        if name not in self.runs:
            self.runs[name] = [cli.run_single_seed(cfg, seed)[1] for seed in cfg.seeds]
        return self.runs[name]

    def mean_accuracy(self, name, cfg):
        return np.mean([s["last10_mean_acc"] for s in self.summaries(name, cfg)])

    def test_clean_fedavg(self):
        cfg = with_overrides(benchmark_config("fedavg"), noise={"phi": 0.0}, run={"seeds": (1,)})
        self.assertGreaterEqual(self.summaries("clean", cfg)[0]["last10_mean_acc"], 0.95)

    def test_fedgr_beats_fedavg(self):
        gap = self.mean_accuracy("fedgr", benchmark_config()) - self.mean_accuracy("fedavg", benchmark_config("fedavg"))
        self.assertGreaterEqual(gap, 0.15)

    def test_noise_ratio_estimates(self):
        pearson = [s["pearson"] for s in self.summaries("fedgr", benchmark_config())]
        self.assertGreaterEqual(sum(p >= 0.9 for p in pearson), 2, pearson)

    def test_memorization_gap(self):
        ours = self.summaries("fedgr", benchmark_config())
        baseline = self.summaries("fedavg", benchmark_config("fedavg"))
        for a, b in zip(ours, baseline):
            self.assertLess(a["final_memorization"], b["final_memorization"])

    def test_ablation_ordering(self):
        full = self.mean_accuracy("fedgr", benchmark_config())
        drops = {flag: full - self.mean_accuracy(flag, benchmark_config(**{flag: True})) for flag in ABLATIONS}
        for flag, drop in drops.items():
            self.assertGreaterEqual(drop, -0.005, flag)
        self.assertGreaterEqual(drops["disable_cs"], 0.05)
        self.assertEqual(max(drops, key=drops.get), "disable_cs")


if __name__ == "__main__":
    unittest.main()
