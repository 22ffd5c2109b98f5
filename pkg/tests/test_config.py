import os
import tempfile
import unittest

from fedgr_tools import config
from fedgr_tools.utils import ConfigError

EXAMPLE = """
[data]
n_classes = 5
partition = dirichlet
dirichlet_alpha = 0.5

[noise]
phi = 0.6
rho_min = 0.3
rho_max = 0.9
noise_type = mixed

[protocol]
rounds = 12
alpha = 4
delta = 4
lambda_b = 0.5   # distillation weight

[ablation]
disable_r = true

[run]
method = fedavg
seeds = 3, 5
"""


class TestParseConfig(unittest.TestCase):
    def test_empty_file_gives_defaults(self):
        cfg = config.parse_config_text("")
        self.assertEqual(cfg, config.RunConfig())
        p = cfg.protocol
        self.assertEqual(
            (p.lambda_b, p.lambda_r, p.epsilon, p.beta, p.tau, p.gamma_l, p.kappa, p.mu),
            (1.0, 0.1, 0.9, 0.8, 0.5, 0.99, 0.9, 0.5),
        )
        self.assertEqual(cfg.seeds, (1, 13, 42))

    def test_values(self):
        cfg = config.parse_config_text(EXAMPLE)
        self.assertEqual(cfg.data.n_classes, 5)
        self.assertEqual(cfg.data.partition, "dirichlet")
        self.assertEqual(cfg.noise.noise_type, "mixed")
        self.assertEqual(cfg.protocol.rounds, 12)
        self.assertEqual(cfg.protocol.lambda_b, 0.5)
        self.assertTrue(cfg.ablation.disable_r)
        self.assertFalse(cfg.ablation.disable_b)
        self.assertEqual(cfg.method, "fedavg")
        self.assertEqual(cfg.seeds, (3, 5))

    def test_round_trip(self):
        cfg = config.parse_config_text(EXAMPLE)
        text = config.serialize_config(cfg)
        again = config.parse_config_text(text)
        self.assertEqual(again, cfg)
        self.assertEqual(config.serialize_config(again), text)
        self.assertEqual(config.config_hash(again), config.config_hash(cfg))

    def test_hash_depends_on_values(self):
        cfg = config.parse_config_text(EXAMPLE)
        other = config.with_overrides(cfg, protocol={"rounds": 13})
        self.assertNotEqual(config.config_hash(cfg), config.config_hash(other))

    def test_invalid_epsilon(self):
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config_text("[protocol]\nepsilon = 1.5\n")
        self.assertEqual(ctx.exception.field, "epsilon")

    def test_alpha_must_be_positive(self):
        with self.assertRaises(ConfigError):
            config.parse_config_text("[protocol]\nalpha = 0\n")

    def test_gmm_min_separation(self):
        self.assertEqual(config.parse_config_text("").protocol.gmm_min_separation, 1.0)
        cfg = config.parse_config_text("[protocol]\ngmm_min_separation = 0\n")
        self.assertEqual(cfg.protocol.gmm_min_separation, 0.0)
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config_text("[protocol]\ngmm_min_separation = -0.5\n")
        self.assertEqual(ctx.exception.field, "gmm_min_separation")

    def test_method(self):
        self.assertEqual(config.parse_config_text("[run]\nmethod = central\n").method, "central")
        with self.assertRaises(ConfigError):
            config.parse_config_text("[run]\nmethod = fedprox\n")

    def test_unknown_key_reports_line(self):
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config_text("[protocol]\nrounds = 3\nlambda = 2\n")
        self.assertEqual(ctx.exception.lineno, 3)
        self.assertIn("line 3", str(ctx.exception))

    def test_unknown_section(self):
        with self.assertRaises(ConfigError):
            config.parse_config_text("[optimizer]\nlr = 0.1\n")

    def test_malformed_value(self):
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config_text("[data]\n\nn_classes = ten\n")
        self.assertEqual(ctx.exception.lineno, 3)

    def test_key_outside_section(self):
        with self.assertRaises(ConfigError):
            config.parse_config_text("rounds = 3\n")

    def test_invalid_noise(self):
        with self.assertRaises(ConfigError):
            config.parse_config_text("[noise]\nrho_min = 0.8\nrho_max = 0.2\n")

    def test_read_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.ini")
            with open(path, "w", encoding="utf-8") as f:
                f.write(EXAMPLE)
            self.assertEqual(config.parse_config(path), config.parse_config_text(EXAMPLE))
            with self.assertRaises(ConfigError):
                config.parse_config(os.path.join(tmp, "missing.ini"))


if __name__ == "__main__":
    unittest.main()
