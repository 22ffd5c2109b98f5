# -*- coding: utf-8 -*-
"""Experiment runner and the ``fedgr`` console entry point.

Usage::

    fedgr --config run.ini [--seed N] [--method fedgr|fedavg|central] [--out DIR] [--quiet]

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
import argparse
import dataclasses
import logging
import os
import sys

import pandas as pd

from fedgr_tools import datagen, metrics
from fedgr_tools.config import RunConfig, config_hash, parse_config, serialize_config, with_overrides
from fedgr_tools.federation import run_method
from fedgr_tools.utils import ConfigError, derive_seed

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_clients(cfg: RunConfig, seed):
    """Generate, partition and corrupt the data of one seed.

    Returns
    -------
    clients : list of ClientDataset
    test : SampleSet
    """
    d = cfg.data
    train, test = datagen.generate_dataset(
        d.n_classes, d.n_samples, d.d_in, d.class_separation, seed=derive_seed(seed, 0), n_test=d.n_test
    )
    K = cfg.protocol.n_clients
    if d.partition == "dirichlet":
        clients = datagen.partition_dirichlet(train, K, d.dirichlet_alpha, seed=derive_seed(seed, 1))
    else:
        clients = datagen.partition_iid(train, K, seed=derive_seed(seed, 1))
    noise = dataclasses.replace(cfg.noise, seed=derive_seed(seed, 2, cfg.noise.seed))
    clients = datagen.inject_noise(clients, noise, n_classes=d.n_classes)
    return clients, test


def run_single_seed(cfg: RunConfig, seed, progress=False):
    """Run the configured method for one seed.

    Returns the finished Federation, its summary row and the partition table.
    """
    clients, test = build_clients(cfg, seed)
    protocol = dataclasses.replace(cfg.protocol, seed=seed)
    logger.info(
        "seed %d: %s on %d clients, %d noisy", seed, cfg.method, len(clients), sum(c.true_noise_ratio > 0 for c in clients)
    )
    federation = run_method(cfg.method, clients, test, cfg.data.n_classes, protocol, cfg.ablation, progress=progress)
    pearson = federation.noise_ratio_pearson() if federation.noise_modeling else float("nan")
    summary = metrics.summary_row(federation.reports, pearson, seed, config_hash(cfg), cfg.method)
    partition = datagen.class_histogram(clients, cfg.data.n_classes)
    return federation, summary, partition


def run_experiment(cfg: RunConfig, out_dir, progress=False):
    """Run every seed, writing ``out_dir/seed_N/*.csv``, ``status.csv`` and the
    aggregate ``summary.csv``.

    Returns
    -------
    summaries : pd.DataFrame
        One row per successful seed.
    status : pd.DataFrame
        (seed, status, error) for every seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))

    summaries, status = [], []
    for seed in cfg.seeds:
        try:
            federation, summary, partition = run_single_seed(cfg, seed, progress=progress)
        except Exception as e:
            logger.exception("seed %d failed", seed)
            status.append({"seed": seed, "status": "failed", "error": f"{type(e).__name__}: {e}"})
            continue
        metrics.write_run_csvs(os.path.join(out_dir, f"seed_{seed}"), federation.reports, summary, partition)
        summaries.append(summary)
        status.append({"seed": seed, "status": "ok", "error": ""})

    status = pd.DataFrame(status, columns=["seed", "status", "error"])
    status.to_csv(os.path.join(out_dir, "status.csv"), index=False, encoding="utf-8")
    summaries = pd.DataFrame(summaries, columns=metrics.SUMMARY_COLUMNS)
    if len(summaries):
        metrics.summarize_seeds(summaries).to_csv(
            os.path.join(out_dir, "summary.csv"), index=False, encoding="utf-8", na_rep="nan"
        )
    return summaries, status


def _parser():
    parser = argparse.ArgumentParser(prog="fedgr", description="Federated learning under client label noise")
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--seed", type=int, default=None, help="run this seed only")
    parser.add_argument("--method", choices=["fedgr", "fedavg", "central"], default=None, help="override the configured method")
    parser.add_argument("--out", default=None, help="output directory (default: config, then $FEDGR_OUT, then ./results)")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bar")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = parse_config(args.config)
        run = {}
        if args.seed is not None:
            run["seeds"] = (args.seed,)
        if args.method is not None:
            run["method"] = args.method
        if run:
            cfg = with_overrides(cfg, run=run)
    except ConfigError as e:
        print(f"fedgr: config error in {args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = args.out or cfg.output_dir or os.environ.get("FEDGR_OUT") or "results"
    try:
        summaries, status = run_experiment(cfg, out_dir, progress=not args.quiet)
    except Exception as e:
        logger.exception("experiment failed")
        print(f"fedgr: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if len(summaries):
        print(summaries[["seed", "method", "last10_mean_acc", "pearson", "final_memorization"]].to_string(index=False))
    if (status["status"] != "ok").any():
        print(f"fedgr: {int((status['status'] != 'ok').sum())} seed(s) failed, see {out_dir}/status.csv", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
