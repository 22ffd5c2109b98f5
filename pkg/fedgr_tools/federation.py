# -*- coding: utf-8 -*-
"""Round orchestration: client sampling, aggregation, loss collection and
sieve distribution, plus the registry of runnable methods."""
import dataclasses
import logging
import math

import numpy as np
from tqdm import tqdm

from fedgr_tools import metrics, nn
from fedgr_tools.config import AblationConfig, ProtocolConfig
from fedgr_tools.datagen import merge_clients
from fedgr_tools.noise_model import LossLedger, SieveResult, sieve_per_client, sieve_pooled
from fedgr_tools.train import Client, make_clients
from fedgr_tools.utils import ProtocolError, ShapeError, make_rng

logger = logging.getLogger(__name__)

methods = {}
method = lambda f: methods.setdefault(f.__name__, f)


def aggregate(local_params):
    """Sample-size weighted average of local models.

    :param local_params: list of (ModelParams, n_k), summed in the given order
    :return: sum_k a_k w_k with a_k = n_k / sum_j n_j
    :raises ProtocolError: on an empty list
    """
    if len(local_params) == 0:
        raise ProtocolError("Cannot aggregate an empty set of local models")
    shape_spec = local_params[0][0].shape_spec
    sizes = np.array([n for _, n in local_params], dtype=np.float64)
    if np.any(sizes < 0) or sizes.sum() <= 0:
        raise ProtocolError(f"Aggregation needs nonnegative sizes with a positive total (got {sizes})")
    weights = sizes / sizes.sum()
    flat = np.zeros_like(local_params[0][0].flat)
    for (params, _), a in zip(local_params, weights):
        if params.shape_spec != shape_spec:
            raise ShapeError(f"shape_spec mismatch in aggregation: {params.shape_spec} vs {shape_spec}")
        flat = flat + a * params.flat
    return nn.ModelParams(flat, shape_spec)


class Federation:
    """Simulated server holding the global model and the round state.

    Parameters
    ----------
    clients : list of Client
        The K clients, identified by their ``client_id``.
    test_set : SampleSet
        Held-out samples for per-round evaluation.
    config : ProtocolConfig
    ablation : AblationConfig, optional
    noise_modeling : bool
        Collect loss ledgers and sieve in phase I (False for FedAvg).
    """

    def __init__(self, clients, test_set, config: ProtocolConfig, ablation: AblationConfig = None, noise_modeling=True):
        if not clients:
            raise ProtocolError("A federation needs at least one client")
        self.clients = {c.client_id: c for c in sorted(clients, key=lambda c: c.client_id)}
        if len(self.clients) != len(clients):
            raise ProtocolError("Client ids must be unique")
        self.client_ids = list(self.clients)
        self.test_set = test_set
        self.config = config
        self.ablation = ablation or AblationConfig()
        self.noise_modeling = noise_modeling

        first = clients[0]
        self.shape_spec = (first.dataset.features.shape[1], config.hidden, config.hidden, first.n_classes)
        self.global_params = nn.init_params(self.shape_spec, make_rng(config.seed, 0))
        self.rng = make_rng(config.seed, 1)

        self.t = 0
        self.sniff_cycle = list(self.client_ids)
        self.ledger = LossLedger({k: c.n_k for k, c in self.clients.items()})
        self.sieve = SieveResult()
        self.frozen_sieve = None
        self.reports = []

    @property
    def n_per_round(self):
        return max(1, math.ceil(self.config.sample_ratio * len(self.client_ids)))

    @property
    def phase_one(self):
        return self.t < self.config.alpha

    def sample_clients(self):
        """Ids selected for the current round, sorted.

        Phase I cycles through all clients without replacement; later rounds
        draw a fresh uniform subset every round. FedAvg runs use the same
        schedule, so a FedGR run with every component disabled replays FedAvg
        exactly.
        """
        m = self.n_per_round
        if not self.phase_one:
            return sorted(self.rng.choice(self.client_ids, size=m, replace=False).tolist())

        if len(self.sniff_cycle) >= m:
            chosen = self.rng.choice(self.sniff_cycle, size=m, replace=False).tolist()
            pool = self.sniff_cycle
        else:
            taken = list(self.sniff_cycle)
            pool = [k for k in self.client_ids if k not in taken]
            chosen = taken + self.rng.choice(pool, size=m - len(taken), replace=False).tolist()
        self.sniff_cycle = [k for k in pool if k not in chosen]
        return sorted(chosen)

    def drop_clients(self, selected):
        """Simulate an unstable network: each selected client fails with drop_probability."""
        p = self.config.drop_probability
        if p <= 0:
            return list(selected)
        kept = [k for k in selected if self.rng.random() >= p]
        if len(kept) < len(selected):
            logger.debug("t=%d: dropped clients %s", self.t, sorted(set(selected) - set(kept)))
        return kept

    def _current_sieve(self):
        return self.frozen_sieve if self.frozen_sieve is not None else self.sieve

    def _update_sieve(self, participants):
        """Re-sieve the clients whose losses just arrived.

        A pooled fit that does not separate is retried on every client with a
        loss history; if that fails too, the earlier estimates stay in place.
        """
        means = {k: self.ledger.mean_losses(k) for k in sorted(participants) if self.ledger.participations(k) > 0}
        if not means:
            return
        cfg = self.config
        if self.ablation.disable_cs:
            new = sieve_per_client(
                means, cfg.gmm_max_iters, cfg.gmm_tol, seed=cfg.seed, min_separation=cfg.gmm_min_separation
            )
        else:
            reference = {k: self.ledger.mean_losses(k) for k in self.ledger.ready_clients()}
            new = sieve_pooled(
                means, cfg.gmm_max_iters, cfg.gmm_tol, seed=cfg.seed,
                min_separation=cfg.gmm_min_separation, reference=reference,
            )
        self.sieve = self.sieve.update(new)

    def _client_report(self, client, update):
        dataset = client.dataset
        report = metrics.ClientReport(
            client_id=client.client_id,
            rho_true=dataset.true_noise_ratio,
            refined_fraction=update.stats.refined_fraction,
            local_memorization=update.stats.local_memorization,
            global_memorization=update.stats.global_memorization,
        )
        if self.noise_modeling:
            client_sieve = self._current_sieve().for_client(client.client_id)
            if client_sieve is not None:
                report.r_k_est = client_sieve.noise_ratio
                report.precision, report.recall, report.f1 = metrics.selection_f1(client_sieve.is_clean, dataset)
        return report

    def run_round(self):
        """Execute round t and return its RoundReport."""
        cfg = self.config
        if self.t >= cfg.rounds:
            raise ProtocolError(f"All {cfg.rounds} rounds have been run")
        t = self.t
        participants = self.drop_clients(self.sample_clients())

        w_g = self.global_params
        updates = {}
        for k in participants:
            client = self.clients[k]
            if self.noise_modeling:
                client.receive_sieve(self._current_sieve().for_client(k))
            updates[k] = client.local_update(w_g, t)

        if updates:
            self.global_params = aggregate([(updates[k].params, self.clients[k].n_k) for k in sorted(updates)])
        else:
            logger.warning("t=%d: no client participated; global model unchanged", t)

        if self.phase_one and self.noise_modeling:
            for k in sorted(updates):
                if updates[k].ledger_losses is not None:
                    self.ledger.record_loss(k, updates[k].ledger_losses)
            self._update_sieve(participants)

        report = metrics.RoundReport(
            t=t,
            test_accuracy=metrics.test_accuracy(self.global_params, self.test_set),
            memorization_fraction=metrics.memorization_fraction(
                self.global_params, [c.dataset for c in self.clients.values()]
            ),
            participants=tuple(participants),
            clients=[self._client_report(self.clients[k], updates[k]) for k in participants],
        )
        self.reports.append(report)

        self.t += 1
        if self.noise_modeling and self.t == cfg.alpha:
            self.frozen_sieve = self.sieve
            logger.info(
                "t=%d: sieve frozen for %d of %d clients", self.t, len(self.sieve.client_ids), len(self.client_ids)
            )
        logger.debug(
            "t=%d acc=%.4f mem=%.4f participants=%s",
            t, report.test_accuracy, report.memorization_fraction, list(participants),
        )
        return report

    def run(self, progress=True):
        """Run every remaining round; return all RoundReports."""
        pbar = tqdm(total=self.config.rounds - self.t, disable=not progress)
        while self.t < self.config.rounds:
            report = self.run_round()
            pbar.update(1)
            pbar.set_description(f"acc={report.test_accuracy:.3f} mem={report.memorization_fraction:.3f}")
            if report.t % 10 == 0 or self.t == self.config.rounds:
                logger.info(
                    "round %d/%d: test accuracy %.4f, memorization %.4f",
                    report.t + 1, self.config.rounds, report.test_accuracy, report.memorization_fraction,
                )
        pbar.close()
        return self.reports

    def noise_ratio_pearson(self):
        """Correlation of frozen r_k estimates with the realised noise ratios."""
        sieve = self._current_sieve()
        ids = sieve.client_ids
        return metrics.noise_ratio_pearson(
            [sieve.noise_ratio[k] for k in ids], [self.clients[k].dataset.true_noise_ratio for k in ids]
        )


# ================================
# Methods
# ================================
@method
def fedgr(datasets, test_set, n_classes, config: ProtocolConfig, ablation=None, progress=False):
    clients = make_clients(datasets, n_classes, config, ablation, method="fedgr")
    federation = Federation(clients, test_set, config, ablation, noise_modeling=True)
    federation.run(progress=progress)
    return federation


@method
def fedavg(datasets, test_set, n_classes, config: ProtocolConfig, ablation=None, progress=False):
    clients = make_clients(datasets, n_classes, config, method="fedavg")
    federation = Federation(clients, test_set, config, noise_modeling=False)
    federation.run(progress=progress)
    return federation


@method
def central(datasets, test_set, n_classes, config: ProtocolConfig, ablation=None, progress=False):
    """Centralized training on the pooled noisy data, one epoch per round.

    Runs as a single-client federation with full participation, so its
    rounds.csv carries the same accuracy and memorization curves as the
    federated methods.
    """
    config = dataclasses.replace(config, n_clients=1, sample_ratio=1.0, local_epochs=1)
    clients = make_clients([merge_clients(datasets)], n_classes, config, method="fedavg")
    federation = Federation(clients, test_set, config, noise_modeling=False)
    federation.run(progress=progress)
    return federation


def run_fedavg_baseline(datasets, test_set, n_classes, config: ProtocolConfig, progress=False):
    """FedAvg on given labels; returns the per-round reports."""
    return fedavg(datasets, test_set, n_classes, config, progress=progress).reports


def run_method(name, datasets, test_set, n_classes, config, ablation=None, progress=False):
    if name not in methods:
        raise ProtocolError(f"Unknown method {name!r}; available: {sorted(methods)}")
    return methods[name](datasets, test_set, n_classes, config, ablation, progress=progress)
