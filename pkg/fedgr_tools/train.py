# -*- coding: utf-8 -*-
"""Client-side training: label refinement, EMA teacher and the local update."""
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import softmax

from fedgr_tools import nn
from fedgr_tools.config import AblationConfig, ProtocolConfig
from fedgr_tools.datagen import AugmentConfig, Augmentation, ClientDataset, augment
from fedgr_tools.metrics import memorization_fraction
from fedgr_tools.noise_model import ClientSieve
from fedgr_tools.utils import ParameterError, ProtocolError, ShapeError, check_probability, make_rng, to_onehot

logger = logging.getLogger(__name__)


class Provenance(IntEnum):
    """Which refinement branch produced a training target."""

    given = 0
    blended = 1
    pseudo = 2
    masked = 3


@dataclass(eq=False)
class RefinedLabels:
    """Training targets (rows are one-hot, soft, or all-zero) with their provenance."""

    labels: np.ndarray
    provenance: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def supervised(self):
        return self.labels.sum(axis=1) > 0

    @property
    def refined_fraction(self):
        """Share of samples that still carry a supervised target."""
        if len(self) == 0:
            return 0.0
        return float(np.mean(self.supervised))

    def branch_counts(self):
        counts = np.bincount(self.provenance, minlength=len(Provenance))
        return {p.name: int(counts[p]) for p in Provenance}

    @classmethod
    def from_given(cls, given_labels, n_classes, keep=None):
        labels = to_onehot(given_labels, n_classes)
        provenance = np.full(len(labels), Provenance.given, dtype=np.int64)
        if keep is not None:
            labels[~keep] = 0.0
            provenance[~keep] = Provenance.masked
        return cls(labels, provenance)


# ================================
# Label refinement
# ================================
def pseudo_label(params, x, epsilon, rng=None, aug_cfg=None):
    """Confident predictions of ``params`` as one-hot targets.

    A sample gets the one-hot argmax of softmax(logits) only when its maximal
    class probability strictly exceeds ``epsilon``; otherwise its row is zero.
    With ``rng`` given, predictions are made on weakly augmented inputs.
    """
    check_probability("epsilon", epsilon, low_inclusive=False)
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if rng is not None:
        X = augment(X, Augmentation.weak, rng, aug_cfg)
    probs = softmax(nn.forward(params, X).logits, axis=1)
    fired = probs.max(axis=1) > epsilon
    labels = np.zeros_like(probs)
    labels[np.where(fired)[0], np.argmax(probs, axis=1)[fired]] = 1.0
    provenance = np.where(fired, Provenance.pseudo, Provenance.masked).astype(np.int64)
    return RefinedLabels(labels, provenance)


def apply_refinement(given_onehot, pseudo: RefinedLabels, q, is_clean, noise_ratio, beta):
    """Combine given labels and pseudo-labels per client noise level.

    noise_ratio >= beta: every sample is trained on its pseudo-label (or masked).
    noise_ratio < beta: clean samples keep the given label; noisy samples get
    q * given + (1 - q) * pseudo.
    """
    given_onehot = np.asarray(given_onehot, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    is_clean = np.asarray(is_clean, dtype=bool)
    if not (given_onehot.shape == pseudo.labels.shape and len(q) == len(is_clean) == len(given_onehot)):
        raise ShapeError(
            f"Refinement inputs disagree: given {given_onehot.shape}, pseudo {pseudo.labels.shape}, "
            f"q {q.shape}, is_clean {is_clean.shape}"
        )
    check_probability("beta", beta)

    if noise_ratio >= beta:
        return RefinedLabels(pseudo.labels.copy(), pseudo.provenance.copy())

    blended = q[:, None] * given_onehot + (1.0 - q)[:, None] * pseudo.labels
    labels = np.where(is_clean[:, None], given_onehot, blended)
    provenance = np.where(is_clean, Provenance.given, Provenance.blended).astype(np.int64)
    return RefinedLabels(labels, provenance)


# ================================
# EMA teacher
# ================================
def select_gamma_g(noise_ratio, refined_fraction, beta, kappa, mu):
    """Weight of the old EMA when the new global model arrives.

    Low-noise clients (r_k < beta) keep a slowly moving EMA (kappa). A
    high-noise client whose refined set shrank below ``mu`` resets its EMA to
    the global model (0); otherwise it keeps kappa.
    """
    if noise_ratio < beta:
        return kappa
    if refined_fraction < mu:
        return 0.0
    return kappa


def ema_blend(ema, target, gamma):
    """gamma * ema + (1 - gamma) * target, elementwise and kept inside the
    segment between the two vectors."""
    check_probability("gamma", gamma)
    ema._check_compatible(target)
    if gamma == 0:
        return target.copy()
    if gamma == 1:
        return ema.copy()
    mix = gamma * ema.flat + (1.0 - gamma) * target.flat
    mix = np.clip(mix, np.minimum(ema.flat, target.flat), np.maximum(ema.flat, target.flat))
    return nn.ModelParams(mix, ema.shape_spec)


# ================================
# Clients
# ================================
@dataclass
class LocalStats:
    client_id: int
    refined_fraction: float = 1.0
    branch_counts: dict = field(default_factory=dict)
    mean_loss: float = float("nan")
    n_steps: int = 0
    local_memorization: float = float("nan")
    global_memorization: float = float("nan")


class LocalUpdate(NamedTuple):
    params: nn.ModelParams
    ledger_losses: Optional[np.ndarray]
    stats: LocalStats


class Client:
    """A FedGR client owning one local dataset.

    Parameters
    ----------
    dataset : ClientDataset
        Local samples. Only ``features`` and ``given_labels`` feed training.
    n_classes : int
        Number of classes C.
    config : ProtocolConfig
        Hyperparameters shared by every client.
    ablation : AblationConfig, optional
        Component switches.
    """

    records_ledger = True

    def __init__(self, dataset: ClientDataset, n_classes, config: ProtocolConfig, ablation: AblationConfig = None):
        self.dataset = dataset
        self.n_classes = int(n_classes)
        self.config = config
        self.ablation = ablation or AblationConfig()
        self.aug_cfg = AugmentConfig(sigma_weak=config.sigma_weak, sigma_strong=config.sigma_strong)
        self.ema_params = None
        self.sieve: Optional[ClientSieve] = None
        self.refined_fraction = 1.0
        self.n_participations = 0
        self._warned_no_sieve = False

    @property
    def client_id(self):
        return self.dataset.client_id

    @property
    def n_k(self):
        return self.dataset.n_k

    @property
    def noise_ratio(self):
        """Latest estimate r_k; clients without an estimate count as low noise."""
        return 0.0 if self.sieve is None else self.sieve.noise_ratio

    @property
    def lambda_r(self):
        return 0.0 if self.ablation.disable_r else self.config.lambda_r

    def lambda_b(self, t):
        if self.ablation.disable_b or t < self.config.delta:
            return 0.0
        return self.config.lambda_b

    def receive_sieve(self, client_sieve: Optional[ClientSieve]):
        if client_sieve is not None and len(client_sieve.q) != self.n_k:
            raise ShapeError(f"Client {self.client_id}: sieve covers {len(client_sieve.q)} of {self.n_k} samples")
        self.sieve = client_sieve
        return self

    def compute_ledger_losses(self, params):
        """Per-sample cross-entropy of ``params`` against the given labels on
        unaugmented features."""
        logits = nn.forward(params, self.dataset.features).logits
        if self.n_k == 0:
            return np.zeros(0)
        return np.atleast_1d(nn.cross_entropy(logits, to_onehot(self.dataset.given_labels, self.n_classes)))

    def refine_labels(self, w_g, rng):
        if self.sieve is None:
            raise ProtocolError(f"Client {self.client_id} has no sieve result to refine labels with")
        pseudo = pseudo_label(w_g, self.dataset.features, self.config.epsilon, rng, self.aug_cfg)
        given = to_onehot(self.dataset.given_labels, self.n_classes)
        return apply_refinement(given, pseudo, self.sieve.q, self.sieve.is_clean, self.sieve.noise_ratio, self.config.beta)

    def training_targets(self, w_g, t, rng):
        """Targets for this round's local training."""
        given = self.dataset.given_labels
        if t < self.config.alpha:
            return RefinedLabels.from_given(given, self.n_classes)
        if self.sieve is None:
            if not self._warned_no_sieve:
                logger.warning("Client %d has no noise estimate; training on given labels", self.client_id)
                self._warned_no_sieve = True
            return RefinedLabels.from_given(given, self.n_classes)
        if self.ablation.disable_lr:
            return RefinedLabels.from_given(given, self.n_classes, keep=self.sieve.is_clean)
        return self.refine_labels(w_g, rng)

    def revise_ema(self, w_g, t):
        """Re-anchor the EMA teacher on the newly received global model."""
        if t < self.config.delta:
            return self
        if self.ema_params is None:
            self.ema_params = w_g.copy()
            logger.debug("Client %d: EMA bootstrapped at t=%d", self.client_id, t)
            return self
        cfg = self.config
        gamma_g = select_gamma_g(self.noise_ratio, self.refined_fraction, cfg.beta, cfg.kappa, cfg.mu)
        self.ema_params = ema_blend(self.ema_params, w_g, gamma_g)
        return self

    def ema_step(self, w_k):
        if self.ema_params is not None:
            self.ema_params = ema_blend(self.ema_params, w_k, self.config.gamma_l)
        return self

    def local_update(self, w_g, t, rng=None) -> LocalUpdate:
        """Run E local epochs starting from ``w_g``.

        Returns the trained parameters, the ledger losses to upload (phase I
        only) and per-round statistics.
        """
        cfg = self.config
        rng = rng if rng is not None else make_rng(cfg.seed, 2, t, self.client_id)
        phase_one = t < cfg.alpha
        self.n_participations += 1

        ledger_losses = None
        if phase_one and self.records_ledger and not self.ablation.disable_cs:
            ledger_losses = self.compute_ledger_losses(w_g)

        # EMA revision sees the refined fraction of the previous participation
        self.revise_ema(w_g, t)
        targets = self.training_targets(w_g, t, rng)
        self.refined_fraction = targets.refined_fraction

        lambda_b, lambda_r = self.lambda_b(t), self.lambda_r
        X = self.dataset.features
        w_k, velocity = w_g.copy(), None
        losses = []
        for epoch in range(cfg.local_epochs):
            order = rng.permutation(self.n_k)
            for start in range(0, self.n_k, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                x_weak = augment(X[idx], Augmentation.weak, rng, self.aug_cfg)
                x_strong = augment(X[idx], Augmentation.strong, rng, self.aug_cfg)
                x_student = x_weak if self.ablation.disable_strong_aug else x_strong

                spec = nn.LossSpec(targets.labels[idx], tau=cfg.tau)
                if lambda_b > 0 and self.ema_params is not None:
                    spec.teacher_logits = nn.forward(self.ema_params, x_weak).logits
                    spec.lambda_b = lambda_b
                if lambda_r > 0:
                    spec.teacher_representation = nn.forward(w_g, x_weak).representation
                    spec.lambda_r = lambda_r

                loss, grads = nn.backward(w_k, x_student, spec)
                w_k, velocity = nn.sgd_step(w_k, grads, cfg.lr, cfg.momentum, cfg.weight_decay, velocity)
                self.ema_step(w_k)
                losses.append(loss)

        if phase_one and self.records_ledger and self.ablation.disable_cs:
            ledger_losses = self.compute_ledger_losses(w_k)

        stats = LocalStats(
            client_id=self.client_id,
            refined_fraction=self.refined_fraction,
            branch_counts=targets.branch_counts(),
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            n_steps=len(losses),
            local_memorization=memorization_fraction(w_k, [self.dataset]),
            global_memorization=memorization_fraction(w_g, [self.dataset]),
        )
        logger.debug(
            "t=%d client %d: %d steps, loss=%.4f, refined=%.3f, branches=%s",
            t, self.client_id, stats.n_steps, stats.mean_loss, stats.refined_fraction, stats.branch_counts,
        )
        return LocalUpdate(w_k, ledger_losses, stats)


class FedAvgClient(Client):
    """Plain FedAvg client: given labels, cross-entropy only, no ledger.

    Shares the random-stream layout of :class:`Client` so that a FedGR run
    with every component disabled reproduces FedAvg exactly.
    """

    records_ledger = False

    @property
    def lambda_r(self):
        return 0.0

    def lambda_b(self, t):
        return 0.0

    def training_targets(self, w_g, t, rng):
        return RefinedLabels.from_given(self.dataset.given_labels, self.n_classes)

    def revise_ema(self, w_g, t):
        return self

    def ema_step(self, w_k):
        return self


def make_clients(datasets, n_classes, config, ablation=None, method="fedgr"):
    if method not in ("fedgr", "fedavg"):
        raise ParameterError(f"Unknown method {method!r}")
    cls = Client if method == "fedgr" else FedAvgClient
    return [cls(d, n_classes, config, ablation) for d in sorted(datasets, key=lambda d: d.client_id)]
