# -*- coding: utf-8 -*-
"""Server-side noise modeling: loss ledgers, 1D two-component GMM and sieving."""
import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from fedgr_tools.utils import DegenerateFitError, NotReadyError, ParameterError, ProtocolError

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
CLEAN_THRESHOLD = 0.5
MIN_SEPARATION = 1.0


class LossLedger:
    """Per-sample history of global-model losses, one entry per successful
    participation of the owning client.

    :param client_sizes: mapping client_id -> n_k of every registered client
    """

    def __init__(self, client_sizes):
        self.sizes = {int(k): int(n) for k, n in client_sizes.items()}
        self.history = {k: [] for k in self.sizes}

    def _check_client(self, client_id):
        if client_id not in self.sizes:
            raise ProtocolError(f"Client {client_id} is not registered in the loss ledger")

    def participations(self, client_id):
        """T_k, the number of recorded participations."""
        self._check_client(client_id)
        return len(self.history[client_id])

    def record_loss(self, client_id, losses):
        self._check_client(client_id)
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != (self.sizes[client_id],):
            raise ProtocolError(
                f"Client {client_id} reported {losses.shape} losses, expected ({self.sizes[client_id]},)"
            )
        if not np.all(np.isfinite(losses)) or np.any(losses < 0):
            raise ProtocolError(f"Client {client_id} reported negative or non-finite losses")
        self.history[client_id].append(losses.copy())
        return self

    def mean_losses(self, client_id):
        """Mean of every sample's loss history on ``client_id``."""
        if self.participations(client_id) == 0:
            raise NotReadyError(f"Client {client_id} has no recorded participation yet")
        return np.mean(np.vstack(self.history[client_id]), axis=0)

    def ready_clients(self):
        return [k for k in sorted(self.history) if self.history[k]]


@dataclass(eq=False)
class GmmFit:
    """Two 1D Gaussian components ordered by mean; component 0 is the clean one."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    converged: bool = False
    n_iter: int = 0
    log_likelihood: list = field(default_factory=list)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means[0] > self.means[1]:
            raise ParameterError(f"Components must be ordered by mean (got {self.means})")
        if np.any(self.variances <= 0):
            raise ParameterError(f"Variances must be positive (got {self.variances})")
        if np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ParameterError(f"Mixing weights must be positive and sum to 1 (got {self.weights})")

    @property
    def separation(self):
        """sqrt(2) * (mu_1 - mu_0) / sqrt(var_0 + var_1).

        Close to zero when both components sit on the same values, e.g. a
        narrow and a wide component around one mode.
        """
        return float(np.sqrt(2.0) * (self.means[1] - self.means[0]) / np.sqrt(self.variances.sum()))

    def clean_posterior(self, values):
        """Posterior probability of the lower-mean component.

        Values are clipped into [mu_0, mu_1] first: inside that interval the
        posterior is non-increasing for any variances, outside it the wider
        component would otherwise take over again. Callers screen out fits
        with overlapping components (see ``separation``) before scoring.
        """
        x = np.clip(np.asarray(values, dtype=np.float64), self.means[0], self.means[1])
        logp = np.log(self.weights) + norm.logpdf(x[:, None], self.means, np.sqrt(self.variances))
        return expit(logp[:, 0] - logp[:, 1])


def fit_gmm_1d(values, max_iters=200, tol=1e-6, seed=0):
    """Fit a two-component 1D GMM by EM.

    Initialization: means at the 10th and 90th percentiles, both variances
    equal to the overall variance, equal weights. EM stops once the mean
    log-likelihood improves by less than ``tol`` or after ``max_iters`` steps.
    ``VARIANCE_FLOOR`` is added to both variances in every M-step, so no
    fitted variance falls below it.

    Raises
    ------
    ParameterError
        When fewer than two values are given.
    DegenerateFitError
        When all values are identical.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ParameterError(f"Need at least 2 values to fit a mixture (got {values.size})")
    if np.ptp(values) == 0:
        raise DegenerateFitError("All values are identical; no mixture can be fit")

    X = values.reshape(-1, 1)
    var0 = max(float(np.var(values)), VARIANCE_FLOOR)
    gmm = GaussianMixture(
        n_components=2,
        covariance_type="spherical",
        max_iter=1,
        tol=tol,
        reg_covar=VARIANCE_FLOOR,
        init_params="random",
        weights_init=[0.5, 0.5],
        means_init=np.percentile(values, [10, 90]).reshape(-1, 1),
        precisions_init=np.full(2, 1.0 / var0),
        warm_start=True,
        random_state=seed,
    )

    # One EM step per call so that the log-likelihood of every iterate is kept
    trace, converged = [], False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(max_iters):
            gmm.fit(X)
            trace.append(float(gmm.lower_bound_))
            if len(trace) >= 2 and trace[-1] - trace[-2] < tol:
                converged = True
                break

    order = np.argsort(gmm.means_.ravel(), kind="stable")
    fit = GmmFit(
        means=gmm.means_.ravel()[order],
        variances=np.asarray(gmm.covariances_).ravel()[order],
        weights=gmm.weights_[order],
        converged=converged,
        n_iter=len(trace),
        log_likelihood=trace,
    )
    logger.debug(
        "GMM fit on %d values: means=%s vars=%s weights=%s separation=%.3f iters=%d",
        values.size, fit.means, fit.variances, fit.weights, fit.separation, fit.n_iter,
    )
    return fit


class ClientSieve(NamedTuple):
    q: np.ndarray
    is_clean: np.ndarray
    noise_ratio: float


@dataclass(eq=False)
class SieveResult:
    """Clean posteriors, clean/noisy assignments and noise-ratio estimates keyed by client id."""

    q: dict = field(default_factory=dict)
    is_clean: dict = field(default_factory=dict)
    noise_ratio: dict = field(default_factory=dict)

    @property
    def client_ids(self):
        return sorted(self.noise_ratio)

    def for_client(self, client_id):
        if client_id not in self.noise_ratio:
            return None
        return ClientSieve(self.q[client_id], self.is_clean[client_id], self.noise_ratio[client_id])

    def update(self, other):
        """New result holding ``other``'s entries where present, ours elsewhere."""
        return SieveResult(
            q={**self.q, **other.q},
            is_clean={**self.is_clean, **other.is_clean},
            noise_ratio={**self.noise_ratio, **other.noise_ratio},
        )

    def to_frame(self):
        rows = [
            pd.DataFrame({"client_id": k, "sample_index": np.arange(len(self.q[k])), "q": self.q[k], "is_clean": self.is_clean[k]})
            for k in self.client_ids
        ]
        if not rows:
            return pd.DataFrame(columns=["client_id", "sample_index", "q", "is_clean"])
        return pd.concat(rows, ignore_index=True)


def _from_posteriors(posteriors, threshold=CLEAN_THRESHOLD):
    result = SieveResult()
    for k, q in posteriors.items():
        is_clean = q >= threshold
        result.q[k] = q
        result.is_clean[k] = is_clean
        result.noise_ratio[k] = float(np.mean(~is_clean)) if len(q) else 0.0
    return result


def sieve(fit: GmmFit, mean_losses, threshold=CLEAN_THRESHOLD):
    """Score every client's mean losses under ``fit``.

    :param fit: fitted mixture
    :param mean_losses: mapping client_id -> per-sample mean losses
    :return: SieveResult with q_i, is_clean = (q_i >= threshold) and r_k
    """
    return _from_posteriors({k: fit.clean_posterior(v) for k, v in sorted(mean_losses.items())}, threshold)


def all_clean(mean_losses):
    return _from_posteriors({k: np.ones(len(v)) for k, v in sorted(mean_losses.items())})


def _pool(mean_losses):
    return np.concatenate([np.asarray(mean_losses[k], dtype=np.float64).ravel() for k in sorted(mean_losses)])


def sieve_pooled(mean_losses, max_iters=200, tol=1e-6, seed=0, min_separation=0.0, reference=None):
    """Centralized sieving: one GMM over the union of all clients' mean losses.

    :param mean_losses: mapping client_id -> per-sample mean losses of the clients to score
    :param min_separation: smallest ``GmmFit.separation`` accepted for scoring
    :param reference: optional wider pool (client_id -> mean losses) refit when
        ``mean_losses`` alone gives no usable fit
    :return: SieveResult over the clients of ``mean_losses``. It is empty when
        every attempted fit has overlapping components, so merging it with
        ``SieveResult.update`` keeps earlier estimates. When no pool can be
        fit at all (constant values or a single value) every sample is clean.
    """
    if not mean_losses:
        return SieveResult()
    pools = [mean_losses] if reference is None else [mean_losses, {**reference, **mean_losses}]
    overlapping = None
    for pool in pools:
        values = _pool(pool)
        try:
            fit = fit_gmm_1d(values, max_iters=max_iters, tol=tol, seed=seed)
        except (DegenerateFitError, ParameterError):
            logger.debug("No mixture on %d pooled values", values.size)
            continue
        if fit.separation >= min_separation:
            return sieve(fit, mean_losses)
        overlapping = fit
    if overlapping is not None:
        logger.warning(
            "Overlapping GMM components (separation %.3f < %.3f); keeping earlier estimates of clients %s",
            overlapping.separation, min_separation, sorted(mean_losses),
        )
        return SieveResult()
    logger.warning("Pooled mean losses admit no mixture; treating all samples of %s as clean", sorted(mean_losses))
    return all_clean(mean_losses)


def sieve_per_client(mean_losses, max_iters=200, tol=1e-6, seed=0, min_separation=0.0):
    """Client-local sieving: a separate GMM over each client's own mean losses.

    Clients whose fit has overlapping components are left out of the result.
    """
    result = SieveResult()
    for k in sorted(mean_losses):
        try:
            fit = fit_gmm_1d(mean_losses[k], max_iters=max_iters, tol=tol, seed=seed)
        except (DegenerateFitError, ParameterError):
            logger.warning("Client %d: mean losses unusable for a GMM; treating all samples as clean", k)
            result = result.update(all_clean({k: mean_losses[k]}))
            continue
        if fit.separation < min_separation:
            logger.warning("Client %d: overlapping GMM components; keeping its earlier estimate", k)
            continue
        result = result.update(sieve(fit, {k: mean_losses[k]}))
    return result
