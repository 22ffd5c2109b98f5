# -*- coding: utf-8 -*-
"""Synthetic data, federated partitioning, label-noise synthesis and
feature-space augmentation."""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np
import pandas as pd

from fedgr_tools.utils import ParameterError, check_probability, make_rng

logger = logging.getLogger(__name__)


class NoiseType(str, Enum):
    clean = "clean"
    sym = "sym"
    asym = "asym"
    mixed = "mixed"


class Augmentation(str, Enum):
    weak = "weak"
    strong = "strong"


class Sample(NamedTuple):
    features: np.ndarray
    given_label: int
    true_label: int
    sample_id: int


@dataclass(eq=False)
class SampleSet:
    """A pool of samples stored column-wise.

    ``true_labels`` is kept for evaluation only and never reaches training.
    """

    features: np.ndarray
    given_labels: np.ndarray
    true_labels: np.ndarray
    sample_ids: np.ndarray

    def __len__(self):
        return len(self.given_labels)

    def __getitem__(self, i):
        return Sample(self.features[i], int(self.given_labels[i]), int(self.true_labels[i]), int(self.sample_ids[i]))

    def subset(self, idx):
        return SampleSet(self.features[idx], self.given_labels[idx], self.true_labels[idx], self.sample_ids[idx])

    @property
    def n_classes(self):
        return int(max(self.true_labels.max(), self.given_labels.max())) + 1


@dataclass(eq=False)
class ClientDataset(SampleSet):
    """Local dataset of one client.

    ``noise_rate`` is the sampled rho_k that drove the corruption; the
    realised ratio is ``true_noise_ratio``.
    """

    client_id: int = 0
    noise_type: NoiseType = NoiseType.clean
    noise_rate: float = 0.0

    @property
    def n_k(self):
        return len(self.given_labels)

    @property
    def noisy_mask(self):
        return self.given_labels != self.true_labels

    @property
    def true_noise_ratio(self):
        if self.n_k == 0:
            return 0.0
        return float(np.mean(self.noisy_mask))

    @classmethod
    def from_samples(cls, samples, idx, client_id):
        idx = np.asarray(idx, dtype=np.int64)
        return cls(
            features=samples.features[idx],
            given_labels=samples.given_labels[idx].copy(),
            true_labels=samples.true_labels[idx].copy(),
            sample_ids=samples.sample_ids[idx].copy(),
            client_id=int(client_id),
        )


@dataclass
class NoiseConfig:
    """Label-noise synthesis controls.

    :param phi: fraction of clients that receive label errors
    :param rho_min: lower bound of the per-client noise ratio U(rho_min, rho_max)
    :param rho_max: upper bound of the per-client noise ratio
    :param noise_type: "sym", "asym" or "mixed" (per-client fair coin between the two)
    :param seed: seed of the noise stream
    """

    phi: float = 0.0
    rho_min: float = 0.0
    rho_max: float = 0.0
    noise_type: str = "sym"
    seed: int = 0

    def __post_init__(self):
        self.noise_type = NoiseType(self.noise_type).value
        if self.noise_type == NoiseType.clean.value:
            raise ParameterError("noise_type must be one of sym, asym, mixed (got clean)")
        check_probability("phi", self.phi)
        check_probability("rho_min", self.rho_min)
        check_probability("rho_max", self.rho_max)
        if self.rho_min > self.rho_max:
            raise ParameterError(f"rho_min must not exceed rho_max (got {self.rho_min} > {self.rho_max})")


@dataclass
class AugmentConfig:
    sigma_weak: float = 0.05
    sigma_strong: float = 0.15
    strong_fraction: float = 0.3
    scale_range: tuple = field(default=(0.5, 1.5))


# ================================
# Data generation
# ================================
def generate_dataset(n_classes, n_samples, d_in, class_separation, seed, n_test=None):
    """Gaussian blobs with balanced classes.

    Class c is centred at a random unit direction scaled by
    ``class_separation`` and has identity covariance.

    Returns
    -------
    train, test : SampleSet
        Both splits are drawn from the same distribution; test sample ids
        continue after the training ids.
    """
    if n_classes < 2:
        raise ParameterError(f"n_classes must be >= 2 (got {n_classes})")
    if class_separation <= 0:
        raise ParameterError(f"class_separation must be positive (got {class_separation})")
    if n_test is None:
        n_test = max(n_samples // 5, n_classes)

    rng = make_rng(seed)
    directions = rng.standard_normal((n_classes, d_in))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * class_separation

    def draw(n, id_offset):
        counts = np.full(n_classes, n // n_classes)
        counts[: n % n_classes] += 1
        labels = np.repeat(np.arange(n_classes), counts)
        X = centers[labels] + rng.standard_normal((n, d_in))
        perm = rng.permutation(n)
        return SampleSet(X[perm], labels[perm], labels[perm].copy(), np.arange(n) + id_offset)

    train = draw(n_samples, 0)
    test = draw(n_test, n_samples)
    return train, test


# ================================
# Partitioning
# ================================
def partition_iid(samples, K, seed):
    """Shuffle and cut into K shards whose sizes differ by at most one."""
    if K < 1 or K > len(samples):
        raise ParameterError(f"K must lie in [1, {len(samples)}] (got {K})")
    rng = make_rng(seed)
    perm = rng.permutation(len(samples))
    return [ClientDataset.from_samples(samples, shard, k) for k, shard in enumerate(np.array_split(perm, K))]


def partition_dirichlet(samples, K, alpha, seed, max_retries=100):
    """Non-IID split: each class is spread over clients with Dir(alpha) proportions.

    Draws leaving any client empty are discarded and redrawn with seed + 1,
    seed + 2, ... up to ``max_retries`` attempts.
    """
    if alpha <= 0:
        raise ParameterError(f"alpha must be positive (got {alpha})")
    if K < 1 or K > len(samples):
        raise ParameterError(f"K must lie in [1, {len(samples)}] (got {K})")

    classes = np.unique(samples.true_labels)
    for attempt in range(max_retries):
        rng = make_rng(seed + attempt)
        shards = [[] for _ in range(K)]
        for c in classes:
            idx = np.where(samples.true_labels == c)[0]
            rng.shuffle(idx)
            p = rng.dirichlet(np.full(K, alpha))
            cuts = (np.cumsum(p) * len(idx)).astype(int)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].append(part)
        shards = [np.concatenate(s) for s in shards]
        if all(len(s) > 0 for s in shards):
            return [ClientDataset.from_samples(samples, np.sort(s), k) for k, s in enumerate(shards)]
        logger.debug("Dirichlet draw %d left a client empty; redrawing", attempt)
    raise ParameterError(f"Could not draw a Dirichlet partition without empty clients in {max_retries} attempts")


def merge_clients(clients, client_id=0):
    """All client datasets stacked into one, ordered by client id.

    Given labels keep their corruption, so the merged set is the pooled noisy
    training data of a centrally trained model.
    """
    if not clients:
        raise ParameterError("Nothing to merge: no clients given")
    clients = sorted(clients, key=lambda c: c.client_id)
    merged = ClientDataset(
        features=np.vstack([c.features for c in clients]),
        given_labels=np.concatenate([c.given_labels for c in clients]),
        true_labels=np.concatenate([c.true_labels for c in clients]),
        sample_ids=np.concatenate([c.sample_ids for c in clients]),
        client_id=int(client_id),
    )
    merged.noise_rate = merged.true_noise_ratio
    return merged


def class_histogram(clients, n_classes):
    """Long table (client_id, class, count) of true-label counts per client."""
    rows = []
    for client in clients:
        counts = np.bincount(client.true_labels, minlength=n_classes)
        rows.append(pd.DataFrame({"client_id": client.client_id, "class": np.arange(n_classes), "count": counts}))
    return pd.concat(rows, ignore_index=True)


# ================================
# Label noise
# ================================
def inject_noise(clients, cfg: NoiseConfig, n_classes=None):
    """Corrupt the given labels of round(phi * K) randomly chosen clients.

    Each noisy client draws rho_k ~ U(rho_min, rho_max) and corrupts exactly
    round(rho_k * n_k) uniformly chosen samples. Symmetric noise picks one of
    the C - 1 wrong classes uniformly; asymmetric noise maps c -> (c + 1) mod C.
    Features and true labels are never touched.
    """
    if n_classes is None:
        n_classes = max(c.n_classes for c in clients)
    rng = make_rng(cfg.seed)
    K = len(clients)
    n_noisy = int(round(cfg.phi * K))
    noisy_ids = set(rng.choice(K, size=n_noisy, replace=False).tolist())

    out = []
    for k, client in enumerate(clients):
        if k not in noisy_ids:
            out.append(replace(client, given_labels=client.given_labels.copy()))
            continue
        rho = float(rng.uniform(cfg.rho_min, cfg.rho_max))
        if cfg.noise_type == NoiseType.mixed.value:
            noise_type = NoiseType.sym if rng.random() < 0.5 else NoiseType.asym
        else:
            noise_type = NoiseType(cfg.noise_type)
        n_corrupt = int(round(rho * client.n_k))
        idx = rng.choice(client.n_k, size=n_corrupt, replace=False)

        given = client.given_labels.copy()
        true = client.true_labels[idx]
        if noise_type == NoiseType.sym:
            given[idx] = (true + rng.integers(1, n_classes, size=n_corrupt)) % n_classes
        else:
            given[idx] = (true + 1) % n_classes
        out.append(replace(client, given_labels=given, noise_type=noise_type, noise_rate=rho))
        logger.debug("client %d: %s noise, rho=%.3f, %d corrupted", client.client_id, noise_type.value, rho, n_corrupt)
    return out


# ================================
# Augmentation
# ================================
def augment(x, strength, rng, cfg=None):
    """Feature-space augmentation of one vector or a batch of rows.

    weak: additive N(0, sigma_weak^2) jitter.
    strong: a random subset (``strong_fraction`` of the coordinates) of every
    row is rescaled by U(scale_range), then N(0, sigma_strong^2) noise is added.
    """
    cfg = cfg or AugmentConfig()
    strength = Augmentation(strength)
    x = np.asarray(x, dtype=np.float64)
    if strength == Augmentation.weak:
        return x + rng.normal(0.0, cfg.sigma_weak, size=x.shape)

    X = np.atleast_2d(x)
    n, d = X.shape
    k = max(1, int(round(cfg.strong_fraction * d)))
    cols = np.argsort(rng.random((n, d)), axis=1)[:, :k]
    scale = np.ones_like(X)
    scale[np.arange(n)[:, None], cols] = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=(n, k))
    X = X * scale + rng.normal(0.0, cfg.sigma_strong, size=X.shape)
    return X[0] if x.ndim == 1 else X


# ================================
# CSV dump / load
# ================================
def clients_to_frame(clients):
    frames = []
    for client in clients:
        d = client.features.shape[1]
        df = pd.DataFrame(
            {
                "client_id": client.client_id,
                "sample_id": client.sample_ids,
                "true_label": client.true_labels,
                "given_label": client.given_labels,
            }
        )
        feats = pd.DataFrame(client.features, columns=[f"f_{j}" for j in range(d)])
        frames.append(pd.concat([df, feats], axis=1))
    return pd.concat(frames, ignore_index=True)


def save_clients_csv(clients, path):
    clients_to_frame(clients).to_csv(path, index=False, encoding="utf-8")


def load_clients_csv(path, n_classes=None):
    """Inverse of :func:`save_clients_csv`.

    The noise type is reconstructed: no corruption -> clean, every corrupted
    label equal to (true + 1) mod C -> asym, anything else -> sym.
    """
    df = pd.read_csv(path)
    feature_cols = sorted((c for c in df.columns if c.startswith("f_")), key=lambda c: int(c[2:]))
    if n_classes is None:
        n_classes = int(max(df["true_label"].max(), df["given_label"].max())) + 1

    clients = []
    for client_id, group in df.groupby("client_id", sort=True):
        given = group["given_label"].to_numpy(dtype=np.int64)
        true = group["true_label"].to_numpy(dtype=np.int64)
        wrong = given != true
        if not wrong.any():
            noise_type = NoiseType.clean
        elif np.all(given[wrong] == (true[wrong] + 1) % n_classes):
            noise_type = NoiseType.asym
        else:
            noise_type = NoiseType.sym
        clients.append(
            ClientDataset(
                features=group[feature_cols].to_numpy(dtype=np.float64),
                given_labels=given,
                true_labels=true,
                sample_ids=group["sample_id"].to_numpy(dtype=np.int64),
                client_id=int(client_id),
                noise_type=noise_type,
                noise_rate=float(np.mean(wrong)),
            )
        )
    return clients
