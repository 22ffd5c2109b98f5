# -*- coding: utf-8 -*-
"""Evaluation metrics, per-round reports and CSV result files."""
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from fedgr_tools import nn
from fedgr_tools.utils import ParameterError, ShapeError

logger = logging.getLogger(__name__)

ROUNDS_COLUMNS = ["t", "test_accuracy", "memorization_fraction", "n_participants"]
CLIENTS_COLUMNS = ["t", "client_id", "r_k_est", "rho_true", "precision", "recall", "f1", "refined_fraction"]
MEMORIZATION_COLUMNS = ["t", "client_id", "local_memorization", "global_memorization"]
SUMMARY_COLUMNS = ["last10_mean_acc", "pearson", "seed", "config_hash", "method", "final_accuracy", "final_memorization"]


def test_accuracy(params, test_set):
    """Fraction of test samples whose argmax prediction equals the true label."""
    if len(test_set) == 0:
        raise ParameterError("Test set is empty")
    return float(accuracy_score(test_set.true_labels, nn.predict(params, test_set.features)))


# not a test case
test_accuracy.__test__ = False


def memorization_fraction(params, clients):
    """Share of noisy samples (given != true) predicted as their given label.

    Returns 0.0 when the clients hold no noisy sample.
    """
    noisy = [(c.features[c.noisy_mask], c.given_labels[c.noisy_mask]) for c in clients if c.noisy_mask.any()]
    if not noisy:
        return 0.0
    X = np.vstack([x for x, _ in noisy])
    y = np.concatenate([y for _, y in noisy])
    return float(np.mean(nn.predict(params, X) == y))


def selection_f1(is_clean, client):
    """Precision, recall and F1 of the clean-set selection, clean being the positive class.

    An empty predicted clean set scores precision 0 (and F1 0).
    """
    is_clean = np.asarray(is_clean, dtype=bool)
    if is_clean.shape != client.given_labels.shape:
        raise ShapeError(f"Selection covers {is_clean.shape} samples, client has {client.given_labels.shape}")
    truly_clean = ~client.noisy_mask
    p, r, f, _ = precision_recall_fscore_support(
        truly_clean.astype(int), is_clean.astype(int), average="binary", pos_label=1, zero_division=0
    )
    return float(p), float(r), float(f)


def noise_ratio_pearson(estimates, truths):
    """Pearson correlation of estimated vs. true noise ratios; NaN when undefined."""
    x = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"estimates {x.shape} and truths {y.shape} differ in shape")
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(stats.pearsonr(x, y)[0])


def last10_mean_accuracy(reports, window=10):
    """Mean test accuracy over the final ``window`` rounds (all rounds if fewer)."""
    if not reports:
        return float("nan")
    return float(np.mean([r.test_accuracy for r in reports[-window:]]))


# ================================
# Reports
# ================================
@dataclass
class ClientReport:
    client_id: int
    r_k_est: float = float("nan")
    rho_true: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    refined_fraction: float = float("nan")
    local_memorization: float = float("nan")
    global_memorization: float = float("nan")


@dataclass
class RoundReport:
    t: int
    test_accuracy: float
    memorization_fraction: float
    participants: Tuple[int, ...] = ()
    clients: List[ClientReport] = field(default_factory=list)

    @property
    def n_participants(self):
        return len(self.participants)


def rounds_frame(reports):
    return pd.DataFrame(
        [[r.t, r.test_accuracy, r.memorization_fraction, r.n_participants] for r in reports], columns=ROUNDS_COLUMNS
    )


def clients_frame(reports):
    rows = [{"t": r.t, **asdict(c)} for r in reports for c in r.clients]
    return pd.DataFrame(rows, columns=CLIENTS_COLUMNS)


def memorization_frame(reports):
    rows = [{"t": r.t, **asdict(c)} for r in reports for c in r.clients]
    return pd.DataFrame(rows, columns=MEMORIZATION_COLUMNS)


def summary_row(reports, pearson, seed, config_hash, method):
    return {
        "last10_mean_acc": last10_mean_accuracy(reports),
        "pearson": pearson,
        "seed": seed,
        "config_hash": config_hash,
        "method": method,
        "final_accuracy": reports[-1].test_accuracy if reports else float("nan"),
        "final_memorization": reports[-1].memorization_fraction if reports else float("nan"),
    }


def _to_csv(df, path):
    df.to_csv(path, index=False, encoding="utf-8", na_rep="nan")


def write_run_csvs(out_dir, reports, summary, partition=None):
    """Write rounds.csv, clients.csv, memorization.csv, summary.csv (and
    partition.csv when a class histogram is given) into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    _to_csv(rounds_frame(reports), os.path.join(out_dir, "rounds.csv"))
    _to_csv(clients_frame(reports), os.path.join(out_dir, "clients.csv"))
    _to_csv(memorization_frame(reports), os.path.join(out_dir, "memorization.csv"))
    _to_csv(pd.DataFrame([summary], columns=SUMMARY_COLUMNS), os.path.join(out_dir, "summary.csv"))
    if partition is not None:
        _to_csv(partition, os.path.join(out_dir, "partition.csv"))
    logger.info("Results written to %s", out_dir)


def summarize_seeds(summaries):
    """Mean and standard deviation of every numeric summary column per method."""
    df = pd.DataFrame(summaries, columns=SUMMARY_COLUMNS)
    metrics = ["last10_mean_acc", "pearson", "final_accuracy", "final_memorization"]
    out = df.groupby("method", sort=True)[metrics].agg(["mean", "std"])
    out.columns = [f"{m}_{s}" for m, s in out.columns]
    out["n_seeds"] = df.groupby("method", sort=True).size()
    return out.reset_index()
