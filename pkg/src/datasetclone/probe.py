"""Linear probing of frozen features with hyperparameter search.

Multinomial logistic regression on top of extracted features: a full-batch
quasi-Newton solver for small training sets, a stochastic one above 100k
samples. Hyperparameters are tuned by seeded random search on a stratified
held-out split, at least 25 trials by default; regularization is expressed
per sample so duplicating the training set leaves the solution unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from .evaluation import FeatureMatrix

logger = logging.getLogger(__name__)

FULL_BATCH_MAX_SAMPLES = 100_000
DEFAULT_TRIALS = 25

REG_RANGE = (1e-6, 1e2)
LR_RANGE = (1e-4, 1e0)
WD_RANGE = (1e-6, 1e-2)


class ProbeError(ValueError):
    pass


@dataclass
class ProbeResult:
    accuracy: float
    best_hparams: dict
    solver: str
    trials: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "best_hparams": self.best_hparams,
            "solver": self.solver,
            "n_trials": len(self.trials),
            "trials": self.trials,
        }


def fit_full_batch(X: np.ndarray, y: np.ndarray, reg_per_sample: float,
                   max_iter: int = 1000) -> LogisticRegression:
    """L2 logistic regression via LBFGS with per-sample regularization.

    The sklearn objective is 0.5*||w||^2 + C * sum_i loss_i; setting
    C = 1 / (reg * n) keeps the effective regularization per sample fixed,
    so duplicating every row does not move the optimum.
    """
    n = X.shape[0]
    clf = LogisticRegression(C=1.0 / (reg_per_sample * n), solver="lbfgs", max_iter=max_iter)
    clf.fit(X, y)
    return clf


class SgdLinearProbe:
    """Mini-batch SGD linear classifier for training sets too large for LBFGS."""

    def __init__(self, lr: float, weight_decay: float, epochs: int = 30,
                 batch_size: int = 1024, seed: int = 0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.linear: Optional[torch.nn.Linear] = None
        self.classes_: Optional[np.ndarray] = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "SgdLinearProbe":
        self.classes_ = np.unique(y)
        index_of = {c: i for i, c in enumerate(self.classes_.tolist())}
        targets = torch.tensor([index_of[c] for c in y.tolist()], dtype=torch.long)
        data = torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32))
        torch.manual_seed(self.seed)
        self.linear = torch.nn.Linear(X.shape[1], len(self.classes_))
        opt = torch.optim.SGD(self.linear.parameters(), lr=self.lr, momentum=0.9,
                              weight_decay=self.weight_decay)
        rng = torch.Generator().manual_seed(self.seed)
        n = data.shape[0]
        for _ in range(self.epochs):
            order = torch.randperm(n, generator=rng)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss = torch.nn.functional.cross_entropy(self.linear(data[idx]), targets[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = self.linear(torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32)))
        return self.classes_[logits.argmax(dim=1).numpy()]


def _accuracy(model, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(model.predict(X) == y))


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(10 ** rng.uniform(math.log10(lo), math.log10(hi)))


def linear_probe(
    train: FeatureMatrix,
    test: FeatureMatrix,
    n_trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    solver: str = "auto",
    val_fraction: float = 0.2,
) -> ProbeResult:
    """Tune, refit on the full training features, and score on the test set.

    Each trial is seeded by its index, so the search is reproducible and
    independent of scheduling. The winning hyperparameters are refit on all
    training rows before test accuracy is reported.
    """
    if train.d != test.d:
        raise ProbeError(f"feature dims differ: train d={train.d}, test d={test.d}")
    if n_trials < 1:
        raise ProbeError("n_trials must be >= 1")
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ProbeError("training features contain a single class")
    if solver == "auto":
        solver = "lbfgs" if train.n <= FULL_BATCH_MAX_SAMPLES else "sgd"
    if solver not in ("lbfgs", "sgd"):
        raise ProbeError(f"unknown solver {solver!r}")

    stratify = train.labels if np.min(np.bincount(train.labels)) >= 2 else None
    X_fit, X_val, y_fit, y_val = train_test_split(
        train.X, train.labels, test_size=val_fraction, random_state=seed, stratify=stratify
    )

    def run_trial(idx: int) -> dict:
        rng = np.random.default_rng([seed, idx])
        if solver == "lbfgs":
            hparams = {"reg": _log_uniform(rng, *REG_RANGE)}
            model = fit_full_batch(X_fit, y_fit, hparams["reg"])
        else:
            hparams = {
                "lr": _log_uniform(rng, *LR_RANGE),
                "weight_decay": _log_uniform(rng, *WD_RANGE),
            }
            model = SgdLinearProbe(hparams["lr"], hparams["weight_decay"], seed=seed).fit(X_fit, y_fit)
        return {"trial": idx, "hparams": hparams, "val_accuracy": _accuracy(model, X_val, y_val)}

    trials = [run_trial(i) for i in range(n_trials)]
    best = max(trials, key=lambda t: (t["val_accuracy"], -t["trial"]))
    logger.info("probe tuner: best trial %d val_accuracy=%.4f hparams=%s",
                best["trial"], best["val_accuracy"], best["hparams"])

    if solver == "lbfgs":
        final = fit_full_batch(train.X, train.labels, best["hparams"]["reg"])
    else:
        final = SgdLinearProbe(best["hparams"]["lr"], best["hparams"]["weight_decay"],
                               seed=seed).fit(train.X, train.labels)
    return ProbeResult(
        accuracy=_accuracy(final, test.X, test.labels),
        best_hparams=best["hparams"],
        solver=solver,
        trials=trials,
    )
