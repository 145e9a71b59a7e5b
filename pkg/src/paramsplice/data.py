"""Synthetic desk-scale datasets: Gaussian-mixture classification and
planted low-rank implicit feedback, with deterministic generation and an
npz round trip for the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

TASK_CLASSIFICATION = "classification"
TASK_RANKING = "ranking"
TASKS = (TASK_CLASSIFICATION, TASK_RANKING)


@dataclass
class Dataset:
    """Inputs, labels, and disjoint train/validation/test index splits.

    For classification, inputs are (N, d) features and labels are class
    ids. For ranking, inputs are (N, 2) user/item interaction pairs in
    per-user chronological order and labels are all ones (implicit
    feedback); the held-out test interaction is the last one per user.
    """

    task: str
    inputs: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        splits = [set(self.train_idx.tolist()), set(self.val_idx.tolist()),
                  set(self.test_idx.tolist())]
        for i in range(len(splits)):
            for j in range(i + 1, len(splits)):
                if splits[i] & splits[j]:
                    raise ValueError("train/validation/test splits overlap")
        if self.task == TASK_CLASSIFICATION:
            n_classes = int(self.meta["n_classes"])
            if self.labels.min() < 0 or self.labels.max() >= n_classes:
                raise ValueError("labels outside [0, n_classes)")
        else:
            n_items = int(self.meta["n_items"])
            if self.inputs[:, 1].min() < 0 or self.inputs[:, 1].max() >= n_items:
                raise ValueError("item ids outside [0, n_items)")

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.inputs[idx], self.labels[idx]


def gen_classification(seed: int, n_samples: int = 7000, n_features: int = 16,
                       n_classes: int = 2, separation: float = 4.0) -> Dataset:
    """Gaussian mixture with one unit-variance component per class.

    Class means are ``separation`` apart along random orthonormal
    directions, so the Bayes error is controlled by ``separation`` alone.
    Validation and test each take ~1/7 of the samples (the default 7000
    gives a 5000/1000/1000 split).
    """
    if min(n_samples, n_features, n_classes) <= 0:
        raise ValueError("sample, feature, and class counts must be positive")
    if n_classes > n_features:
        raise ValueError("need n_features >= n_classes for orthonormal class means")
    if n_samples < 3:
        raise ValueError("need at least 3 samples to split")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((n_features, n_classes)))
    means = separation * basis.T  # (n_classes, n_features)
    labels = rng.integers(0, n_classes, size=n_samples)
    inputs = means[labels] + rng.standard_normal((n_samples, n_features))

    n_holdout = max(1, round(n_samples / 7))
    order = rng.permutation(n_samples)
    val_idx = order[:n_holdout]
    test_idx = order[n_holdout:2 * n_holdout]
    train_idx = order[2 * n_holdout:]
    return Dataset(TASK_CLASSIFICATION, inputs, labels.astype(np.int64),
                   np.sort(train_idx), np.sort(val_idx), np.sort(test_idx),
                   meta={"n_features": n_features, "n_classes": n_classes,
                         "separation": separation})


def gen_interactions(seed: int, n_users: int = 150, n_items: int = 300,
                     latent_dim: int = 8, interactions_per_user: int = 30,
                     concentration: float = 4.0) -> Dataset:
    """Implicit feedback sampled from a planted low-rank preference matrix.

    Each user draws ``interactions_per_user`` distinct items with
    probability proportional to exp(concentration * standardized
    preference). The last draw per user is the test item, the second to
    last the validation item, the rest train. The planted factors are kept
    in ``meta`` so oracle scorers can be built in tests.
    """
    if min(n_users, n_items, latent_dim) <= 0:
        raise ValueError("user, item, and latent sizes must be positive")
    if interactions_per_user < 3:
        raise ValueError("need at least 3 interactions per user to split")
    if interactions_per_user > n_items:
        raise ValueError("more interactions per user than items")
    rng = np.random.default_rng(seed)
    planted_users = rng.standard_normal((n_users, latent_dim))
    planted_items = rng.standard_normal((n_items, latent_dim))
    preference = planted_users @ planted_items.T
    z = (preference - preference.mean(axis=1, keepdims=True)) \
        / (preference.std(axis=1, keepdims=True) + 1e-12)

    pairs = []
    for user in range(n_users):
        logits = concentration * z[user]
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        items = rng.choice(n_items, size=interactions_per_user, replace=False, p=probs)
        pairs.extend((user, int(item)) for item in items)
    inputs = np.array(pairs, dtype=np.int64)
    labels = np.ones(len(pairs), dtype=np.int64)

    per_user = interactions_per_user
    offsets = np.arange(n_users) * per_user
    test_idx = offsets + per_user - 1
    val_idx = offsets + per_user - 2
    train_mask = np.ones(len(pairs), dtype=bool)
    train_mask[test_idx] = False
    train_mask[val_idx] = False
    train_idx = np.nonzero(train_mask)[0]
    return Dataset(TASK_RANKING, inputs, labels, train_idx, val_idx, test_idx,
                   meta={"n_users": n_users, "n_items": n_items, "latent_dim": latent_dim,
                         "interactions_per_user": interactions_per_user,
                         "concentration": concentration,
                         "planted_user_factors": planted_users,
                         "planted_item_factors": planted_items})


def ranking_candidates(data: Dataset, seed: int, n_negatives: int = 100
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out evaluation candidates: per user, the held-out test item
    in column 0 followed by ``n_negatives`` items the user never touched."""
    if data.task != TASK_RANKING:
        raise ValueError("ranking candidates need a ranking dataset")
    rng = np.random.default_rng(seed)
    n_items = int(data.meta["n_items"])
    n_users = int(data.meta["n_users"])
    seen: list[set[int]] = [set() for _ in range(n_users)]
    for user, item in data.inputs:
        seen[user].add(int(item))
    users = data.inputs[data.test_idx, 0]
    positives = data.inputs[data.test_idx, 1]
    candidates = np.empty((len(users), 1 + n_negatives), dtype=np.int64)
    for row, (user, positive) in enumerate(zip(users, positives)):
        pool = np.setdiff1d(np.arange(n_items), np.fromiter(seen[user], dtype=np.int64))
        if len(pool) < n_negatives:
            raise ValueError(f"user {user} has fewer than {n_negatives} unseen items")
        negatives = rng.choice(pool, size=n_negatives, replace=False)
        candidates[row, 0] = positive
        candidates[row, 1:] = negatives
    return users, candidates


def save_dataset(data: Dataset, path) -> None:
    scalar_meta = {k: v for k, v in data.meta.items() if not isinstance(v, np.ndarray)}
    array_meta = {f"meta_{k}": v for k, v in data.meta.items() if isinstance(v, np.ndarray)}
    np.savez(path, task=np.array(data.task), inputs=data.inputs, labels=data.labels,
             train_idx=data.train_idx, val_idx=data.val_idx, test_idx=data.test_idx,
             meta_json=np.array(json.dumps(scalar_meta)), **array_meta)


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta_json"]))
        meta.update({key[len("meta_"):]: blob[key] for key in blob.files
                     if key.startswith("meta_") and key != "meta_json"})
        return Dataset(str(blob["task"]), blob["inputs"], blob["labels"],
                       blob["train_idx"], blob["val_idx"], blob["test_idx"], meta)
