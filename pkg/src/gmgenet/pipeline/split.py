"""Dataset partition: extractor set, classifier train/test, and CV folds over train."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SplitSizeError(ValueError):
    pass


@dataclass
class SplitPlan:
    extractor_ids: list[str]
    train_ids: list[str]
    test_ids: list[str]
    folds: list[list[str]]
    seed: int

    def validate(self) -> None:
        """Partitions pairwise disjoint; folds partition the train set."""
        e, tr, te = set(self.extractor_ids), set(self.train_ids), set(self.test_ids)
        if e & tr or e & te or tr & te:
            raise AssertionError("split partitions overlap")
        fold_ids = [i for f in self.folds for i in f]
        if len(fold_ids) != len(set(fold_ids)) or set(fold_ids) != tr:
            raise AssertionError("folds do not partition the train set")

    @property
    def all_ids(self) -> list[str]:
        return self.extractor_ids + self.train_ids + self.test_ids

    def fold_train(self, k: int) -> list[str]:
        held = set(self.folds[k])
        return [i for i in self.train_ids if i not in held]

    def write_csv(self, path) -> None:
        fold_of = {i: k for k, f in enumerate(self.folds) for i in f}
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "partition", "fold", "seed"])
            for pid in self.extractor_ids:
                w.writerow([pid, "extractor", "", self.seed])
            for pid in self.train_ids:
                w.writerow([pid, "train", fold_of[pid], self.seed])
            for pid in self.test_ids:
                w.writerow([pid, "test", "", self.seed])

    @classmethod
    def read_csv(cls, path) -> "SplitPlan":
        ext, train, test = [], [], []
        folds: dict[int, list[str]] = {}
        seed = 0
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                seed = int(row["seed"])
                part = row["partition"]
                if part == "extractor":
                    ext.append(row["patient_id"])
                elif part == "train":
                    train.append(row["patient_id"])
                    folds.setdefault(int(row["fold"]), []).append(row["patient_id"])
                elif part == "test":
                    test.append(row["patient_id"])
                else:
                    raise ValueError(f"unknown partition {part!r} in {path}")
        plan = cls(ext, train, test, [folds[k] for k in sorted(folds)], seed)
        plan.validate()
        return plan


def _take_stratified(pools: dict[int, list[str]], n: int) -> list[str]:
    """Remove ``n`` ids from the per-label pools in proportion to their sizes."""
    total = sum(len(p) for p in pools.values())
    labels = sorted(pools)
    quota = {lab: int(round(n * len(pools[lab]) / total)) for lab in labels}
    # fix rounding so quotas sum to n and stay within pool sizes
    diff = n - sum(quota.values())
    for lab in sorted(labels, key=lambda l: -len(pools[l])):
        if diff == 0:
            break
        step = 1 if diff > 0 else -1
        if 0 <= quota[lab] + step <= len(pools[lab]):
            quota[lab] += step
            diff -= step
    taken = []
    for lab in labels:
        q = min(quota[lab], len(pools[lab]))
        taken += pools[lab][:q]
        pools[lab] = pools[lab][q:]
    return taken


def make_split(ids, labels, seed: int = 0, extractor_n: int = 30, test_frac: float = 0.2, folds: int = 5) -> SplitPlan:
    """Stratified, seeded split into extractor / train / test plus ``folds`` CV folds over train."""
    ids = [str(i) for i in ids]
    labels = [int(l) for l in labels]
    if len(ids) != len(labels):
        raise ValueError("ids and labels differ in length")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    n = len(ids)
    if not 0 < test_frac < 1:
        raise ValueError(f"test_frac must lie in (0, 1), got {test_frac}")
    if extractor_n < 1 or extractor_n >= n:
        raise SplitSizeError(f"extractor_n={extractor_n} leaves no samples for the classifier (total {n})")
    rest = n - extractor_n
    n_test = int(round(rest * test_frac))
    n_train = rest - n_test
    if n_test < 1 or n_train < folds or folds < 2:
        raise SplitSizeError(f"{rest} classifier samples cannot fill a test set and {folds} folds")

    rng = np.random.default_rng(seed)
    pools: dict[int, list[str]] = {}
    for lab in sorted(set(labels)):
        members = [i for i, l in zip(ids, labels) if l == lab]
        pools[lab] = [members[j] for j in rng.permutation(len(members))]

    extractor = _take_stratified(pools, extractor_n)
    test = _take_stratified(pools, n_test)
    train_by_label = {lab: list(p) for lab, p in pools.items()}
    train = [i for lab in sorted(train_by_label) for i in train_by_label[lab]]

    # deal each class round-robin so folds stay balanced in size and label mix
    fold_lists: list[list[str]] = [[] for _ in range(folds)]
    cursor = 0
    for lab in sorted(train_by_label):
        for pid in train_by_label[lab]:
            fold_lists[cursor % folds].append(pid)
            cursor += 1
    order = {pid: k for k, pid in enumerate(ids)}
    plan = SplitPlan(
        sorted(extractor, key=order.get),
        sorted(train, key=order.get),
        sorted(test, key=order.get),
        [sorted(f, key=order.get) for f in fold_lists],
        seed,
    )
    plan.validate()
    return plan


def holdout_split(ids, labels, frac: float, seed: int = 0) -> tuple[list[str], list[str]]:
    """Stratified (fit, held-out) partition of ``ids``; both keep the input order."""
    ids = [str(i) for i in ids]
    if not 0 < frac < 1:
        raise ValueError(f"frac must lie in (0, 1), got {frac}")
    n_out = int(round(len(ids) * frac))
    if n_out < 1 or n_out >= len(ids):
        raise SplitSizeError(f"cannot hold out {frac:.0%} of {len(ids)} ids")
    rng = np.random.default_rng(seed)
    pools: dict[int, list[str]] = {}
    for lab in sorted(set(int(l) for l in labels)):
        members = [i for i, l in zip(ids, labels) if int(l) == lab]
        pools[lab] = [members[j] for j in rng.permutation(len(members))]
    held = set(_take_stratified(pools, n_out))
    return [i for i in ids if i not in held], [i for i in ids if i in held]
