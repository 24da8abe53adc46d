"""Pair-based verification accuracy with cross-validated thresholds, plus ROC."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .data import DataError, LabeledImageSet, load_image
from .tensor import ConfigError

FARS = (1e-2, 1e-3)


class PairScorer(Protocol):
    def score_pairs(self, enroll: np.ndarray, probe: np.ndarray) -> np.ndarray:
        """Score ``probe[i]`` against the verifier enrolled from ``enroll[i]``."""


@dataclass
class PairList:
    """Verification pairs by image key, with a fold per pair.

    Keys are paths relative to ``root`` unless ``images`` maps them to arrays.
    """

    enroll: list[str]
    probe: list[str]
    labels: np.ndarray
    folds: np.ndarray
    root: Path | None = None
    images: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.folds = np.asarray(self.folds, dtype=np.int64)
        n = len(self.enroll)
        if not (len(self.probe) == len(self.labels) == len(self.folds) == n):
            raise ConfigError("pair list columns differ in length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ConfigError("pair labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    @property
    def num_folds(self) -> int:
        return int(self.folds.max()) + 1 if len(self) else 0

    def keys(self) -> list[str]:
        return sorted(set(self.enroll) | set(self.probe))

    def load(self, size: int | None = None) -> dict[str, np.ndarray]:
        """Every referenced image, keyed by its pair-file entry."""
        out = {}
        for key in self.keys():
            if self.images is not None:
                if key not in self.images:
                    raise DataError(f"pair references unknown image {key!r}")
                out[key] = np.asarray(self.images[key])
                continue
            path = Path(key) if self.root is None else self.root / key
            if not path.is_file():
                raise DataError(f"missing image {path}")
            out[key] = load_image(path, size)
        return out


def read_pairs(path: str | Path, folds: int = 10) -> PairList:
    """Parse ``enroll,probe,label[,fold]`` lines; missing folds go round-robin."""
    path = Path(path)
    enroll, probe, labels, fold = [], [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(row)}")
            try:
                lab = int(row[2])
                f = int(row[3]) if len(row) == 4 else len(labels) % folds
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            enroll.append(row[0].strip())
            probe.append(row[1].strip())
            labels.append(lab)
            fold.append(f)
    if not labels:
        raise DataError(f"{path}: no pairs")
    return PairList(enroll, probe, labels, fold, root=path.parent)


def write_pairs(pairs: PairList, path: str | Path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in zip(pairs.enroll, pairs.probe, pairs.labels, pairs.folds):
            w.writerow([row[0], row[1], int(row[2]), int(row[3])])


def make_pairs(ds: LabeledImageSet, count: int, seed: int = 0, folds: int = 10,
               keys: Sequence[str] | None = None) -> PairList:
    """Alternate positive and negative pairs drawn from ``ds`` (half each)."""
    members = ds.indices_by_identity()
    multi = [i for i, m in enumerate(members) if len(m) >= 2]
    if not multi or ds.num_identities < 2:
        raise ConfigError("need an identity with two images and at least two identities")
    keys = [str(i) for i in range(len(ds))] if keys is None else list(keys)
    rng = np.random.default_rng(seed)
    enroll, probe, labels = [], [], []
    for t in range(count):
        if t % 2 == 0:
            a, b = rng.choice(members[multi[rng.integers(len(multi))]], 2, replace=False)
        else:
            i, j = rng.choice(ds.num_identities, 2, replace=False)
            a, b = rng.choice(members[i]), rng.choice(members[j])
        enroll.append(keys[a])
        probe.append(keys[b])
        labels.append(1 - t % 2)
    # consecutive (pos, neg) couples share a fold so folds stay balanced
    fold = [(t // 2) % folds for t in range(count)]
    images = {keys[i]: ds.images[i] for i in range(len(ds))}
    return PairList(enroll, probe, labels, fold, images=images)


# --------------------------------------------------------------- thresholds


def _accuracy_curve(scores: np.ndarray, labels: np.ndarray):
    """Candidate thresholds and accuracy of ``score >= t`` at each."""
    u = np.unique(scores)
    cand = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tp = len(pos) - np.searchsorted(pos, cand, side="left")
    tn = np.searchsorted(neg, cand, side="left")
    return cand, (tp + tn) / len(scores)


def best_threshold(scores, labels) -> tuple[float, float]:
    """Accuracy-maximizing threshold; ties go to the lowest candidate."""
    cand, acc = _accuracy_curve(np.asarray(scores, float), np.asarray(labels))
    i = int(np.argmax(acc))
    return float(cand[i]), float(acc[i])


def accuracy_at(scores, labels, threshold: float) -> float:
    return float(((np.asarray(scores) >= threshold) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------- ROC


@dataclass
class ROC:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray
    auc: float

    def tar_at(self, far: float) -> float:
        ok = self.far <= far + 1e-12
        return float(self.tar[ok].max())


def roc_curve(scores, labels) -> ROC:
    """Sweep every unique score as a threshold, highest first; AUC by trapezoids."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    P = int((labels == 1).sum())
    N = int((labels == 0).sum())
    if P == 0 or N == 0:
        raise ConfigError("ROC needs at least one positive and one negative pair")
    th = np.unique(scores)[::-1]
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tar = (P - np.searchsorted(pos, th, side="left")) / P
    far = (N - np.searchsorted(neg, th, side="left")) / N
    tar = np.concatenate([[0.0], tar])
    far = np.concatenate([[0.0], far])
    th = np.concatenate([[np.inf], th])
    auc = float(np.sum(np.diff(far) * (tar[1:] + tar[:-1]) / 2))
    return ROC(far, tar, th, auc)


# -------------------------------------------------------------------- report


@dataclass
class EvalReport:
    accuracy_mean: float
    accuracy_std: float
    fold_accuracy: list[float]
    fold_threshold: list[float]
    auc: float
    tar_at_far: dict[str, float]
    accuracy_at_default: float
    default_threshold: float
    num_pairs: int
    symmetric: bool
    roc_far: list[float] = field(default_factory=list, repr=False)
    roc_tar: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    def save_roc_csv(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("far,tar\n")
            for f, t in zip(self.roc_far, self.roc_tar):
                fh.write(f"{f!r},{t!r}\n")


def report_from_scores(scores, labels, folds, symmetric: bool = False,
                       default_threshold: float = 0.5) -> EvalReport:
    """Per fold, pick the threshold on the other folds and score the held-out one."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    folds = np.asarray(folds)
    if len(scores) == 0:
        raise ConfigError("no pairs to evaluate")
    accs, ths = [], []
    fold_ids = np.unique(folds)
    for f in fold_ids:
        held = folds == f
        if held.all():
            t, _ = best_threshold(scores, labels)
        else:
            t, _ = best_threshold(scores[~held], labels[~held])
        accs.append(accuracy_at(scores[held], labels[held], t))
        ths.append(t)
    if (labels == 1).any() and (labels == 0).any():
        roc = roc_curve(scores, labels)
        tars = {f"{far:g}": roc.tar_at(far) for far in FARS}
        auc, rf, rt = roc.auc, roc.far.tolist(), roc.tar.tolist()
    else:
        tars, auc, rf, rt = {f"{far:g}": float("nan") for far in FARS}, float("nan"), [], []
    return EvalReport(float(np.mean(accs)), float(np.std(accs)), accs, ths, auc, tars,
                      accuracy_at(scores, labels, default_threshold), default_threshold,
                      len(scores), symmetric, rf, rt)


def score_pair_list(scorer: PairScorer, pairs: PairList, symmetric: bool = False,
                    size: int | None = None) -> np.ndarray:
    """Scores in pair-list order, computed in a canonical order.

    Pairs are sorted before scoring so the floating-point work does not
    depend on how the list happens to be ordered.
    """
    images = pairs.load(size)
    order = sorted(range(len(pairs)), key=lambda i: (pairs.enroll[i], pairs.probe[i]))
    ea = np.stack([images[pairs.enroll[i]] for i in order])
    pa = np.stack([images[pairs.probe[i]] for i in order])
    s = np.asarray(scorer.score_pairs(ea, pa), dtype=float)
    if symmetric:
        s = 0.5 * (s + np.asarray(scorer.score_pairs(pa, ea), dtype=float))
    out = np.empty(len(pairs))
    out[order] = s
    return out


def evaluate_pairs(scorer: PairScorer, pairs: PairList, symmetric: bool = False,
                   size: int | None = None) -> EvalReport:
    if len(pairs) == 0:
        raise ConfigError("empty pair list")
    scores = score_pair_list(scorer, pairs, symmetric, size)
    return report_from_scores(scores, pairs.labels, pairs.folds, symmetric,
                              getattr(scorer, "threshold", 0.5))
