"""Verification, closed-set and open-set identification protocols.

A *scorer* is any ``scorer(x1, x2) -> float`` where larger means "more likely
the same person". Tie rules are fixed so every protocol is deterministic:
verification thresholds tie to the lowest value and gallery matches tie to
the lowest subject id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError

IMPOSTOR = -1

# reference values for full-scale runs; not reproducible on synthetic data
REFERENCE_VERIFICATION_ACCURACY = 0.9953
REFERENCE_VERIFICATION_STD = 0.0010
REFERENCE_RANK1_CLOSED_SET = 0.960
REFERENCE_DIR_AT_1PCT_FAR = 0.814
REFERENCE_NET1_ERROR_REDUCTION = 0.0081
REFERENCE_NET2_ERROR_REDUCTION = 0.0026


@dataclass
class VerificationSet:
    """Pairs ``(feature_a, feature_b, same)`` and a fold index per pair."""

    pairs: list
    folds: np.ndarray

    def __post_init__(self):
        self.folds = np.asarray(self.folds, dtype=np.int64)
        if len(self.folds) != len(self.pairs):
            raise ProtocolError(f"{len(self.pairs)} pairs but {len(self.folds)} fold labels")

    @property
    def labels(self):
        return np.array([bool(p[2]) for p in self.pairs])

    def scores(self, scorer):
        return np.array([scorer(a, b) for a, b, _ in self.pairs], dtype=np.float64)


@dataclass
class IdentificationSet:
    """Gallery ``(subject_id, feature)`` with unique ids, and probes
    ``(subject_id or IMPOSTOR, feature)``."""

    gallery: list
    probes: list

    def __post_init__(self):
        ids = [g[0] for g in self.gallery]
        if len(set(ids)) != len(ids):
            raise ProtocolError("gallery subject ids must be unique")
        # sorting by id makes argmax's first-occurrence rule pick the lowest id on ties
        self.gallery = sorted(self.gallery, key=lambda g: g[0])

    @property
    def gallery_ids(self):
        return np.array([g[0] for g in self.gallery])

    def score_matrix(self, scorer):
        """``[n_probes, n_gallery]`` scores."""
        return np.array([[scorer(p[1], g[1]) for g in self.gallery] for p in self.probes], dtype=np.float64)


@dataclass
class EvaluationReport:
    protocol: str
    mean_accuracy: float | None = None
    fold_accuracies: list = field(default_factory=list)
    accuracy_std: float | None = None
    roc: list = field(default_factory=list)
    rank1: float | None = None
    dir: float | None = None
    far: float | None = None


def assign_folds(labels, n_folds: int = 10):
    """Stratified contiguous fold labels: genuine and impostor pairs are each
    split into ``n_folds`` near-equal runs in their given order."""
    labels = np.asarray(labels, dtype=bool)
    folds = np.empty(len(labels), dtype=np.int64)
    for cls in (True, False):
        idx = np.flatnonzero(labels == cls)
        folds[idx] = np.arange(len(idx)) * n_folds // max(len(idx), 1)
    return folds


def best_threshold(scores, labels):
    """Threshold maximising accuracy of the rule ``score > t``.

    Candidates are ``-inf`` (accept everything) and every distinct score;
    ties go to the lowest candidate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    cands = np.concatenate([[-np.inf], np.unique(scores)])
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    gen_sorted = labels[order].astype(np.int64)
    n_gen = gen_sorted.sum()
    # number of genuine / impostor scores <= t for each candidate t
    upto = np.searchsorted(s_sorted, cands, side="right")
    gen_cum = np.concatenate([[0], np.cumsum(gen_sorted)])
    gen_le = gen_cum[upto]
    imp_le = upto - gen_le
    correct = (n_gen - gen_le) + imp_le
    best = int(np.argmax(correct))  # first == lowest threshold
    return float(cands[best]), correct[best] / len(labels)


def fold_accuracies_from_scores(scores, labels, folds):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    folds = np.asarray(folds)
    uniq = np.unique(folds)
    if len(uniq) < 2:
        raise ProtocolError(f"verification needs at least 2 folds, got {len(uniq)}")
    accs, thresholds = [], []
    for f in uniq:
        test = folds == f
        if labels[test].all() or not labels[test].any():
            raise ProtocolError(f"fold {f} lacks genuine or impostor pairs")
        t, _ = best_threshold(scores[~test], labels[~test])
        pred = scores[test] > t
        accs.append(float((pred == labels[test]).mean()))
        thresholds.append(t)
    return accs, thresholds


def verification_accuracy(vs: VerificationSet, scorer):
    """Cross-validated accuracy: ``(mean, population std, per-fold)``."""
    accs, _ = fold_accuracies_from_scores(vs.scores(scorer), vs.labels, vs.folds)
    return float(np.mean(accs)), float(np.std(accs)), accs


def roc_curve(scores_genuine, scores_impostor):
    """``(FAR, TAR)`` points for the rule ``score >= t`` over all distinct scores.

    Includes ``(0, 0)`` for an infinite threshold and ``(1, 1)``; sorted by
    FAR, then TAR.
    """
    g = np.sort(np.asarray(scores_genuine, dtype=np.float64))
    i = np.sort(np.asarray(scores_impostor, dtype=np.float64))
    if g.size == 0 or i.size == 0:
        raise ProtocolError("roc_curve needs genuine and impostor scores")
    thresholds = np.unique(np.concatenate([g, i]))[::-1]
    tar = (g.size - np.searchsorted(g, thresholds, side="left")) / g.size
    far = (i.size - np.searchsorted(i, thresholds, side="left")) / i.size
    points = [(0.0, 0.0)] + list(zip(far.tolist(), tar.tolist()))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return sorted(set(points))


def _best_matches(ids: IdentificationSet, scorer):
    if not ids.gallery:
        raise ProtocolError("empty gallery")
    s = ids.score_matrix(scorer)
    best = np.argmax(s, axis=1)
    return ids.gallery_ids[best], s[np.arange(len(s)), best]


def rank1_closed_set(ids: IdentificationSet, scorer) -> float:
    """Fraction of probes whose top-scoring gallery subject is their own."""
    gallery = set(ids.gallery_ids.tolist())
    true = np.array([p[0] for p in ids.probes])
    if not ids.probes:
        raise ProtocolError("no probes")
    if not set(true.tolist()) <= gallery:
        raise ProtocolError("closed-set probes must all belong to gallery subjects")
    match, _ = _best_matches(ids, scorer)
    return float((match == true).mean())


def open_set_threshold(impostor_best, far: float) -> float:
    """Smallest ``t`` with at most a ``far`` fraction of impostor scores above it."""
    s = np.sort(np.asarray(impostor_best, dtype=np.float64))[::-1]
    # k = most impostors allowed strictly above t; the slack absorbs far*n round-off
    k = min(int(np.floor(far * len(s) + 1e-9)), len(s) - 1)
    return float(s[k])


def dir_at_far(ids: IdentificationSet, scorer, far: float) -> float:
    """Rank-1 detection and identification rate at a false alarm rate.

    Genuine probes count when their top match is correct and its score is
    strictly above the threshold set on the impostor probes.
    """
    if not 0.0 < far < 1.0:
        raise ProtocolError(f"far must be in (0, 1), got {far}")
    true = np.array([p[0] for p in ids.probes])
    imp = true == IMPOSTOR
    if not imp.any():
        raise ProtocolError("open-set identification needs impostor probes")
    if imp.all():
        raise ProtocolError("open-set identification needs genuine probes")
    match, best = _best_matches(ids, scorer)
    tau = open_set_threshold(best[imp], far)
    hit = (match[~imp] == true[~imp]) & (best[~imp] > tau)
    return float(hit.mean())


def region_comparison_report(regions, acc_a, acc_b):
    """Rows ``(region, acc_a, acc_b)`` and the mean error-rate reduction of
    family A relative to family B."""
    regions = list(regions)
    acc_a = np.asarray(acc_a, dtype=np.float64)
    acc_b = np.asarray(acc_b, dtype=np.float64)
    if not (len(regions) == len(acc_a) == len(acc_b)) or not regions:
        raise ProtocolError("both families need one accuracy per region")
    rows = list(zip(regions, acc_a.tolist(), acc_b.tolist()))
    delta = float(np.mean((1.0 - acc_b) - (1.0 - acc_a)))
    return rows, delta


# ---------------------------------------------------------------------------
# CSV writers


def _fmt(x):
    return repr(float(x))


def verification_csv(fold_accs) -> str:
    return "fold,accuracy\n" + "".join(f"{i},{_fmt(a)}\n" for i, a in enumerate(fold_accs))


def roc_csv(points) -> str:
    return "far,tar\n" + "".join(f"{_fmt(f)},{_fmt(t)}\n" for f, t in points)


def identification_csv(metrics) -> str:
    return "metric,value\n" + "".join(f"{k},{_fmt(v)}\n" for k, v in metrics.items())


def region_csv(rows) -> str:
    return "region,acc_a,acc_b\n" + "".join(f"{r},{_fmt(a)},{_fmt(b)}\n" for r, a, b in rows)
