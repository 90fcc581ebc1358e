"""Feedback propagation: exemplar selection, threshold sweeps, baselines.

The workflow has two phases: pick a budget of exemplar programs to annotate
(cluster centroids over the learned root-matrix embeddings, or the simpler
strategies), then score every remaining program on all rubric labels and
sweep one global probability threshold. Precision and recall are
micro-averaged over (program, label) pairs, weighted by how many students
submitted the program; exemplars never enter the metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .corpus import Submission
from .dsl import CanonicalId, subtrees
from .numcore import make_rng, sigmoid
from .treedist import edit_distance


class SelectionStrategy(Enum):
    KMEANS_CENTROIDS = "kmeans_centroids"
    RANDOM_UNIFORM = "random_uniform"
    MOST_COMMON = "most_common"


# --- k-means -------------------------------------------------------------------


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    pp = (points * points).sum(axis=1)[:, None]
    cc = (centers * centers).sum(axis=1)[None, :]
    return np.maximum(pp + cc - 2.0 * points @ centers.T, 0.0)


def kmeans(
    points: np.ndarray, k: int, seed: int, max_iter: int = 100
) -> tuple[list[int], np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (per-cluster index of the member nearest its mean, assignments),
    so the chosen centroids are always real points. Empty clusters re-seed
    with the point farthest from its own center. Deterministic given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    rng = make_rng(seed)

    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    closest = _sq_dists(points, centers[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[i] = points[int(rng.integers(n))]
        else:
            centers[i] = points[int(rng.choice(n, p=closest / total))]
        closest = np.minimum(closest, _sq_dists(points, centers[i : i + 1]).ravel())

    assign = np.full(n, -1)
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        new_assign = d.argmin(axis=1)
        own = d[np.arange(n), new_assign]
        for c in range(k):
            mask = new_assign == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
            else:
                far = int(own.argmax())
                centers[c] = points[far]
                new_assign[far] = c
                own[far] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    d = _sq_dists(points, centers)
    assign = d.argmin(axis=1)
    exemplar_idx = []
    for c in range(k):
        mask = np.where(assign == c)[0]
        if len(mask) == 0:
            mask = np.arange(n)
        exemplar_idx.append(int(mask[d[mask, c].argmin()]))
    return exemplar_idx, assign


def kmeans_objective(points: np.ndarray, centers: np.ndarray) -> float:
    return float(_sq_dists(points, centers).min(axis=1).sum())


def select_exemplars(
    submissions: list[Submission],
    embeddings: np.ndarray | None,
    budget: int,
    strategy: SelectionStrategy,
    seed: int,
) -> list[CanonicalId]:
    """Pick budget programs for annotation under the given strategy."""
    n = len(submissions)
    if budget > n:
        raise ValueError(f"budget {budget} exceeds corpus size {n}")
    if strategy is SelectionStrategy.KMEANS_CENTROIDS:
        if embeddings is None or embeddings.shape[0] != n:
            raise ValueError("kmeans selection needs one embedding per submission")
        idx, _ = kmeans(embeddings, budget, seed)
        idx = sorted(set(idx))
        # distinct centroid members can collide; pad deterministically
        if len(idx) < budget:
            for i in range(n):
                if i not in set(idx):
                    idx.append(i)
                if len(idx) == budget:
                    break
    elif strategy is SelectionStrategy.RANDOM_UNIFORM:
        rng = make_rng(seed)
        idx = sorted(int(i) for i in rng.choice(n, size=budget, replace=False))
    elif strategy is SelectionStrategy.MOST_COMMON:
        order = sorted(range(n), key=lambda i: (-submissions[i].frequency, i))
        idx = order[:budget]
    else:
        raise ValueError(f"unknown strategy {strategy}")
    return [submissions[i].digest for i in idx]


# --- precision/recall sweeps ----------------------------------------------------


@dataclass
class PrCurve:
    """(threshold, precision, recall) points with thresholds increasing."""

    points: list[tuple[float, float, float]]

    def recall_at(self, precision_target: float) -> float:
        best = 0.0
        for _, precision, recall in self.points:
            if precision >= precision_target:
                best = max(best, recall)
        return best

    def threshold_at(self, precision_target: float) -> float | None:
        best = None
        best_recall = -1.0
        for threshold, precision, recall in self.points:
            if precision >= precision_target and recall > best_recall:
                best_recall = recall
                best = threshold
        return best


@dataclass
class SweepResult:
    curve: PrCurve
    recall_at_target: float
    operating_threshold: float | None
    force_multiplier: float
    precision_target: float
    reached_target: bool


def sweep_thresholds(
    probs: np.ndarray, truth: np.ndarray, weights: np.ndarray
) -> PrCurve:
    """Global-threshold PR curve over weighted (program, label) pairs."""
    probs = probs.ravel()
    truth = truth.ravel().astype(bool)
    weights = weights.ravel()
    order = np.argsort(-probs, kind="stable")
    p = probs[order]
    w = weights[order]
    wy = w * truth[order]
    cum_w = np.cumsum(w)
    cum_wy = np.cumsum(wy)
    total_true = wy.sum()
    # one point per distinct probability, taking all pairs with prob >= it
    boundary = np.nonzero(np.diff(p))[0]
    last = np.concatenate([boundary, [len(p) - 1]])
    points = []
    for i in last[::-1]:  # ascending thresholds
        asserted = cum_w[i]
        hit = cum_wy[i]
        precision = hit / asserted if asserted > 0 else 1.0
        recall = hit / total_true if total_true > 0 else 0.0
        points.append((float(p[i]), float(precision), float(recall)))
    return PrCurve(points)


def propagate_and_sweep(
    predictions: dict[CanonicalId, np.ndarray],
    truth: dict[CanonicalId, frozenset],
    frequencies: dict[CanonicalId, int],
    labels: list[str],
    exemplar_ids: list[CanonicalId],
    precision_target: float = 0.9,
) -> SweepResult:
    """Sweep one global threshold and report recall at the precision target.

    The force multiplier is the ratio of student mass reached (non-exemplar
    programs with at least one asserted label at the operating point) to the
    student mass of the exemplars themselves. When no threshold reaches the
    target precision, recall is 0 and the result is flagged.
    """
    exemplar_set = set(exemplar_ids)
    overlap = exemplar_set & set(predictions)
    if overlap:
        raise ValueError("predictions must not cover exemplars")
    ids = list(predictions)
    label_pos = {name: i for i, name in enumerate(labels)}
    n, L = len(ids), len(labels)
    probs = np.zeros((n, L))
    truth_m = np.zeros((n, L), dtype=bool)
    weights = np.zeros((n, L))
    for r, pid in enumerate(ids):
        probs[r] = predictions[pid]
        weights[r] = frequencies[pid]
        for tag in truth[pid]:
            if tag in label_pos:
                truth_m[r, label_pos[tag]] = True

    curve = sweep_thresholds(probs, truth_m, weights)
    recall = curve.recall_at(precision_target)
    tau = curve.threshold_at(precision_target)
    reached = tau is not None
    force = 0.0
    if reached:
        assert_any = (probs >= tau).any(axis=1)
        reached_mass = sum(
            frequencies[pid] for r, pid in enumerate(ids) if assert_any[r]
        )
        exemplar_mass = sum(frequencies[e] for e in exemplar_ids)
        force = reached_mass / exemplar_mass if exemplar_mass > 0 else 0.0
    return SweepResult(
        curve=curve,
        recall_at_target=recall,
        operating_threshold=tau,
        force_multiplier=force,
        precision_target=precision_target,
        reached_target=reached,
    )


def per_label_recalls(
    predictions: dict[CanonicalId, np.ndarray],
    truth: dict[CanonicalId, frozenset],
    frequencies: dict[CanonicalId, int],
    labels: list[str],
    precision_target: float = 0.9,
) -> dict[str, float]:
    """Independent per-label sweeps; the macro view of propagation."""
    ids = list(predictions)
    out = {}
    for j, name in enumerate(labels):
        probs = np.array([predictions[pid][j] for pid in ids])
        y = np.array([name in truth[pid] for pid in ids])
        w = np.array([frequencies[pid] for pid in ids], dtype=float)
        if not y.any():
            out[name] = float("nan")
            continue
        out[name] = sweep_thresholds(probs, y, w).recall_at(precision_target)
    return out


# --- baselines -------------------------------------------------------------------


def baseline_bag_of_trees(
    exemplars: list[tuple[set[CanonicalId], frozenset]],
    program_features: dict[CanonicalId, set[CanonicalId]],
    labels: list[str],
    alpha: float = 1.0,
) -> dict[CanonicalId, np.ndarray]:
    """Per-label Bernoulli Naive Bayes over subtree presence.

    The vocabulary is every subtree id in the corpus; features unseen among
    exemplars carry only their Laplace-smoothing mass. Log-odds map to
    probabilities through a sigmoid.
    """
    vocab: set[CanonicalId] = set()
    for feats in program_features.values():
        vocab |= feats
    for feats, _ in exemplars:
        vocab |= feats
    V = len(vocab)
    K = len(exemplars)

    out_scores = {pid: np.zeros(len(labels)) for pid in program_features}
    for j, name in enumerate(labels):
        pos = [feats for feats, tags in exemplars if name in tags]
        neg = [feats for feats, tags in exemplars if name not in tags]
        n_pos, n_neg = len(pos), len(neg)
        prior = np.log((n_pos + alpha) / (K + 2 * alpha)) - np.log(
            (n_neg + alpha) / (K + 2 * alpha)
        )
        counts_pos: dict[CanonicalId, int] = {}
        counts_neg: dict[CanonicalId, int] = {}
        for feats in pos:
            for f in feats:
                counts_pos[f] = counts_pos.get(f, 0) + 1
        for feats in neg:
            for f in feats:
                counts_neg[f] = counts_neg.get(f, 0) + 1

        def theta(count, n_class):
            return (count + alpha) / (n_class + 2 * alpha)

        zero_pos = theta(0, n_pos)
        zero_neg = theta(0, n_neg)
        zero_present = np.log(zero_pos) - np.log(zero_neg)
        zero_absent = np.log(1 - zero_pos) - np.log(1 - zero_neg)
        seen = set(counts_pos) | set(counts_neg)
        absent_w = {}
        present_w = {}
        for f in seen:
            tp = theta(counts_pos.get(f, 0), n_pos)
            tn = theta(counts_neg.get(f, 0), n_neg)
            absent_w[f] = np.log(1 - tp) - np.log(1 - tn)
            present_w[f] = np.log(tp) - np.log(tn)
        # start from the all-absent score, then swap in the present features
        const = prior + (V - len(seen)) * zero_absent + sum(absent_w.values())
        for pid, feats in program_features.items():
            score = const
            for f in feats:
                if f in present_w:
                    score += present_w[f] - absent_w[f]
                else:
                    score += zero_present - zero_absent
            out_scores[pid][j] = score
    return {pid: sigmoid(scores) for pid, scores in out_scores.items()}


def program_subtree_features(program) -> set[CanonicalId]:
    return {digest for _, digest in subtrees(program)}


def baseline_knn_edit(
    exemplars: list[tuple[CanonicalId, object, frozenset]],
    programs: dict[CanonicalId, object],
    labels: list[str],
) -> dict[CanonicalId, np.ndarray]:
    """Nearest exemplar by surface-tree edit distance (k=1).

    The nearest exemplar's labels are asserted with confidence 1/(1+d); ties
    break toward the smaller exemplar digest.
    """
    label_pos = {name: i for i, name in enumerate(labels)}
    ordered = sorted(exemplars, key=lambda e: e[0])
    out = {}
    for pid, ast in programs.items():
        best_d = None
        best_tags: frozenset = frozenset()
        for edigest, east, tags in ordered:
            d = edit_distance(ast, east)
            if best_d is None or d < best_d:
                best_d, best_tags = d, tags
        probs = np.zeros(len(labels))
        conf = 1.0 / (1.0 + best_d)
        for tag in best_tags:
            if tag in label_pos:
                probs[label_pos[tag]] = conf
        out[pid] = probs
    return out


def baseline_unit_tests(
    pass_fractions: dict[CanonicalId, float], labels: list[str]
) -> dict[CanonicalId, np.ndarray]:
    """Assert correct/incorrect from unit tests alone; all else zero."""
    label_pos = {name: i for i, name in enumerate(labels)}
    out = {}
    for pid, frac in pass_fractions.items():
        probs = np.zeros(len(labels))
        tag = "correct" if frac == 1.0 else "incorrect"
        if tag in label_pos:
            probs[label_pos[tag]] = 1.0
        out[pid] = probs
    return out


# --- breakdowns -------------------------------------------------------------------


@dataclass
class Breakdown:
    label_recall: dict[str, float]
    category_recall: dict[str, float]
    bins: list[dict]


def breakdown_by_category(
    predictions: dict[CanonicalId, np.ndarray],
    truth: dict[CanonicalId, frozenset],
    frequencies: dict[CanonicalId, int],
    labels: list[str],
    categories: dict[str, str],
    complexities: dict[CanonicalId, int],
    post_accuracy: dict[CanonicalId, float] | None = None,
    precision_target: float = 0.9,
) -> Breakdown:
    """Per-label and per-category recall, plus complexity-binned metrics.

    Programs sort by cyclomatic complexity (stable) into ten equal-size bins;
    each bin reports its own recall at the precision target and, when given,
    its mean postcondition accuracy.
    """
    label_recall = per_label_recalls(
        predictions, truth, frequencies, labels, precision_target
    )
    by_cat: dict[str, list[float]] = {}
    for name, rec in label_recall.items():
        if not np.isnan(rec):
            by_cat.setdefault(categories[name], []).append(rec)
    category_recall = {c: float(np.mean(v)) for c, v in by_cat.items()}

    ids = list(predictions)
    order = sorted(range(len(ids)), key=lambda i: complexities[ids[i]])
    n = len(order)
    n_bins = min(10, n) or 1
    base, extra = divmod(n, n_bins)
    bins = []
    pos = 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        members = [ids[i] for i in order[pos : pos + size]]
        pos += size
        preds = {pid: predictions[pid] for pid in members}
        tr = {pid: truth[pid] for pid in members}
        fr = {pid: frequencies[pid] for pid in members}
        recall = float("nan")
        if members:
            result = propagate_and_sweep(
                preds, tr, fr, labels, [], precision_target
            )
            recall = result.recall_at_target
        entry = {
            "bin": b,
            "size": size,
            "min_complexity": complexities[members[0]] if members else None,
            "max_complexity": complexities[members[-1]] if members else None,
            "recall_at_target": recall,
        }
        if post_accuracy is not None and members:
            entry["post_accuracy"] = float(
                np.mean([post_accuracy[pid] for pid in members if pid in post_accuracy])
            )
        bins.append(entry)
    return Breakdown(label_recall, category_recall, bins)
