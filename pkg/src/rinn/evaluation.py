"""Pose-map decoding, accuracy, detection with PR sweeps, and the one-shot linear probe."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .network import Model, PoseMap, cell_center, forward_pose, nearest_cell


@dataclass
class Detection:
    class_id: int
    score: float
    cell: tuple
    orientation_bin: int
    center: tuple  # scene pixels (cy, cx)


@dataclass
class AccuracyReport:
    count: int
    class_accuracy: float
    orientation_accuracy: float  # bin within +-1
    pose_accuracy: float  # class, cell within 1 and bin within +-1

    def lines(self) -> list:
        return [
            f"samples={self.count}",
            f"class_accuracy={self.class_accuracy:.6f}",
            f"orientation_accuracy={self.orientation_accuracy:.6f}",
            f"pose_accuracy={self.pose_accuracy:.6f}",
        ]


def _scores(pm):
    return pm.scores if isinstance(pm, PoseMap) else np.asarray(pm, dtype=np.float64)


def classify(pm):
    """Global argmax ``(class_id, (i, j), bin, score)``; ties go to the lowest (class, i, j, bin)."""
    s = _scores(pm)
    c = np.transpose(s, (3, 0, 1, 2))
    k, i, j, t = np.unravel_index(int(np.argmax(c)), c.shape)
    return int(k), (int(i), int(j)), int(t), float(s[i, j, t, k])


def angle_bin(angle_deg: float, period: int, n: int | None = None) -> int:
    n = n or period
    return int(np.floor(angle_deg / (360.0 / n) + 0.5)) % period


def bin_distance(a: int, b: int, period: int) -> int:
    d = abs(a - b) % period
    return min(d, period - d)


def accuracy(model: Model, records, images) -> AccuracyReport:
    if len(records) == 0:
        raise ValidationError("accuracy needs a non-empty test set")
    preds = [classify(forward_pose(model, img)) for img in images]
    return score_predictions(model, records, preds)


def score_predictions(model: Model, records, preds) -> AccuracyReport:
    if len(records) == 0:
        raise ValidationError("accuracy needs a non-empty test set")
    p = model.layers[model.conv_indices()[-1]].layout.period
    cls = ori = pose = 0
    for rec, (k, (i, j), t, _) in zip(records, preds):
        ti, tj = nearest_cell(model, rec.cy, rec.cx)
        ok_c = k == rec.class_id
        ok_o = bin_distance(t, angle_bin(rec.angle_deg, p, model.n), p) <= 1
        ok_cell = max(abs(i - ti), abs(j - tj)) <= 1
        cls += ok_c
        ori += ok_o
        pose += ok_c and ok_o and ok_cell
    n = len(records)
    return AccuracyReport(n, cls / n, ori / n, pose / n)


def detect(pm, threshold: float, suppression_radius: int = 3, model: Model | None = None) -> list:
    """Greedy non-maximum suppression over pose-grid cells.

    Candidates are fibers scoring at least ``threshold``. Once a candidate is
    accepted every fiber within ``suppression_radius`` cells (any class or
    orientation) is discarded. Only the best fiber of each cell can ever be
    accepted, so the search runs on per-cell maxima.
    """
    s = _scores(pm)
    hy, hx, p, c = s.shape
    # best (class, bin) per cell with the lowest-index tie rule
    per_cell = np.transpose(s, (0, 1, 3, 2)).reshape(hy, hx, c * p)
    best = np.argmax(per_cell, axis=2)
    best_score = np.take_along_axis(per_cell, best[..., None], axis=2)[..., 0]
    ii, jj = np.nonzero(best_score >= threshold)
    if len(ii) == 0:
        return []
    flat_best = best[ii, jj]
    keys = flat_best // p * hy * hx * p + ii * hx * p + jj * p + flat_best % p  # (class, i, j, t) order
    order = np.lexsort((keys, -best_score[ii, jj]))
    accepted = []
    for o in order:
        i, j = int(ii[o]), int(jj[o])
        if any(max(abs(i - a.cell[0]), abs(j - a.cell[1])) <= suppression_radius for a in accepted):
            continue
        k, t = divmod(int(flat_best[o]), p)
        center = tuple(float(v) for v in cell_center(model, i, j)) if model is not None else (float("nan"),) * 2
        accepted.append(Detection(k, float(best_score[i, j]), (i, j), t, center))
    return accepted


def match_detections(detections, truths, period: int, n: int, max_dist: float = 4.0, max_bins: int = 1) -> int:
    """Greedy one-to-one matching by descending score; returns the true-positive count."""
    used = set()
    tp = 0
    for d in sorted(detections, key=lambda d: -d.score):
        for g, rec in enumerate(truths):
            if g in used or d.class_id != rec.class_id:
                continue
            if np.hypot(d.center[0] - rec.cy, d.center[1] - rec.cx) > max_dist:
                continue
            if bin_distance(d.orientation_bin, angle_bin(rec.angle_deg, period, n), period) > max_bins:
                continue
            used.add(g)
            tp += 1
            break
    return tp


def pr_curve(scenes, thresholds, model: Model, suppression_radius: int = 3):
    """Precision/recall rows ``(threshold, precision, recall)`` sorted by threshold.

    ``scenes`` is a list of ``(pose_map, ground_truth_records)``. Detections
    at a higher threshold are a score-ordered prefix of those at a lower one,
    so each scene is decoded once at the lowest threshold.
    """
    thresholds = sorted(float(t) for t in thresholds)
    if not thresholds:
        raise ValidationError("pr_curve needs at least one threshold")
    if not scenes:
        raise ValidationError("pr_curve needs at least one scene")
    p = model.layers[model.conv_indices()[-1]].layout.period
    decoded = [(detect(pm, thresholds[0], suppression_radius, model), truths) for pm, truths in scenes]
    total = sum(len(t) for _, t in decoded)
    rows = []
    for th in thresholds:
        tp = fp = 0
        for dets, truths in decoded:
            kept = [d for d in dets if d.score >= th]
            m = match_detections(kept, truths, p, model.n)
            tp += m
            fp += len(kept) - m
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / total if total else 1.0
        rows.append((th, precision, recall))
    return rows


def f1(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def format_pr_csv(rows) -> str:
    out = ["threshold,precision,recall"]
    out += [f"{t:.6f},{p:.6f},{r:.6f}" for t, p, r in rows]
    return "\n".join(out) + "\n"


# one-shot probe ------------------------------------------------------------------


@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: float

    def score(self, feats) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[-1] != self.weights.shape[0]:
            raise DimensionError(
                f"feature dimension {feats.shape[-1]} does not match probe dimension {self.weights.shape[0]}"
            )
        return feats @ self.weights + self.bias

    def dumps(self) -> str:
        return json.dumps({
            "format": "rinn-probe-1",
            "bias": format(float(self.bias), ".17g"),
            "weights": [format(float(v), ".17g") for v in self.weights],
        })

    @classmethod
    def loads(cls, text: str) -> "LinearProbe":
        doc = json.loads(text)
        if doc.get("format") != "rinn-probe-1":
            raise ValidationError("not a probe document")
        return cls(np.array([float(v) for v in doc["weights"]]), float(doc["bias"]))


def probe_features(model: Model, image) -> np.ndarray:
    """Fibers ``[H, W, p, d]`` the one-shot probe reads: the cyclic layer's output.

    The pre-logits layer is nearly one-hot after background depression and
    stays silent on symbols outside the training classes, so the probe sits
    one layer lower. Models without a cyclic layer fall back to pre-logits.
    """
    c = model.cyclic_index()
    layer = -1 if c is None or c + 1 >= len(model.layers) - 1 else c + 1
    return model.features(image, layer=layer)


def support_pose(model: Model, feats, record):
    """Pose-grid cell and orientation bin of a support sample; errors when off the grid."""
    hy, hx, p, _ = feats.shape
    i, j = nearest_cell(model, record.cy, record.cx)
    if not (0 <= i < hy and 0 <= j < hx):
        raise ValidationError(f"support pose ({record.cy}, {record.cx}) falls outside the pose grid")
    return (i, j), angle_bin(record.angle_deg, p, model.n)


def fit_logistic(x, y, sample_weight=None, l2: float = 1e-3, tol: float = 1e-8, max_iter: int = 100000):
    """Weighted L2-regularized logistic regression by full-batch gradient descent."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sw = np.full(len(y), 1.0 / len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    # step from the curvature bound of the weighted logistic loss
    lip = 0.25 * float(sw @ (np.sum(x * x, axis=1) + 1.0)) + l2
    lr = 1.0 / lip
    prev = np.inf
    for _ in range(max_iter):
        z = x @ w + b
        loss = float(sw @ (np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * float(w @ w)
        if abs(prev - loss) < tol:
            break
        prev = loss
        r = sw * (0.5 * (1.0 + np.tanh(0.5 * z)) - y)
        w = w - lr * (x.T @ r + l2 * w)
        b = b - lr * float(r.sum())
    return w, b


def oneshot_train(model: Model, image, record, cell_margin: int = 2, bin_margin: int = 1,
                  l2: float = 1e-3) -> LinearProbe:
    """Fit a linear probe on ``probe_features`` of a single support sample.

    The positive is the fiber at the support's pose; negatives are all fibers
    more than ``cell_margin`` cells or ``bin_margin`` bins away from it.
    Positive and negative sides carry equal total weight.
    """
    feats = probe_features(model, image)
    (i0, j0), t0 = support_pose(model, feats, record)
    hy, hx, p, d = feats.shape
    ii, jj, tt = np.meshgrid(np.arange(hy), np.arange(hx), np.arange(p), indexing="ij")
    cell_d = np.maximum(np.abs(ii - i0), np.abs(jj - j0))
    bin_d = np.minimum((tt - t0) % p, (t0 - tt) % p)
    neg = (cell_d > cell_margin) | (bin_d > bin_margin)
    x = np.concatenate([feats[i0, j0, t0][None], feats[neg]])
    y = np.zeros(len(x))
    y[0] = 1.0
    sw = np.full(len(x), 0.5 / (len(x) - 1))
    sw[0] = 0.5
    w, b = fit_logistic(x, y, sw, l2=l2)
    return LinearProbe(w, b)


def oneshot_scores(probe: LinearProbe, feats) -> np.ndarray:
    return probe.score(feats)


def oneshot_predict(probe: LinearProbe, model: Model, image):
    """Best ``((i, j), bin, score)`` over every fiber; ties go to the lowest (i, j, bin)."""
    s = probe.score(probe_features(model, image))
    i, j, t = np.unravel_index(int(np.argmax(s)), s.shape)
    return (int(i), int(j)), int(t), float(s[i, j, t])
