"""Instance-level evaluation of three-class segmentations.

Instances are 4-connected components of nucleus pixels.  A predicted
instance is a true positive when its Jaccard index with a ground-truth
instance exceeds 0.5; the threshold makes the matching one-to-one.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .data import NUCLEUS

CROSS = ndimage.generate_binary_structure(2, 1)
METRICS_HEADER = ("frame", "tp", "fp", "fn", "precision", "recall", "f", "mean_jaccard")


def probmap_to_classes(prob: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Per-pixel argmax of an H x W x 3 probability map (ties -> lowest class)."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 3 or prob.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 probability map, got shape {prob.shape}")
    if not np.all(np.isfinite(prob)) or np.any(prob < -atol):
        raise ValueError("probability map has negative or non-finite entries")
    worst = np.max(np.abs(prob.sum(axis=-1) - 1.0), initial=0.0)
    if worst > atol:
        raise ValueError(f"per-pixel probabilities must sum to 1 (worst deviation {worst:.3g})")
    return prob.argmax(axis=-1).astype(np.uint8)


@dataclass
class InstanceMap:
    ids: np.ndarray
    count: int


def extract_instances(label: np.ndarray) -> InstanceMap:
    """Label 4-connected nucleus components 1..k in raster order of their first pixel."""
    ids, count = ndimage.label(np.asarray(label) == NUCLEUS, structure=CROSS)
    return InstanceMap(ids.astype(np.int32), int(count))


def jaccard(a, b) -> float:
    """|a & b| / |a | b| for two pixel sets (boolean masks or Python sets)."""
    if isinstance(a, (set, frozenset)):
        union = len(a | b)
        if not union:
            raise ValueError("jaccard of two empty sets is undefined")
        return len(a & b) / union
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if not union:
        raise ValueError("jaccard of two empty sets is undefined")
    return np.count_nonzero(a & b) / union


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (pred id, gt id)
    jaccards: list[float] = field(default_factory=list)


def jaccard_matrix(pred: InstanceMap, gt: InstanceMap) -> np.ndarray:
    """(pred.count + 1) x (gt.count + 1) Jaccard table; row/col 0 is unused."""
    if pred.ids.shape != gt.ids.shape:
        raise ValueError(f"instance maps differ in size: {pred.ids.shape} vs {gt.ids.shape}")
    kp, kg = pred.count + 1, gt.count + 1
    inter = np.bincount((pred.ids.astype(np.int64) * kg + gt.ids).ravel(), minlength=kp * kg).reshape(kp, kg)
    area_p = inter.sum(axis=1)
    area_g = inter.sum(axis=0)
    union = area_p[:, None] + area_g[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        jac = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    jac[0, :] = 0.0
    jac[:, 0] = 0.0
    return jac


def match_instances(pred: InstanceMap, gt: InstanceMap) -> MatchResult:
    jac = jaccard_matrix(pred, gt)
    pairs, values = [], []
    for g in range(1, gt.count + 1):
        p = int(np.argmax(jac[:, g]))
        if jac[p, g] > 0.5:
            pairs.append((p, g))
            values.append(float(jac[p, g]))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=pred.count - tp, fn=gt.count - tp, pairs=pairs, jaccards=values)


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_measure: float
    mean_jaccard: float


def f_measure(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def compute_metrics(match: MatchResult) -> Metrics:
    tp, fp, fn = match.tp, match.fp, match.fn
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    mj = float(np.mean(match.jaccards)) if match.jaccards else 0.0
    return Metrics(tp, fp, fn, p, r, f_measure(p, r), mj)


def evaluate_labels(pred_label: np.ndarray, gt_label: np.ndarray) -> MatchResult:
    return match_instances(extract_instances(pred_label), extract_instances(gt_label))


def aggregate(matches: list[MatchResult]) -> Metrics:
    """Pool counts and matched Jaccards over frames."""
    pooled = MatchResult(
        tp=sum(m.tp for m in matches),
        fp=sum(m.fp for m in matches),
        fn=sum(m.fn for m in matches),
        jaccards=[j for m in matches for j in m.jaccards],
    )
    return compute_metrics(pooled)


def touching_pairs_separated(pred_label: np.ndarray, gt_label: np.ndarray, cells: np.ndarray,
                             pairs: list[tuple[int, int]]) -> list[bool]:
    """For every touching pair of cells, whether the prediction gives them distinct instances.

    Each cell's instance is the predicted instance overlapping its
    ground-truth nucleus the most; a cell with no overlapping instance
    counts as not separated.
    """
    inst = extract_instances(pred_label).ids
    out = []
    for a, b in pairs:
        owners = []
        for cid in (a, b):
            hits = inst[(cells == cid) & (gt_label == NUCLEUS)]
            hits = hits[hits > 0]
            owners.append(int(np.bincount(hits).argmax()) if hits.size else 0)
        out.append(owners[0] > 0 and owners[1] > 0 and owners[0] != owners[1])
    return out


def write_metrics_csv(path, rows: list[tuple[str, Metrics]]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for frame, m in rows:
            w.writerow([frame, m.tp, m.fp, m.fn, repr(m.precision), repr(m.recall), repr(m.f_measure), repr(m.mean_jaccard)])


def read_metrics_csv(path) -> list[tuple[str, Metrics]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(METRICS_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(METRICS_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(row)}")
            try:
                rows.append((row[0], Metrics(int(row[1]), int(row[2]), int(row[3]), *map(float, row[4:]))))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def summary_json(metrics: Metrics, frames: int) -> str:
    return json.dumps({"frames": frames, **asdict(metrics)}, indent=2, sort_keys=True)
