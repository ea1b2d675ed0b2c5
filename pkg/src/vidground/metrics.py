"""Moment-retrieval and highlight-detection evaluation.

MR: Recall@1 at IoU 0.5/0.7, mAP over IoU thresholds 0.50..0.95 in 0.05
steps (greedy score-order matching, interpolated PR area), and mean top-1
IoU.  HD: HIT@1 and mAP of ranking clips against the "label at least
Very Good" (>= 3) relevance, with -1 labels masked out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .features import MomentSpan

IOU_THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(10)]
VERY_GOOD = 3  # HD relevance cut on the 0..4 label scale


def _to_se(span) -> tuple[float, float]:
    if isinstance(span, MomentSpan):
        return span.to_start_end()
    center, width = float(span[0]), float(span[1])
    return center - width / 2, center + width / 2


def iou_1d(a, b) -> float:
    """Interval IoU of two (center, span) pairs; in [0, 1]."""
    a0, a1 = _to_se(a)
    b0, b1 = _to_se(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class RankedPredictions:
    """Per-query moment predictions sorted by non-increasing score."""

    qid: str
    moments: list[tuple[MomentSpan, float]]

    def __post_init__(self):
        scores = [s for _, s in self.moments]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise ValidationError(f"{self.qid}: prediction scores must be non-increasing")

    @property
    def spans(self) -> list[MomentSpan]:
        return [m for m, _ in self.moments]


@dataclass
class MetricsReport:
    r1_at_050: float
    r1_at_070: float
    map_at: dict[float, float]
    map_avg: float
    hd_map: float
    hit_at_1: float
    mean_iou: float
    num_queries: int = 0

    def to_json(self) -> str:
        payload = dict(
            r1_at_050=self.r1_at_050, r1_at_070=self.r1_at_070,
            map_at={f"{t:.2f}": v for t, v in self.map_at.items()},
            map_avg=self.map_avg, hd_map=self.hd_map, hit_at_1=self.hit_at_1,
            mean_iou=self.mean_iou, num_queries=self.num_queries,
        )
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        raw["map_at"] = {float(k): v for k, v in raw["map_at"].items()}
        return cls(**raw)


def _best_iou(span: MomentSpan, gts: list[MomentSpan]) -> float:
    return max(iou_1d(span, g) for g in gts)


def recall_at_1(preds: list[RankedPredictions], gts: dict[str, list[MomentSpan]],
                threshold: float) -> float:
    """Fraction of queries whose top prediction reaches the IoU threshold
    against any GT window."""
    if not preds:
        raise ValidationError("recall over an empty prediction set")
    hits = 0
    for p in preds:
        if not gts.get(p.qid):
            raise ValidationError(f"{p.qid}: no GT windows")
        if p.moments and _best_iou(p.spans[0], gts[p.qid]) >= threshold:
            hits += 1
    return hits / len(preds)


def mean_iou(preds: list[RankedPredictions], gts: dict[str, list[MomentSpan]]) -> float:
    """Mean over queries of the top-1 prediction's best-GT IoU."""
    if not preds:
        raise ValidationError("mean_iou over an empty prediction set")
    vals = [
        _best_iou(p.spans[0], gts[p.qid]) if p.moments else 0.0
        for p in preds
    ]
    return float(np.mean(vals))


def _ap_at_threshold(pred_spans: list[MomentSpan], gt_spans: list[MomentSpan],
                     threshold: float) -> float:
    """Single-query detection AP: greedy match in score order, interpolated
    precision-recall area."""
    G = len(gt_spans)
    taken = [False] * G
    tp = np.zeros(len(pred_spans))
    for i, p in enumerate(pred_spans):
        best_iou, best_g = 0.0, -1
        for g, gt in enumerate(gt_spans):
            if taken[g]:
                continue
            v = iou_1d(p, gt)
            if v >= threshold and v > best_iou:
                best_iou, best_g = v, g
        if best_g >= 0:
            taken[best_g] = True
            tp[i] = 1.0
    if len(pred_spans) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(pred_spans) + 1)
    recall = cum_tp / G
    # interpolate: precision at each rank is the max precision at or after it
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(pred_spans)):
        if tp[i]:
            ap += (recall[i] - prev_recall) * interp[i]
            prev_recall = recall[i]
    return float(ap)


def map_over_thresholds(preds: list[RankedPredictions],
                        gts: dict[str, list[MomentSpan]],
                        thresholds: list[float] | None = None) -> tuple[dict[float, float], float]:
    """Per-threshold mAP (mean over queries) and the threshold average."""
    thresholds = IOU_THRESHOLDS if thresholds is None else thresholds
    if not preds:
        raise ValidationError("mAP over an empty prediction set")
    per_threshold: dict[float, float] = {}
    for t in thresholds:
        aps = [_ap_at_threshold(p.spans, gts[p.qid], t) for p in preds]
        per_threshold[t] = float(np.mean(aps))
    return per_threshold, float(np.mean(list(per_threshold.values())))


def _ranking_ap(scores: np.ndarray, relevant: np.ndarray) -> float:
    """AP of a ranked list: mean precision at each relevant rank."""
    order = np.argsort(-scores, kind="stable")
    rel = relevant[order]
    if rel.sum() == 0:
        return 0.0
    cum = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float((cum[rel] / ranks[rel]).mean())


def hd_metrics(scores: dict[str, np.ndarray],
               labels: dict[str, list[int]]) -> tuple[float, float]:
    """(hd_map, hit_at_1) over queries; clips labeled -1 are masked out."""
    if not scores:
        raise ValidationError("HD metrics over an empty score set")
    aps, hits = [], []
    for qid, clip_scores in scores.items():
        lab = np.asarray(labels[qid])
        mask = lab >= 0
        if not mask.any():
            continue
        s = np.asarray(clip_scores, dtype=np.float64)[mask]
        rel = lab[mask] >= VERY_GOOD
        hits.append(float(rel[int(np.argmax(s))]))
        if rel.any():
            aps.append(_ranking_ap(s, rel))
    if not aps:
        raise ValidationError("no query had clips labeled >= Very Good")
    return float(np.mean(aps)), float(np.mean(hits))


def per_query_rows(preds: list[RankedPredictions],
                   gts: dict[str, list[MomentSpan]],
                   clip_scores: dict[str, np.ndarray],
                   clip_labels: dict[str, list[int]]) -> list[dict]:
    """One row of metric values per query (CSV-friendly flat dicts)."""
    rows = []
    for p in preds:
        gt = gts[p.qid]
        top1 = _best_iou(p.spans[0], gt) if p.moments else 0.0
        aps = {t: _ap_at_threshold(p.spans, gt, t) for t in IOU_THRESHOLDS}
        lab = np.asarray(clip_labels[p.qid])
        mask = lab >= 0
        hd_ap, hit = float("nan"), float("nan")
        if mask.any():
            s = np.asarray(clip_scores[p.qid], dtype=np.float64)[mask]
            rel = lab[mask] >= VERY_GOOD
            hit = float(rel[int(np.argmax(s))])
            if rel.any():
                hd_ap = _ranking_ap(s, rel)
        rows.append({
            "qid": p.qid,
            "top1_iou": top1,
            "r1_at_050": float(top1 >= 0.5),
            "r1_at_070": float(top1 >= 0.7),
            "ap_avg": float(np.mean(list(aps.values()))),
            "ap_at_050": aps[0.5],
            "hd_ap": hd_ap,
            "hit_at_1": hit,
        })
    return rows


def compute_report(preds: list[RankedPredictions], gts: dict[str, list[MomentSpan]],
                   clip_scores: dict[str, np.ndarray],
                   clip_labels: dict[str, list[int]]) -> MetricsReport:
    map_at, map_avg = map_over_thresholds(preds, gts)
    hd_map, hit1 = hd_metrics(clip_scores, clip_labels)
    return MetricsReport(
        r1_at_050=recall_at_1(preds, gts, 0.5),
        r1_at_070=recall_at_1(preds, gts, 0.7),
        map_at=map_at,
        map_avg=map_avg,
        hd_map=hd_map,
        hit_at_1=hit1,
        mean_iou=mean_iou(preds, gts),
        num_queries=len(preds),
    )
