"""Training objectives: set matching and moment regression, the
highlight-collaboration loss, denoising-group supervision, the encoder
contrastive suite (negative-pair suppression, margin ranking, rank-partition
softmax contrast), and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .modeling.decoder import TAG_DN_NEG, TAG_DN_POS


@dataclass
class LossWeights:
    mr_l1: float = 10.0
    mr_giou: float = 1.0
    mr_ce: float = 4.0
    hd_l1: float = 1.0
    hd_giou: float = 1.0
    hd_ce: float = 1.0
    hd_ce_pos_weight: float = 4.0  # offsets clip-label imbalance in the CE term
    dn_l1: float = 10.0
    dn_giou: float = 1.0
    dn_ce: float = 4.0
    total_dn: float = 1.0  # lambda_1 on the denoising term
    total_contrast: float = 1.0  # lambda_2 on the contrastive suite
    margin_delta: float = 0.2
    temperature: float = 0.5
    rank_levels: int = 4
    rank_ge: bool = True  # partition by label >= n (False: strictly >)

    def __post_init__(self):
        numeric = [self.mr_l1, self.mr_giou, self.mr_ce, self.hd_l1, self.hd_giou,
                   self.hd_ce, self.dn_l1, self.dn_giou, self.dn_ce,
                   self.total_dn, self.total_contrast, self.margin_delta]
        if any(v < 0 for v in numeric):
            raise ValidationError("loss weights must be >= 0")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.rank_levels < 1:
            raise ValidationError("rank_levels must be >= 1")


@dataclass
class MatchResult:
    """Injective query->GT assignment plus the leftover query indices."""

    assignment: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)


def span_cs_to_se(spans: torch.Tensor) -> torch.Tensor:
    """(center, span) -> (start, end) along the last dim."""
    c, s = spans[..., 0], spans[..., 1]
    return torch.stack([c - s / 2, c + s / 2], dim=-1)


def giou_1d(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of (center, span) pairs, elementwise over leading dims.

    IoU minus the normalized hull dead-space; in (-1, 1], 1 iff identical.
    """
    a_se, b_se = span_cs_to_se(a), span_cs_to_se(b)
    inter = (torch.minimum(a_se[..., 1], b_se[..., 1])
             - torch.maximum(a_se[..., 0], b_se[..., 0])).clamp(min=0)
    union = a[..., 1] + b[..., 1] - inter
    hull = (torch.maximum(a_se[..., 1], b_se[..., 1])
            - torch.minimum(a_se[..., 0], b_se[..., 0]))
    return inter / union - (hull - union) / hull


def giou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise gIoU: a is K x 2, b is G x 2 -> K x G."""
    return giou_1d(a.unsqueeze(1), b.unsqueeze(0))


def hungarian_match(pred_spans: torch.Tensor, fg_probs: torch.Tensor,
                    gt_spans: torch.Tensor, w: LossWeights) -> MatchResult:
    """Minimum-cost injective assignment of predictions to GT moments.

    Cost per pair mirrors the moment loss: L1 + (1 - gIoU) - fg_prob, each
    under its moment-loss weight.
    """
    K, G = pred_spans.shape[0], gt_spans.shape[0]
    cost = (
        w.mr_l1 * torch.cdist(pred_spans, gt_spans, p=1)
        + w.mr_giou * (1 - giou_matrix(pred_spans, gt_spans))
        - w.mr_ce * fg_probs.unsqueeze(1)
    )
    rows, cols = linear_sum_assignment(cost.detach().cpu().numpy())
    assignment = sorted(zip(rows.tolist(), cols.tolist()))
    matched_q = {q for q, _ in assignment}
    return MatchResult(
        assignment=assignment,
        unmatched=[q for q in range(K) if q not in matched_q],
    )


def mr_loss(pred_spans: torch.Tensor, fg_logits: torch.Tensor,
            gt_spans: torch.Tensor, match: MatchResult, w: LossWeights) -> torch.Tensor:
    """Moment-retrieval loss: matched span L1 + gIoU (averaged by G) plus
    foreground/background CE over all queries."""
    K, G = pred_spans.shape[0], gt_spans.shape[0]
    q_idx = torch.tensor([q for q, _ in match.assignment], dtype=torch.long)
    g_idx = torch.tensor([g for _, g in match.assignment], dtype=torch.long)
    src, tgt = pred_spans[q_idx], gt_spans[g_idx]
    l1 = torch.abs(src - tgt).sum() / G
    giou_term = (1 - giou_1d(src, tgt)).sum() / G
    labels = torch.zeros(K, dtype=torch.long, device=pred_spans.device)
    labels[q_idx] = 1
    ce = F.cross_entropy(fg_logits, labels)
    return w.mr_l1 * l1 + w.mr_giou * giou_term + w.mr_ce * ce


def clip_inside_windows(windows: torch.Tensor, num_clips: int) -> torch.Tensor:
    """Bool mask over clips whose center falls inside any (center, span) window."""
    centers = (torch.arange(num_clips, dtype=windows.dtype,
                            device=windows.device) + 0.5) / num_clips
    se = span_cs_to_se(windows)
    inside = (centers.unsqueeze(0) >= se[:, 0:1]) & (centers.unsqueeze(0) <= se[:, 1:2])
    return inside.any(dim=0)


def hd_collab_loss(scores: torch.Tensor, ref_spans: torch.Tensor | None,
                   sel_indices: torch.Tensor | None, clip_labels: torch.Tensor,
                   gt_spans: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Highlight loss refined by moment supervision: clip-wise CE on the
    sigmoid scores, plus L1/gIoU between each selected clip's reference span
    and the GT window containing that clip (clips outside every window add
    no span terms)."""
    target = clip_labels.to(scores.dtype)
    pos_weight = scores.new_tensor(w.hd_ce_pos_weight)
    ce = F.binary_cross_entropy_with_logits(scores, target, pos_weight=pos_weight)
    total = w.hd_ce * ce
    if ref_spans is None or sel_indices is None or gt_spans.shape[0] == 0:
        return total

    L = scores.shape[0]
    se = span_cs_to_se(gt_spans)
    l1_terms, giou_terms = [], []
    for k in range(sel_indices.shape[0]):
        center = (float(sel_indices[k]) + 0.5) / L
        inside = (se[:, 0] <= center) & (center <= se[:, 1])
        if not bool(inside.any()):
            continue
        g = int(inside.nonzero()[0, 0])
        l1_terms.append(torch.abs(ref_spans[k] - gt_spans[g]).sum())
        giou_terms.append(1 - giou_1d(ref_spans[k], gt_spans[g]))
    if l1_terms:
        n = len(l1_terms)
        total = total + w.hd_l1 * torch.stack(l1_terms).sum() / n \
            + w.hd_giou * torch.stack(giou_terms).sum() / n
    return total


def denoise_loss(dn_spans: torch.Tensor, dn_logits: torch.Tensor,
                 gt_spans: torch.Tensor, tags: torch.Tensor,
                 provenance: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Denoising-group loss: positive rows regress their source GT (L1 +
    gIoU) and classify foreground; negative rows classify background only."""
    pos = tags == TAG_DN_POS
    neg = tags == TAG_DN_NEG
    dn_any = pos | neg
    if not bool(dn_any.any()):
        return dn_spans.new_zeros(())
    total = dn_spans.new_zeros(())
    if bool(pos.any()):
        src = dn_spans[pos]
        tgt = gt_spans[provenance[pos]]
        n = src.shape[0]
        total = total + w.dn_l1 * torch.abs(src - tgt).sum() / n \
            + w.dn_giou * (1 - giou_1d(src, tgt)).sum() / n
    labels = pos[dn_any].long()
    total = total + w.dn_ce * F.cross_entropy(dn_logits[dn_any], labels)
    return total


def enc_neg_loss(scores: torch.Tensor) -> torch.Tensor:
    """-mean log(1 - sigmoid(S)) over negative-pair clips (softplus form)."""
    return F.softplus(scores).mean()


def margin_loss(s_high: torch.Tensor, s_low: torch.Tensor,
                s_inside: torch.Tensor, s_outside: torch.Tensor | None,
                delta: float) -> torch.Tensor:
    """Two hinge terms: high-vs-low label clips within GT, inside-vs-outside
    GT; the second is skipped when no external clip exists."""
    loss = torch.clamp(delta + s_low - s_high, min=0)
    if s_outside is not None:
        loss = loss + torch.clamp(delta + s_outside - s_inside, min=0)
    return loss


def sample_margin_pairs(labels: list[int] | np.ndarray,
                        rng: np.random.Generator) -> tuple[int, int, int, int | None]:
    """Pick (high, low, inside, outside) clip indices for the margin loss.

    High/low come from the extreme labels within GT clips; inside is a
    random GT clip; outside is a random non-GT clip or None if the GT
    covers the whole video.
    """
    labels = np.asarray(labels)
    gt = np.flatnonzero(labels >= 0)
    if gt.size == 0:
        raise ValidationError("margin pairs need at least one GT clip")
    gt_labels = labels[gt]
    high = int(rng.choice(gt[gt_labels == gt_labels.max()]))
    low = int(rng.choice(gt[gt_labels == gt_labels.min()]))
    inside = int(rng.choice(gt))
    non_gt = np.flatnonzero(labels < 0)
    outside = int(rng.choice(non_gt)) if non_gt.size else None
    return high, low, inside, outside


def rank_contrastive_loss(scores: torch.Tensor, labels: torch.Tensor,
                          neg_scores: torch.Tensor | None, w: LossWeights) -> torch.Tensor:
    """Rank-partition softmax contrast: for each level n, clips labeled at
    least n are the positives and everything else (plus all negative-pair
    clips) the denominator; iterations with no positives are skipped."""
    if neg_scores is not None and neg_scores.numel() > 0:
        all_scores = torch.cat([scores, neg_scores])
    else:
        all_scores = scores
    terms = []
    for n in range(1, w.rank_levels + 1):
        pos_mask = labels >= n if w.rank_ge else labels > n
        if not bool(pos_mask.any()):
            continue
        pos_lse = torch.logsumexp(scores[pos_mask] / w.temperature, dim=0)
        all_lse = torch.logsumexp(all_scores / w.temperature, dim=0)
        terms.append(all_lse - pos_lse)
    if not terms:
        return scores.new_zeros(())
    return torch.stack(terms).mean()


def total_loss(parts: dict[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    """Weighted total; absent parts contribute zero."""
    if not parts:
        return torch.zeros(())
    ref = next(iter(parts.values()))
    zero = ref.new_zeros(())

    def get(name):
        return parts.get(name, zero)

    return (
        get("hd_collab") + get("mr")
        + w.total_dn * get("dn")
        + w.total_contrast * (get("enc_neg") + get("margin") + get("enc_cont"))
    )
