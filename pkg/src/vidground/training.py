"""Deterministic training and evaluation loop.

Wires encoder -> salience head -> decoder -> losses over manifest-backed
datasets: in-batch and generated hard negatives, auxiliary-corpus batch
mixing, denoising query groups, gradient clipping, periodic evaluation
with best-by-mAP checkpointing, and JSON-lines loss logs that are
bitwise reproducible for a fixed (config, seed)."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_extra, save_checkpoint
from .errors import TrainingDiverged, ValidationError
from .features import (
    AnnotationRecord,
    Dataset,
    MomentSpan,
    VideoRecord,
    load_manifest,
    spans_to_array,
    validate_dataset,
)
from .losses import (
    LossWeights,
    denoise_loss,
    enc_neg_loss,
    hd_collab_loss,
    hungarian_match,
    margin_loss,
    mr_loss,
    rank_contrastive_loss,
    sample_margin_pairs,
    total_loss,
)
from .metrics import MetricsReport, RankedPredictions, compute_report
from .modeling import GroundingModel, ModelConfig, NoiseConfig
from .modeling.decoder import build_denoise_rows

LOG_KEYS = ("mr", "hd_collab", "dn", "enc_neg", "margin", "enc_cont")

NEGATIVE_STRATEGIES = ("in_batch", "hard", "mixed", "none")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    batch_size: int = 16
    epochs: int = 50
    eval_interval: int = 10
    seed: int = 0
    aux_ratio: float = 0.3  # share of batches drawn from the auxiliary corpus
    negative_strategy: str = "in_batch"
    use_denoise: bool = True
    use_contrastive: bool = True
    use_aux: bool = True
    dtype: str = "float64"
    single_thread: bool = True
    early_stop: dict[str, float] | None = None  # metric name -> stop threshold

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.negative_strategy not in NEGATIVE_STRATEGIES:
            raise ValidationError(
                f"negative_strategy must be one of {NEGATIVE_STRATEGIES}")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError("dtype must be float64 or float32")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(raw: dict) -> TrainConfig:
    raw = copy.deepcopy(raw)
    model = ModelConfig(**raw.pop("model", {}))
    weights = LossWeights(**raw.pop("weights", {}))
    noise = NoiseConfig(**raw.pop("noise", {}))
    return TrainConfig(model=model, weights=weights, noise=noise, **raw)


@dataclass
class PreparedSample:
    ann: AnnotationRecord
    video: VideoRecord
    motion: torch.Tensor  # L x d_m
    semantic: torch.Tensor  # L x d_s
    text: torch.Tensor  # M x d_t
    labels: torch.Tensor  # L, long, -1 outside GT
    windows: torch.Tensor  # G x 2 (center, span)

    @property
    def num_clips(self) -> int:
        return self.motion.shape[0]


@dataclass
class Batch:
    samples: list[PreparedSample]
    motion: torch.Tensor  # B x L x d_m
    semantic: torch.Tensor
    text: torch.Tensor  # B x M_max x d_t
    text_padding: torch.Tensor  # B x M_max bool, True at padding
    labels: torch.Tensor  # B x L

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def num_clips(self) -> int:
        return self.motion.shape[1]


@dataclass
class TrainData:
    originals: Dataset
    aux: Dataset | None = None


def load_training_data(data_dir) -> TrainData:
    data_dir = Path(data_dir)
    originals = load_manifest(data_dir / "manifest.jsonl")
    aux_path = data_dir / "manifest_aux.jsonl"
    aux = load_manifest(aux_path) if aux_path.exists() else None
    return TrainData(originals=originals, aux=aux)


def prepare_samples(dataset: Dataset, dtype) -> list[PreparedSample]:
    video_cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    out = []
    for ann in dataset.positives:
        video = dataset.video_for(ann)
        if video.vid not in video_cache:
            video_cache[video.vid] = (
                torch.from_numpy(np.ascontiguousarray(video.motion)).to(dtype),
                torch.from_numpy(np.ascontiguousarray(video.semantic)).to(dtype),
            )
        motion, semantic = video_cache[video.vid]
        out.append(PreparedSample(
            ann=ann,
            video=video,
            motion=motion,
            semantic=semantic,
            text=torch.from_numpy(np.ascontiguousarray(ann.text)).to(dtype),
            labels=torch.tensor(ann.saliency_labels, dtype=torch.long),
            windows=torch.from_numpy(spans_to_array(ann.windows)).to(dtype),
        ))
    return out


def collate(samples: list[PreparedSample], dtype) -> Batch:
    Ls = {s.num_clips for s in samples}
    if len(Ls) != 1:
        raise ValidationError(f"cannot batch mixed clip counts {sorted(Ls)}")
    m_max = max(s.text.shape[0] for s in samples)
    B = len(samples)
    text = torch.zeros(B, m_max, samples[0].text.shape[1], dtype=dtype)
    padding = torch.ones(B, m_max, dtype=torch.bool)
    for i, s in enumerate(samples):
        text[i, : s.text.shape[0]] = s.text
        padding[i, : s.text.shape[0]] = False
    return Batch(
        samples=samples,
        motion=torch.stack([s.motion for s in samples]),
        semantic=torch.stack([s.semantic for s in samples]),
        text=text,
        text_padding=padding,
        labels=torch.stack([s.labels for s in samples]),
    )


def collate_texts(texts: list[torch.Tensor], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    m_max = max(t.shape[0] for t in texts)
    B = len(texts)
    out = torch.zeros(B, m_max, texts[0].shape[1], dtype=dtype)
    padding = torch.ones(B, m_max, dtype=torch.bool)
    for i, t in enumerate(texts):
        out[i, : t.shape[0]] = t
        padding[i, : t.shape[0]] = False
    return out, padding


def _make_batches(samples: list[PreparedSample], batch_size: int,
                  rng: np.random.Generator) -> list[list[PreparedSample]]:
    """Shuffle, group by clip count, and chunk; chunk order is shuffled too."""
    by_length: dict[int, list[PreparedSample]] = {}
    for s in samples:
        by_length.setdefault(s.num_clips, []).append(s)
    chunks = []
    for L in sorted(by_length):
        group = by_length[L]
        order = rng.permutation(len(group))
        for start in range(0, len(group), batch_size):
            chunks.append([group[i] for i in order[start:start + batch_size]])
    chunk_order = rng.permutation(len(chunks))
    return [chunks[i] for i in chunk_order]


def _negative_texts(batch: Batch, hard_by_vid: dict[str, list[torch.Tensor]],
                    strategy: str, rng: np.random.Generator, dtype):
    """Pick one mismatched text per sample (shuffled in-batch partner or a
    generated hard negative); None when no negative can be formed."""
    B = batch.size
    shift = int(rng.integers(1, B)) if B > 1 else 0
    use_hard_flags = []
    for i, s in enumerate(batch.samples):
        have_hard = bool(hard_by_vid.get(s.video.vid))
        if strategy == "hard":
            use_hard = have_hard
        elif strategy == "mixed":
            use_hard = have_hard and rng.random() < 0.5
        else:  # in_batch
            use_hard = False
        use_hard_flags.append(use_hard)
    texts = []
    for i, (s, use_hard) in enumerate(zip(batch.samples, use_hard_flags)):
        if use_hard:
            pool = hard_by_vid[s.video.vid]
            texts.append(pool[int(rng.integers(len(pool)))])
        elif B > 1:
            texts.append(batch.samples[(i + shift) % B].text)
        else:
            return None
    return collate_texts(texts, dtype)


def training_step(model: GroundingModel, batch: Batch, cfg: TrainConfig,
                  hard_by_vid: dict[str, list[torch.Tensor]],
                  rng_noise: np.random.Generator,
                  rng_margin: np.random.Generator,
                  rng_neg: np.random.Generator) -> dict[str, torch.Tensor]:
    """One forward pass over a batch; returns named loss parts plus total."""
    w = cfg.weights
    dtype = cfg.torch_dtype
    B, L = batch.size, batch.num_clips

    dn_rows = None
    if cfg.use_denoise:
        dn_rows = [
            build_denoise_rows(s.ann.windows, cfg.noise, cfg.model.d, 1.0 / L,
                               rng_noise, dtype=dtype)
            for s in batch.samples
        ]
    out = model(batch.motion, batch.semantic, batch.text, batch.text_padding, dn_rows)
    K = out.num_matched
    parts: dict[str, torch.Tensor] = {}

    # Moment retrieval: re-match and sum over decoder layers.
    mr_layers = []
    for spans_l, logits_l in zip(out.layer_spans, out.layer_logits):
        per_sample = []
        for b in range(B):
            gt = batch.samples[b].windows
            spans_b, logits_b = spans_l[b, :K], logits_l[b, :K]
            with torch.no_grad():
                probs = F.softmax(logits_b, dim=-1)[:, 1]
                match = hungarian_match(spans_b, probs, gt, w)
            per_sample.append(mr_loss(spans_b, logits_b, gt, match, w))
        mr_layers.append(torch.stack(per_sample).mean())
    parts["mr"] = torch.stack(mr_layers).sum()

    # Highlight collaboration.
    hd_terms = []
    for b in range(B):
        y = (batch.labels[b] >= 0).to(dtype)
        ref = out.guided.ref_spans[b] if out.guided is not None else None
        idx = out.guided.indices[b] if out.guided is not None else None
        hd_terms.append(hd_collab_loss(out.scores[b], ref, idx, y,
                                       batch.samples[b].windows, w))
    parts["hd_collab"] = torch.stack(hd_terms).mean()

    # Denoising groups, per layer.
    if cfg.use_denoise and out.queries.num_queries > K:
        dn_layers = []
        for spans_l, logits_l in zip(out.layer_spans, out.layer_logits):
            per_sample = [
                denoise_loss(spans_l[b, K:], logits_l[b, K:],
                             batch.samples[b].windows,
                             out.queries.tags[b, K:], out.queries.provenance[b, K:], w)
                for b in range(B)
            ]
            dn_layers.append(torch.stack(per_sample).mean())
        parts["dn"] = torch.stack(dn_layers).sum()

    # Encoder contrastive suite.
    if cfg.use_contrastive:
        neg_scores = None
        if cfg.negative_strategy != "none":
            neg = _negative_texts(batch, hard_by_vid, cfg.negative_strategy,
                                  rng_neg, dtype)
            if neg is not None:
                neg_text, neg_padding = neg
                _, _, _, neg_scores = model.encode_pair(
                    batch.motion, batch.semantic, neg_text, neg_padding)
                parts["enc_neg"] = enc_neg_loss(neg_scores)
        margin_terms, cont_terms = [], []
        for b in range(B):
            h, lo, inside, outside = sample_margin_pairs(
                batch.samples[b].ann.saliency_labels, rng_margin)
            s = out.scores[b]
            margin_terms.append(margin_loss(
                s[h], s[lo], s[inside],
                s[outside] if outside is not None else None, w.margin_delta))
            cont_terms.append(rank_contrastive_loss(
                s, batch.labels[b],
                neg_scores[b] if neg_scores is not None else None, w))
        parts["margin"] = torch.stack(margin_terms).mean()
        parts["enc_cont"] = torch.stack(cont_terms).mean()

    parts["total"] = total_loss(parts, w)
    return parts


def _pred_to_span(center: float, width: float) -> MomentSpan:
    """Clamp a raw (center, span) prediction onto the unit interval."""
    start = min(max(center - width / 2, 0.0), 1.0)
    end = min(max(center + width / 2, 0.0), 1.0)
    end = max(end, start + 1e-9)
    return MomentSpan.from_start_end(start, end)


@torch.no_grad()
def infer_single(model: GroundingModel, sample: PreparedSample):
    """Inference on one pair (no denoising groups).

    Returns (RankedPredictions, raw clip scores as a numpy array).
    """
    model.eval()
    text = sample.text.unsqueeze(0)
    padding = torch.zeros(1, text.shape[1], dtype=torch.bool)
    out = model(sample.motion.unsqueeze(0), sample.semantic.unsqueeze(0),
                text, padding, dn_rows=None)
    spans = out.matched_spans()[0]
    probs = F.softmax(out.matched_logits()[0], dim=-1)[:, 1]
    order = torch.argsort(probs, descending=True, stable=True)
    moments = [
        (_pred_to_span(float(spans[i, 0]), float(spans[i, 1])), float(probs[i]))
        for i in order.tolist()
    ]
    ranked = RankedPredictions(qid=sample.ann.qid, moments=moments)
    return ranked, out.scores[0].numpy().copy()


@dataclass
class InferenceArtifacts:
    """Everything inference produces over a dataset, keyed by qid."""

    preds: list[RankedPredictions]
    gts: dict[str, list[MomentSpan]]
    clip_scores: dict[str, np.ndarray]
    clip_labels: dict[str, list[int]]
    durations: dict[str, float]

    def report(self) -> MetricsReport:
        return compute_report(self.preds, self.gts, self.clip_scores,
                              self.clip_labels)


def run_inference(model: GroundingModel, dataset: Dataset,
                  dtype=torch.float64) -> InferenceArtifacts:
    """Single code path for all evaluation and export surfaces."""
    samples = prepare_samples(dataset, dtype)
    if not samples:
        raise ValidationError("evaluation dataset has no positive records")
    art = InferenceArtifacts(preds=[], gts={}, clip_scores={}, clip_labels={},
                             durations={})
    for s in samples:
        ranked, scores = infer_single(model, s)
        art.preds.append(ranked)
        art.gts[s.ann.qid] = s.ann.windows
        art.clip_scores[s.ann.qid] = scores
        art.clip_labels[s.ann.qid] = s.ann.saliency_labels
        art.durations[s.ann.qid] = s.video.duration_s
    return art


def evaluate_model(model: GroundingModel, dataset: Dataset,
                   dtype=torch.float64) -> MetricsReport:
    """Metrics over all positive pairs; denoising disabled."""
    return run_inference(model, dataset, dtype).report()


def export_predictions(artifacts: InferenceArtifacts, path) -> None:
    """JSON-lines: per qid, the ranked (start_s, end_s, score) triples."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in artifacts.preds:
            duration = artifacts.durations[ranked.qid]
            triples = [
                [start * duration, end * duration, score]
                for (start, end), score in
                ((m.to_start_end(), s) for m, s in ranked.moments)
            ]
            fh.write(json.dumps({"qid": ranked.qid, "predictions": triples}) + "\n")


@dataclass
class TrainResult:
    checkpoint_dir: str
    log_path: str
    best_report: MetricsReport  # metrics of the retained (best-mAP) checkpoint
    best_epoch: int
    last_report: MetricsReport  # metrics at the final evaluation
    final_epoch: int
    steps: int


def _log_line(step: int, epoch: int, parts: dict[str, torch.Tensor], lr: float) -> str:
    record: dict = {"step": step, "epoch": epoch}
    for key in LOG_KEYS:
        record[key] = float(parts[key].detach()) if key in parts else 0.0
    record["total"] = float(parts["total"].detach())
    record["lr"] = lr
    return json.dumps(record)


def train(cfg: TrainConfig, data: TrainData, out_dir,
          eval_data: Dataset | None = None) -> TrainResult:
    """Optimize a fresh model on the given corpus; fully reproducible from
    (config, seed).  Retains the best-by-mAP checkpoint under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)

    report = validate_dataset(data.originals)
    report.raise_if_errors()
    if data.aux is not None:
        validate_dataset(data.aux).raise_if_errors()

    # Pin the init dtype so (config, seed) fixes the parameter draw exactly,
    # independent of the caller's ambient default dtype.
    dtype = cfg.torch_dtype
    prev_dtype = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        model = GroundingModel(cfg.model)
    finally:
        torch.set_default_dtype(prev_dtype)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)

    train_samples = prepare_samples(data.originals, dtype)
    if not train_samples:
        raise ValidationError("training dataset has no positive records")
    aux_samples = prepare_samples(data.aux, dtype) if data.aux is not None else []
    aux_by_length: dict[int, list[PreparedSample]] = {}
    for s in aux_samples:
        aux_by_length.setdefault(s.num_clips, []).append(s)

    hard_by_vid: dict[str, list[torch.Tensor]] = {}
    if data.aux is not None:
        for ann in data.aux.negatives:
            hard_by_vid.setdefault(ann.vid, []).append(
                torch.from_numpy(np.ascontiguousarray(ann.text)).to(dtype))

    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_order = np.random.default_rng(seeds[0])
    rng_noise = np.random.default_rng(seeds[1])
    rng_margin = np.random.default_rng(seeds[2])
    rng_neg = np.random.default_rng(seeds[3])
    rng_aux = np.random.default_rng(seeds[4])

    eval_set = eval_data if eval_data is not None else data.originals
    log_path = out_dir / "train_log.jsonl"
    ckpt_dir = out_dir / "checkpoint"
    best_map, best_epoch = -1.0, 0
    best_report: MetricsReport | None = None
    last_report: MetricsReport | None = None
    step = 0
    stop = False

    def run_eval(epoch: int):
        nonlocal best_map, best_epoch, best_report, last_report, stop
        rep = evaluate_model(model, eval_set, dtype)
        last_report = rep
        model.train()
        if rep.map_avg > best_map:
            best_map, best_epoch, best_report = rep.map_avg, epoch, rep
            save_checkpoint(ckpt_dir, model, extras={
                "train_config": config_to_dict(cfg),
                "report": json.loads(rep.to_json()),
            })
        if cfg.early_stop and all(
            getattr(rep, name) >= threshold
            for name, threshold in cfg.early_stop.items()
        ):
            stop = True

    epoch = 0
    with open(log_path, "w", encoding="utf-8") as log:
        model.train()
        for epoch in range(1, cfg.epochs + 1):
            batches = _make_batches(train_samples, cfg.batch_size, rng_order)
            for chunk in batches:
                use_aux = (
                    cfg.use_aux
                    and aux_by_length
                    and rng_aux.random() < cfg.aux_ratio
                )
                if use_aux:
                    pool = aux_by_length.get(chunk[0].num_clips)
                    if pool:
                        picks = rng_aux.choice(
                            len(pool), size=min(len(chunk), len(pool)), replace=False)
                        chunk = [pool[int(i)] for i in picks]
                batch = collate(chunk, dtype)
                parts = training_step(model, batch, cfg, hard_by_vid,
                                      rng_noise, rng_margin, rng_neg)
                total = parts["total"]
                if not math.isfinite(float(total.detach())):
                    dump_path = out_dir / "diverged_batch.json"
                    with open(dump_path, "w", encoding="utf-8") as fh:
                        json.dump({
                            "step": step,
                            "epoch": epoch,
                            "qids": [s.ann.qid for s in batch.samples],
                            "parts": {k: float(v.detach()) for k, v in parts.items()},
                        }, fh, indent=2)
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}", batch_id=step,
                        dump_path=str(dump_path))
                optimizer.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                optimizer.step()
                log.write(_log_line(step, epoch, parts, cfg.lr) + "\n")
                step += 1
            if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
                run_eval(epoch)
                if stop:
                    break
        if best_report is None:
            run_eval(epoch)

    assert best_report is not None and last_report is not None
    return TrainResult(
        checkpoint_dir=str(ckpt_dir),
        log_path=str(log_path),
        best_report=best_report,
        best_epoch=best_epoch,
        last_report=last_report,
        final_epoch=epoch,
        steps=step,
    )


def load_model(ckpt_dir) -> tuple[GroundingModel, TrainConfig]:
    """Rebuild the model recorded in a checkpoint directory."""
    cfg = config_from_dict(load_extra(ckpt_dir, "train_config"))
    model = GroundingModel(cfg.model).to(cfg.torch_dtype)
    load_checkpoint(ckpt_dir, model)
    model.eval()
    return model, cfg
