"""Synthetic corpus with controllable latent motion/semantics structure.

Videos are built from contiguous segments, each labeled with a latent
(scene, action) pair drawn from a concept bank.  Clip features are the
concept vectors plus per-clip Gaussian noise, the query encodes one
target pair, and the GT windows are exactly the segments matching both
coordinates.  Auxiliary records (caption intervals, synonym/antonym
query rewrites) reuse the same latent structure, so every record's
supervision can be re-derived from the latents in tests.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GenerationError, ValidationError
from .features import (
    HARD_NEGATIVE,
    POSITIVE,
    AnnotationRecord,
    MomentSpan,
    VideoRecord,
)

DEFAULT_CLIP_LEN_S = 2.0
MIN_SEGMENT_CLIPS = 2
SYNONYM_MIN_COSINE = 0.92  # strictly above the 0.9 contract
CAPTION_MIN_CLIPS = 3
CAPTION_TOP_K = 2


def _rng_from(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tags))


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    vecs = rng.standard_normal((n, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


@dataclass
class ConceptBank:
    """Unit-norm latent scene/action vocabularies plus a fixed text projection."""

    scenes: np.ndarray  # n_scenes x d_s
    actions: np.ndarray  # n_actions x d_m
    seed: int

    @property
    def n_scenes(self) -> int:
        return self.scenes.shape[0]

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    def text_projection(self, d_t: int) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic (d_t x d_s, d_t x d_m) maps into the text space."""
        rng = _rng_from(self.seed, 7001)
        w_scene = rng.standard_normal((d_t, self.scenes.shape[1])) / np.sqrt(d_t)
        w_action = rng.standard_normal((d_t, self.actions.shape[1])) / np.sqrt(d_t)
        return w_scene, w_action


def build_concept_bank(n_scenes: int, n_actions: int, d_s: int, d_m: int,
                       seed: int) -> ConceptBank:
    """Draw unit-norm concept vectors; deterministic for a fixed seed."""
    if n_scenes < 2 or n_actions < 2:
        raise GenerationError(
            f"need at least 2 scenes and 2 actions, got {n_scenes}/{n_actions}"
        )
    rng = _rng_from(seed, 1001)
    return ConceptBank(
        scenes=_unit_rows(rng, n_scenes, d_s),
        actions=_unit_rows(rng, n_actions, d_m),
        seed=seed,
    )


@dataclass
class GenerationConfig:
    num_videos: int = 64
    clips_per_video: int = 32
    segments_per_video: int = 4
    n_scenes: int = 6
    n_actions: int = 6
    d_m: int = 32
    d_s: int = 32
    d_t: int = 32
    feature_noise_sigma: float = 0.05
    aux_pairs_per_video: int = 2  # caption-interval records kept per video
    rewrites_per_dimension: int = 1  # pos + neg rewrites per dimension
    seed: int = 0
    bank_seed: int | None = None  # share a concept vocabulary across splits

    @property
    def effective_bank_seed(self) -> int:
        return self.seed if self.bank_seed is None else self.bank_seed

    def __post_init__(self):
        if min(self.d_m, self.d_s, self.d_t) < 8:
            raise ValidationError("feature dims must be >= 8")
        if self.segments_per_video < 3:
            raise ValidationError("need >= 3 segments for target plus distractors")
        if self.segments_per_video > self.clips_per_video // 3:
            raise ValidationError(
                f"{self.segments_per_video} segments do not fit in "
                f"{self.clips_per_video} clips (need L/3 at most)"
            )
        if self.feature_noise_sigma < 0:
            raise ValidationError("feature_noise_sigma must be >= 0")


@dataclass(frozen=True)
class Segment:
    start: int  # first clip index
    end: int  # one past the last clip
    scene: int
    action: int

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def pair(self) -> tuple[int, int]:
        return self.scene, self.action


@dataclass
class SyntheticSample:
    """A generated (video, annotation) pair plus its latent provenance."""

    video: VideoRecord
    annotation: AnnotationRecord
    segments: list[Segment]
    target: tuple[int, int]  # (scene index, action index) encoded by the query
    noise_magnitude: np.ndarray = field(repr=False)  # per-clip realized noise norm


def _segment_lengths(rng: np.random.Generator, L: int, n_segments: int) -> np.ndarray:
    extra = rng.multinomial(L - MIN_SEGMENT_CLIPS * n_segments,
                            [1.0 / n_segments] * n_segments)
    return extra + MIN_SEGMENT_CLIPS


def _segment_labels(rng: np.random.Generator, bank: ConceptBank, n_segments: int,
                    target: tuple[int, int]) -> list[tuple[int, int]]:
    """Pick per-segment pairs: target segment(s), one scene distractor sharing
    the target scene, one action distractor sharing the target action, rest
    random non-target pairs.  Adjacent segments always differ."""
    scene, action = target
    other_actions = [a for a in range(bank.n_actions) if a != action]
    other_scenes = [s for s in range(bank.n_scenes) if s != scene]
    if not other_actions or not other_scenes:
        raise GenerationError("concept bank too small to place distractors")

    n_target = 2 if n_segments >= 5 and rng.random() < 0.25 else 1
    labels = [target] * n_target
    labels.append((scene, int(rng.choice(other_actions))))
    labels.append((int(rng.choice(other_scenes)), action))
    while len(labels) < n_segments:
        cand = (int(rng.integers(bank.n_scenes)), int(rng.integers(bank.n_actions)))
        if cand != target:
            labels.append(cand)

    for _ in range(200):
        order = rng.permutation(len(labels))
        arranged = [labels[i] for i in order]
        if all(arranged[i] != arranged[i + 1] for i in range(len(arranged) - 1)):
            return arranged
    raise GenerationError("could not arrange segments without adjacent duplicates")


def _build_text(scene_vec: np.ndarray, action_vec: np.ndarray, bank: ConceptBank,
                d_t: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Word-level features for a query about (scene_vec, action_vec)."""
    w_scene, w_action = bank.text_projection(d_t)
    scene_tok = w_scene @ scene_vec
    action_tok = w_action @ action_vec
    joint = scene_tok + action_tok
    n_extra = int(rng.integers(1, 5))
    tokens = [scene_tok, action_tok]
    for _ in range(n_extra):
        tokens.append(joint + sigma * rng.standard_normal(d_t))
    mat = np.stack(tokens)
    return (mat / np.maximum(np.linalg.norm(mat, axis=1, keepdims=True), 1e-12)).astype(np.float32)


def _windows_for_pair(segments: list[Segment], pair: tuple[int, int],
                      L: int) -> list[MomentSpan]:
    return [
        MomentSpan.from_start_end(seg.start / L, seg.end / L)
        for seg in segments
        if seg.pair == pair
    ]


def _saliency_labels(segments: list[Segment], pair: tuple[int, int], L: int,
                     noise_magnitude: np.ndarray) -> list[int]:
    """-1 outside GT; inside, 4 minus the window-relative quantized noise norm."""
    labels = np.full(L, -1, dtype=np.int64)
    gt = np.zeros(L, dtype=bool)
    for seg in segments:
        if seg.pair == pair:
            gt[seg.start:seg.end] = True
    if gt.any():
        mags = noise_magnitude[gt]
        lo, hi = mags.min(), mags.max()
        t = (mags - lo) / (hi - lo + 1e-12)
        labels[gt] = 4 - np.rint(4 * t).astype(np.int64)
    return labels.tolist()


def synthesize_pair(bank: ConceptBank, cfg: GenerationConfig,
                    rng: np.random.Generator, vid: str = "v0",
                    qid: str = "q0") -> SyntheticSample:
    """Generate one positive video-text pair with full latent provenance."""
    L = cfg.clips_per_video
    target = (int(rng.integers(bank.n_scenes)), int(rng.integers(bank.n_actions)))
    lengths = _segment_lengths(rng, L, cfg.segments_per_video)
    labels = _segment_labels(rng, bank, cfg.segments_per_video, target)

    segments = []
    cursor = 0
    for length, (scene, action) in zip(lengths, labels):
        segments.append(Segment(cursor, cursor + int(length), scene, action))
        cursor += int(length)

    # Per-clip noise: a shared scale multiplier for both streams so the clip
    # noise norm has controlled spread around sigma * (0.5 .. 1.5).
    scale = cfg.feature_noise_sigma * rng.uniform(0.5, 1.5, size=L)
    eps_sem = scale[:, None] * rng.standard_normal((L, cfg.d_s))
    eps_mot = scale[:, None] * rng.standard_normal((L, cfg.d_m))
    noise_magnitude = (np.linalg.norm(eps_sem, axis=1) + np.linalg.norm(eps_mot, axis=1)) / 2

    semantic = np.zeros((L, cfg.d_s))
    motion = np.zeros((L, cfg.d_m))
    for seg in segments:
        semantic[seg.start:seg.end] = bank.scenes[seg.scene]
        motion[seg.start:seg.end] = bank.actions[seg.action]
    semantic += eps_sem
    motion += eps_mot

    video = VideoRecord(
        vid=vid,
        motion=motion.astype(np.float32),
        semantic=semantic.astype(np.float32),
        duration_s=L * DEFAULT_CLIP_LEN_S,
        clip_len_s=DEFAULT_CLIP_LEN_S,
    )
    annotation = AnnotationRecord(
        qid=qid,
        vid=vid,
        text=_build_text(bank.scenes[target[0]], bank.actions[target[1]], bank,
                         cfg.d_t, cfg.feature_noise_sigma, rng),
        windows=_windows_for_pair(segments, target, L),
        saliency_labels=_saliency_labels(segments, target, L, noise_magnitude),
        polarity=POSITIVE,
    )
    return SyntheticSample(video, annotation, segments, target, noise_magnitude)


def generate_caption_pairs(sample: SyntheticSample,
                           cfg: GenerationConfig) -> list[SyntheticSample]:
    """Caption-interval records: per-segment runs, drop runs shorter than
    three clips, keep the two longest (ties to the earlier start)."""
    L = sample.video.num_clips
    runs = [seg for seg in sample.segments if seg.length >= CAPTION_MIN_CLIPS]
    runs.sort(key=lambda seg: (-seg.length, seg.start))
    keep = runs[:min(CAPTION_TOP_K, cfg.aux_pairs_per_video)]

    bank = _bank_stub(sample, cfg)
    out = []
    for i, seg in enumerate(keep):
        qid = f"{sample.annotation.qid}-cap{i}"
        rng = _rng_from(cfg.seed, 3001, zlib.crc32(qid.encode()))
        ann = AnnotationRecord(
            qid=qid,
            vid=sample.video.vid,
            text=_build_text(bank.scenes[seg.scene], bank.actions[seg.action],
                             bank, cfg.d_t, cfg.feature_noise_sigma, rng),
            windows=_windows_for_pair(sample.segments, seg.pair, L),
            saliency_labels=_saliency_labels(sample.segments, seg.pair, L,
                                             sample.noise_magnitude),
            polarity=POSITIVE,
        )
        out.append(replace(sample, annotation=ann, target=seg.pair))
    return out


_BANK_CACHE: dict[tuple, ConceptBank] = {}


def _bank_stub(sample: SyntheticSample, cfg: GenerationConfig) -> ConceptBank:
    key = (cfg.effective_bank_seed, cfg.n_scenes, cfg.n_actions, cfg.d_s, cfg.d_m)
    if key not in _BANK_CACHE:
        _BANK_CACHE[key] = build_concept_bank(cfg.n_scenes, cfg.n_actions,
                                              cfg.d_s, cfg.d_m, cfg.effective_bank_seed)
    return _BANK_CACHE[key]


def _rotate_towards(vec: np.ndarray, rng: np.random.Generator,
                    min_cosine: float) -> np.ndarray:
    """Random unit vector at a controlled angle to vec (cosine >= min_cosine)."""
    g = rng.standard_normal(vec.shape)
    g -= (g @ vec) * vec
    norm = np.linalg.norm(g)
    if norm < 1e-12:
        return vec.copy()
    g /= norm
    theta = rng.uniform(0.0, np.arccos(min_cosine))
    return np.cos(theta) * vec + np.sin(theta) * g


def rewrite_query(sample: SyntheticSample, cfg: GenerationConfig, dimension: str,
                  polarity: str, rng: np.random.Generator) -> SyntheticSample:
    """Synonym (pos) or antonym (neg) rewrite of the query along one dimension.

    pos keeps the target pair but perturbs its concept vector within
    cosine >= 0.9; neg swaps the concept for a different bank entry and
    marks the record as a hard negative.  Windows are unchanged.
    """
    if dimension not in ("semantic", "motion"):
        raise ValidationError(f"dimension must be semantic|motion, got {dimension!r}")
    if polarity not in ("pos", "neg"):
        raise ValidationError(f"polarity must be pos|neg, got {polarity!r}")
    bank = _bank_stub(sample, cfg)
    scene_idx, action_idx = sample.target
    scene_vec = bank.scenes[scene_idx].copy()
    action_vec = bank.actions[action_idx].copy()
    new_target = sample.target

    if polarity == "pos":
        if dimension == "semantic":
            scene_vec = _rotate_towards(scene_vec, rng, SYNONYM_MIN_COSINE)
        else:
            action_vec = _rotate_towards(action_vec, rng, SYNONYM_MIN_COSINE)
        new_polarity = POSITIVE
    else:
        if dimension == "semantic":
            others = [i for i in range(bank.n_scenes) if i != scene_idx]
            if not others:
                raise GenerationError("no alternative scene concept available")
            new_idx = int(rng.choice(others))
            scene_vec = bank.scenes[new_idx].copy()
            new_target = (new_idx, action_idx)
        else:
            others = [i for i in range(bank.n_actions) if i != action_idx]
            if not others:
                raise GenerationError("no alternative action concept available")
            new_idx = int(rng.choice(others))
            action_vec = bank.actions[new_idx].copy()
            new_target = (scene_idx, new_idx)
        new_polarity = HARD_NEGATIVE

    tag = "sem" if dimension == "semantic" else "mot"
    ann = AnnotationRecord(
        qid=f"{sample.annotation.qid}-syn-{tag}-{polarity}",
        vid=sample.video.vid,
        text=_build_text(scene_vec, action_vec, bank, cfg.d_t,
                         cfg.feature_noise_sigma, rng),
        windows=list(sample.annotation.windows),
        saliency_labels=list(sample.annotation.saliency_labels),
        polarity=new_polarity,
    )
    return replace(sample, annotation=ann, target=new_target)


def write_corpus(out_dir, originals: list[SyntheticSample],
                 aux: list[SyntheticSample], cfg: GenerationConfig) -> None:
    """Write feature files plus manifest.jsonl / manifest_aux.jsonl."""
    import json
    from pathlib import Path

    from .features import write_feature_file, write_manifest

    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    written_vids: set[str] = set()

    def row_for(sample: SyntheticSample) -> dict:
        video, ann = sample.video, sample.annotation
        if video.vid not in written_vids:
            write_feature_file(feat_dir / f"{video.vid}_motion.msdf", video.motion)
            write_feature_file(feat_dir / f"{video.vid}_semantic.msdf", video.semantic)
            written_vids.add(video.vid)
        write_feature_file(feat_dir / f"{ann.qid}_text.msdf", ann.text)
        duration = video.duration_s
        return {
            "qid": ann.qid,
            "vid": video.vid,
            "duration": duration,
            "relevant_windows": [
                [round(s * duration, 6), round(e * duration, 6)]
                for s, e in (w.to_start_end() for w in ann.windows)
            ],
            "saliency_scores": ann.saliency_labels,
            "motion_path": f"features/{video.vid}_motion.msdf",
            "semantic_path": f"features/{video.vid}_semantic.msdf",
            "text_path": f"features/{ann.qid}_text.msdf",
            "polarity": "pos" if ann.polarity == POSITIVE else "neg",
        }

    write_manifest(out_dir / "manifest.jsonl", [row_for(s) for s in originals])
    write_manifest(out_dir / "manifest_aux.jsonl", [row_for(s) for s in aux])
    with open(out_dir / "gen_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.__dict__, fh, indent=2)


def generate_corpus(cfg: GenerationConfig) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Full corpus for a config: original positives plus auxiliary records
    (caption intervals, pos/neg rewrites along both dimensions)."""
    bank = build_concept_bank(cfg.n_scenes, cfg.n_actions, cfg.d_s, cfg.d_m,
                              cfg.effective_bank_seed)
    _BANK_CACHE[(cfg.effective_bank_seed, cfg.n_scenes, cfg.n_actions,
                 cfg.d_s, cfg.d_m)] = bank
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.num_videos)

    originals: list[SyntheticSample] = []
    aux: list[SyntheticSample] = []
    for i in range(cfg.num_videos):
        rng = np.random.default_rng(children[i])
        sample = synthesize_pair(bank, cfg, rng, vid=f"v{i:04d}", qid=f"q{i:04d}")
        originals.append(sample)
        if cfg.aux_pairs_per_video > 0:
            aux.extend(generate_caption_pairs(sample, cfg))
        for _ in range(cfg.rewrites_per_dimension):
            for dim in ("semantic", "motion"):
                for pol in ("pos", "neg"):
                    aux.append(rewrite_query(sample, cfg, dim, pol, rng))
    return originals, aux
