"""Random perturbation of GT moments for contrastive denoising.

Positive replicas draw the noise scale from U[0,1], negative replicas
from U[1,2]; center and span receive the same magnitude delta2*lam*span/2
with independent random signs.  Results are clamped back onto the unit
interval with a one-clip-width span floor, and every draw is recorded so
the perturbation is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..features import MomentSpan


@dataclass
class NoiseConfig:
    delta2: float = 1.0  # noise-control hyperparameter
    pos_replicas: int = 2
    neg_replicas: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.delta2 <= 0:
            raise ValidationError(f"delta2 must be > 0, got {self.delta2}")
        if self.pos_replicas < 0 or self.neg_replicas < 0:
            raise ValidationError("replica counts must be >= 0")


@dataclass(frozen=True)
class NoiseDraw:
    """One recorded perturbation: scale sample and the two signs."""

    lam: float
    sign_center: float
    sign_span: float


def apply_noise(span: MomentSpan, draw: NoiseDraw, delta2: float,
                clip_width: float) -> MomentSpan:
    """Apply a recorded draw to one span and clamp onto [0, 1]."""
    mag = delta2 * draw.lam * span.span / 2
    new_span = span.span + draw.sign_span * mag
    new_center = span.center + draw.sign_center * mag
    new_span = min(max(new_span, clip_width), 1.0)
    new_center = min(max(new_center, new_span / 2), 1.0 - new_span / 2)
    return MomentSpan(center=new_center, span=new_span)


def perturb_moments(moments: list[MomentSpan], polarity: str, cfg: NoiseConfig,
                    rng: np.random.Generator,
                    clip_width: float) -> tuple[list[MomentSpan], list[NoiseDraw]]:
    """Noise every GT moment once; polarity picks the scale range."""
    if polarity not in ("pos", "neg"):
        raise ValidationError(f"polarity must be pos|neg, got {polarity!r}")
    lo, hi = (0.0, 1.0) if polarity == "pos" else (1.0, 2.0)
    noised, draws = [], []
    for m in moments:
        draw = NoiseDraw(
            lam=float(rng.uniform(lo, hi)),
            sign_center=float(rng.choice([-1.0, 1.0])),
            sign_span=float(rng.choice([-1.0, 1.0])),
        )
        noised.append(apply_noise(m, draw, cfg.delta2, clip_width))
        draws.append(draw)
    return noised, draws
