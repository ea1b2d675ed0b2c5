"""Joint video moment retrieval and highlight detection on synthetic
latent-concept corpora: disentangled motion/semantics encoding, salience-
guided decoding, contrastive denoising, and the matching evaluation suite."""

__version__ = "0.1.0"
