"""Stain-invariance toolkit.

Learns stain-appearance-invariant feature representations of tissue-image
patches across multiple domains with a multi-channel auto-encoder, compares
them against a single-channel whitening baseline, synthesizes aligned
multi-domain patch triplets, and scores normalisation quality with
HSD-colour-space, SSIM, NFMSE, and classification metrics.
"""

__version__ = "0.1.0"
