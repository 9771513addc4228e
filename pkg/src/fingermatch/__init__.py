"""Two-stage transformer fingerprint matcher.

Stage 1 encodes a fingerprint image into patch tokens and a unit-norm global
embedding; stage 2 cross-attends token sets of a candidate pair and scores
the refined embeddings. Training uses a multi-similarity loss with hard-pair
mining over three similarity matrices; evaluation covers 1:1 verification
(ROC/EER/TAR@FAR) and 1:N identification (CMC).
"""

__version__ = "0.1.0"
