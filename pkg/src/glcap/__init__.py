"""Desk-scale video-captioning lab: global-local feature fusion, an LSTM
caption decoder with scheduled sampling, metric-weighted cross-entropy
seeding, and reward-baseline policy-gradient boosting, with BLEU-4 /
METEOR-lite / ROUGE-L / CIDEr built in for evaluation and training signal."""

__version__ = "0.1.0"
