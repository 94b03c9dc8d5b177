"""Two-phase incremental training.

The seeding phase fits the decoder with a metric-weighted cross-entropy: each
reference caption's log-likelihood is scaled by its leave-one-out quality
score, so well-written annotations pull harder than sloppy ones (unit weights
reduce it to plain cross-entropy). The boosting phase fine-tunes with a
single-sample policy gradient whose reward is a caption metric and whose
baseline makes the advantage signed: the greedy decode's reward, the mean
ground-truth reward, or the mean of the top-Q rewards among N fresh samples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .grad import Tape, Tensor, backward
from .model import (
    GlobalLocalFeatures,
    Hyperparams,
    ModelParams,
    decode_greedy,
    decode_sample,
    fuse,
    reference_logprobs,
    ss_probability,
)
from .text import Vocabulary, tokenize

WEIGHT_METRICS = ("B4", "M", "R", "C", "none")
BASELINES = ("none", "scst", "b1", "b2")


@dataclass
class SeedingConfig:
    learning_rate: float = 0.0003
    epochs: int = 30
    weight_metric: str = "C"          # "none" -> plain cross-entropy
    ss_schedule: tuple[float, int, float, int] = (0.9, 8, 0.3, 30)
    batch_size: int = 1

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.weight_metric not in WEIGHT_METRICS:
            raise ValueError(f"weight_metric must be one of {WEIGHT_METRICS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class BoostingConfig:
    learning_rate: float = 0.0001
    epochs: int = 70
    baseline: str = "b2"
    num_samples: int = 5              # N drawn to form the b2 baseline
    top_q: int = 3                    # Q highest-reward samples averaged
    reward_metric: str = "C"
    b1_use_max: bool = False
    sample_temperature: float = 1.0   # behavior-policy softening for exploration

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.reward_metric not in metrics.METRIC_KINDS:
            raise ValueError(f"reward_metric must be one of {metrics.METRIC_KINDS}")
        if self.baseline == "b2" and self.top_q > self.num_samples:
            raise ValueError(f"top_q ({self.top_q}) exceeds num_samples ({self.num_samples})")
        if self.sample_temperature <= 0:
            raise ValueError("sample_temperature must be positive")


@dataclass
class EpochStats:
    epoch: int
    phase: str
    loss: float
    b4: float
    m: float
    r: float
    c: float
    xi_prob: float
    wall_time: float
    mean_advantage: float | None = None
    grad_norm_var: float | None = None
    skipped: int = 0
    incidents: int = 0


def epoch_line(stats: EpochStats) -> str:
    """One tab-separated stdout line per epoch (metrics x100, one decimal)."""
    scores = {"B4": stats.b4, "M": stats.m, "R": stats.r, "C": stats.c}
    return (
        f"{stats.epoch}\t{stats.phase}\t{stats.loss:.4f}\t"
        f"{metrics.format_metric_row(scores)}\t{stats.xi_prob:.3f}"
    )


@dataclass
class PreparedVideo:
    """A feature record with captions tokenized and encoded once up front."""

    video_id: str
    feats: GlobalLocalFeatures
    ref_words: list[list[str]]
    ref_tokens: list[list[int]]


def prepare_videos(records, vocab: Vocabulary, hp: Hyperparams) -> list[PreparedVideo]:
    out = []
    for rec in records:
        words = [tokenize(c) for c in rec.captions]
        out.append(
            PreparedVideo(
                video_id=rec.video_id,
                feats=rec.features,
                ref_words=words,
                ref_tokens=[vocab.encode(w, hp.l) for w in words],
            )
        )
    return out


def references_of(videos: list[PreparedVideo]) -> dict[str, list[list[str]]]:
    return {v.video_id: v.ref_words for v in videos}


# ---------------------------------------------------------------------------
# Losses and gradient steps
# ---------------------------------------------------------------------------

def dxe_loss(
    tape: Tape,
    params: ModelParams,
    F: Tensor,
    ref_tokens: list[list[int]],
    weights: list[float],
    xi_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Weighted negative log-likelihood over a video's G references:
    -(1/G) * sum_j weight_j * log p(ref_j | F). Unit weights give the plain
    cross-entropy exactly."""
    if not ref_tokens:
        raise ValueError("video has no references")
    if len(weights) != len(ref_tokens):
        raise ValueError(f"{len(weights)} weights for {len(ref_tokens)} references")
    logps = reference_logprobs(tape, params, F, ref_tokens, xi_prob=xi_prob, rng=rng)
    return weighted_nll(tape, logps, weights)


def weighted_nll(tape: Tape, logps: Tensor, weights: list[float]) -> Tensor:
    """Combine per-reference log-probabilities (G, 1) into the scalar loss."""
    g = len(weights)
    row = -np.asarray(weights, dtype=np.float64).reshape(1, g) / g
    return tape.matmul(tape.constant(row), logps)


def reward(
    words: list[str],
    ref_words: list[list[str]],
    idf: metrics.IdfTable | None,
    kind: str,
) -> float:
    """Sentence-level metric score of a decoded caption."""
    if not words:
        return 0.0
    return metrics.sentence_score(kind, words, ref_words, idf)


def baseline_value(
    params: ModelParams,
    video: PreparedVideo,
    vocab: Vocabulary,
    cfg: BoostingConfig,
    rng: np.random.Generator,
    idf: metrics.IdfTable | None,
    b1_cache: dict[str, float] | None = None,
) -> float:
    """The reward bias b subtracted from the sampled reward.

    scst: reward of the greedy decode. b1: leave-one-out reward of the G
    ground-truth captions, aggregated by mean (or max behind the flag).
    b2: mean of the Q highest rewards among N fresh samples. No gradient
    flows through any of these.
    """
    kind = cfg.reward_metric
    if cfg.baseline == "scst":
        out = decode_greedy(params, video.feats)
        return reward(vocab.decode(out.tokens), video.ref_words, idf, kind)
    if cfg.baseline == "b1":
        if b1_cache is not None and video.video_id in b1_cache:
            return b1_cache[video.video_id]
        w = metrics.gt_weights(video.ref_words, kind, idf)
        b = max(w) if cfg.b1_use_max else sum(w) / len(w)
        if b1_cache is not None:
            b1_cache[video.video_id] = b
        return b
    if cfg.baseline == "b2":
        if cfg.num_samples < cfg.top_q:
            raise ValueError(f"N ({cfg.num_samples}) < Q ({cfg.top_q})")
        rewards = []
        for _ in range(cfg.num_samples):
            s = decode_sample(params, video.feats, rng, temperature=cfg.sample_temperature)
            rewards.append(reward(vocab.decode(s.tokens), video.ref_words, idf, kind))
        rewards.sort(reverse=True)
        top = rewards[: cfg.top_q]
        return sum(top) / len(top)
    raise ValueError(f"no baseline value for baseline={cfg.baseline!r}")


@dataclass
class DrStepResult:
    skipped: bool
    reward: float = 0.0
    baseline: float = 0.0
    advantage: float = 0.0
    surrogate: float = 0.0
    sample_tokens: list[int] = field(default_factory=list)
    sample_ended_with_eos: bool = True


def dr_step(
    params: ModelParams,
    video: PreparedVideo,
    vocab: Vocabulary,
    cfg: BoostingConfig,
    rng: np.random.Generator,
    idf: metrics.IdfTable | None,
    b1_cache: dict[str, float] | None = None,
) -> DrStepResult:
    """One policy-gradient step on one video.

    Samples a sentence, scores it, subtracts the configured baseline, and
    accumulates the gradient of -(advantage) * log p(sample) with the
    advantage held constant. The log-probability is the model's own
    (temperature-1) likelihood over the legal-token distributions; with
    sample_temperature below 1 the behavior policy is sharpened toward the
    model's mode, which concentrates the updates on near-greedy decisions.
    Without a baseline the advantage is the raw (always non-negative)
    reward. An empty sample is skipped with no update.
    """
    sample = decode_sample(params, video.feats, rng, temperature=cfg.sample_temperature)
    if not sample.tokens:
        return DrStepResult(skipped=True)
    r = reward(vocab.decode(sample.tokens), video.ref_words, idf, cfg.reward_metric)
    b = 0.0
    if cfg.baseline != "none":
        b = baseline_value(params, video, vocab, cfg, rng, idf, b1_cache)
    advantage = r - b
    tape = Tape()
    F = fuse(tape, params, video.feats)
    logp = reference_logprobs(
        tape, params, F, [sample.tokens],
        legal_only=True, include_eos=sample.ended_with_eos,
    )
    surrogate = tape.mul(logp, tape.constant([[-advantage]]))
    backward(tape, surrogate)
    return DrStepResult(
        skipped=False,
        reward=r,
        baseline=b,
        advantage=advantage,
        surrogate=surrogate.item(),
        sample_tokens=sample.tokens,
        sample_ended_with_eos=sample.ended_with_eos,
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment accumulators, aligned with params.all()."""

    def __init__(self, params: ModelParams):
        self.m = [np.zeros_like(p.value) for p in params.all()]
        self.v = [np.zeros_like(p.value) for p in params.all()]
        self.t = 0

    def clone(self) -> "AdamState":
        out = object.__new__(AdamState)
        out.m = [a.copy() for a in self.m]
        out.v = [a.copy() for a in self.v]
        out.t = self.t
        return out


def grad_global_norm(params: ModelParams) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.all())))


def optimizer_step(
    params: ModelParams,
    state: AdamState,
    lr: float,
    clip_norm: float = 5.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Clip the accumulated gradients to a global norm, apply one Adam update,
    and reset the gradients. Non-finite gradients abort the step (gradients
    are discarded, the Adam clock does not advance) and return False."""
    for p in params.all():
        if not np.isfinite(p.grad).all():
            params.zero_grads()
            return False
    norm = grad_global_norm(params)
    scale = clip_norm / norm if norm > clip_norm else 1.0
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params.all(), state.m, state.v):
        g = p.grad * scale
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad[...] = 0.0
    return True


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams               # best-validation snapshot
    record: list[EpochStats]
    adam: AdamState
    best_val_cider: float | None = None


def evaluate(
    params: ModelParams,
    videos: list[PreparedVideo],
    vocab: Vocabulary,
    idf: metrics.IdfTable,
) -> dict[str, float]:
    """Greedy-decode every video and average each sentence metric."""
    cands = {v.video_id: vocab.decode(decode_greedy(params, v.feats).tokens) for v in videos}
    refs = references_of(videos)
    return {k: metrics.corpus_score(cands, refs, k, idf) for k in metrics.METRIC_KINDS}


def train_seeding(
    train_videos: list[PreparedVideo],
    val_videos: list[PreparedVideo],
    vocab: Vocabulary,
    hp: Hyperparams,
    cfg: SeedingConfig,
    rng: np.random.Generator,
    idf_train: metrics.IdfTable,
    idf_val: metrics.IdfTable,
    params: ModelParams | None = None,
    log=print,
) -> TrainResult:
    """Weighted cross-entropy training with scheduled sampling; returns the
    snapshot with the best validation CIDEr."""
    cfg.validate()
    if params is None:
        params = ModelParams.init_random(hp, rng)
    if cfg.weight_metric == "none":
        weight_of = {v.video_id: [1.0] * len(v.ref_tokens) for v in train_videos}
    else:
        weight_of = {
            v.video_id: metrics.gt_weights(v.ref_words, cfg.weight_metric, idf_train)
            for v in train_videos
        }
    adam = AdamState(params)
    best = params.clone()
    best_adam = adam.clone()
    best_c: float | None = None
    record: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        xi = ss_probability(epoch, cfg.ss_schedule)
        order = rng.permutation(len(train_videos))
        losses = []
        incidents = 0
        pending = 0
        for idx in order:
            v = train_videos[int(idx)]
            tape = Tape()
            F = fuse(tape, params, v.feats)
            loss = dxe_loss(tape, params, F, v.ref_tokens, weight_of[v.video_id], xi, rng)
            backward(tape, loss)
            losses.append(loss.item())
            pending += 1
            if pending == cfg.batch_size:
                if not optimizer_step(params, adam, cfg.learning_rate):
                    incidents += 1
                pending = 0
        if pending:
            if not optimizer_step(params, adam, cfg.learning_rate):
                incidents += 1
        val = evaluate(params, val_videos, vocab, idf_val)
        stats = EpochStats(
            epoch=epoch,
            phase="seeding",
            loss=float(np.mean(losses)) if losses else 0.0,
            b4=val["B4"], m=val["M"], r=val["R"], c=val["C"],
            xi_prob=xi,
            wall_time=time.perf_counter() - t0,
            incidents=incidents,
        )
        record.append(stats)
        log(epoch_line(stats))
        if best_c is None or val["C"] > best_c:
            best_c = val["C"]
            best = params.clone()
            best_adam = adam.clone()
    return TrainResult(params=best, record=record, adam=best_adam, best_val_cider=best_c)


def train_boosting(
    entrance: ModelParams,
    train_videos: list[PreparedVideo],
    val_videos: list[PreparedVideo],
    vocab: Vocabulary,
    cfg: BoostingConfig,
    rng: np.random.Generator,
    idf_train: metrics.IdfTable,
    idf_val: metrics.IdfTable,
    log=print,
) -> TrainResult:
    """Policy-gradient fine-tuning from a seeding checkpoint; one sampled
    sentence per video per step, update applied per video. Tracks the mean
    advantage and the variance of per-example gradient norms each epoch."""
    cfg.validate()
    params = entrance.clone()
    adam = AdamState(params)
    b1_cache: dict[str, float] = {}
    best = params.clone()
    best_adam = adam.clone()
    best_c: float | None = None
    record: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_videos))
        advs, gnorms, surrogates = [], [], []
        skipped = 0
        incidents = 0
        for idx in order:
            v = train_videos[int(idx)]
            res = dr_step(params, v, vocab, cfg, rng, idf_train, b1_cache)
            if res.skipped:
                skipped += 1
                continue
            gnorms.append(grad_global_norm(params))
            if not optimizer_step(params, adam, cfg.learning_rate):
                incidents += 1
            advs.append(res.advantage)
            surrogates.append(res.surrogate)
        val = evaluate(params, val_videos, vocab, idf_val)
        stats = EpochStats(
            epoch=epoch,
            phase="boosting",
            loss=float(np.mean(surrogates)) if surrogates else 0.0,
            b4=val["B4"], m=val["M"], r=val["R"], c=val["C"],
            xi_prob=0.0,
            wall_time=time.perf_counter() - t0,
            mean_advantage=float(np.mean(advs)) if advs else 0.0,
            grad_norm_var=float(np.var(gnorms)) if gnorms else 0.0,
            skipped=skipped,
            incidents=incidents,
        )
        record.append(stats)
        log(epoch_line(stats))
        if best_c is None or val["C"] > best_c:
            best_c = val["C"]
            best = params.clone()
            best_adam = adam.clone()
    return TrainResult(params=best, record=record, adam=best_adam, best_val_cider=best_c)
