"""The captioning network: global/short/local confidence vectors are projected
and fused into one feature, which seeds an LSTM that emits the caption one
token at a time.

Teacher-forced log-likelihoods run on a gradient tape; greedy and multinomial
decoding run on plain arrays. Both paths share the same gate arithmetic, in
the same operation order, so their forward values agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grad import Parameter, Tape, Tensor, stable_sigmoid
from .text import BOS, EOS, PAD


@dataclass(frozen=True)
class Hyperparams:
    """Model dimensions. K/J/M are the three feature-vector lengths; V is the
    vocabulary size (including the 4 reserved ids); l caps caption length."""

    K: int = 300
    J: int = 400
    M: int = 1000
    d_e: int = 256
    d_w: int = 300
    d_h: int = 512
    V: int = 3000
    l: int = 30

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("K", "J", "M", "d_e", "d_w", "d_h", "V", "l")}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass
class GlobalLocalFeatures:
    """Per-video confidence vectors: long-range word slots (K), short-range
    action slots (J), and keyframe object-class slots (M). Every entry must
    lie strictly inside (0, 1)."""

    long: np.ndarray
    short: np.ndarray
    local: np.ndarray

    def validate(self, hp: Hyperparams, video_id: str = "?") -> None:
        for name, vec, want in (
            ("long", self.long, hp.K),
            ("short", self.short, hp.J),
            ("local", self.local, hp.M),
        ):
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1 or vec.shape[0] != want:
                raise ValueError(
                    f"video {video_id}: feature '{name}' has length "
                    f"{vec.shape[0] if vec.ndim == 1 else vec.shape}, expected {want}"
                )
            bad = np.nonzero((vec <= 0.0) | (vec >= 1.0))[0]
            if bad.size:
                i = int(bad[0])
                raise ValueError(
                    f"video {video_id}: feature '{name}'[{i}] = {vec[i]!r} "
                    f"is outside the open interval (0, 1)"
                )


_INIT_SCALE = 0.08
# The confidence vectors are sparse (a few near-one slots over a noise floor),
# so the feature path is initialized wider than the LSTM: fan-in-normalized
# with a gain that lifts the video-to-video signal above the embedding scale.
# At the tiny uniform init the fused feature varies ~100x less across videos
# than one token embedding and the decoder learns to ignore it.
_FUSION_GAIN = 4.0


def _param_shapes(hp: Hyperparams) -> list[tuple[str, tuple[int, int], str]]:
    gate_in = hp.d_h + hp.d_w
    shapes = [
        ("proj_long_w", (hp.K, hp.d_e), "fusion_weight"),
        ("proj_long_b", (1, hp.d_e), "bias"),
        ("proj_short_w", (hp.J, hp.d_e), "fusion_weight"),
        ("proj_short_b", (1, hp.d_e), "bias"),
        ("proj_local_w", (hp.M, hp.d_e), "fusion_weight"),
        ("proj_local_b", (1, hp.d_e), "bias"),
        ("fuse_w", (3 * hp.d_e, hp.d_w), "fusion_weight"),
        ("fuse_b", (1, hp.d_w), "bias"),
        ("embed", (hp.V, hp.d_w), "weight"),
        ("lstm_wi", (gate_in, hp.d_h), "weight"),
        ("lstm_bi", (1, hp.d_h), "bias"),
        ("lstm_wf", (gate_in, hp.d_h), "weight"),
        ("lstm_bf", (1, hp.d_h), "forget_bias"),
        ("lstm_wo", (gate_in, hp.d_h), "weight"),
        ("lstm_bo", (1, hp.d_h), "bias"),
        ("lstm_wg", (gate_in, hp.d_h), "weight"),
        ("lstm_bg", (1, hp.d_h), "bias"),
        ("out_w", (hp.d_h, hp.V), "weight"),
        ("out_b", (1, hp.V), "bias"),
    ]
    return shapes


class ModelParams:
    """All trainable tensors, in a fixed order for checkpoints and optimizers."""

    def __init__(self, hp: Hyperparams, tensors: dict[str, np.ndarray]):
        self.hp = hp
        self._order: list[Parameter] = []
        for name, shape, _ in _param_shapes(hp):
            if name not in tensors:
                raise ValueError(f"missing parameter tensor {name!r}")
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(
                    f"parameter {name!r} has shape {value.shape}, expected {shape}"
                )
            p = Parameter(name, value)
            setattr(self, name, p)
            self._order.append(p)
        extra = set(tensors) - {p.name for p in self._order}
        if extra:
            raise ValueError(f"unexpected parameter tensors: {sorted(extra)}")

    @classmethod
    def init_random(cls, hp: Hyperparams, rng: np.random.Generator) -> "ModelParams":
        """LSTM/embedding/output weights uniform in [-0.08, 0.08], biases 0,
        forget-gate bias +1; feature-path weights fan-in-normalized with gain
        (see _FUSION_GAIN)."""
        tensors = {}
        for name, shape, kind in _param_shapes(hp):
            if kind == "weight":
                tensors[name] = rng.uniform(-_INIT_SCALE, _INIT_SCALE, size=shape)
            elif kind == "fusion_weight":
                s = _FUSION_GAIN * (3.0 / shape[0]) ** 0.5
                tensors[name] = rng.uniform(-s, s, size=shape)
            elif kind == "forget_bias":
                tensors[name] = np.full(shape, 1.0)
            else:
                tensors[name] = np.zeros(shape)
        return cls(hp, tensors)

    def all(self) -> list[Parameter]:
        return list(self._order)

    def tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self._order}

    def clone(self) -> "ModelParams":
        return ModelParams(self.hp, self.tensors())

    def zero_grads(self) -> None:
        for p in self._order:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def fuse(tape: Tape, params: ModelParams, feats: GlobalLocalFeatures) -> Tensor:
    """Project each confidence vector to d_e, concatenate, and map to the
    token-embedding width d_w (so the fused feature can occupy the LSTM's
    word-input slot at step 1)."""
    feats.validate(params.hp)
    parts = []
    for vec, w, b in (
        (feats.long, params.proj_long_w, params.proj_long_b),
        (feats.short, params.proj_short_w, params.proj_short_b),
        (feats.local, params.proj_local_w, params.proj_local_b),
    ):
        row = tape.constant(np.asarray(vec, dtype=np.float64).reshape(1, -1))
        parts.append(tape.add(tape.matmul(row, w), b))
    stacked = tape.concat(parts)
    return tape.add(tape.matmul(stacked, params.fuse_w), params.fuse_b)


def fuse_values(params: ModelParams, feats: GlobalLocalFeatures) -> np.ndarray:
    """Plain-array twin of fuse(), for decoding; same operations in the same
    order, so values match the tape path bit for bit."""
    feats.validate(params.hp)
    parts = []
    for vec, w, b in (
        (feats.long, params.proj_long_w, params.proj_long_b),
        (feats.short, params.proj_short_w, params.proj_short_b),
        (feats.local, params.proj_local_w, params.proj_local_b),
    ):
        row = np.asarray(vec, dtype=np.float64).reshape(1, -1)
        parts.append(row @ w.value + b.value)
    return np.concatenate(parts, axis=1) @ params.fuse_w.value + params.fuse_b.value


# ---------------------------------------------------------------------------
# LSTM step
# ---------------------------------------------------------------------------

def lstm_step(
    tape: Tape, params: ModelParams, h_prev, c_prev, x
) -> tuple[Tensor, Tensor]:
    """One step of the decoder LSTM over the concatenated input [h_prev, x].

    Accepts row batches: h_prev/c_prev of shape (B, d_h) and x of (B, d_w).
    """
    xc = tape.concat([h_prev, x])
    i = tape.sigmoid(tape.add(tape.matmul(xc, params.lstm_wi), params.lstm_bi))
    f = tape.sigmoid(tape.add(tape.matmul(xc, params.lstm_wf), params.lstm_bf))
    o = tape.sigmoid(tape.add(tape.matmul(xc, params.lstm_wo), params.lstm_bo))
    g = tape.tanh(tape.add(tape.matmul(xc, params.lstm_wg), params.lstm_bg))
    c = tape.add(tape.mul(f, c_prev), tape.mul(i, g))
    h = tape.mul(o, tape.tanh(c))
    return h, c


def lstm_step_values(params: ModelParams, h_prev, c_prev, x) -> tuple[np.ndarray, np.ndarray]:
    """Plain-array twin of lstm_step(), bit-identical to the tape path."""
    xc = np.concatenate([h_prev, x], axis=1)
    i = stable_sigmoid(xc @ params.lstm_wi.value + params.lstm_bi.value)
    f = stable_sigmoid(xc @ params.lstm_wf.value + params.lstm_bf.value)
    o = stable_sigmoid(xc @ params.lstm_wo.value + params.lstm_bo.value)
    g = np.tanh(xc @ params.lstm_wg.value + params.lstm_bg.value)
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


# ---------------------------------------------------------------------------
# Scheduled sampling
# ---------------------------------------------------------------------------

def phi_input(
    tape: Tape,
    params: ModelParams,
    step: int,
    prev_pred: int | None,
    prev_gt: int | None,
    F: Tensor,
    xi: int,
) -> Tensor:
    """Select the LSTM word input: the fused feature at step 1, afterwards the
    embedding of the ground-truth token (xi=1) or of the model's previous
    prediction (xi=0)."""
    if step < 1:
        raise ValueError(f"step index starts at 1, got {step}")
    if step == 1:
        return tape.lift(F)
    tok = prev_gt if xi == 1 else prev_pred
    if tok is None:
        raise ValueError(f"step {step} with xi={xi} needs the previous token")
    return tape.embedding(params.embed, [tok])


def ss_probability(epoch: int, schedule: tuple[float, int, float, int]) -> float:
    """Probability of feeding the ground-truth token at a given epoch.

    Piecewise linear: p0 at epoch 0 rising to 1.0 at the peak epoch, then
    falling to p_end at the end epoch, constant afterwards.
    """
    p0, peak, p_end, end = schedule
    if epoch <= 0:
        p = p0 if peak > 0 else 1.0
    elif epoch <= peak:
        p = p0 + (1.0 - p0) * (epoch / peak)
    elif epoch <= end:
        p = 1.0 + (p_end - 1.0) * ((epoch - peak) / (end - peak)) if end > peak else p_end
    else:
        p = p_end
    return min(1.0, max(0.0, p))


# ---------------------------------------------------------------------------
# Output distribution and sequence likelihoods
# ---------------------------------------------------------------------------

def word_dist(params: ModelParams, h: np.ndarray) -> np.ndarray:
    """Softmax over the full vocabulary for a hidden state row."""
    logits = h.reshape(1, -1) @ params.out_w.value + params.out_b.value
    z = logits - logits.max()
    e = np.exp(z)
    return (e / e.sum()).reshape(-1)


def _legal_argmax(logits: np.ndarray) -> np.ndarray:
    # PAD and BOS are never legal emissions; ties resolve to the lowest id.
    return logits[:, EOS:].argmax(axis=1) + EOS


def reference_logprobs(
    tape: Tape,
    params: ModelParams,
    F: Tensor,
    token_rows: list[list[int]],
    xi_prob: float = 1.0,
    rng: np.random.Generator | None = None,
    legal_only: bool = False,
    include_eos: bool = True,
) -> Tensor:
    """Log-likelihood of each token row under the decoder, as a (G, 1) tensor.

    Rows are stepped together, padded with EOS past their ends and masked out
    of the sum. With xi_prob < 1, each row at each step independently feeds
    either its reference token or the model's previous argmax (scheduled
    sampling). legal_only renormalizes each step over the emittable ids
    (PAD and BOS removed), matching the decoding distributions; include_eos
    controls whether the terminating EOS step is scored (a sampled sentence
    cut off at max_len has no EOS step).
    """
    hp = params.hp
    G = len(token_rows)
    if G == 0:
        raise ValueError("no token rows")
    if xi_prob < 1.0 and rng is None:
        raise ValueError("scheduled sampling needs an rng")
    rows = [list(t) + [EOS] if include_eos else list(t) for t in token_rows]
    steps = max(len(r) for r in rows)
    if steps == 0:
        raise ValueError("cannot score an empty sentence without its EOS step")
    targets = np.full((G, steps), EOS, dtype=np.intp)
    mask = np.zeros((G, steps))
    for r, row in enumerate(rows):
        targets[r, : len(row)] = row
        mask[r, : len(row)] = 1.0

    lo = EOS if legal_only else 0
    width = hp.V - lo
    h = tape.constant(np.zeros((G, hp.d_h)))
    c = tape.constant(np.zeros((G, hp.d_h)))
    F = tape.lift(F)
    total: Tensor | None = None
    prev_pred: np.ndarray | None = None
    for i in range(steps):
        if i == 0:
            x = F if G == 1 else tape.matmul(tape.constant(np.ones((G, 1))), F)
        else:
            ids = targets[:, i - 1].copy()
            if xi_prob < 1.0:
                use_model = rng.random(G) >= xi_prob
                ids[use_model] = prev_pred[use_model]
            x = tape.embedding(params.embed, ids)
        h, c = lstm_step(tape, params, h, c, x)
        logits = tape.add(tape.matmul(h, params.out_w), params.out_b)
        if xi_prob < 1.0:
            prev_pred = _legal_argmax(logits.data)
        if legal_only:
            logits = tape.slice_cols(logits, lo, hp.V)
        logp = tape.log_softmax(logits)
        pick = np.zeros((G, width))
        pick[np.arange(G), targets[:, i] - lo] = mask[:, i]
        step_lp = tape.matmul(tape.mul(logp, tape.constant(pick)), tape.constant(np.ones((width, 1))))
        total = step_lp if total is None else tape.add(total, step_lp)
    return total


def seq_logprob(
    tape: Tape,
    params: ModelParams,
    F: Tensor,
    tokens: list[int],
    xi_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """log p(sentence | F) under teacher forcing, EOS step included."""
    if len(tokens) > params.hp.l:
        raise ValueError(f"sentence length {len(tokens)} exceeds the cap {params.hp.l}")
    return reference_logprobs(tape, params, F, [tokens], xi_prob=xi_prob, rng=rng)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    """A decoded sentence with the log-probability of every emission (the
    terminating EOS included when one was produced before the length cap)."""

    tokens: list[int]
    step_logprobs: list[float] = field(default_factory=list)
    total_logprob: float = 0.0
    ended_with_eos: bool = False


def _decode(
    params: ModelParams,
    feats: GlobalLocalFeatures,
    max_len: int | None,
    choose,
    temperature: float = 1.0,
) -> DecodeResult:
    hp = params.hp
    if max_len is None:
        max_len = hp.l
    F = fuse_values(params, feats)
    h = np.zeros((1, hp.d_h))
    c = np.zeros((1, hp.d_h))
    x = F
    tokens: list[int] = []
    lps: list[float] = []
    ended = False
    embed = params.embed.value
    for _ in range(max_len):
        h, c = lstm_step_values(params, h, c, x)
        logits = h @ params.out_w.value + params.out_b.value
        z = logits[0, EOS:] / temperature
        z = z - z.max()
        logp = z - np.log(np.exp(z).sum())
        k = choose(logp)
        lps.append(float(logp[k]))
        tok = k + EOS
        if tok == EOS:
            ended = True
            break
        tokens.append(tok)
        x = embed[[tok]]
    return DecodeResult(tokens, lps, float(sum(lps)), ended)


def decode_greedy(
    params: ModelParams, feats: GlobalLocalFeatures, max_len: int | None = None
) -> DecodeResult:
    """Argmax decoding over the legal ids (PAD/BOS masked); ties pick the
    lowest id; stops at EOS or max_len."""
    return _decode(params, feats, max_len, lambda logp: int(np.argmax(logp)))


def decode_sample(
    params: ModelParams,
    feats: GlobalLocalFeatures,
    rng: np.random.Generator,
    max_len: int | None = None,
    temperature: float = 1.0,
) -> DecodeResult:
    """Multinomial decoding from the per-step distribution over legal ids."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    def choose(logp: np.ndarray) -> int:
        cum = np.cumsum(np.exp(logp))
        k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        return min(k, logp.size - 1)

    return _decode(params, feats, max_len, choose, temperature)
