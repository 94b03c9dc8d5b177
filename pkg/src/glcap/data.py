"""Synthetic dataset generation and JSON-lines ingestion.

Each generated "video" is a latent (object, action, scene) triple rendered as
the canonical caption "a <object> is <action>ing in the <scene>". Its feature
vectors carry the answer: the object-class vector spikes at the object slot,
the action vector at the action slot, and the long-range word vector at the
slots of the caption's content words. References are one clean copy plus
degraded copies whose corruption level varies within the video, so quality
weighting and reward baselines have real signal to pick up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import text
from .model import GlobalLocalFeatures, Hyperparams

# Action words are chosen so the progressive form is just base + "ing".
OBJECT_WORDS = [
    "dog", "cat", "man", "woman", "boy", "girl", "bird", "horse",
    "monkey", "chef", "robot", "baby", "clown", "farmer", "singer", "turtle",
]
ACTION_WORDS = [
    "jump", "sing", "play", "cook", "walk", "talk", "eat", "drink",
    "climb", "paint", "read", "sleep", "laugh", "shout", "crawl", "fish",
]
SCENE_WORDS = [
    "park", "kitchen", "street", "beach", "field", "room", "stage", "pool",
    "garden", "forest", "city", "gym", "yard", "snow", "barn", "market",
]

_HI_LOW, _HI_HIGH = 0.7, 0.99
_CLAMP_LOW, _CLAMP_HIGH = 0.001, 0.999


@dataclass
class FeatureRecord:
    """One video: id, its three confidence vectors, and G raw captions."""

    video_id: str
    features: GlobalLocalFeatures
    captions: list[str]


@dataclass
class SynthSpec:
    """Knobs for the synthetic corpus. corruption_rate caps the per-caption
    degradation level; feature vector lengths are (K, J, M)."""

    num_videos: int = 200
    captions_per_video: int = 20
    corruption_rate: float = 0.5
    noise_sigma: float = 0.05
    num_objects: int = 12
    num_actions: int = 10
    num_scenes: int = 8
    feature_dims: tuple[int, int, int] = (300, 400, 1000)
    seed: int = 0
    stopwords: frozenset[str] = field(default_factory=lambda: text.DEFAULT_STOPWORDS)

    def validate(self) -> None:
        K, J, M = self.feature_dims
        if min(self.num_videos, self.num_objects, self.num_actions, self.num_scenes) < 1:
            raise ValueError("all counts must be >= 1")
        if self.captions_per_video < 2:
            raise ValueError("need at least 2 captions per video")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError(f"corruption_rate must be in [0, 1], got {self.corruption_rate}")
        if self.num_objects > M:
            raise ValueError(f"{self.num_objects} objects exceed the {M} class slots")
        if self.num_actions > J:
            raise ValueError(f"{self.num_actions} actions exceed the {J} action slots")
        if self.num_objects + self.num_scenes > K:
            raise ValueError(
                f"object+scene vocabulary ({self.num_objects + self.num_scenes}) "
                f"exceeds the {K} word slots"
            )


@dataclass
class DatasetSplit:
    """Disjoint train/val/test video-id lists covering the whole dataset."""

    train: list[str]
    val: list[str]
    test: list[str]


def _word_pool(base: list[str], prefix: str, n: int) -> list[str]:
    pool = list(base)
    while len(pool) < n:
        pool.append(f"{prefix}{len(pool)}")
    return pool[:n]


def _corrupt(tokens: list[str], level: float, vocab: list[str], rng: np.random.Generator) -> list[str]:
    """Degrade a caption: each token is hit with probability `level`, by a
    uniformly chosen drop / adjacent swap / random-word substitution."""
    out = list(tokens)
    i = 0
    while i < len(out):
        if rng.random() < level:
            op = rng.integers(3)
            if op == 0:
                out.pop(i)
                continue
            if op == 1 and i + 1 < len(out):
                out[i], out[i + 1] = out[i + 1], out[i]
                i += 2
                continue
            out[i] = vocab[rng.integers(len(vocab))]
        i += 1
    if not out:
        out = [vocab[rng.integers(len(vocab))]]
    return out


def gen_synthetic(spec: SynthSpec) -> list[FeatureRecord]:
    """Deterministic synthetic corpus for the given spec (seeded)."""
    spec.validate()
    K, J, M = spec.feature_dims
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    objects = _word_pool(OBJECT_WORDS, "object", spec.num_objects)
    actions = _word_pool(ACTION_WORDS, "act", spec.num_actions)
    scenes = _word_pool(SCENE_WORDS, "scene", spec.num_scenes)
    content_vocab = sorted(set(objects) | {a + "ing" for a in actions} | set(scenes))

    latents = []
    all_captions: list[list[list[str]]] = []
    for _ in range(spec.num_videos):
        obj = objects[rng.integers(spec.num_objects)]
        act = actions[rng.integers(spec.num_actions)]
        scene = scenes[rng.integers(spec.num_scenes)]
        canonical = ["a", obj, "is", act + "ing", "in", "the", scene]
        refs = [list(canonical)]
        for _ in range(spec.captions_per_video - 1):
            # Annotation quality is bimodal, like crowd-sourced captions:
            # most references are lightly touched, a minority are careless
            # rewrites at the full corruption level. The split is what gives
            # quality weighting something real to discriminate.
            if rng.random() < 0.2:
                level = spec.corruption_rate
            else:
                level = rng.uniform(0.0, spec.corruption_rate / 3.0)
            refs.append(_corrupt(canonical, level, content_vocab, rng))
        latents.append((obj, act, scene))
        all_captions.append(refs)

    # The long-range slots mean "the k-th most frequent content word of the
    # reference corpus", so their semantics come from the corpus itself.
    corpus = (ref for refs in all_captions for ref in refs)
    slot_words = text.top_k_content_words(corpus, K, spec.stopwords)
    slot_of = {w: i for i, w in enumerate(slot_words)}

    def noise(n: int) -> np.ndarray:
        return np.clip(np.abs(rng.normal(0.0, spec.noise_sigma, size=n)), _CLAMP_LOW, _CLAMP_HIGH)

    def hot() -> float:
        return float(rng.uniform(_HI_LOW, _HI_HIGH))

    records = []
    for v, ((obj, act, scene), refs) in enumerate(zip(latents, all_captions)):
        w_vec = noise(K)
        for word in (obj, act + "ing", scene):
            slot = slot_of.get(word)
            if slot is not None:
                w_vec[slot] = hot()
        a_vec = noise(J)
        a_vec[actions.index(act)] = hot()
        c_vec = noise(M)
        c_vec[objects.index(obj)] = hot()
        records.append(
            FeatureRecord(
                video_id=f"vid{v:05d}",
                features=GlobalLocalFeatures(long=w_vec, short=a_vec, local=c_vec),
                captions=[" ".join(r) for r in refs],
            )
        )
    return records


# ---------------------------------------------------------------------------
# Persistence: JSON lines, one record per line
# ---------------------------------------------------------------------------

def write_dataset(path: str | Path, records: list[FeatureRecord]) -> None:
    lines = []
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "video_id": rec.video_id,
                    "features": {
                        "long": rec.features.long.tolist(),
                        "short": rec.features.short.tolist(),
                        "local": rec.features.local.tolist(),
                    },
                    "captions": rec.captions,
                },
                separators=(",", ":"),
            )
        )
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_dataset(path: str | Path, hp: Hyperparams) -> list[FeatureRecord]:
    """Parse and validate a dataset file against the configured (K, J, M)."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                vid = obj["video_id"]
                feats = obj["features"]
                rec = FeatureRecord(
                    video_id=vid,
                    features=GlobalLocalFeatures(
                        long=np.asarray(feats["long"], dtype=np.float64),
                        short=np.asarray(feats["short"], dtype=np.float64),
                        local=np.asarray(feats["local"], dtype=np.float64),
                    ),
                    captions=list(obj["captions"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from exc
            rec.features.validate(hp, rec.video_id)
            if len(rec.captions) < 2:
                raise ValueError(f"video {rec.video_id}: needs at least 2 captions")
            records.append(rec)
    return records


def split_dataset(
    records: list[FeatureRecord],
    ratios: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/val/test partition.

    Val and test sizes are floored; the remainder goes to train. Any empty
    part is an error.
    """
    if len(records) < 3:
        raise ValueError(f"need at least 3 records to split, got {len(records)}")
    if min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    n = len(records)
    n_val = int(ratios[1] * n)
    n_test = int(ratios[2] * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise ValueError(
            f"split of {n} records by {ratios} leaves an empty part "
            f"(train={n_train}, val={n_val}, test={n_test})"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ids = [rec.video_id for rec in records]
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )
