import json

import numpy as np
import pytest

from glcap import metrics
from glcap.data import (
    DatasetSplit,
    FeatureRecord,
    SynthSpec,
    gen_synthetic,
    load_dataset,
    split_dataset,
    write_dataset,
)
from glcap.model import Hyperparams
from glcap.text import tokenize

HP = Hyperparams(K=40, J=20, M=20, V=100, l=30)
SPEC = SynthSpec(
    num_videos=12,
    captions_per_video=5,
    corruption_rate=0.5,
    num_objects=6,
    num_actions=5,
    num_scenes=4,
    feature_dims=(HP.K, HP.J, HP.M),
    seed=11,
)


def test_gen_deterministic_per_seed():
    a = gen_synthetic(SPEC)
    b = gen_synthetic(SPEC)
    assert [r.captions for r in a] == [r.captions for r in b]
    assert all(np.array_equal(x.features.long, y.features.long) for x, y in zip(a, b))


def test_gen_respects_feature_invariants():
    for rec in gen_synthetic(SPEC):
        rec.features.validate(HP, rec.video_id)


def test_gen_zero_corruption_gives_identical_captions_and_equal_weights():
    spec = SynthSpec(**{**SPEC.__dict__, "corruption_rate": 0.0})
    records = gen_synthetic(spec)
    for rec in records:
        assert len(set(rec.captions)) == 1
    refs = [tokenize(c) for c in records[0].captions]
    w = metrics.gt_weights(refs, "B4")
    assert len(set(w)) == 1


def test_gen_caption_lengths_within_cap():
    for rec in gen_synthetic(SPEC):
        for cap in rec.captions:
            assert 1 <= len(tokenize(cap)) <= HP.l


def test_gen_rejects_overfull_slots():
    with pytest.raises(ValueError):
        SynthSpec(num_objects=30, feature_dims=(40, 20, 20)).validate()
    with pytest.raises(ValueError):
        SynthSpec(num_objects=30, num_scenes=20, feature_dims=(40, 40, 40)).validate()


def test_gen_degenerate_single_latent():
    spec = SynthSpec(
        num_videos=4, captions_per_video=3, corruption_rate=0.0,
        num_objects=1, num_actions=1, num_scenes=1, feature_dims=(30, 10, 10), seed=0,
    )
    records = gen_synthetic(spec)
    captions = {rec.captions[0] for rec in records}
    assert len(captions) == 1


def test_clean_corpus_oracle_reaches_cider_ceiling():
    spec = SynthSpec(**{**SPEC.__dict__, "corruption_rate": 0.0, "num_videos": 10})
    records = gen_synthetic(spec)
    refs = {r.video_id: [tokenize(c) for c in r.captions] for r in records}
    cands = {r.video_id: tokenize(r.captions[0]) for r in records}
    idf = metrics.build_idf(refs)
    assert metrics.corpus_score(cands, refs, "C", idf) == pytest.approx(10.0, abs=1e-9)
    assert metrics.corpus_score(cands, refs, "B4") == pytest.approx(1.0, abs=1e-12)


def test_corrupted_references_weigh_below_clean():
    # over many videos, the clean copy's leave-one-out weight beats the mean
    # of its corrupted siblings
    spec = SynthSpec(
        num_videos=100, captions_per_video=8, corruption_rate=0.5,
        num_objects=8, num_actions=6, num_scenes=5, feature_dims=(40, 20, 20), seed=3,
    )
    records = gen_synthetic(spec)
    idf = metrics.build_idf({r.video_id: [tokenize(c) for c in r.captions] for r in records})
    clean, corrupted = [], []
    for rec in records:
        refs = [tokenize(c) for c in rec.captions]
        w = metrics.gt_weights(refs, "C", idf)
        clean.append(w[0])
        corrupted.append(np.mean(w[1:]))
    assert np.mean(clean) > np.mean(corrupted)


# --- persistence ----------------------------------------------------------------

def test_dataset_roundtrip_value_identical(tmp_path):
    records = gen_synthetic(SPEC)
    path = tmp_path / "data.jsonl"
    write_dataset(path, records)
    loaded = load_dataset(path, HP)
    assert len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert a.video_id == b.video_id
        assert a.captions == b.captions
        assert np.array_equal(a.features.long, b.features.long)
        assert np.array_equal(a.features.short, b.features.short)
        assert np.array_equal(a.features.local, b.features.local)


def test_write_is_byte_deterministic(tmp_path):
    records = gen_synthetic(SPEC)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(p1, records)
    write_dataset(p2, records)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_wrong_vector_length(tmp_path):
    records = gen_synthetic(SPEC)
    records[1].features.long = records[1].features.long[:-1]
    path = tmp_path / "bad.jsonl"
    write_dataset(path, records)
    with pytest.raises(ValueError, match=records[1].video_id):
        load_dataset(path, HP)


def test_load_rejects_closed_interval_value(tmp_path):
    records = gen_synthetic(SPEC)
    records[0].features.local[2] = 1.0
    path = tmp_path / "bad.jsonl"
    write_dataset(path, records)
    with pytest.raises(ValueError, match="local"):
        load_dataset(path, HP)


def test_load_reports_malformed_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps(
        {"video_id": "v0", "features": {"long": [0.5] * HP.K, "short": [0.5] * HP.J, "local": [0.5] * HP.M}, "captions": ["a b", "a c"]}
    )
    path.write_text(good + "\nnot json at all\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        load_dataset(path, HP)


# --- splits --------------------------------------------------------------------

def test_split_sizes():
    records = gen_synthetic(SynthSpec(**{**SPEC.__dict__, "num_videos": 100}))
    split = split_dataset(records, (0.8, 0.1, 0.1), seed=5)
    assert (len(split.train), len(split.val), len(split.test)) == (80, 10, 10)
    all_ids = set(split.train) | set(split.val) | set(split.test)
    assert len(all_ids) == 100


def test_split_deterministic():
    records = gen_synthetic(SPEC)
    a = split_dataset(records, (0.5, 0.25, 0.25), seed=9)
    b = split_dataset(records, (0.5, 0.25, 0.25), seed=9)
    assert a == b


def test_split_rejects_empty_part():
    records = gen_synthetic(SPEC)[:10]
    with pytest.raises(ValueError, match="empty"):
        split_dataset(records, (0.65, 0.05, 0.30), seed=1)


def test_split_rejects_too_few_records():
    records = gen_synthetic(SPEC)[:2]
    with pytest.raises(ValueError):
        split_dataset(records, (0.4, 0.3, 0.3), seed=1)


def test_split_rejects_bad_ratios():
    records = gen_synthetic(SPEC)
    with pytest.raises(ValueError):
        split_dataset(records, (0.5, 0.4, 0.2), seed=1)
