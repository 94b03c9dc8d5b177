import dataclasses
import json

import numpy as np
import pytest

from glcap import cli, metrics, text
from glcap.cli import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointVersionError,
    HyperparamMismatchError,
    check_hyperparams,
    checkpoint_bytes,
    checkpoint_model,
    load_checkpoint,
    load_config,
    save_checkpoint,
)
from glcap.model import Hyperparams, ModelParams
from glcap.training import AdamState


def small_config(tmp_path, data_path, **over):
    cfg = {
        "seed": 5,
        "data": {"path": str(data_path), "split": [0.6, 0.2, 0.2]},
        "hyperparams": {"K": 30, "J": 12, "M": 12, "d_e": 8, "d_w": 12, "d_h": 16, "V": 100, "l": 30},
        "seeding": {"epochs": 1, "ss_schedule": [0.9, 1, 0.9, 1], "weight_metric": "none"},
        "boosting": {"epochs": 1, "baseline": "b2", "num_samples": 2, "top_q": 1},
        "out_dir": str(tmp_path / "run"),
    }
    cfg.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture()
def dataset(tmp_path):
    path = tmp_path / "data.jsonl"
    rc = cli.main([
        "gen-data", "--videos", "20", "--captions-per-video", "4", "--corruption", "0.4",
        "--objects", "5", "--actions", "4", "--scenes", "3",
        "--K", "30", "--J", "12", "--M", "12", "--seed", "3", "--out", str(path),
    ])
    assert rc == 0
    return path


# --- gen-data ---------------------------------------------------------------------

def test_gen_data_writes_expected_lines(dataset):
    lines = dataset.read_text(encoding="utf-8").strip().split("\n")
    assert len(lines) == 20
    rec = json.loads(lines[0])
    assert set(rec) == {"video_id", "features", "captions"}
    assert set(rec["features"]) == {"long", "short", "local"}


def test_gen_data_deterministic(tmp_path, dataset):
    other = tmp_path / "other.jsonl"
    cli.main([
        "gen-data", "--videos", "20", "--captions-per-video", "4", "--corruption", "0.4",
        "--objects", "5", "--actions", "4", "--scenes", "3",
        "--K", "30", "--J", "12", "--M", "12", "--seed", "3", "--out", str(other),
    ])
    assert other.read_bytes() == dataset.read_bytes()


def test_gen_data_missing_out_is_usage_error(capsys):
    assert cli.main(["gen-data", "--videos", "5", "--seed", "1"]) == 2


def test_unknown_command_is_usage_error():
    assert cli.main(["frobnicate"]) == 2


# --- config ---------------------------------------------------------------------------

def test_config_rejects_unknown_keys(tmp_path, dataset):
    path = small_config(tmp_path, dataset, extra_key=1)
    with pytest.raises(ValueError, match="extra_key"):
        load_config(path)


def test_config_requires_seed(tmp_path, dataset):
    cfg = json.loads(small_config(tmp_path, dataset).read_text())
    del cfg["seed"]
    p = tmp_path / "c2.json"
    p.write_text(json.dumps(cfg))
    with pytest.raises(ValueError, match="seed"):
        load_config(p)


def test_config_defaults_fill_in(tmp_path, dataset):
    p = tmp_path / "c3.json"
    p.write_text(json.dumps({"seed": 1, "data": {"path": str(dataset)}}))
    cfg = load_config(p)
    assert cfg.hp.K == 300 and cfg.seeding.epochs == 30 and cfg.boosting.baseline == "b2"
    assert cfg.split == (0.8, 0.1, 0.1)


# --- checkpoints -------------------------------------------------------------------------

HP = Hyperparams(K=6, J=5, M=4, d_e=3, d_w=4, d_h=5, V=7, l=8)


def make_state(seed=0):
    params = ModelParams.init_random(HP, np.random.default_rng(seed))
    vocab = text.Vocabulary(["dog", "runs", "sits"])
    adam = AdamState(params)
    adam.t = 3
    adam.m[0][...] = 0.5
    return params, vocab, adam


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params, vocab, adam = make_state()
    p1 = tmp_path / "a.ckpt"
    save_checkpoint(p1, params, vocab, "seeding", 12, adam)
    ckpt = load_checkpoint(p1)
    hp, vocab2, params2, adam2 = checkpoint_model(ckpt)
    assert hp == HP
    assert vocab2.id2word == vocab.id2word
    assert ckpt.phase == "seeding" and ckpt.epoch == 12
    assert adam2.t == 3
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p2, params2, vocab2, ckpt.phase, ckpt.epoch, adam2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bytes_deterministic():
    params, vocab, adam = make_state()
    assert checkpoint_bytes(params, vocab, "seeding", 1, adam) == checkpoint_bytes(
        params, vocab, "seeding", 1, adam
    )


def test_checkpoint_truncation_detected(tmp_path):
    params, vocab, adam = make_state()
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, params, vocab, "seeding", 1, adam)
    raw = p.read_bytes()
    p.write_bytes(raw[:-9])
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(p)


def test_checkpoint_bitflip_detected(tmp_path):
    params, vocab, adam = make_state()
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, params, vocab, "seeding", 1, adam)
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path):
    import struct
    import zlib

    params, vocab, adam = make_state()
    raw = bytearray(checkpoint_bytes(params, vocab, "seeding", 1, adam))
    raw[4:8] = struct.pack("<I", 99)
    body = bytes(raw[:-4])
    p = tmp_path / "v99.ckpt"
    p.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)


def test_hyperparam_mismatch_names_field():
    ckpt_hp = HP.to_dict()
    cfg_hp = dataclasses.replace(HP, d_h=9)
    with pytest.raises(HyperparamMismatchError, match="d_h"):
        check_hyperparams(ckpt_hp, cfg_hp)


def test_hyperparam_vocab_cap_allows_smaller():
    ckpt_hp = HP.to_dict()
    check_hyperparams(ckpt_hp, dataclasses.replace(HP, V=50))
    with pytest.raises(HyperparamMismatchError, match="V"):
        check_hyperparams(ckpt_hp, dataclasses.replace(HP, V=HP.V - 1))


# --- train / boost / eval / decode pipeline ---------------------------------------------------

def test_pipeline_train_boost_eval_decode(tmp_path, dataset, capsys):
    cfg_path = small_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    out = tmp_path / "run"
    assert (out / "seed.ckpt").exists() and (out / "train.log").exists()
    log_lines = (out / "train.log").read_text().strip().split("\n")
    assert len(log_lines) == 1  # one epoch
    assert log_lines[0].split("\t")[1] == "seeding"

    assert cli.main(["boost", "--config", str(cfg_path), "--ckpt", str(out / "seed.ckpt")]) == 0
    assert (out / "boost.ckpt").exists() and (out / "boost.log").exists()

    capsys.readouterr()
    assert cli.main(["eval", "--config", str(cfg_path), "--ckpt", str(out / "seed.ckpt"), "--split", "test"]) == 0
    printed = capsys.readouterr().out.strip().split("\n")
    assert printed[0] == metrics.METRIC_HEADER
    assert len(printed[1].split("\t")) == 4

    rec = json.loads(dataset.read_text().split("\n")[0])
    capsys.readouterr()
    assert cli.main(["decode", "--ckpt", str(out / "seed.ckpt"), "--data", str(dataset),
                     "--video-id", rec["video_id"]]) == 0


def test_train_deterministic_artifacts(tmp_path, dataset):
    cfg_path = small_config(tmp_path, dataset, out_dir=str(tmp_path / "r1"))
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    cfg_path2 = small_config(tmp_path, dataset, out_dir=str(tmp_path / "r2"))
    assert cli.main(["train", "--config", str(cfg_path2)]) == 0
    assert (tmp_path / "r1" / "seed.ckpt").read_bytes() == (tmp_path / "r2" / "seed.ckpt").read_bytes()
    assert (tmp_path / "r1" / "train.log").read_bytes() == (tmp_path / "r2" / "train.log").read_bytes()


def test_boost_rejects_mismatched_checkpoint(tmp_path, dataset, capsys):
    cfg_path = small_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    bad_cfg = small_config(tmp_path, dataset, hyperparams={
        "K": 30, "J": 12, "M": 12, "d_e": 8, "d_w": 12, "d_h": 24, "V": 100, "l": 30})
    rc = cli.main(["boost", "--config", str(bad_cfg), "--ckpt", str(tmp_path / "run" / "seed.ckpt")])
    assert rc == 1
    assert "d_h" in capsys.readouterr().err


def test_boost_rejects_corrupt_checkpoint(tmp_path, dataset, capsys):
    cfg_path = small_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    ckpt = tmp_path / "run" / "seed.ckpt"
    ckpt.write_bytes(ckpt.read_bytes()[:-20])
    assert cli.main(["boost", "--config", str(cfg_path), "--ckpt", str(ckpt)]) == 1


def test_eval_empty_intersection_is_runtime_error(tmp_path, dataset, capsys):
    cfg_path = small_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    missing = tmp_path / "missing.jsonl"
    missing.write_text("", encoding="utf-8")
    bad_cfg = small_config(tmp_path, missing)
    rc = cli.main(["eval", "--config", str(bad_cfg), "--ckpt", str(tmp_path / "run" / "seed.ckpt")])
    assert rc == 1


def test_decode_unknown_video(tmp_path, dataset, capsys):
    cfg_path = small_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    rc = cli.main(["decode", "--ckpt", str(tmp_path / "run" / "seed.ckpt"),
                   "--data", str(dataset), "--video-id", "no-such-video"])
    assert rc == 1


# --- score ------------------------------------------------------------------------------------

def test_score_identical_candidates(tmp_path, dataset, capsys):
    refs = [json.loads(line) for line in dataset.read_text().strip().split("\n")]
    cand_path = tmp_path / "cands.tsv"
    cand_path.write_text(
        "".join(f"{r['video_id']}\t{r['captions'][0]}\n" for r in refs), encoding="utf-8"
    )
    capsys.readouterr()
    assert cli.main(["score", "--candidates", str(cand_path), "--references", str(dataset)]) == 0
    out = capsys.readouterr().out.strip().split("\n")
    b4, m, r, c = (float(x) for x in out[1].split("\t"))
    assert b4 == 100.0
    assert r == 100.0


def test_score_disjoint_candidates_all_zero(tmp_path, dataset, capsys):
    refs = [json.loads(line) for line in dataset.read_text().strip().split("\n")]
    cand_path = tmp_path / "cands.tsv"
    cand_path.write_text(
        "".join(f"{r['video_id']}\tzz qq xx yy\n" for r in refs), encoding="utf-8"
    )
    capsys.readouterr()
    assert cli.main(["score", "--candidates", str(cand_path), "--references", str(dataset)]) == 0
    out = capsys.readouterr().out.strip().split("\n")
    assert [float(x) for x in out[1].split("\t")] == [0.0, 0.0, 0.0, 0.0]


def test_score_warns_on_id_mismatch(tmp_path, dataset, capsys):
    refs = [json.loads(line) for line in dataset.read_text().strip().split("\n")]
    cand_path = tmp_path / "cands.tsv"
    cand_path.write_text(
        f"{refs[0]['video_id']}\t{refs[0]['captions'][0]}\nghost-video\tsome words\n",
        encoding="utf-8",
    )
    capsys.readouterr()
    assert cli.main(["score", "--candidates", str(cand_path), "--references", str(dataset)]) == 0
    err = capsys.readouterr().err
    assert "ghost-video" in err


def test_score_empty_intersection_errors(tmp_path, dataset):
    cand_path = tmp_path / "cands.tsv"
    cand_path.write_text("ghost\twords here\n", encoding="utf-8")
    assert cli.main(["score", "--candidates", str(cand_path), "--references", str(dataset)]) == 1


def test_score_matches_metrics_module(tmp_path, capsys):
    corpus = {
        "v1": ["a dog is running in the park", "the dog runs across the green park"],
        "v2": ["a woman is slicing an onion in the kitchen", "someone slices onions for dinner"],
        "v3": ["a band is playing rock music on stage", "the rock band performs a loud song"],
    }
    ref_path = tmp_path / "refs.jsonl"
    ref_path.write_text(
        "".join(
            json.dumps({"video_id": vid, "features": {"long": [], "short": [], "local": []}, "captions": caps}) + "\n"
            for vid, caps in corpus.items()
        ),
        encoding="utf-8",
    )
    cands = {"v1": "a dog is running in the park", "v2": "a woman is cooking", "v3": "the band plays a song"}
    cand_path = tmp_path / "cands.tsv"
    cand_path.write_text("".join(f"{k}\t{v}\n" for k, v in cands.items()), encoding="utf-8")
    capsys.readouterr()
    assert cli.main(["score", "--candidates", str(cand_path), "--references", str(ref_path)]) == 0
    out = capsys.readouterr().out.strip().split("\n")[1]

    tok_refs = {k: [text.tokenize(c) for c in v] for k, v in corpus.items()}
    tok_cands = {k: text.tokenize(v) for k, v in cands.items()}
    idf = metrics.build_idf(tok_refs)
    want = {k: metrics.corpus_score(tok_cands, tok_refs, k, idf) for k in metrics.METRIC_KINDS}
    assert out == metrics.format_metric_row(want)
