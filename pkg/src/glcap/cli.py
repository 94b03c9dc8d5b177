"""Command-line surface: dataset generation, the two training phases,
evaluation, standalone scoring, and single-video decoding.

Every run is seeded explicitly and reproducible byte for byte: same config,
same seed, same artifacts. Exit codes: 0 success, 1 runtime/data error,
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from . import data as datamod
from . import metrics, text
from .model import Hyperparams, ModelParams, decode_greedy
from .training import (
    AdamState,
    BoostingConfig,
    SeedingConfig,
    epoch_line,
    evaluate,
    prepare_videos,
    references_of,
    train_boosting,
    train_seeding,
)

CHECKPOINT_MAGIC = b"GLRG"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class HyperparamMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON metadata block, tensor table, CRC
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Checkpoint:
    version: int
    hyperparams: dict
    vocab: list[str]
    phase: str
    epoch: int
    tensors: dict[str, np.ndarray]
    adam_t: int | None = None


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def checkpoint_bytes(
    params: ModelParams,
    vocab: text.Vocabulary,
    phase: str,
    epoch: int,
    adam: AdamState | None = None,
) -> bytes:
    meta = {
        "hyperparams": params.hp.to_dict(),
        "vocab": vocab.id2word[len(text.RESERVED_TOKENS):],
        "phase": phase,
        "epoch": epoch,
        "adam_t": adam.t if adam is not None else None,
    }
    tensors: list[tuple[str, np.ndarray]] = [(p.name, p.value) for p in params.all()]
    if adam is not None:
        for p, m, v in zip(params.all(), adam.m, adam.v):
            tensors.append((f"adam_m.{p.name}", m))
            tensors.append((f"adam_v.{p.name}", v))
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        name_b = name.encode("utf-8")
        out += struct.pack("<I", len(name_b))
        out += name_b
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    vocab: text.Vocabulary,
    phase: str,
    epoch: int,
    adam: AdamState | None = None,
) -> None:
    _atomic_write(Path(path), checkpoint_bytes(params, vocab, phase, epoch, adam))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (file corrupt or truncated)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}q", raw, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        tensors[name] = arr.astype(np.float64)
    return Checkpoint(
        version=version,
        hyperparams=meta["hyperparams"],
        vocab=meta["vocab"],
        phase=meta["phase"],
        epoch=meta["epoch"],
        tensors=tensors,
        adam_t=meta.get("adam_t"),
    )


def checkpoint_model(ckpt: Checkpoint) -> tuple[Hyperparams, text.Vocabulary, ModelParams, AdamState | None]:
    hp = Hyperparams.from_dict(ckpt.hyperparams)
    vocab = text.Vocabulary(ckpt.vocab)
    if len(vocab) != hp.V:
        raise CheckpointFormatError(
            f"checkpoint vocabulary has {len(vocab)} entries but V={hp.V}"
        )
    model_tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam_")}
    params = ModelParams(hp, model_tensors)
    adam = None
    if ckpt.adam_t is not None:
        adam = AdamState(params)
        adam.t = ckpt.adam_t
        for i, p in enumerate(params.all()):
            adam.m[i] = ckpt.tensors[f"adam_m.{p.name}"].copy()
            adam.v[i] = ckpt.tensors[f"adam_v.{p.name}"].copy()
    return hp, vocab, params, adam


def check_hyperparams(ckpt_hp: dict, cfg_hp: Hyperparams) -> None:
    """The config's V is a cap (the trained vocabulary may be smaller); every
    other dimension must match exactly."""
    want = cfg_hp.to_dict()
    for key in ("K", "J", "M", "d_e", "d_w", "d_h", "l"):
        if ckpt_hp[key] != want[key]:
            raise HyperparamMismatchError(
                f"hyperparameter {key}: checkpoint has {ckpt_hp[key]}, config has {want[key]}"
            )
    if ckpt_hp["V"] > want["V"]:
        raise HyperparamMismatchError(
            f"hyperparameter V: checkpoint has {ckpt_hp['V']}, config caps it at {want['V']}"
        )


# ---------------------------------------------------------------------------
# Run configuration (strict JSON: unknown keys are typos, so they error)
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    hp: Hyperparams
    seed: int
    data_path: str
    split: tuple[float, float, float]
    seeding: SeedingConfig
    boosting: BoostingConfig
    out_dir: str | None = None


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    _check_keys(obj, {"hyperparams", "seed", "data", "seeding", "boosting", "out_dir"}, "config")
    if "seed" not in obj:
        raise ValueError("config must set an explicit seed")
    if "data" not in obj or "path" not in obj["data"]:
        raise ValueError("config must set data.path")
    hp_obj = obj.get("hyperparams", {})
    _check_keys(hp_obj, {"K", "J", "M", "d_e", "d_w", "d_h", "V", "l"}, "hyperparams")
    hp = dataclasses.replace(Hyperparams(), **hp_obj)
    data_obj = obj["data"]
    _check_keys(data_obj, {"path", "split"}, "data")
    split = tuple(data_obj.get("split", (0.8, 0.1, 0.1)))
    if len(split) != 3:
        raise ValueError(f"data.split must have 3 ratios, got {split}")
    seed_obj = obj.get("seeding", {})
    _check_keys(
        seed_obj,
        {"learning_rate", "epochs", "weight_metric", "ss_schedule", "batch_size"},
        "seeding",
    )
    if "ss_schedule" in seed_obj:
        seed_obj = dict(seed_obj, ss_schedule=tuple(seed_obj["ss_schedule"]))
    seeding = dataclasses.replace(SeedingConfig(), **seed_obj)
    seeding.validate()
    boost_obj = obj.get("boosting", {})
    _check_keys(
        boost_obj,
        {"learning_rate", "epochs", "baseline", "num_samples", "top_q", "reward_metric", "b1_use_max", "sample_temperature"},
        "boosting",
    )
    boosting = dataclasses.replace(BoostingConfig(), **boost_obj)
    boosting.validate()
    return RunConfig(
        hp=hp,
        seed=int(obj["seed"]),
        data_path=data_obj["path"],
        split=split,
        seeding=seeding,
        boosting=boosting,
        out_dir=obj.get("out_dir"),
    )


# ---------------------------------------------------------------------------
# Shared plumbing for the training/eval commands
# ---------------------------------------------------------------------------

def _load_corpus(cfg: RunConfig):
    records = datamod.load_dataset(cfg.data_path, cfg.hp)
    split = datamod.split_dataset(records, cfg.split, cfg.seed)
    by_id = {r.video_id: r for r in records}
    return split, by_id


def _prepared_split(split_ids, by_id, vocab, hp):
    videos = prepare_videos([by_id[i] for i in split_ids], vocab, hp)
    idf = metrics.build_idf(references_of(videos))
    return videos, idf


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    out = override or cfg.out_dir
    if out is None:
        raise ValueError("no output directory: set out_dir in the config or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_log(path: Path, lines: list[str]) -> None:
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    stopwords = text.DEFAULT_STOPWORDS
    if args.stopwords:
        stopwords = text.load_stopwords(args.stopwords)
    spec = datamod.SynthSpec(
        num_videos=args.videos,
        captions_per_video=args.captions_per_video,
        corruption_rate=args.corruption,
        noise_sigma=args.noise,
        num_objects=args.objects,
        num_actions=args.actions,
        num_scenes=args.scenes,
        feature_dims=(args.K, args.J, args.M),
        seed=args.seed,
        stopwords=stopwords,
    )
    records = datamod.gen_synthetic(spec)
    datamod.write_dataset(args.out, records)
    print(f"wrote {len(records)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(cfg, args.out)
    split, by_id = _load_corpus(cfg)
    vocab = text.build_vocab(
        (text.tokenize(c) for vid in split.train for c in by_id[vid].captions),
        cfg.hp.V,
    )
    hp = dataclasses.replace(cfg.hp, V=len(vocab))
    train_videos, idf_train = _prepared_split(split.train, by_id, vocab, hp)
    val_videos, idf_val = _prepared_split(split.val, by_id, vocab, hp)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    lines: list[str] = []

    def log(line: str) -> None:
        print(line)
        lines.append(line)

    result = train_seeding(
        train_videos, val_videos, vocab, hp, cfg.seeding, rng, idf_train, idf_val, log=log
    )
    epoch = len(result.record) - 1 if result.record else -1
    save_checkpoint(out / "seed.ckpt", result.params, vocab, "seeding", epoch, result.adam)
    _write_log(out / "train.log", lines)
    print(f"saved {out / 'seed.ckpt'}")
    return 0


def cmd_boost(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(cfg, args.out)
    ckpt = load_checkpoint(args.ckpt)
    check_hyperparams(ckpt.hyperparams, cfg.hp)
    hp, vocab, params, _ = checkpoint_model(ckpt)
    split, by_id = _load_corpus(dataclasses.replace(cfg, hp=hp))
    train_videos, idf_train = _prepared_split(split.train, by_id, vocab, hp)
    val_videos, idf_val = _prepared_split(split.val, by_id, vocab, hp)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    lines: list[str] = []

    def log(line: str) -> None:
        print(line)
        lines.append(line)

    result = train_boosting(
        params, train_videos, val_videos, vocab, cfg.boosting, rng, idf_train, idf_val, log=log
    )
    epoch = len(result.record) - 1 if result.record else -1
    save_checkpoint(out / "boost.ckpt", result.params, vocab, "boosting", epoch, result.adam)
    _write_log(out / "boost.log", lines)
    print(f"saved {out / 'boost.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    check_hyperparams(ckpt.hyperparams, cfg.hp)
    hp, vocab, params, _ = checkpoint_model(ckpt)
    split, by_id = _load_corpus(dataclasses.replace(cfg, hp=hp))
    ids = getattr(split, args.split)
    if not ids:
        raise ValueError(f"split {args.split!r} is empty")
    videos, idf = _prepared_split(ids, by_id, vocab, hp)
    scores = evaluate(params, videos, vocab, idf)
    print(metrics.METRIC_HEADER)
    print(metrics.format_metric_row(scores))
    return 0


def cmd_score(args) -> int:
    candidates: dict[str, list[str]] = {}
    with open(args.candidates, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{args.candidates}:{lineno}: expected 'video_id<TAB>caption'")
            vid, caption = line.split("\t", 1)
            candidates[vid] = text.tokenize(caption)
    references: dict[str, list[list[str]]] = {}
    with open(args.references, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                references[obj["video_id"]] = [text.tokenize(c) for c in obj["captions"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{args.references}: malformed record on line {lineno}: {exc}") from exc
    shared = [vid for vid in candidates if vid in references]
    for vid in sorted(set(candidates) - set(references)):
        print(f"warning: no references for candidate {vid}", file=sys.stderr)
    for vid in sorted(set(references) - set(candidates)):
        print(f"warning: no candidate for video {vid}", file=sys.stderr)
    if not shared:
        raise ValueError("no video ids shared between candidates and references")
    refs = {vid: references[vid] for vid in shared}
    cands = {vid: candidates[vid] for vid in shared}
    idf = metrics.build_idf(refs)
    scores = {k: metrics.corpus_score(cands, refs, k, idf) for k in metrics.METRIC_KINDS}
    print(metrics.METRIC_HEADER)
    print(metrics.format_metric_row(scores))
    return 0


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    hp, vocab, params, _ = checkpoint_model(ckpt)
    records = datamod.load_dataset(args.data, hp)
    for rec in records:
        if rec.video_id == args.video_id:
            out = decode_greedy(params, rec.features)
            print(" ".join(vocab.decode(out.tokens)))
            return 0
    raise ValueError(f"video {args.video_id!r} not found in {args.data}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glcap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--videos", type=int, default=200)
    g.add_argument("--captions-per-video", "--G", type=int, default=20, dest="captions_per_video")
    g.add_argument("--corruption", type=float, default=0.5)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--objects", type=int, default=12)
    g.add_argument("--actions", type=int, default=10)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--K", type=int, default=300)
    g.add_argument("--J", type=int, default=400)
    g.add_argument("--M", type=int, default=1000)
    g.add_argument("--stopwords", default=None)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the seeding phase")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("boost", help="run the boosting phase from an entrance checkpoint")
    b.add_argument("--config", required=True)
    b.add_argument("--ckpt", required=True)
    b.add_argument("--out", default=None)
    b.add_argument("--seed", type=int, default=None)
    b.set_defaults(func=cmd_boost)

    e = sub.add_parser("eval", help="score a checkpoint's greedy decodes on a split")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score a candidate file against references")
    s.add_argument("--candidates", required=True)
    s.add_argument("--references", required=True)
    s.set_defaults(func=cmd_score)

    d = sub.add_parser("decode", help="greedy-decode one video id")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--video-id", required=True)
    d.set_defaults(func=cmd_decode)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
