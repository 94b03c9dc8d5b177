"""Scratch calibration for the end-to-end training criteria (not shipped)."""

import time

import numpy as np

from glcap import metrics, text
from glcap.data import SynthSpec, gen_synthetic, split_dataset
from glcap.model import Hyperparams
from glcap.training import (
    BoostingConfig, SeedingConfig, prepare_videos, references_of,
    train_boosting, train_seeding, evaluate,
)

HP = Hyperparams(K=60, J=30, M=30, d_e=32, d_w=48, d_h=128, V=200, l=30)
SPEC = SynthSpec(num_videos=200, captions_per_video=20, corruption_rate=0.5,
                 noise_sigma=0.05, num_objects=12, num_actions=10, num_scenes=8,
                 feature_dims=(HP.K, HP.J, HP.M), seed=7)


def build(seed=7):
    records = gen_synthetic(SPEC)
    split = split_dataset(records, (0.65, 0.25, 0.10), seed)
    by_id = {r.video_id: r for r in records}
    vocab = text.build_vocab(
        (text.tokenize(c) for vid in split.train for c in by_id[vid].captions), HP.V)
    hp = Hyperparams(**{**HP.to_dict(), "V": len(vocab)})
    tr = prepare_videos([by_id[i] for i in split.train], vocab, hp)
    va = prepare_videos([by_id[i] for i in split.val], vocab, hp)
    idf_tr = metrics.build_idf(references_of(tr))
    idf_va = metrics.build_idf(references_of(va))
    return hp, vocab, tr, va, idf_tr, idf_va


def oracle_ceiling(va, idf_va):
    # candidate = the clean canonical caption (refs[0] is the clean copy)
    cands = {v.video_id: v.ref_words[0] for v in va}
    refs = references_of(va)
    return {k: metrics.corpus_score(cands, refs, k, idf_va) for k in metrics.METRIC_KINDS}


def main():
    hp, vocab, tr, va, idf_tr, idf_va = build()
    print(f"vocab={len(vocab)} train={len(tr)} val={len(va)}")
    ceil = oracle_ceiling(va, idf_va)
    print("oracle ceiling:", {k: round(v, 3) for k, v in ceil.items()}, "C_norm:", ceil["C"] / 10)

    for metric in ("C", "none"):
        t0 = time.perf_counter()
        cfg = SeedingConfig(weight_metric=metric, epochs=30)
        rng = np.random.default_rng(np.random.SeedSequence(7))
        res = train_seeding(tr, va, vocab, hp, cfg, rng, idf_tr, idf_va,
                            log=lambda s: None)
        dt = time.perf_counter() - t0
        print(f"seeding[{metric}]: best_val_C={res.best_val_cider:.3f} "
              f"норм={res.best_val_cider/10:.3f} time={dt:.1f}s "
              f"last_epochs_C={[round(e.c/10,3) for e in res.record[-5:]]}")
        if metric == "C":
            entrance = res.params
            entrance_c = res.best_val_cider

    t0 = time.perf_counter()
    bcfg = BoostingConfig(epochs=20, baseline="b2", num_samples=5, top_q=3)
    rng = np.random.default_rng(np.random.SeedSequence(107))
    bres = train_boosting(entrance, tr, va, vocab, bcfg, rng, idf_tr, idf_va,
                          log=lambda s: None)
    dt = time.perf_counter() - t0
    print(f"boost[b2]: entrance_C={entrance_c:.3f} best={bres.best_val_cider:.3f} "
          f"rel_gain={(bres.best_val_cider/entrance_c-1)*100:.1f}% time={dt:.1f}s")


if __name__ == "__main__":
    main()
