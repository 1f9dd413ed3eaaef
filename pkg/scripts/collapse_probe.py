"""Diagnose contrastive feature collapse vs learning rate (not shipped)."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from medvlp.datagen import disease_prompts, load_corpus
from medvlp.evalkit import EvalReport, image_features, zero_shot_scores
from medvlp.trainer import TrainState, build_batch, train_step

from ablation_probe import WORK, arm_config, corpus_pair


def feature_spread(state, images):
    feats = image_features(images, state.enc_cfg, state.params)
    centered = feats - feats.mean(axis=0, keepdims=True)
    svals = np.linalg.svd(centered, compute_uv=False)
    p = svals / svals.sum()
    eff_rank = float(np.exp(-(p * np.log(p + 1e-12)).sum()))
    return float(centered.std()), eff_rank


def main():
    arm = sys.argv[1]
    lr = float(sys.argv[2])
    temp = float(sys.argv[3]) if len(sys.argv) > 3 else 0.07
    seed = int(sys.argv[4]) if len(sys.argv) > 4 else 0
    train, ev = corpus_pair()
    images = [r.image for r in ev.records[:200]]
    labels = np.stack([r.labels for r in ev.records[:200]])
    prompts = disease_prompts(ev.vocab, ev.n_classes)

    cfg = arm_config(arm, seed, lr, temp=temp)
    state = TrainState(cfg, train)
    aligns = []
    t0 = time.time()
    warmup = cfg.warmup_iters if (cfg.use_mim or cfg.use_mlm) else 0
    while state.step < cfg.total_iters:
        step = state.step + 1
        phase = "warmup" if step <= warmup else "joint"
        batch = build_batch(train, cfg.batch_size, cfg.unpaired_fraction,
                            state._root.child("batch", step))
        bundle = train_step(state, batch, phase)
        if bundle.align is not None:
            aligns.append(float(bundle.align.data))
        if step % 250 == 0 or step == cfg.total_iters:
            scores = zero_shot_scores(images, prompts, state.params, state.enc_cfg)
            auc = EvalReport.from_scores(scores, labels).macro_auc
            spread, rank = feature_spread(state, images[:100])
            recent = np.mean(aligns[-50:]) if aligns else float("nan")
            print(f"step {step:5d} [{phase}] align(50)={recent:.4f} "
                  f"AUC={auc:.4f} spread={spread:.4f} effrank={rank:.2f} "
                  f"({time.time()-t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
