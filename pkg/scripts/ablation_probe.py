"""Exploration harness for the directional ablation settings (not shipped)."""

import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from medvlp.datagen import CorpusSpec, disease_prompts, load_corpus, write_corpus
from medvlp.encoders import EncoderConfig
from medvlp.evalkit import EvalReport, zero_shot_scores
from medvlp.objectives import DecoderConfig
from medvlp.trainer import TrainConfig, fit_state

WORK = Path("/tmp/ablation_probe")


def corpus_pair(n_paired=2000, n_unpaired=1000, n_eval=600, exact=2,
                amplitude=0.45, noise=0.08, tag="exact2"):
    train_dir = WORK / f"train_{tag}"
    eval_dir = WORK / f"eval_{tag}"
    if not (train_dir / "manifest.jsonl").exists():
        write_corpus(CorpusSpec(n_paired=n_paired, n_unpaired=n_unpaired, seed=101,
                                exact_positives=exact, signal_amplitude=amplitude,
                                noise_std=noise), train_dir)
    if not (eval_dir / "manifest.jsonl").exists():
        write_corpus(CorpusSpec(n_paired=n_eval, n_unpaired=0, seed=707,
                                exact_positives=exact, signal_amplitude=amplitude,
                                noise_std=noise), eval_dir)
    return load_corpus(train_dir), load_corpus(eval_dir)


def arm_config(arm, seed, lr, embed=32, warmup=300, total=1500, temp=0.07,
               lam=(0.7, 0.75, 0.2)):
    from medvlp.image_masking import MaskConfig

    base = dict(
        lr=lr, momentum=0.9, batch_size=8, seed=seed, temperature=temp,
        mask_config=MaskConfig(*lam),
        encoder=EncoderConfig(embed_dim=embed, n_heads=4, n_layers=2),
        decoder=DecoderConfig(image_decoder_layers=1, text_decoder_layers=1),
    )
    if arm == "contrastive":
        return TrainConfig(warmup_iters=0, total_iters=total, unpaired_fraction=0.0,
                           use_mim=False, use_mlm=False, **base)
    if arm == "random":
        return TrainConfig(warmup_iters=warmup, total_iters=total,
                           unpaired_fraction=0.25, use_mim=True, use_mlm=False,
                           mim_masking="random", **base)
    if arm == "attention":
        return TrainConfig(warmup_iters=warmup, total_iters=total,
                           unpaired_fraction=0.25, use_mim=True, use_mlm=False,
                           mim_masking="attention", **base)
    if arm == "entity":
        return TrainConfig(warmup_iters=warmup, total_iters=total,
                           unpaired_fraction=0.25, use_mim=True, use_mlm=True,
                           mim_masking="attention", **base)
    if arm == "paired_only":
        return TrainConfig(warmup_iters=warmup, total_iters=total,
                           unpaired_fraction=0.0, use_mim=True, use_mlm=True,
                           mim_masking="attention", **base)
    raise ValueError(arm)


def evaluate(state, ev):
    prompts = disease_prompts(ev.vocab, ev.n_classes)
    scores = zero_shot_scores([r.image for r in ev.records], prompts,
                              state.params, state.enc_cfg)
    labels = np.stack([r.labels for r in ev.records])
    return EvalReport.from_scores(scores, labels).macro_auc


def main():
    arms = sys.argv[1].split(",") if len(sys.argv) > 1 else [
        "contrastive", "random", "attention"
    ]
    seeds = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0, 1, 2]
    lr = float(sys.argv[3]) if len(sys.argv) > 3 else 0.1
    train, ev = corpus_pair()
    results = {}
    for arm in arms:
        for seed in seeds:
            t0 = time.time()
            cfg = arm_config(arm, seed, lr)
            state = fit_state(cfg, train)
            auc = evaluate(state, ev)
            results[f"{arm}/s{seed}"] = auc
            print(f"{arm:12s} seed={seed} lr={lr}: AUC={auc:.4f}  ({time.time()-t0:.0f}s)",
                  flush=True)
    out = WORK / f"results_lr{lr}.json"
    existing = json.loads(out.read_text()) if out.exists() else {}
    existing.update(results)
    out.write_text(json.dumps(existing, indent=2, sort_keys=True))
    print(json.dumps(existing, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
