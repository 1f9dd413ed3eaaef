"""Command-line entry point.

Subcommands: gen-data, pretrain, zeroshot, finetune, maskdump, sweep.
Structured config goes through JSON files; every subcommand honors --seed,
writes its products under --out and drops a manifest.json listing them.
Exit code is 0 iff no stage failed.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import autodiff as ad
from .datagen import CorpusSpec, load_corpus, prompt_sequence, write_corpus
from .datagen import disease_prompts
from .encoders import encode_image, encode_text
from .evalkit import EvalReport, ensemble_scores, linear_probe, zero_shot_scores
from .image_masking import MaskConfig, strategy_masks
from .rng import RngStream
from .trainer import TrainConfig, load_params, run


class StageError(RuntimeError):
    """An error attributed to a named pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _write_manifest(out_dir: Path, command: str, outputs: list[Path]) -> None:
    rel = sorted(str(p.relative_to(out_dir)) for p in outputs)
    (out_dir / "manifest.json").write_text(
        json.dumps({"command": command, "outputs": rel}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )


def _write_report(path: Path, report: EvalReport) -> None:
    path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _load_model(ckpt_path, vocab):
    enc_cfg, dec_cfg, params, _, _ = load_params(ckpt_path)
    if enc_cfg.vocab_size != len(vocab):
        raise ValueError(
            f"checkpoint vocabulary size {enc_cfg.vocab_size} does not match "
            f"corpus vocabulary size {len(vocab)}"
        )
    return enc_cfg, dec_cfg, params


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    try:
        spec_dict = json.loads(Path(args.spec).read_text())
        if args.seed is not None:
            spec_dict["seed"] = args.seed
        spec = CorpusSpec(**spec_dict)
    except (OSError, ValueError, TypeError) as err:
        raise StageError("gen-data/spec", str(err)) from err
    try:
        manifest = write_corpus(spec, out_dir)
    except OSError as err:
        raise StageError("gen-data/write", str(err)) from err
    outputs = [manifest, out_dir / "vocab.txt", out_dir / "lexicon.tsv",
               out_dir / "spec.json"]
    _write_manifest(out_dir, "gen-data", outputs)
    return 0


def cmd_pretrain(args) -> int:
    out_dir = Path(args.out)
    try:
        cfg = TrainConfig.from_json(args.config)
        if args.seed is not None:
            cfg = TrainConfig.from_dict({**json.loads(Path(args.config).read_text()),
                                         "seed": args.seed})
    except (OSError, ValueError, TypeError) as err:
        raise StageError("pretrain/config", str(err)) from err
    try:
        corpus = load_corpus(args.corpus)
    except (OSError, ValueError) as err:
        raise StageError("pretrain/corpus", str(err)) from err
    try:
        ckpt, log = run(cfg, corpus, out_dir, resume_from=args.resume)
    except (ValueError, FloatingPointError, OSError) as err:
        raise StageError("pretrain/train", str(err)) from err
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out_dir / "config.json")
    _write_manifest(out_dir, "pretrain", [ckpt, log, out_dir / "config.json"])
    return 0


def _resolve_report_out(out_arg: str, default_name: str) -> tuple[Path, Path]:
    """--out may be a report file path (*.json) or a directory."""
    out = Path(out_arg)
    if out.suffix == ".json":
        return out.parent, out
    return out, out / default_name


def cmd_zeroshot(args) -> int:
    out_dir, report_path = _resolve_report_out(args.out, "report.json")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        corpus = load_corpus(args.corpus)
    except (OSError, ValueError) as err:
        raise StageError("zeroshot/corpus", str(err)) from err
    images = [r.image for r in corpus.records]
    labels = [r.labels for r in corpus.records]
    ckpts = [p for p in args.ckpt.split(",") if p]
    try:
        per_ckpt = []
        for path in ckpts:
            enc_cfg, _, params = _load_model(path, corpus.vocab)
            prompts = disease_prompts(corpus.vocab, corpus.n_classes)
            per_ckpt.append(zero_shot_scores(images, prompts, params, enc_cfg))
        scores = ensemble_scores(per_ckpt)
    except (OSError, ValueError) as err:
        raise StageError("zeroshot/score", str(err)) from err
    report = EvalReport.from_scores(
        scores, np.stack(labels), checkpoints=[Path(p).name for p in ckpts]
    )
    _write_report(report_path, report)
    _write_manifest(out_dir, "zeroshot", [report_path])
    return 0


def cmd_finetune(args) -> int:
    out_dir, report_path = _resolve_report_out(args.out, "report.json")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        corpus = load_corpus(args.corpus)
    except (OSError, ValueError) as err:
        raise StageError("finetune/corpus", str(err)) from err
    try:
        enc_cfg, _, params = _load_model(args.ckpt, corpus.vocab)
    except (OSError, ValueError) as err:
        raise StageError("finetune/checkpoint", str(err)) from err
    if args.eval_corpus:
        try:
            eval_records = load_corpus(args.eval_corpus).records
        except (OSError, ValueError) as err:
            raise StageError("finetune/eval-corpus", str(err)) from err
        train_records = corpus.records
    else:
        # Deterministic 80/20 split by index.
        cut = max(1, round(0.8 * len(corpus.records)))
        train_records = corpus.records[:cut]
        eval_records = corpus.records[cut:]
    try:
        report = linear_probe(
            train_records,
            eval_records,
            args.fraction,
            enc_cfg,
            params,
            seed=args.seed if args.seed is not None else 0,
            checkpoints=[Path(args.ckpt).name],
        )
    except ValueError as err:
        raise StageError("finetune/probe", str(err)) from err
    _write_report(report_path, report)
    _write_manifest(out_dir, "finetune", [report_path])
    return 0


def maskdump_records(corpus, enc_cfg, params, mask_cfg, n: int, seed: int) -> list:
    prompt_seq = prompt_sequence(corpus.vocab, corpus.n_classes)
    rng = RngStream(seed)
    records = []
    with ad.no_grad():
        e_prompt = encode_text(prompt_seq, enc_cfg, params)
        for i, rec in enumerate(corpus.records[:n]):
            e_img = encode_image(rec.image, enc_cfg, params)
            e_report = None
            if rec.paired:
                tokens = corpus.vocab.encode(rec.report, max_len=enc_cfg.max_text_len)
                e_report = encode_text(tokens, enc_cfg, params)
            final, per = strategy_masks(
                e_img, e_prompt, mask_cfg, rng.child("mask", i), e_report=e_report
            )
            row = {"sample_id": rec.id}
            if "report" in per:
                row["mask_report"] = list(per["report"].masked)
            row["mask_prompt"] = list(per["prompt"].masked)
            row["mask_self"] = list(per["self"].masked)
            row["mask_final"] = list(final.masked)
            records.append(row)
    return records


def load_maskdump_schema() -> dict:
    ref = importlib.resources.files("medvlp.data") / "maskdump.schema.json"
    return json.loads(ref.read_text(encoding="utf-8"))


def cmd_maskdump(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.n < 1:
        raise StageError("maskdump/args", f"n must be >= 1, got {args.n}")
    try:
        corpus = load_corpus(args.corpus)
        enc_cfg, _, params = _load_model(args.ckpt, corpus.vocab)
    except (OSError, ValueError) as err:
        raise StageError("maskdump/load", str(err)) from err
    mask_cfg = MaskConfig(args.lambda1, args.lambda2, 0.2)
    records = maskdump_records(
        corpus, enc_cfg, params, mask_cfg, args.n,
        args.seed if args.seed is not None else 0,
    )
    schema = load_maskdump_schema()
    for row in records:
        jsonschema.validate(row, schema)
    path = out_dir / "masks.json"
    path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    _write_manifest(out_dir, "maskdump", [path])
    return 0


def cmd_sweep(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.param not in ("lambda1", "lambda2", "lambda3"):
        raise StageError("sweep/args", f"unknown sweep parameter {args.param!r}")
    values = [float(v) for v in args.values.split(",") if v]
    if any(not (0.0 <= v <= 1.0) for v in values):
        raise StageError("sweep/args", "sweep values must lie in [0, 1]")
    try:
        base = json.loads(Path(args.config).read_text())
        corpus = load_corpus(args.corpus)
        eval_corpus = (
            load_corpus(args.eval_corpus) if args.eval_corpus else corpus
        )
    except (OSError, ValueError, TypeError) as err:
        raise StageError("sweep/load", str(err)) from err

    csv_path = out_dir / "sweep.csv"
    outputs = [csv_path]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["value", "auc", "f1"])
        for value in values:
            cfg_dict = json.loads(json.dumps(base))
            cfg_dict.setdefault("mask_config", {})[args.param] = value
            if args.seed is not None:
                cfg_dict["seed"] = args.seed
            try:
                cfg = TrainConfig.from_dict(cfg_dict)
                run_dir = out_dir / f"run_{args.param}_{value:g}"
                ckpt, log = run(cfg, corpus, run_dir)
                enc_cfg, _, params = _load_model(ckpt, eval_corpus.vocab)
                prompts = disease_prompts(eval_corpus.vocab, eval_corpus.n_classes)
                scores = zero_shot_scores(
                    [r.image for r in eval_corpus.records], prompts, params, enc_cfg
                )
                report = EvalReport.from_scores(
                    scores, np.stack([r.labels for r in eval_corpus.records])
                )
            except (ValueError, FloatingPointError, OSError) as err:
                raise StageError(
                    "sweep/run", f"{args.param}={value}: {err}"
                ) from err
            writer.writerow([repr(value), repr(report.macro_auc),
                             repr(report.macro_f1)])
            outputs.extend([ckpt, log])
    _write_manifest(out_dir, "sweep", outputs)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medvlp",
        description="Masked contrastive vision-language pretraining pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="CorpusSpec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run two-phase pretraining")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("zeroshot", help="zero-shot classification report")
    p.add_argument("--ckpt", required=True, help="checkpoint path(s), comma-separated")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="report path (*.json) or directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("finetune", help="linear probe on frozen features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--eval-corpus", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("maskdump", help="dump per-strategy masks as JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--lambda1", type=float, default=0.7)
    p.add_argument("--lambda2", type=float, default=0.75)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_maskdump)

    p = sub.add_parser("sweep", help="mask-ratio sweep: pretrain + zeroshot per value")
    p.add_argument("--param", required=True, choices=["lambda1", "lambda2", "lambda3"])
    p.add_argument("--values", required=True, help="comma-separated floats in [0, 1]")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-corpus", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as err:
        print(f"error [{err.stage}]: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # pragma: no cover - unexpected failures
        print(f"error [{args.command}]: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
