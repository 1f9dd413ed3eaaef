"""Two-phase pretraining over mixed paired/unpaired batches.

The warm-up phase optimizes the masked-modeling objectives only; the joint
phase adds contrastive alignment. Every random decision is drawn from a
sub-stream keyed by (purpose, step, sample index), so traces are
bit-reproducible and runs can resume from a checkpoint mid-stream.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, sgd_step
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import Corpus, SampleRecord, prompt_sequence
from .encoders import (
    EncoderConfig,
    encode_image,
    encode_text,
    init_encoder_params,
    patchify,
    pool_global,
)
from .image_masking import (
    MaskConfig,
    apply_image_mask,
    random_mask,
    round_half_up,
    strategy_masks,
)
from .objectives import (
    DecoderConfig,
    LossBundle,
    decode_image,
    decode_text,
    init_decoder_params,
    loss_align,
    loss_mim,
    loss_mlm,
    standardize_patches,
)
from .rng import RngStream
from .text_masking import (
    apply_text_mask,
    causal_mask,
    combine_masks,
    entity_mask,
    recognize_entities,
)

PHASES = ("warmup", "joint")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    momentum: float = 0.9
    batch_size: int = 8
    warmup_iters: int = 300
    total_iters: int = 1500
    seed: int = 0
    unpaired_fraction: float = 0.25
    mask_config: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    use_mim: bool = True
    use_mlm: bool = True
    warmup_mlm: bool = True
    mim_masking: str = "attention"
    mlm_scope: str = "entity"
    temperature: float = 0.07
    learnable_temperature: bool = False
    normalize_mim_targets: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters must be <= total_iters")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 <= self.unpaired_fraction <= 1.0):
            raise ValueError("unpaired_fraction must be in [0, 1]")
        if self.mim_masking not in ("attention", "random"):
            raise ValueError(f"unknown mim_masking {self.mim_masking!r}")
        if self.mlm_scope not in ("entity", "full"):
            raise ValueError(f"unknown mlm_scope {self.mlm_scope!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        for key, sub in (
            ("mask_config", MaskConfig),
            ("encoder", EncoderConfig),
            ("decoder", DecoderConfig),
        ):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(asdict(self), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


class TrainState:
    """Parameters, optimizer velocity and the fixed per-run context."""

    def __init__(self, cfg: TrainConfig, corpus: Corpus):
        self.cfg = cfg
        self.corpus = corpus
        self.vocab = corpus.vocab
        self.lexicon = corpus.lexicon
        self.enc_cfg = EncoderConfig(
            image_size=cfg.encoder.image_size,
            patch_size=cfg.encoder.patch_size,
            embed_dim=cfg.encoder.embed_dim,
            n_layers=cfg.encoder.n_layers,
            n_heads=cfg.encoder.n_heads,
            vocab_size=len(corpus.vocab),
            max_text_len=cfg.encoder.max_text_len,
        )
        init_rng = RngStream(cfg.seed).child("init")
        self.params: dict[str, Tensor] = init_encoder_params(self.enc_cfg, init_rng)
        self.params.update(init_decoder_params(self.enc_cfg, cfg.decoder, init_rng))
        if cfg.learnable_temperature:
            self.params["temp.log_sigma"] = Tensor(
                math.log(cfg.temperature), requires_grad=True
            )
        self.velocity = {
            k: Tensor(np.zeros_like(p.data)) for k, p in self.params.items()
        }
        self.step = 0
        self.prompt_seq = prompt_sequence(self.vocab, corpus.n_classes)
        self._root = RngStream(cfg.seed)

    def sigma(self):
        if self.cfg.learnable_temperature:
            return ad.exp(self.params["temp.log_sigma"])
        return self.cfg.temperature

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> list[np.ndarray]:
        return [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params.values()
        ]


def build_batch(
    corpus: Corpus, batch_size: int, unpaired_fraction: float, rng: RngStream
) -> list[SampleRecord]:
    """Deterministic batch with round(fraction * B) unpaired samples."""
    if not corpus.records:
        raise ValueError("build_batch: empty corpus")
    n_unpaired = round_half_up(unpaired_fraction * batch_size)
    n_paired = batch_size - n_unpaired
    pools = ((corpus.paired, n_paired), (corpus.unpaired, n_unpaired))
    batch: list[SampleRecord] = []
    for label, (pool, need) in zip(("paired", "unpaired"), pools):
        if need == 0:
            continue
        if len(pool) < need:
            raise ValueError(
                f"build_batch: need {need} {label} samples, corpus has {len(pool)}"
            )
        picks = rng.child(label).uniform(size=len(pool)).argsort(kind="stable")[:need]
        batch.extend(pool[int(i)] for i in picks)
    return batch


def _mim_loss_for_sample(
    state: TrainState, record: SampleRecord, e_img: Tensor, e_prompt, e_report, rng
):
    cfg = state.cfg
    n = state.enc_cfg.n_patches
    if cfg.mim_masking == "random":
        mask = random_mask(n, cfg.mask_config.lambda2, rng)
        per = {}
    else:
        mask, per = strategy_masks(
            e_img, e_prompt, cfg.mask_config, rng, e_report=e_report
        )
    mim_input = apply_image_mask(
        e_img, mask, state.params["imgdec.mask_emb"], state.params["imgdec.pos"]
    )
    y = decode_image(mim_input, state.enc_cfg, cfg.decoder, state.params)
    target = patchify(record.image, state.enc_cfg.patch_size)
    if cfg.normalize_mim_targets:
        target = standardize_patches(target)
    return loss_mim(y, target, mask), mask, per


def _mlm_loss_for_sample(
    state: TrainState, tokens, e_img: Tensor, e_report: Tensor, rng
):
    cfg = state.cfg
    n = len(tokens)
    if cfg.mlm_scope == "full":
        from .image_masking import TokenMask

        ent = TokenMask(n, (), "entity")
        positions = [int(i) for i in np.flatnonzero(tokens.valid)]
    else:
        entities = recognize_entities(tokens, state.lexicon)
        ent = entity_mask(entities, n, cfg.mask_config.lambda3, rng)
        positions = list(ent.masked)
    if not positions:
        return None
    attn = combine_masks(causal_mask(n), ent)
    mlm_input = apply_text_mask(
        e_report, ent, state.params["txtdec.mask_emb"], state.params["txtdec.pos"]
    )
    logits = decode_text(
        mlm_input, attn, e_img, state.enc_cfg, cfg.decoder, state.params
    )
    return loss_mlm(logits, tokens, positions)


def batch_losses(
    state: TrainState, batch: list[SampleRecord], phase: str, step: int
) -> LossBundle:
    """Build the differentiable batch objective without touching parameters.

    The returned bundle's ``total`` carries the graph; callers decide whether
    to backpropagate.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    cfg = state.cfg

    with ad.no_grad():
        e_prompt = encode_text(state.prompt_seq, state.enc_cfg, state.params)

    mlm_active = cfg.use_mlm and (phase == "joint" or cfg.warmup_mlm)
    align_active = phase == "joint"

    mims, mlms = [], []
    paired_parts: list[list[Tensor]] = []
    unpaired_parts: list[list[Tensor]] = []
    img_pooled, rep_pooled = [], []

    for i, record in enumerate(batch):
        e_img = encode_image(record.image, state.enc_cfg, state.params)
        tokens = e_report = None
        if record.paired:
            tokens = state.vocab.encode(
                record.report, max_len=state.enc_cfg.max_text_len
            )
            e_report = encode_text(tokens, state.enc_cfg, state.params)

        parts: list[Tensor] = []
        if cfg.use_mim:
            l_mim, _, _ = _mim_loss_for_sample(
                state, record, e_img, e_prompt, e_report,
                state._root.child("mask", step, i),
            )
            parts.append(l_mim)
            mims.append(l_mim)
        if record.paired and mlm_active:
            l_mlm = _mlm_loss_for_sample(
                state, tokens, e_img, e_report, state._root.child("entmask", step, i)
            )
            if l_mlm is not None:
                parts.append(l_mlm)
                mlms.append(l_mlm)
        if record.paired and align_active:
            img_pooled.append(pool_global(e_img))
            rep_pooled.append(pool_global(e_report, tokens.valid))
        (paired_parts if record.paired else unpaired_parts).append(parts)

    align = None
    if align_active and img_pooled:
        align = loss_align(
            ad.stack_rows(img_pooled), ad.stack_rows(rep_pooled), state.sigma()
        )

    def group_total(groups: list[list[Tensor]], extra: Tensor | None) -> Tensor | None:
        totals = []
        for parts in groups:
            if extra is not None:
                parts = parts + [extra]
            if not parts:
                continue
            acc = parts[0]
            for t in parts[1:]:
                acc = ad.add(acc, t)
            totals.append(acc)
        if not totals:
            return None
        acc = totals[0]
        for t in totals[1:]:
            acc = ad.add(acc, t)
        return ad.mul(acc, 1.0 / len(totals))

    pair_total = group_total(paired_parts, align)
    unpair_total = group_total(unpaired_parts, None)
    if pair_total is not None and unpair_total is not None:
        total = ad.add(pair_total, unpair_total)
    else:
        total = pair_total if pair_total is not None else unpair_total
    if total is None:
        raise ValueError("batch_losses: no active objective for this batch/phase")
    ad.assert_finite(total, "training loss")

    def mean_of(group: list[Tensor]) -> Tensor | None:
        if not group:
            return None
        return Tensor(float(np.mean([float(t.data) for t in group])))

    return LossBundle(
        mim=mean_of(mims),
        align=align,
        mlm=mean_of(mlms),
        total=total,
        paired=bool(paired_parts),
    )


def train_step(
    state: TrainState, batch: list[SampleRecord], phase: str
) -> LossBundle:
    """One optimization step; returns the logged batch losses."""
    state.zero_grads()
    bundle = batch_losses(state, batch, phase, state.step + 1)
    bundle.total.backward()
    sgd_step(
        list(state.params.values()),
        state.grads(),
        state.cfg.lr,
        state.cfg.momentum,
        list(state.velocity.values()),
    )
    state.step += 1
    return bundle


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------


def save_state(path, state: TrainState) -> None:
    entries: dict[str, Tensor] = dict(state.params)
    for name, v in state.velocity.items():
        entries[f"opt.v.{name}"] = v
    entries["meta.step"] = Tensor(float(state.step))
    entries["meta.n_heads"] = Tensor(float(state.enc_cfg.n_heads))
    save_checkpoint(path, entries)


def load_params(path) -> tuple[EncoderConfig, DecoderConfig, dict, dict, int]:
    """Rebuild configs and parameters from a self-describing checkpoint."""
    entries = load_checkpoint(path)
    params, velocity, meta = {}, {}, {}
    for name, t in entries.items():
        if name.startswith("opt.v."):
            velocity[name[len("opt.v.") :]] = t
        elif name.startswith("meta."):
            meta[name] = float(t.data)
        else:
            t.requires_grad = True
            params[name] = t

    def count_layers(group: str) -> int:
        pattern = re.compile(rf"^{group}\.l(\d+)\.")
        return len({m.group(1) for k in params if (m := pattern.match(k))})

    patch_dim, c = params["img.patch_w"].shape
    patch = int(round(math.sqrt(patch_dim)))
    n_patches = params["img.pos"].shape[0]
    image_size = patch * int(round(math.sqrt(n_patches)))
    enc_cfg = EncoderConfig(
        image_size=image_size,
        patch_size=patch,
        embed_dim=c,
        n_layers=count_layers("img"),
        n_heads=int(meta.get("meta.n_heads", 4)),
        vocab_size=params["txt.embed"].shape[0],
        max_text_len=params["txt.pos"].shape[0],
    )
    dec_cfg = DecoderConfig(
        image_decoder_layers=count_layers("imgdec"),
        text_decoder_layers=count_layers("txtdec"),
    )
    step = int(meta.get("meta.step", 0))
    return enc_cfg, dec_cfg, params, velocity, step


def _format_loss(value: Tensor | None) -> str:
    return "" if value is None else repr(float(value.data))


def fit_state(
    cfg: TrainConfig,
    corpus: Corpus,
    state: TrainState | None = None,
    on_step=None,
) -> TrainState:
    """Run the training loop in memory (no file output).

    A warm-up step with nothing to optimize would be undefined, so when both
    masked objectives are disabled every iteration runs the joint phase.
    """
    if state is None:
        state = TrainState(cfg, corpus)
    warmup_iters = cfg.warmup_iters if (cfg.use_mim or cfg.use_mlm) else 0
    while state.step < cfg.total_iters:
        step = state.step + 1
        phase = "warmup" if step <= warmup_iters else "joint"
        batch = build_batch(
            corpus,
            cfg.batch_size,
            cfg.unpaired_fraction,
            state._root.child("batch", step),
        )
        bundle = train_step(state, batch, phase)
        if on_step is not None:
            on_step(step, phase, bundle)
    return state


def run(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir,
    resume_from=None,
) -> tuple[Path, Path]:
    """Warm-up then joint training; writes checkpoints and a step-level CSV.

    Returns (final checkpoint path, metrics CSV path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = TrainState(cfg, corpus)
    if resume_from is not None:
        _, _, params, velocity, step = load_params(resume_from)
        if set(params) != set(state.params):
            raise ValueError("resume checkpoint does not match the configuration")
        for k in state.params:
            state.params[k].data = params[k].data
            state.velocity[k].data = velocity[k].data
        state.step = step

    csv_path = out_dir / "train_log.csv"
    mode = "a" if resume_from is not None and csv_path.exists() else "w"
    ckpt_path = out_dir / "final.ckpt"
    with open(csv_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write("step,phase,loss_align,loss_mim,loss_mlm,loss_total,lr\n")

        def on_step(step: int, phase: str, bundle: LossBundle) -> None:
            log.write(
                f"{step},{phase},{_format_loss(bundle.align)},"
                f"{_format_loss(bundle.mim)},{_format_loss(bundle.mlm)},"
                f"{_format_loss(bundle.total)},{repr(cfg.lr)}\n"
            )
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_state(out_dir / f"step{step:06d}.ckpt", state)

        fit_state(cfg, corpus, state=state, on_step=on_step)
    save_state(ckpt_path, state)
    return ckpt_path, csv_path
