"""Synthetic planted-pathology corpus.

Each condition owns a fixed spatial region and shape; a sample plants the
patterns of its positive labels over a noisy background, and (for paired
samples) composes a report that names exactly the present conditions using
lexicon terms. Attention-guided masking can therefore be checked against
ground truth: informative patches are where the planted patterns live.

Storage: a corpus directory holds ``manifest.jsonl`` (one record per line),
``images/`` (raw little-endian float32 with an 8-byte H, W header),
``vocab.txt``, ``lexicon.tsv`` and ``spec.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import RngStream, sample_without_replacement
from .text_masking import EntityLexicon
from .tokenizer import EOS, TokenSeq, Vocabulary, concat_with_separator, tokenize_text

# The 14 chest conditions and devices driving prompts, labels and the lexicon.
CONDITIONS = (
    "fracture",
    "edema",
    "consolidation",
    "enlarged cardiomediastinum",
    "cardiomegaly",
    "lung lesion",
    "lung opacity",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural other",
    "support devices",
    "no finding",
)

PROMPT_TEMPLATE = "a chest x-ray with {}"

# Synonyms map alternative report wordings back to their condition. "no
# finding" is deliberately not a lexicon entry: it marks absence, not an
# entity, and reports for all-negative samples must stay entity-free.
SYNONYMS: dict[str, tuple[str, ...]] = {
    "fracture": ("rib fracture",),
    "edema": ("pulmonary edema",),
    "consolidation": ("airspace consolidation",),
    "enlarged cardiomediastinum": ("widened mediastinum",),
    "cardiomegaly": ("enlarged heart",),
    "lung lesion": ("pulmonary nodule",),
    "lung opacity": ("hazy opacity",),
    "pneumonia": ("infectious process",),
    "atelectasis": ("lobar collapse",),
    "pneumothorax": ("collapsed lung",),
    "pleural effusion": ("effusion",),
    "pleural other": ("pleural thickening",),
    "support devices": ("pacemaker", "central line"),
}

REPORT_TEMPLATES = (
    "there is {} in the lung field",
    "findings are consistent with {}",
    "{} is seen on the current study",
    "mild {} noted",
)

NO_FINDING_TEXT = "no finding the lungs are clear"


def default_lexicon() -> EntityLexicon:
    pairs = []
    for cond in CONDITIONS:
        if cond == "no finding":
            continue
        pairs.append((cond, cond))
        for syn in SYNONYMS.get(cond, ()):
            pairs.append((syn, cond))
    return EntityLexicon.from_pairs(pairs)


def build_vocabulary() -> Vocabulary:
    """Every word the generator, prompts or templates can emit."""
    words: list[str] = []
    for cond in CONDITIONS:
        words.extend(tokenize_text(cond))
        for syn in SYNONYMS.get(cond, ()):
            words.extend(tokenize_text(syn))
        words.extend(tokenize_text(PROMPT_TEMPLATE.format(cond)))
    for tpl in REPORT_TEMPLATES:
        words.extend(tokenize_text(tpl.format("")))
    words.extend(tokenize_text(NO_FINDING_TEXT))
    return Vocabulary.build(words)


@dataclass
class CorpusSpec:
    """Generator knobs; the corpus is a pure function of this plus nothing.

    Labels are independent Bernoulli draws at ``prevalence`` unless
    ``exact_positives`` is set, in which case exactly that many distinct
    conditions are planted per sample. The fixed-count mode removes
    condition count (and with it overall brightness and report length) as a
    learnable shortcut, so image-text alignment has to discriminate which
    conditions are present rather than how many.
    """

    n_paired: int
    n_unpaired: int = 0
    image_size: int = 32
    n_classes: int = 8
    prevalence: float = 0.3
    exact_positives: int | None = None
    background: float = 0.25
    signal_amplitude: float = 0.45
    noise_std: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.n_paired < 0 or self.n_unpaired < 0:
            raise ValueError("sample counts must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not (1 <= self.n_classes <= len(CONDITIONS)):
            raise ValueError(f"n_classes must be in [1, {len(CONDITIONS)}]")
        if self.exact_positives is not None and not (
            0 <= self.exact_positives <= self.n_classes
        ):
            raise ValueError("exact_positives must be in [0, n_classes]")


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray
    labels: np.ndarray
    paired: bool
    report: str | None = None

    def __post_init__(self):
        if self.paired != (self.report is not None):
            raise ValueError("SampleRecord: paired flag must match report presence")


# ---------------------------------------------------------------------------
# Image synthesis
# ---------------------------------------------------------------------------

# Region centers in unit coordinates, one per condition slot; shapes cycle.
_CENTERS = (
    (0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75),
    (0.25, 0.50), (0.75, 0.50), (0.50, 0.25), (0.50, 0.75),
    (0.50, 0.50), (0.125, 0.50), (0.875, 0.50), (0.50, 0.125),
    (0.50, 0.875), (0.125, 0.125),
)
_SHAPES = ("disk", "square", "hbar", "vbar")


def class_region(k: int, image_size: int) -> np.ndarray:
    """Boolean mask of the pixels owned by class ``k``."""
    cy, cx = _CENTERS[k]
    cy, cx = cy * image_size, cx * image_size
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    yy = yy + 0.5
    xx = xx + 0.5
    r = image_size * 0.14
    shape = _SHAPES[k % len(_SHAPES)]
    if shape == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if shape == "hbar":
        return (np.abs(yy - cy) <= r / 2) & (np.abs(xx - cx) <= 2 * r)
    return (np.abs(yy - cy) <= 2 * r) & (np.abs(xx - cx) <= r / 2)


def _compose_report(labels: np.ndarray, rng: RngStream) -> str:
    sentences = []
    for k in np.flatnonzero(labels):
        cond = CONDITIONS[k]
        terms = (cond,) + SYNONYMS.get(cond, ())
        term = terms[rng.integers(0, len(terms))]
        tpl = REPORT_TEMPLATES[rng.integers(0, len(REPORT_TEMPLATES))]
        sentences.append(tpl.format(term))
    if not sentences:
        return NO_FINDING_TEXT
    # shuffled so sentence position carries no condition information
    return " ".join(rng.child("order").shuffled(sentences))


def gen_sample(
    spec: CorpusSpec,
    rng: RngStream,
    force_paired: bool | None = None,
    index: int = 0,
) -> SampleRecord:
    """One deterministic sample; separate sub-streams per aspect so label,
    noise and report draws never interfere."""
    paired = True if force_paired is None else bool(force_paired)
    label_rng = rng.child("labels")
    if spec.exact_positives is None:
        labels = (
            label_rng.uniform(size=spec.n_classes) < spec.prevalence
        ).astype(np.int8)
    else:
        labels = np.zeros(spec.n_classes, dtype=np.int8)
        chosen = sample_without_replacement(
            label_rng, range(spec.n_classes), spec.exact_positives
        )
        labels[chosen] = 1

    img = np.full((spec.image_size, spec.image_size), spec.background)
    img = img + spec.noise_std * rng.child("noise").normal(
        size=(spec.image_size, spec.image_size)
    )
    for k in np.flatnonzero(labels):
        img = img + spec.signal_amplitude * class_region(int(k), spec.image_size)
    img = np.clip(img, 0.0, 1.0)
    # Quantize to float32 so on-disk round trips are bit-exact.
    img = img.astype(np.float32).astype(np.float64)

    report = _compose_report(labels, rng.child("report")) if paired else None
    return SampleRecord(
        id=f"s{index:06d}", image=img, labels=labels, paired=paired, report=report
    )


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise IOError(f"image file {path} is truncated (no header)")
    h, w = struct.unpack("<II", blob[:8])
    expected = 8 + 4 * h * w
    if len(blob) != expected:
        raise IOError(
            f"image file {path} is truncated: expected {expected} bytes, "
            f"got {len(blob)}"
        )
    return (
        np.frombuffer(blob[8:], dtype="<f4").reshape(h, w).astype(np.float64)
    )


def write_corpus(spec: CorpusSpec, out_dir) -> Path:
    """Generate and store a corpus; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    root = RngStream(spec.seed)

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i in range(spec.n_paired + spec.n_unpaired):
            rec = gen_sample(
                spec, root.child("sample", i), force_paired=i < spec.n_paired, index=i
            )
            image_file = f"images/{rec.id}.bin"
            write_image(out_dir / image_file, rec.image)
            row = {
                "id": rec.id,
                "image_file": image_file,
                "labels": rec.labels.tolist(),
                "paired": rec.paired,
            }
            if rec.paired:
                row["report"] = rec.report
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    build_vocabulary().save(out_dir / "vocab.txt")
    default_lexicon().save(out_dir / "lexicon.tsv")
    (out_dir / "spec.json").write_text(
        json.dumps(asdict(spec), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


@dataclass
class Corpus:
    records: list[SampleRecord]
    vocab: Vocabulary
    lexicon: EntityLexicon
    spec: dict = field(default_factory=dict)

    @property
    def paired(self) -> list[SampleRecord]:
        return [r for r in self.records if r.paired]

    @property
    def unpaired(self) -> list[SampleRecord]:
        return [r for r in self.records if not r.paired]

    @property
    def n_classes(self) -> int:
        return len(self.records[0].labels) if self.records else 0


def iter_manifest(manifest_path):
    """Yield SampleRecords from a manifest, validating as it goes."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rec_id = row["id"]
                image_file = row["image_file"]
                labels = np.asarray(row["labels"], dtype=np.int8)
                paired = bool(row["paired"])
                report = row.get("report")
            except (KeyError, ValueError, TypeError) as err:
                raise ValueError(
                    f"{manifest_path}:{lineno}: malformed manifest line: {err}"
                ) from err
            image_path = base / image_file
            if not image_path.exists():
                raise IOError(
                    f"{manifest_path}:{lineno}: missing image file {image_path}"
                )
            yield SampleRecord(
                id=rec_id,
                image=read_image(image_path),
                labels=labels,
                paired=paired,
                report=report,
            )


def load_corpus(path) -> Corpus:
    """Load a corpus directory (or its manifest path) back into memory."""
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    base = manifest.parent
    records = list(iter_manifest(manifest))
    vocab = Vocabulary.load(base / "vocab.txt")
    lexicon = EntityLexicon.load(base / "lexicon.tsv")
    spec_file = base / "spec.json"
    spec = json.loads(spec_file.read_text()) if spec_file.exists() else {}
    return Corpus(records=records, vocab=vocab, lexicon=lexicon, spec=spec)


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


def disease_prompts(vocab: Vocabulary, n_conditions: int | None = None) -> list[TokenSeq]:
    """One tokenized prompt per condition, in the fixed CONDITIONS order."""
    conds = CONDITIONS if n_conditions is None else CONDITIONS[:n_conditions]
    return [vocab.encode(PROMPT_TEMPLATE.format(c)) for c in conds]


def prompt_sequence(vocab: Vocabulary, n_conditions: int | None = None) -> TokenSeq:
    """All prompts concatenated with separators; drives prompt attention."""
    return concat_with_separator(disease_prompts(vocab, n_conditions), sep_id=EOS)
