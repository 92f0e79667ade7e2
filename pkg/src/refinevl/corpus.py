"""Image/report ingestion, sentence splitting, word vocabulary and the
synthetic glyph corpus used for desk-scale runs."""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[MASK]")

# a run like "..." is an ellipsis, not a boundary
_TERMINATOR = re.compile(r"(?<![.!?])[.!?](?=\s|$)")
_WORD = re.compile(r"[a-z0-9]+")
_HAS_LETTER = re.compile(r"[A-Za-z]")


class CorpusError(ValueError):
    pass


@dataclass
class CorpusSample:
    sample_id: str
    image: np.ndarray
    report: str
    labels: dict[str, bool] | None = None
    # disease -> (x0, y0, x1, y1); only filled by the synthetic generator
    boxes: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)

    def validate(self, patch_size: int) -> None:
        if self.image.ndim != 2 or min(self.image.shape) == 0:
            raise CorpusError(f"{self.sample_id}: image must be a non-empty 2-D array")
        h, w = self.image.shape
        if h % patch_size or w % patch_size:
            raise CorpusError(
                f"{self.sample_id}: image {h}x{w} not divisible by patch size {patch_size}")
        if not self.report.strip():
            raise CorpusError(f"{self.sample_id}: empty report")


@dataclass
class SentenceSplit:
    sentences: list[str]
    token_ids: list[int]
    sentence_boundaries: list[tuple[int, int]]


def split_sentences(report: str) -> list[str]:
    """Split on a single '.', '!' or '?' followed by whitespace or end of text.

    Fragments without any letter are dropped.
    """
    if not report or not report.strip():
        raise CorpusError("empty report")
    out = []
    start = 0
    for m in _TERMINATOR.finditer(report):
        out.append(report[start:m.end()])
        start = m.end()
    out.append(report[start:])
    sentences = [s.strip() for s in out if _HAS_LETTER.search(s)]
    if not sentences:
        raise CorpusError(f"degenerate report, no sentence contains a letter: {report!r}")
    return sentences


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Immutable word -> id map with the four reserved ids up front."""

    def __init__(self, word_to_id: dict[str, int]):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if word_to_id.get(tok) != i:
                raise CorpusError(f"vocabulary must reserve {tok} at id {i}")
        ids = sorted(word_to_id.values())
        if ids != list(range(len(ids))):
            raise CorpusError("vocabulary ids must be contiguous from 0")
        self._w2i = dict(sorted(word_to_id.items(), key=lambda kv: kv[1]))
        self._i2w = list(self._w2i)

    def __len__(self) -> int:
        return len(self._w2i)

    def __contains__(self, word: str) -> bool:
        return word in self._w2i

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._w2i == other._w2i

    def __getitem__(self, word: str) -> int:
        return self._w2i.get(word, UNK)

    def word(self, idx: int) -> str:
        return self._i2w[idx]

    def mapping(self) -> dict[str, int]:
        return dict(self._w2i)

    def to_text(self) -> str:
        return "".join(f"{w}\t{i}\n" for w, i in self._w2i.items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> Vocabulary:
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            try:
                word, idx = line.split("\t")
                mapping[word] = int(idx)
            except ValueError:
                raise CorpusError(f"bad vocabulary line {lineno}: {line!r}") from None
        return cls(mapping)

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Sequence[CorpusSample | str], min_count: int = 1,
                extra_texts: Iterable[str] = ()) -> Vocabulary:
    """Build the vocabulary from report texts.

    Words with ``count >= min_count`` get ids in lexicographic order after
    the reserved ones. ``extra_texts`` (e.g. dictionary sentences) are
    added unconditionally.
    """
    if not corpus:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for item in corpus:
        text = item if isinstance(item, str) else item.report
        for w in words(text):
            counts[w] = counts.get(w, 0) + 1
    kept = {w for w, c in counts.items() if c >= min_count}
    for text in extra_texts:
        kept.update(words(text))
    mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for w in sorted(kept):
        mapping[w] = len(mapping)
    return Vocabulary(mapping)


def tokenize(sentences: Sequence[str], vocab: Vocabulary) -> SentenceSplit:
    token_ids: list[int] = []
    bounds = []
    for s in sentences:
        ids = [vocab[w] for w in words(s)] or [UNK]
        bounds.append((len(token_ids), len(token_ids) + len(ids)))
        token_ids.extend(ids)
    return SentenceSplit(list(sentences), token_ids, bounds)


# ---------------------------------------------------------------------------
# synthetic corpus


GLYPHS = ("cross", "ring", "bar", "square", "triangle", "diamond", "xmark", "dot")

DISTRACTORS = (
    "The osseous structures are unremarkable.",
    "Heart size is within normal limits.",
    "The mediastinal contours are stable.",
    "Lines and tubes are unchanged in position.",
    "Comparison is made to the prior study.",
    "The patient is rotated on this view.",
    "Degenerative changes of the spine are noted.",
    "The trachea is midline.",
    "Surgical clips project over the upper abdomen.",
    "Exam was performed in the upright position.",
)
FILLER = "The lungs are clear."


def positive_template(disease: str) -> str:
    return f"There is {disease}."


def negative_template(disease: str) -> str:
    return f"No {disease}."


@dataclass
class SyntheticSpec:
    diseases: list[str]
    glyph_map: dict[str, str]
    n_samples: int
    distractor_rate: float
    prevalence: dict[str, float]
    seed: int = 0
    negative_rate: float = 0.5
    image_size: int = 64
    patch_size: int = 8
    glyph_size: int = 16
    noise: float = 0.15
    max_distractors: int = 3
    # random locations snapped to the patch grid
    align_to_patches: bool = True

    def validate(self) -> None:
        if self.n_samples <= 0:
            raise CorpusError("n_samples must be positive")
        if len(set(self.diseases)) != len(self.diseases) or not self.diseases:
            raise CorpusError("diseases must be a non-empty list of unique names")
        for d in self.diseases:
            if d not in self.glyph_map:
                raise CorpusError(f"glyph_map has no renderer for {d!r}")
            if self.glyph_map[d] not in GLYPHS:
                raise CorpusError(f"unknown glyph {self.glyph_map[d]!r} for {d!r}")
            p = self.prevalence.get(d)
            if p is None or not 0.0 <= p <= 1.0:
                raise CorpusError(f"prevalence for {d!r} must be in [0, 1]")
        for name in ("distractor_rate", "negative_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise CorpusError(f"{name} must be in [0, 1]")
        if self.image_size % self.patch_size:
            raise CorpusError("image_size must be divisible by patch_size")
        if not 0 < self.glyph_size <= self.image_size:
            raise CorpusError("glyph_size out of range")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CorpusError(f"unknown synthetic spec fields: {sorted(unknown)}")
        try:
            spec = cls(**d)
        except TypeError as e:
            raise CorpusError(str(e)) from None
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


REFERENCE_DISEASES = ("pneumothorax", "cardiomegaly", "pleural effusion")


def reference_spec(n_samples: int = 500, seed: int = 0,
                   distractor_rate: float = 0.3) -> SyntheticSpec:
    """The pinned three-disease glyph corpus used by the acceptance runs."""
    diseases = list(REFERENCE_DISEASES)
    return SyntheticSpec(
        diseases=diseases,
        glyph_map=dict(zip(diseases, ("cross", "square", "triangle"))),
        n_samples=n_samples,
        distractor_rate=distractor_rate,
        prevalence={d: 0.5 for d in diseases},
        seed=seed,
    )


def render_glyph(kind: str, size: int) -> np.ndarray:
    g = np.zeros((size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    t = max(1, size // 5)
    if kind == "cross":
        g[:, int(c - t / 2 + 0.5):int(c - t / 2 + 0.5) + t] = 1
        g[int(c - t / 2 + 0.5):int(c - t / 2 + 0.5) + t, :] = 1
    elif kind == "ring":
        r = np.hypot(yy - c, xx - c)
        g[(r <= c) & (r >= c - t)] = 1
    elif kind == "bar":
        g[:, :] = 0
        g[int(c) - t // 2:int(c) - t // 2 + t, :] = 1
    elif kind == "square":
        g[:t, :] = g[-t:, :] = g[:, :t] = g[:, -t:] = 1
    elif kind == "triangle":
        g[(xx >= (size - 1 - yy) / 2) & (xx <= (size - 1 + yy) / 2)] = 1
    elif kind == "diamond":
        g[np.abs(yy - c) + np.abs(xx - c) <= c] = 1
    elif kind == "xmark":
        g[(np.abs(yy - xx) < t) | (np.abs(yy + xx - (size - 1)) < t)] = 1
    elif kind == "dot":
        g[np.hypot(yy - c, xx - c) <= c * 0.6] = 1
    else:
        raise CorpusError(f"unknown glyph {kind!r}")
    return g


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def gen_synthetic(spec: SyntheticSpec, max_retries: int = 200) -> list[CorpusSample]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size, gs = spec.image_size, spec.glyph_size
    glyphs = {d: render_glyph(spec.glyph_map[d], gs) for d in spec.diseases}
    samples = []
    for idx in range(spec.n_samples):
        present = [d for d in spec.diseases if rng.random() < spec.prevalence[d]]
        image = (rng.random((size, size)) * spec.noise).astype(np.float32)
        boxes: dict[str, tuple[int, int, int, int]] = {}
        for d in present:
            step = spec.patch_size if spec.align_to_patches else 1
            for _ in range(max_retries):
                x0 = step * int(rng.integers(0, (size - gs) // step + 1))
                y0 = step * int(rng.integers(0, (size - gs) // step + 1))
                box = (x0, y0, x0 + gs, y0 + gs)
                if not any(_overlaps(box, b) for b in boxes.values()):
                    break
            else:
                raise CorpusError(
                    f"sample {idx}: could not place glyph for {d!r} after {max_retries} tries")
            boxes[d] = box
            patch = image[box[1]:box[3], box[0]:box[2]]
            np.maximum(patch, glyphs[d] * np.float32(0.9), out=patch)
        sentences = [positive_template(d) for d in present]
        for d in spec.diseases:
            if d not in present and rng.random() < spec.negative_rate:
                sentences.append(negative_template(d))
        for _ in range(spec.max_distractors):
            if rng.random() < spec.distractor_rate:
                sentences.append(DISTRACTORS[int(rng.integers(len(DISTRACTORS)))])
        if not sentences:
            sentences.append(FILLER)
        order = rng.permutation(len(sentences))
        report = " ".join(sentences[i] for i in order)
        samples.append(CorpusSample(
            sample_id=f"s{spec.seed}-{idx:05d}",
            image=np.clip(image, 0.0, 1.0),
            report=report,
            labels={d: d in present for d in spec.diseases},
            boxes=boxes,
        ))
    return samples


# ---------------------------------------------------------------------------
# on-disk format


def write_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CorpusError(f"{path}: truncated image header")
    h, w = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * h * w:
        raise CorpusError(f"{path}: expected {h}x{w} floats, got {len(raw) - 8} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)


def grounding_records(samples: Iterable[CorpusSample]) -> list[dict]:
    return [
        {"sample_id": s.sample_id, "phrase": positive_template(d), "bbox": list(box)}
        for s in samples for d, box in s.boxes.items()
    ]


def save_corpus(samples: Sequence[CorpusSample], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/{s.sample_id}.f32"
        write_image(out / rel, s.image)
        lines.append(json.dumps({"sample_id": s.sample_id, "report": s.report,
                                 "labels": s.labels, "image_path": rel}))
    written = [out / "samples.jsonl"]
    written[0].write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    ground = grounding_records(samples)
    if ground:
        p = out / "grounding.jsonl"
        p.write_text("".join(json.dumps(r) + "\n" for r in ground), encoding="utf-8")
        written.append(p)
    return written


def load_corpus(corpus_dir: str | Path) -> list[CorpusSample]:
    root = Path(corpus_dir)
    index = root / "samples.jsonl"
    if not index.exists():
        raise FileNotFoundError(f"missing {index}")
    samples = []
    for line in index.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        samples.append(CorpusSample(
            sample_id=rec["sample_id"],
            image=read_image(root / rec["image_path"]),
            report=rec["report"],
            labels=rec.get("labels"),
        ))
    ground = root / "grounding.jsonl"
    if ground.exists():
        by_id = {s.sample_id: s for s in samples}
        for line in ground.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                s = by_id.get(rec["sample_id"])
                if s is not None and rec["phrase"].startswith("There is "):
                    s.boxes[rec["phrase"][len("There is "):-1]] = tuple(rec["bbox"])
    return samples
