"""Dictionary-driven report refinement scored by the iteration-1 model.

Each report sentence is matched against the dictionary keywords. A matched
sentence competes with the positive/negative sentence sets of the matched
diseases. Groups are ranked by mean similarity to the image, and the ITM
head gates which group (if any) supplements the original sentence. Finally
the highest-scoring negative templates of undetected diseases are appended.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .corpus import split_sentences
from .dictionary import ClinicalDictionary, keyword_index
from .encoders import ModelState, TextBatch, sentence_ids
from .objectives import local_alignment

POLICIES = ("manual_template", "top_similarity")


class Scorer(Protocol):
    def similarity(self, image: np.ndarray, sentences: Sequence[str]) -> np.ndarray: ...

    def match_probability(self, image: np.ndarray, sentences: Sequence[str]) -> np.ndarray: ...


class ModelScorer:
    """Similarity and ITM match probability from a frozen model state."""

    def __init__(self, state: ModelState):
        state.check_ready()
        state.model.eval()
        self.state = state
        self._cache_key = None
        self._cache_val = None

    def _image_local(self, image) -> torch.Tensor:
        image = np.ascontiguousarray(image, dtype=np.float32)
        key = (image.shape, hash(image.tobytes()))
        if key != self._cache_key:
            img = torch.as_tensor(image, dtype=self.state.model.dtype)[None]
            self.state.model.eval()
            with torch.no_grad():
                self._cache_val = self.state.model.encode_images(img)[0][0]
            self._cache_key = key
        return self._cache_val

    def similarity(self, image, sentences):
        if not sentences:
            return np.zeros(0)
        img = self._image_local(image)
        if not self.state.cfg.align_class_row:
            img = img[1:]
        batch = TextBatch([self.state.split_text([s]) for s in sentences])
        tau2, tau3 = self.state.cfg.tau2, self.state.cfg.tau3
        with torch.no_grad():
            local, _, _ = self.state.model.encode_texts(batch)
            scores = [float(local_alignment(local[i, :1], img, tau2, tau3).match_score)
                      for i in range(len(sentences))]
        return np.asarray(scores)

    def match_probability(self, image, sentences):
        if not sentences:
            return np.zeros(0)
        img = self._image_local(image)
        ids = sentence_ids([self.state.split_text([s]).token_ids for s in sentences])
        with torch.no_grad():
            logits = self.state.model.itm_logits(img.expand(len(sentences), -1, -1), ids)
        return logits.softmax(-1)[:, 0].double().numpy()


class MockScorer:
    """Fixed lookup tables ``sentence -> similarity`` and ``sentence -> ITM probability``."""

    def __init__(self, similarity: dict[str, float], itm: dict[str, float]):
        self.sim_table = dict(similarity)
        self.itm_table = dict(itm)

    @classmethod
    def load(cls, path: str | Path) -> MockScorer:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["similarity"], data["itm"])

    def _lookup(self, table, sentences, what):
        try:
            return np.asarray([table[s] for s in sentences], dtype=np.float64)
        except KeyError as e:
            raise KeyError(f"mock {what} table has no entry for {e.args[0]!r}") from None

    def similarity(self, image, sentences):
        return self._lookup(self.sim_table, sentences, "similarity")

    def match_probability(self, image, sentences):
        return self._lookup(self.itm_table, sentences, "itm")


def score_sentence(image, sentence: str, state: ModelState) -> float:
    return float(ModelScorer(state).similarity(image, [sentence])[0])


@dataclass
class SentenceGroup:
    kind: str                 # original | positive | negative
    disease: str | None
    texts: list[str]
    representative: str
    position: int             # index in assembly order, used for tie-breaking
    scores: list[float] | None = None

    @property
    def ss(self) -> float:
        if not self.scores:
            raise ValueError("group has not been scored")
        return float(np.mean(self.scores))

    @property
    def label(self) -> str:
        return "original" if self.kind == "original" else f"{self.kind}({self.disease})"


@dataclass
class Provenance:
    disease: str
    kind: str
    group_rank: int
    similarity: float
    itm_probability: float


@dataclass
class RefinedSentence:
    original: str
    supplement: str | None = None
    provenance: Provenance | None = None


@dataclass
class RefinedReport:
    sentences: list[RefinedSentence]
    global_negatives: list[tuple[str, float]] = field(default_factory=list)
    detected_diseases: set[str] = field(default_factory=set)

    def render(self) -> str:
        parts = []
        for s in self.sentences:
            parts.append(s.original)
            if s.supplement is not None:
                parts.append(f"({s.supplement})")
        parts.extend(text for text, _ in self.global_negatives)
        return " ".join(parts)

    def training_sentences(self) -> list[str]:
        out = []
        for s in self.sentences:
            out.append(s.original)
            if s.supplement is not None:
                out.append(s.supplement)
        out.extend(text for text, _ in self.global_negatives)
        return out

    def to_record(self, sample_id: str) -> dict:
        return {
            "sample_id": sample_id,
            "refined": True,
            "refined_text": self.render(),
            "sentences": [{"original": s.original, "supplement": s.supplement,
                           "provenance": asdict(s.provenance) if s.provenance else None}
                          for s in self.sentences],
            "global_negatives": [{"text": t, "score": sc} for t, sc in self.global_negatives],
            "detected_diseases": sorted(self.detected_diseases),
        }


@dataclass(frozen=True)
class RefineConfig:
    itm_threshold: float = 0.5
    policy: str = "manual_template"
    n_global_negatives: int = 3

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if not 0.0 <= self.itm_threshold <= 1.0:
            raise ValueError("itm_threshold must be in [0, 1]")


def detect_keywords(sentence: str, index: dict[str, list[str]]) -> set[str]:
    low = sentence.lower()
    return {d for kw, ds in index.items() if kw in low for d in ds}


def assemble_groups(sentence: str, detected: set[str], d: ClinicalDictionary) -> list[SentenceGroup]:
    groups = [SentenceGroup("original", None, [sentence], sentence, 0)]
    for name in d.names:
        if name not in detected:
            continue
        e = d[name]
        groups.append(SentenceGroup("positive", name, list(e.positives), e.positives[0], len(groups)))
        groups.append(SentenceGroup("negative", name, list(e.negatives), e.negatives[0], len(groups)))
    return groups


def score_groups(groups: list[SentenceGroup], image, scorer: Scorer) -> None:
    texts = list(dict.fromkeys(t for g in groups for t in g.texts))
    table = dict(zip(texts, scorer.similarity(image, texts).tolist()))
    for g in groups:
        g.scores = [table[t] for t in g.texts]


def order_groups(groups: list[SentenceGroup]) -> list[SentenceGroup]:
    """Sort groups by mean score (desc, stable on assembly position) and the
    sentences inside each group by score (desc, then text)."""
    out = []
    for g in sorted(groups, key=lambda g: (-g.ss, g.position)):
        pairs = sorted(zip(g.texts, g.scores), key=lambda p: (-p[1], p[0]))
        out.append(SentenceGroup(g.kind, g.disease, [p[0] for p in pairs], g.representative,
                                 g.position, [p[1] for p in pairs]))
    return out


def select_supplement(ordered: list[SentenceGroup], image, scorer: Scorer,
                      itm_threshold: float = 0.5, policy: str = "manual_template"):
    """Return ``(supplement_text, Provenance)`` or ``None``."""
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    originals = [i for i, g in enumerate(ordered) if g.kind == "original"]
    if len(originals) != 1:
        raise ValueError("ordered groups must contain exactly one original group")
    p = originals[0]
    candidates = [1] if p == 0 else list(range(p))
    for rank in candidates:
        if rank >= len(ordered):
            break
        g = ordered[rank]
        prob = float(scorer.match_probability(image, [g.representative])[0])
        if prob >= itm_threshold:
            if policy == "manual_template":
                text = g.representative
                sim = g.scores[g.texts.index(text)]
            else:
                text, sim = g.texts[0], g.scores[0]
            return text, Provenance(g.disease, g.kind, rank + 1, float(sim), prob)
    return None


def append_global_negatives(detected: set[str], d: ClinicalDictionary, image, scorer: Scorer,
                            k: int = 3) -> list[tuple[str, float]]:
    names = [n for n in d.names if n not in detected]
    if not names or k <= 0:
        return []
    templates = [d[n].negative_template for n in names]
    scores = scorer.similarity(image, templates).tolist()
    order = sorted(range(len(names)), key=lambda i: (-scores[i], i))[:k]
    return [(templates[i], float(scores[i])) for i in order]


def refine_report(image, report: str, d: ClinicalDictionary, scorer: Scorer,
                  config: RefineConfig = RefineConfig(),
                  index: dict[str, list[str]] | None = None) -> RefinedReport:
    index = index if index is not None else keyword_index(d)
    detected_all: set[str] = set()
    refined = []
    for sentence in split_sentences(report):
        detected = detect_keywords(sentence, index)
        detected_all |= detected
        if not detected:
            refined.append(RefinedSentence(sentence))
            continue
        groups = assemble_groups(sentence, detected, d)
        score_groups(groups, image, scorer)
        choice = select_supplement(order_groups(groups), image, scorer,
                                   config.itm_threshold, config.policy)
        if choice is None:
            refined.append(RefinedSentence(sentence))
        else:
            refined.append(RefinedSentence(sentence, choice[0], choice[1]))
    negs = append_global_negatives(detected_all, d, image, scorer, config.n_global_negatives)
    return RefinedReport(refined, negs, detected_all)


def select_for_refinement(n: int, ratio: float, seed: int) -> set[int]:
    """Indices of the first floor(ratio * n) samples of a seeded shuffle."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("refinement ratio must be in [0, 1]")
    k = int(np.floor(ratio * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return set(perm[:k].tolist())
