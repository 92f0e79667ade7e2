"""Zero-shot classification (AUC) and phrase grounding (IoU, CNR)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import CorpusSample
from .dictionary import ClinicalDictionary
from .encoders import ModelState, TextBatch
from .refinement import ModelScorer, Scorer

CNR_VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class GroundingAnnotation:
    sample_id: str
    phrase: str
    bbox: tuple[int, int, int, int]

    def validate(self, shape) -> None:
        h, w = shape
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"{self.sample_id}: bbox {self.bbox} invalid for {h}x{w} image")


def load_annotations(path: str | Path) -> list[GroundingAnnotation]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(GroundingAnnotation(r["sample_id"], r["phrase"], tuple(r["bbox"])))
    return out


def zero_shot_classify(image, disease: str, d: ClinicalDictionary,
                       scorer: Scorer | ModelState) -> float:
    """Positive-template similarity minus negative-template similarity."""
    if disease not in d:
        raise KeyError(f"disease {disease!r} not in dictionary")
    if isinstance(scorer, ModelState):
        scorer = ModelScorer(scorer)
    e = d[disease]
    pos, neg = scorer.similarity(image, [e.positive_template, e.negative_template])
    return float(pos - neg)


def compute_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def grounding_heatmap(image, phrase: str, state: ModelState) -> np.ndarray:
    """Cosine similarity of the phrase row with each patch row, upsampled to pixels."""
    if not phrase.strip():
        raise ValueError("empty phrase")
    image = np.asarray(image, dtype=np.float32)
    p = state.cfg.patch_size
    h, w = image.shape
    model = state.model
    model.eval()
    with torch.no_grad():
        img_local, _ = model.encode_images(torch.as_tensor(image, dtype=model.dtype)[None])
        txt_local, _, _ = model.encode_texts(TextBatch([state.split_text([phrase])]))
        sims = (img_local[0, 1:] @ txt_local[0, 0]).double().numpy()
    grid = sims.reshape(h // p, w // p)
    return np.repeat(np.repeat(grid, p, axis=0), p, axis=1)


def _bbox_mask(shape, bbox) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def compute_cnr(saliency: np.ndarray, bbox) -> float:
    """|mu_in - mu_out| / sqrt((var_in + var_out) / 2), variance floored at 1e-8."""
    saliency = np.asarray(saliency, dtype=np.float64)
    GroundingAnnotation("", "", tuple(bbox)).validate(saliency.shape)
    inside = _bbox_mask(saliency.shape, bbox)
    if inside.all():
        raise ValueError("bbox covers the whole map; CNR needs pixels outside it")
    a, b = saliency[inside], saliency[~inside]
    contrast = abs(a.mean() - b.mean())
    if contrast == 0:
        return 0.0
    return float(contrast / np.sqrt(max((a.var() + b.var()) / 2, CNR_VARIANCE_FLOOR)))


def compute_iou(saliency: np.ndarray, bbox, threshold_quantile: float = 0.9) -> float:
    """IoU of the bbox with the map binarized at its own quantile (order statistic)."""
    if not 0 < threshold_quantile < 1:
        raise ValueError("threshold_quantile must be in (0, 1)")
    saliency = np.asarray(saliency, dtype=np.float64)
    GroundingAnnotation("", "", tuple(bbox)).validate(saliency.shape)
    thr = np.quantile(saliency, threshold_quantile, method="higher")
    mask = saliency >= thr
    box = _bbox_mask(saliency.shape, bbox)
    union = (mask | box).sum()
    return float((mask & box).sum() / union)


def evaluate_zero_shot(samples: Sequence[CorpusSample], diseases: Sequence[str],
                       d: ClinicalDictionary, scorer: Scorer | ModelState) -> dict:
    if isinstance(scorer, ModelState):
        scorer = ModelScorer(scorer)
    per = {}
    for name in diseases:
        scores = [zero_shot_classify(s.image, name, d, scorer) for s in samples]
        labels = [bool(s.labels[name]) for s in samples]
        per[name] = compute_auc(scores, labels)
    return {"per_disease_auc": per, "mean_auc": float(np.mean(list(per.values())))}


def evaluate_grounding(samples: Sequence[CorpusSample], annotations: Sequence[GroundingAnnotation],
                       state: ModelState, threshold_quantile: float = 0.9,
                       heatmap_dir: str | Path | None = None) -> dict:
    by_id = {s.sample_id: s for s in samples}
    ious, cnrs, inside_wins = [], [], []
    for k, ann in enumerate(annotations):
        s = by_id.get(ann.sample_id)
        if s is None:
            raise KeyError(f"annotation refers to unknown sample {ann.sample_id!r}")
        ann.validate(s.image.shape)
        heat = grounding_heatmap(s.image, ann.phrase, state)
        ious.append(compute_iou(heat, ann.bbox, threshold_quantile))
        cnrs.append(compute_cnr(heat, ann.bbox))
        inside = _bbox_mask(heat.shape, ann.bbox)
        inside_wins.append(bool(heat[inside].mean() > heat[~inside].mean()))
        if heatmap_dir is not None:
            write_pgm(Path(heatmap_dir) / f"{k:04d}_{ann.sample_id}.pgm", heat)
    return {"mean_iou": float(np.mean(ious)), "mean_cnr": float(np.mean(cnrs)),
            "inside_gt_outside_rate": float(np.mean(inside_wins)), "n_annotations": len(ious)}


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Binary 8-bit PGM of a min-max scaled map."""
    path.parent.mkdir(parents=True, exist_ok=True)
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    img = np.zeros(v.shape, np.uint8) if span == 0 else np.round(255 * (v - v.min()) / span).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
