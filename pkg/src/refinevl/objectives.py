"""Training objectives: global and local contrastive losses, ITM and MLM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class BatchRepr:
    """Encoded batch; pair i is (image i, text i).

    ``text_local`` is padded to the longest report and ``text_mask`` marks
    real sentence rows.
    """
    image_local: torch.Tensor   # (N, K_v, C)
    image_global: torch.Tensor  # (N, C)
    text_local: torch.Tensor    # (N, S, C)
    text_mask: torch.Tensor     # (N, S) bool
    text_global: torch.Tensor   # (N, C)

    def __post_init__(self):
        n = self.image_global.shape[0]
        if n < 1 or self.text_global.shape[0] != n:
            raise ValueError("batch must hold N >= 1 paired images and texts")
        if self.image_local.shape[-1] != self.text_local.shape[-1]:
            raise ValueError("image and text embedding widths differ")


@dataclass
class AlignmentResult:
    similarity: torch.Tensor        # (K_t, K_v)
    attention: torch.Tensor         # (K_t, K_v)
    context_enhanced: torch.Tensor  # (K_t, C)
    match_score: torch.Tensor       # scalar


def _check_tau(**taus):
    for name, t in taus.items():
        if not t > 0:
            raise ValueError(f"{name} must be positive, got {t}")


def _symmetric_infonce(logits: torch.Tensor) -> torch.Tensor:
    # logits[i, j] scores image i against text j; both directions summed
    target = torch.arange(logits.shape[0])
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def global_contrastive_loss(batch: BatchRepr, tau1: float) -> torch.Tensor:
    _check_tau(tau1=tau1)
    v = F.normalize(batch.image_global, dim=-1)
    t = F.normalize(batch.text_global, dim=-1)
    return _symmetric_infonce(v @ t.T / tau1)


def local_alignment(text_local: torch.Tensor, image_local: torch.Tensor,
                    tau2: float, tau3: float) -> AlignmentResult:
    _check_tau(tau2=tau2, tau3=tau3)
    if text_local.shape[0] < 1 or image_local.shape[0] < 1:
        raise ValueError("need at least one sentence and one image row")
    s = text_local @ image_local.T
    a = torch.softmax(s / tau2, dim=-1)
    ctx = a @ image_local
    dots = (ctx * text_local).sum(-1)
    # a single sentence reduces to its own dot product; skip the lossy /tau3*tau3 round trip
    m = dots[0] if dots.shape[0] == 1 else tau3 * torch.logsumexp(dots / tau3, dim=0)
    return AlignmentResult(s, a, ctx, m)


def match_matrix(image_local: torch.Tensor, text_local: torch.Tensor,
                 text_mask: torch.Tensor, tau2: float, tau3: float) -> torch.Tensor:
    """Matching score M for every (image i, text j) pair -> (N_img, N_txt)."""
    _check_tau(tau2=tau2, tau3=tau3)
    s = torch.einsum("jsc,ikc->ijsk", text_local, image_local)
    a = torch.softmax(s / tau2, dim=-1)
    ctx = torch.einsum("ijsk,ikc->ijsc", a, image_local)
    dots = (ctx * text_local[None]).sum(-1) / tau3
    dots = dots.masked_fill(~text_mask[None], float("-inf"))
    return tau3 * torch.logsumexp(dots, dim=-1)


def local_contrastive_loss(batch: BatchRepr, tau2: float, tau3: float) -> torch.Tensor:
    m = match_matrix(batch.image_local, batch.text_local, batch.text_mask, tau2, tau3)
    return _symmetric_infonce(m / tau2)


def itm_sample_negatives(reports: Sequence[Sequence], rng: np.random.Generator):
    """For each image i pick one sentence from a uniformly chosen report j != i.

    Returns ``(i, j, sentence_index)`` triples. No hard-negative mining.
    """
    n = len(reports)
    if n < 2:
        raise ValueError("negative sampling needs at least two samples in the batch")
    out = []
    for i in range(n):
        j = int(rng.integers(n - 1))
        j += j >= i
        out.append((i, j, int(rng.integers(len(reports[j])))))
    return out


def itm_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy over (match, no-match) logit pairs; label True = match."""
    labels = torch.as_tensor(labels, dtype=torch.bool)
    logits = torch.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} vs {labels.shape[0]} labels")
    return F.cross_entropy(logits, (~labels).long())


def mlm_loss(token_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if targets.numel() == 0:
        return torch.zeros((), dtype=token_logits.dtype)
    return F.cross_entropy(token_logits, targets)


def total_loss(l_g, l_l, l_itm, l_mlm):
    return l_g + l_l + l_itm + l_mlm
