"""Two-iteration schedule: pretrain on raw reports, refine, fine-tune on refined reports."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import (CorpusSample, SentenceSplit, Vocabulary, build_vocab, split_sentences,
                     tokenize)
from .dictionary import ClinicalDictionary, keyword_index
from .encoders import ModelConfig, ModelState, TextBatch, sentence_ids
from .objectives import (BatchRepr, global_contrastive_loss, itm_loss, itm_sample_negatives,
                         local_contrastive_loss, mlm_loss, total_loss)
from .refinement import ModelScorer, RefineConfig, Scorer, refine_report, select_for_refinement

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iteration: int = 1
    batch_size: int = 16
    epochs: int = 5
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    optimizer_betas: tuple[float, float] = (0.9, 0.95)
    mask_ratio: float = 0.15
    temperatures: tuple[float, float, float] = (0.07, 0.07, 0.1)
    refinement_ratio: float = 1.0
    seed: int = 0
    itm_threshold: float = 0.5
    supplement_policy: str = "manual_template"
    allow_iter2_masking: bool = False
    width: int = 64
    layers: int = 2
    heads: int = 4
    proj_dim: int = 32
    patch_size: int = 8
    vocab_min_count: int = 1
    num_threads: int = 1
    align_class_row: bool = True
    image_attention_radius: int | None = 1
    dropout: float = 0.1

    def __post_init__(self):
        self.optimizer_betas = tuple(self.optimizer_betas)
        self.temperatures = tuple(self.temperatures)
        self.validate()

    def validate(self) -> None:
        if self.iteration not in (1, 2):
            raise ConfigError("iteration must be 1 or 2")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (ITM negatives need an unpaired report)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if len(self.optimizer_betas) != 2 or not all(0 <= b < 1 for b in self.optimizer_betas):
            raise ConfigError("optimizer_betas must be two values in [0, 1)")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if len(self.temperatures) != 3 or min(self.temperatures) <= 0:
            raise ConfigError("temperatures must be three positive values")
        if not 0.0 <= self.refinement_ratio <= 1.0:
            raise ConfigError("refinement_ratio must be in [0, 1]")
        if self.iteration == 2 and self.mask_ratio != 0 and not self.allow_iter2_masking:
            raise ConfigError("iteration 2 trains with mask_ratio 0; set allow_iter2_masking "
                              "to override")
        RefineConfig(self.itm_threshold, self.supplement_policy)

    @classmethod
    def desk(cls, iteration: int = 1, **overrides) -> TrainConfig:
        base = dict(iteration=1, epochs=5, learning_rate=1e-3, mask_ratio=0.15)
        if iteration == 2:
            base = dict(iteration=2, epochs=3, learning_rate=5e-5, mask_ratio=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def reference(cls, iteration: int = 1, **overrides) -> TrainConfig:
        """Pinned settings for the 500-sample synthetic acceptance runs."""
        base = dict(iteration=1, epochs=10, learning_rate=5e-4, mask_ratio=0.15)
        if iteration == 2:
            base = dict(iteration=2, epochs=3, learning_rate=2.5e-5, mask_ratio=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, iteration: int = 1, **overrides) -> TrainConfig:
        base = dict(iteration=1, batch_size=128, epochs=50, learning_rate=1.5e-4,
                    mask_ratio=0.15)
        if iteration == 2:
            base.update(iteration=2, epochs=10, learning_rate=3e-6, mask_ratio=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer_betas"] = list(self.optimizer_betas)
        d["temperatures"] = list(self.temperatures)
        return d

    def model_config(self, vocab_size: int) -> ModelConfig:
        t1, t2, t3 = self.temperatures
        return ModelConfig(vocab_size=vocab_size, patch_size=self.patch_size, width=self.width,
                           layers=self.layers, heads=self.heads, proj_dim=self.proj_dim,
                           tau1=t1, tau2=t2, tau3=t3, align_class_row=self.align_class_row,
                           image_attention_radius=self.image_attention_radius,
                           dropout=self.dropout)


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.epochs and row["epoch"] != self.epochs[-1]["epoch"] + 1:
            raise ValueError("epoch numbering must be consecutive")
        self.epochs.append(row)

    def final_loss(self) -> float:
        return self.epochs[-1]["L"]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(json.dumps(r) + "\n" for r in self.epochs), encoding="utf-8")


def _images_tensor(samples: Sequence[CorpusSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(s.image, dtype=np.float32) for s in samples]))


def batch_losses(state: ModelState, images: torch.Tensor, splits: Sequence[SentenceSplit],
                 mask_ratio: float, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """All four loss components for one batch; pair i is (images[i], splits[i])."""
    model = state.model
    tau1, tau2, tau3 = state.temperatures
    tb = TextBatch(splits, rng, mask_ratio)
    img_local, img_global = model.encode_images(images)
    txt_local, txt_global, hidden = model.encode_texts(tb)
    align = img_local if state.cfg.align_class_row else img_local[:, 1:]
    rep = BatchRepr(align, img_global, txt_local, tb.sent_mask, txt_global)
    l_g = global_contrastive_loss(rep, tau1)
    l_l = local_contrastive_loss(rep, tau2, tau3)

    # ITM: one sentence of the paired report vs one sentence of an unpaired report
    sents = [[s.token_ids[a:e] for a, e in s.sentence_boundaries] for s in splits]
    pos = [(i, int(rng.integers(len(sents[i])))) for i in range(len(splits))]
    neg = itm_sample_negatives(sents, rng)
    img_idx = [i for i, _ in pos] + [i for i, _, _ in neg]
    tokens = [sents[i][k] for i, k in pos] + [sents[j][k] for _, j, k in neg]
    logits = model.itm_logits(img_local[img_idx], sentence_ids(tokens))
    labels = [True] * len(pos) + [False] * len(neg)
    l_itm = itm_loss(logits, labels)

    mlm_logits, mlm_targets = model.mlm_logits(hidden, tb)
    l_mlm = mlm_loss(mlm_logits, mlm_targets)
    return {"L_g": l_g, "L_l": l_l, "L_itm": l_itm, "L_mlm": l_mlm,
            "L": total_loss(l_g, l_l, l_itm, l_mlm)}


def _train(state: ModelState, images: torch.Tensor, splits: list[SentenceSplit],
           config: TrainConfig, out_dir: Path | None) -> RunRecord:
    torch.set_num_threads(config.num_threads)
    torch.manual_seed(config.seed)
    model = state.model
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            betas=config.optimizer_betas, weight_decay=config.weight_decay)
    record = RunRecord()
    n = len(splits)
    start_epoch = state.meta.get("trained_epochs", 0) if config.iteration == 1 else 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, config.iteration, epoch])
        order = rng.permutation(n)
        sums = {k: 0.0 for k in ("L_g", "L_l", "L_itm", "L_mlm", "L")}
        n_batches = 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            if len(idx) < 2:
                continue
            losses = batch_losses(state, images[idx], [splits[i] for i in idx],
                                  config.mask_ratio, rng)
            if not all(torch.isfinite(v) for v in losses.values()):
                raise TrainingDiverged(
                    f"non-finite loss in iteration {config.iteration}, epoch {epoch}, batch {b}: "
                    f"{ {k: v.item() for k, v in losses.items()} }")
            opt.zero_grad()
            losses["L"].backward()
            opt.step()
            for k, v in losses.items():
                sums[k] += v.item()
            n_batches += 1
        state.meta["trained_epochs"] = state.meta.get("trained_epochs", 0) + 1
        state.meta["iteration"] = config.iteration
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
               "wall_clock_s": time.perf_counter() - t0,
               "fingerprint": state.cfg.fingerprint(), "checkpoint": None}
        if out_dir is not None:
            ckpt = out_dir / f"iter{config.iteration}_epoch{start_epoch + epoch:03d}.zip"
            state.save(ckpt)
            row["checkpoint"] = str(ckpt)
        log.info("iter %d epoch %d: L=%.4f (g=%.4f l=%.4f itm=%.4f mlm=%.4f)",
                 config.iteration, epoch, row["L"], row["L_g"], row["L_l"], row["L_itm"],
                 row["L_mlm"])
        record.append(row)
    model.eval()
    if out_dir is not None:
        state.save(out_dir / "model.zip")
        record.write(out_dir / "run.jsonl")
    return record


def train_iteration1(corpus: Sequence[CorpusSample], config: TrainConfig,
                     vocab: Vocabulary | None = None, out_dir: str | Path | None = None,
                     dictionary: ClinicalDictionary | None = None):
    """Pretrain from scratch on raw reports. Returns ``(ModelState, RunRecord)``.

    When ``dictionary`` is given its sentences join the vocabulary so refinement
    and zero-shot prompts do not collapse to unknown tokens.
    """
    if config.iteration != 1:
        raise ConfigError("train_iteration1 needs config.iteration == 1")
    if vocab is None:
        extra = dictionary.all_sentences() if dictionary is not None else ()
        vocab = build_vocab(corpus, config.vocab_min_count, extra)
    for s in corpus:
        s.validate(config.patch_size)
    state = ModelState(config.model_config(len(vocab)), vocab, seed=config.seed)
    splits = [tokenize(split_sentences(s.report), vocab) for s in corpus]
    out = _prepare_dir(out_dir)
    record = _train(state, _images_tensor(corpus), splits, config, out)
    return state, record


def training_sentences(sample: CorpusSample, record: dict | None) -> list[str]:
    if record is None or not record.get("refined"):
        return split_sentences(sample.report)
    out = []
    for s in record["sentences"]:
        out.append(s["original"])
        if s["supplement"] is not None:
            out.append(s["supplement"])
    out.extend(g["text"] for g in record["global_negatives"])
    return out


def train_iteration2(state: ModelState, corpus: Sequence[CorpusSample], refined: Sequence[dict],
                     config: TrainConfig, out_dir: str | Path | None = None):
    """Fine-tune a copy of the iteration-1 state on refined reports."""
    if config.iteration != 2:
        raise ConfigError("train_iteration2 needs config.iteration == 2")
    state.check_ready()
    by_id = {r["sample_id"]: r for r in refined}
    missing = [s.sample_id for s in corpus if s.sample_id not in by_id]
    if missing:
        raise ConfigError(f"refined corpus lacks {len(missing)} samples, e.g. {missing[0]}")
    new = ModelState(state.cfg, state.vocab, model=copy.deepcopy(state.model),
                     meta=dict(state.meta))
    splits = [tokenize(training_sentences(s, by_id[s.sample_id]), new.vocab) for s in corpus]
    record = _train(new, _images_tensor(corpus), splits, config, _prepare_dir(out_dir))
    return new, record


def unrefined_record(sample: CorpusSample) -> dict:
    return {"sample_id": sample.sample_id, "refined": False, "refined_text": sample.report,
            "sentences": [{"original": s, "supplement": None, "provenance": None}
                          for s in split_sentences(sample.report)],
            "global_negatives": [], "detected_diseases": []}


def refine_corpus(corpus: Sequence[CorpusSample], scorer: Scorer | ModelState,
                  dictionary: ClinicalDictionary, config: TrainConfig,
                  out_dir: str | Path | None = None) -> list[dict]:
    """Refine a seeded ``refinement_ratio`` fraction of the corpus; the rest keep raw text."""
    if isinstance(scorer, ModelState):
        scorer = ModelScorer(scorer)
    chosen = select_for_refinement(len(corpus), config.refinement_ratio, config.seed)
    rcfg = RefineConfig(config.itm_threshold, config.supplement_policy)
    index = keyword_index(dictionary)
    records = []
    for i, s in enumerate(corpus):
        if i in chosen:
            rep = refine_report(s.image, s.report, dictionary, scorer, rcfg, index)
            records.append(rep.to_record(s.sample_id))
        else:
            records.append(unrefined_record(s))
    out = _prepare_dir(out_dir)
    if out is not None:
        write_refined(records, out / "refined.jsonl")
    return records


def write_refined(records: Sequence[dict], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records),
                          encoding="utf-8")


def read_refined(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing refined corpus {path}")
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def _prepare_dir(out_dir) -> Path | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out
