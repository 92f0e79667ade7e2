"""Image/text encoders, projection heads, ITM decoder and checkpoint I/O."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CLS, MASK, PAD, SentenceSplit, Vocabulary, tokenize


class ModelStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    patch_size: int = 8
    width: int = 64
    layers: int = 2
    heads: int = 4
    proj_dim: int = 32
    itm_layers: int = 2
    ffn_mult: int = 2
    max_sentence_len: int = 64
    tau1: float = 0.07
    tau2: float = 0.07
    tau3: float = 0.1
    align_class_row: bool = True
    dropout: float = 0.1
    # patch tokens attend to patches within this Chebyshev grid distance (None = global)
    image_attention_radius: int | None = 1

    def __post_init__(self):
        for name in ("tau1", "tau2", "tau3"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ImageRepr:
    local: torch.Tensor   # (K_v, C), row 0 is the class token
    global_: torch.Tensor  # (C,)


@dataclass
class TextRepr:
    local: torch.Tensor   # (K_t, C), one row per sentence
    global_: torch.Tensor  # (C,)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, kv_dim: int | None = None, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.drop = nn.Dropout(dropout)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(kv_dim or width, width)
        self.v = nn.Linear(kv_dim or width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x, kv, key_pad=None, blocked=None):
        b, n, w = x.shape
        h = self.heads
        q = self.q(x).view(b, n, h, -1).transpose(1, 2)
        k = self.k(kv).view(b, kv.shape[1], h, -1).transpose(1, 2)
        v = self.v(kv).view(b, kv.shape[1], h, -1).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / (q.shape[-1] ** 0.5)
        if key_pad is not None:
            att = att.masked_fill(key_pad[:, None, None, :], float("-inf"))
        if blocked is not None:
            att = att.masked_fill(blocked, float("-inf"))
        att = self.drop(att.softmax(-1))
        return self.out((att @ v).transpose(1, 2).reshape(b, n, w))


class Block(nn.Module):
    """Pre-norm transformer block; with ``kv_dim`` set it adds cross-attention."""

    def __init__(self, width, heads, ffn_mult, kv_dim=None, dropout=0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads, dropout=dropout)
        self.cross = None
        if kv_dim is not None:
            self.ln_x = nn.LayerNorm(width)
            self.ln_mem = nn.LayerNorm(kv_dim)
            self.cross = Attention(width, heads, kv_dim, dropout)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, ffn_mult * width), nn.GELU(),
                                 nn.Linear(ffn_mult * width, width), nn.Dropout(dropout))

    def forward(self, x, pad=None, memory=None, blocked=None):
        y = self.ln1(x)
        x = x + self.attn(y, y, pad, blocked)
        if self.cross is not None:
            x = x + self.cross(self.ln_x(x), self.ln_mem(memory))
        return x + self.mlp(self.ln2(x))


class TextBatch:
    """Padded token ids plus the pooling matrix that maps tokens to sentences.

    Row layout is ``[CLS] tok_1 ... tok_T [PAD]...``; positions restart at 1
    inside every sentence so a sentence encodes the same way alone or in a report.
    """

    def __init__(self, splits: Sequence[SentenceSplit], rng: np.random.Generator | None = None,
                 mask_ratio: float = 0.0):
        if not splits:
            raise ValueError("empty text batch")
        if not 0.0 <= mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        if mask_ratio > 0 and rng is None:
            raise ValueError("masking needs an rng")
        b = len(splits)
        t = 1 + max(len(s.token_ids) for s in splits)
        n_sent = max(len(s.sentences) for s in splits)
        ids = np.full((b, t), PAD, dtype=np.int64)
        pos = np.zeros((b, t), dtype=np.int64)
        pool = np.zeros((b, n_sent, t), dtype=np.float64)
        sent_mask = np.zeros((b, n_sent), dtype=bool)
        self.mlm_targets: list[list[tuple[int, int]]] = []
        for i, s in enumerate(splits):
            if not s.sentences:
                raise ValueError("empty sentence list")
            ids[i, 0] = CLS
            ids[i, 1:1 + len(s.token_ids)] = s.token_ids
            for j, (a, e) in enumerate(s.sentence_boundaries):
                pos[i, 1 + a:1 + e] = np.arange(1, e - a + 1)
                pool[i, j, 1 + a:1 + e] = 1.0 / (e - a)
                sent_mask[i, j] = True
            targets = []
            if mask_ratio > 0:
                n_tok = len(s.token_ids)
                k = max(1, int(round(mask_ratio * n_tok)))
                for p in sorted(rng.choice(n_tok, size=k, replace=False).tolist()):
                    targets.append((1 + p, int(ids[i, 1 + p])))
                    ids[i, 1 + p] = MASK
            self.mlm_targets.append(targets)
        self.ids = torch.from_numpy(ids)
        self.pos = torch.from_numpy(pos)
        self.pad = self.ids == PAD
        self.pool = torch.from_numpy(pool)
        self.sent_mask = torch.from_numpy(sent_mask)

    def flat_targets(self):
        rows, cols, labels = [], [], []
        for i, tg in enumerate(self.mlm_targets):
            for p, tok in tg:
                rows.append(i)
                cols.append(p)
                labels.append(tok)
        return (torch.tensor(rows, dtype=torch.long), torch.tensor(cols, dtype=torch.long),
                torch.tensor(labels, dtype=torch.long))


class VLModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        # image: patch embedding + class token, no position embedding
        self.patch_embed = nn.Linear(cfg.patch_size ** 2, w)
        self.img_cls = nn.Parameter(torch.randn(w) * 0.02)
        self.img_blocks = nn.ModuleList(Block(w, cfg.heads, cfg.ffn_mult, dropout=cfg.dropout)
                                         for _ in range(cfg.layers))
        self.img_ln = nn.LayerNorm(w)
        self.img_proj = nn.Linear(w, cfg.proj_dim)
        # text
        self.tok_embed = nn.Embedding(cfg.vocab_size, w)
        self.pos_embed = nn.Embedding(cfg.max_sentence_len + 1, w)
        self.txt_blocks = nn.ModuleList(Block(w, cfg.heads, cfg.ffn_mult, dropout=cfg.dropout)
                                         for _ in range(cfg.layers))
        self.txt_ln = nn.LayerNorm(w)
        self.txt_proj = nn.Linear(w, cfg.proj_dim)
        self.mlm_head = nn.Linear(w, cfg.vocab_size)
        # ITM decoder: text-encoder token states cross-attending to projected image rows
        self.dec_blocks = nn.ModuleList(Block(w, cfg.heads, cfg.ffn_mult, kv_dim=cfg.proj_dim,
                                              dropout=cfg.dropout)
                                        for _ in range(cfg.itm_layers))
        self.dec_ln = nn.LayerNorm(w)
        self.itm_head = nn.Linear(w, 2)

    @property
    def dtype(self):
        return self.patch_embed.weight.dtype

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        x = images.reshape(b, h // p, p, w // p, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, (h // p) * (w // p), p * p)

    def image_attention_mask(self, gh: int, gw: int) -> torch.Tensor | None:
        """(1 + gh*gw)^2 bool mask, True = blocked. The class token sees every
        patch; a patch sees only nearby patches, never the class token."""
        r = self.cfg.image_attention_radius
        if r is None:
            return None
        yy, xx = np.divmod(np.arange(gh * gw), gw)
        near = (np.abs(yy[:, None] - yy[None]) <= r) & (np.abs(xx[:, None] - xx[None]) <= r)
        allowed = np.ones((1 + gh * gw, 1 + gh * gw), dtype=bool)
        allowed[1:, 0] = False
        allowed[1:, 1:] = near
        return torch.from_numpy(~allowed)

    def encode_images(self, images: torch.Tensor):
        """(B, H, W) -> local (B, K_v, C) L2-normalized, global (B, C) mean of patch rows."""
        x = self.patch_embed(self.patchify(images.to(self.dtype)))
        x = torch.cat([self.img_cls.expand(x.shape[0], 1, -1), x], dim=1)
        h, w = images.shape[1:]
        blocked = self.image_attention_mask(h // self.cfg.patch_size, w // self.cfg.patch_size)
        for blk in self.img_blocks:
            x = blk(x, blocked=blocked)
        local = F.normalize(self.img_proj(self.img_ln(x)), dim=-1)
        return local, local[:, 1:].mean(dim=1)

    def _text_hidden(self, ids, pos, pad):
        x = self.tok_embed(ids) + self.pos_embed(pos)
        for blk in self.txt_blocks:
            x = blk(x, pad)
        return self.txt_ln(x)

    def encode_texts(self, batch: TextBatch):
        """Returns sentence rows (B, S, C), global (B, C) and token hidden states."""
        if int(batch.pos.max()) > self.cfg.max_sentence_len:
            raise ValueError(f"sentence longer than {self.cfg.max_sentence_len} tokens")
        hidden = self._text_hidden(batch.ids, batch.pos, batch.pad)
        sent = batch.pool.to(hidden.dtype) @ hidden
        local = F.normalize(self.txt_proj(sent), dim=-1) * batch.sent_mask[..., None]
        glob = F.normalize(self.txt_proj(hidden[:, 0]), dim=-1)
        return local, glob, hidden

    def mlm_logits(self, hidden: torch.Tensor, batch: TextBatch):
        rows, cols, labels = batch.flat_targets()
        return self.mlm_head(hidden[rows, cols]), labels

    def itm_logits(self, image_local: torch.Tensor, sent_ids: torch.Tensor) -> torch.Tensor:
        """image_local (B, K_v, C), sent_ids (B, L) starting with [CLS] -> (B, 2) logits
        ordered (match, no-match)."""
        pad = sent_ids == PAD
        pos = (torch.cumsum(~pad, dim=1) - 1).clamp(min=0)
        if int(pos.max()) > self.cfg.max_sentence_len:
            raise ValueError(f"sentence longer than {self.cfg.max_sentence_len} tokens")
        x = self._text_hidden(sent_ids, pos, pad)
        memory = image_local.to(x.dtype)
        for blk in self.dec_blocks:
            x = blk(x, pad, memory)
        return self.itm_head(self.dec_ln(x[:, 0]))


def sentence_ids(token_lists: Sequence[Sequence[int]]) -> torch.Tensor:
    """Pad single-sentence token lists to a (B, 1 + L) [CLS]-prefixed tensor."""
    width = 1 + max(len(t) for t in token_lists)
    out = torch.full((len(token_lists), width), PAD, dtype=torch.long)
    out[:, 0] = CLS
    for i, t in enumerate(token_lists):
        if not t:
            raise ValueError("sentence tokens must be non-empty")
        out[i, 1:1 + len(t)] = torch.tensor(t, dtype=torch.long)
    return out


class ModelState:
    """Trainable model + vocabulary + bookkeeping that travels with a checkpoint."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0,
                 model: VLModel | None = None, meta: dict | None = None):
        if cfg.vocab_size != len(vocab):
            raise ModelStateError(
                f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        if model is None:
            torch.manual_seed(seed)
            model = VLModel(cfg)
        self.model = model
        self.meta = {"trained_epochs": 0, "iteration": 0}
        if meta:
            self.meta.update(meta)

    @property
    def temperatures(self):
        return self.cfg.tau1, self.cfg.tau2, self.cfg.tau3

    def check_ready(self) -> None:
        if self.meta.get("trained_epochs", 0) <= 0:
            raise ModelStateError("model state is untrained; run iteration-1 training first")
        if self.meta.get("fingerprint", self.cfg.fingerprint()) != self.cfg.fingerprint():
            raise ModelStateError("checkpoint fingerprint does not match its configuration")
        if self.meta.get("vocab_sha256", self.vocab.digest()) != self.vocab.digest():
            raise ModelStateError("checkpoint vocabulary hash mismatch")

    def split_text(self, sentences: Sequence[str]) -> SentenceSplit:
        return tokenize(sentences, self.vocab)

    def save(self, path: str | Path) -> None:
        meta = dict(self.meta)
        meta.update(config=asdict(self.cfg), fingerprint=self.cfg.fingerprint(),
                    vocab_sha256=self.vocab.digest(),
                    temperatures=list(self.temperatures))
        save_checkpoint(path, self.model.state_dict(), meta, self.vocab.to_text())

    @classmethod
    def load(cls, path: str | Path) -> ModelState:
        params, meta, vocab_text = load_checkpoint(path)
        cfg = ModelConfig(**meta["config"])
        if cfg.fingerprint() != meta.get("fingerprint"):
            raise ModelStateError(f"{path}: config fingerprint mismatch")
        vocab = Vocabulary.from_text(vocab_text)
        if vocab.digest() != meta.get("vocab_sha256"):
            raise ModelStateError(f"{path}: vocabulary hash mismatch")
        model = VLModel(cfg)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
        keep = {k: v for k, v in meta.items() if k not in ("config", "temperatures")}
        return cls(cfg, vocab, model=model, meta=keep)


_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(path, state_dict, meta: dict, vocab_text: str) -> None:
    """Single zip archive: meta.json header, vocab.txt, one .npy per parameter.

    Entries carry a fixed timestamp so identical states give identical bytes.
    """
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        _zip_write(zf, "vocab.txt", vocab_text.encode("utf-8"))
        for name in sorted(state_dict):
            buf = io.BytesIO()
            np.save(buf, state_dict[name].detach().cpu().numpy(), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    params = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        vocab_text = zf.read("vocab.txt").decode("utf-8")
        for name in zf.namelist():
            if name.startswith("params/"):
                params[name[len("params/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
    return params, meta, vocab_text


# ---------------------------------------------------------------------------
# single-sample operations


def encode_image(image, state: ModelState) -> ImageRepr:
    img = torch.as_tensor(np.asarray(image), dtype=state.model.dtype)[None]
    state.model.eval()
    with torch.no_grad():
        local, glob = state.model.encode_images(img)
    return ImageRepr(local[0], glob[0])


def encode_text(split: SentenceSplit, state: ModelState, mask_ratio: float = 0.0,
                rng: np.random.Generator | None = None):
    """Encode one report; returns ``(TextRepr, mlm_targets)`` where the targets
    are ``(position, original token id)`` pairs of masked tokens."""
    if not split.sentences:
        raise ValueError("cannot encode an empty sentence list")
    batch = TextBatch([split], rng, mask_ratio)
    state.model.eval()
    with torch.no_grad():
        local, glob, _ = state.model.encode_texts(batch)
    return TextRepr(local[0, :len(split.sentences)], glob[0]), batch.mlm_targets[0]


def itm_forward(image_repr: ImageRepr, sentence_tokens: Sequence[int],
                state: ModelState) -> torch.Tensor:
    ids = sentence_ids([list(sentence_tokens)])
    state.model.eval()
    with torch.no_grad():
        return state.model.itm_logits(image_repr.local[None], ids)[0]
