"""Toy vision-encoder/text-decoder backbone and its tokenizer.

Desk-scale stand-in for a pretrained chart model: the "image" is a patch
grid featurized straight from the scene's detections (class overlap, mark
magnitude, a small OCR hash), the decoder is a small causal transformer
with cross-attention over the patch states. The decoder always consumes a
fixed-width soft-prompt prefix ahead of the text tokens.
"""

import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoders import stub_embed
from .scene import ChartScene, MARK_CLASSES

PAD, SEP, EOS, UNK = "<pad>", "<sep>", "<eos>", "<unk>"
_FALLBACK_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789.-%"
_OCR_HASH_SEED = 7350021


class BackboneError(ValueError):
    pass


_TOKEN_RE = re.compile(r"[\w.%-]+|[^\w\s]")


def _words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower().strip())


class Tokenizer:
    """Word-level vocabulary over the training corpus with character
    fallback pieces ("##x" continues the previous piece without a space)."""

    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        self.pad_id = self.index[PAD]
        self.sep_id = self.index[SEP]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    @classmethod
    def from_corpus(cls, texts) -> "Tokenizer":
        words = sorted({w for t in texts for w in _words(t)})
        pieces = [c for c in _FALLBACK_CHARS] + ["##" + c for c in _FALLBACK_CHARS]
        vocab = [PAD, SEP, EOS, UNK] + pieces
        seen = set(vocab)
        vocab.extend(w for w in words if w not in seen)
        return cls(vocab)

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in _words(text):
            if w in self.index:
                ids.append(self.index[w])
            elif all(c in _FALLBACK_CHARS for c in w):
                ids.append(self.index[w[0]])
                ids.extend(self.index["##" + c] for c in w[1:])
            else:
                ids.append(self.unk_id)
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            tok = self.vocab[int(i)]
            if tok in (PAD, SEP, EOS, UNK):
                continue
            if tok.startswith("##") and out:
                out[-1] += tok[2:]
            else:
                out.append(tok)
        return " ".join(out)


def scene_patch_features(scene: ChartScene, cls_vocab, hash_dim: int = 4) -> np.ndarray:
    """Featurize a scene onto its patch grid (no rasterization).

    Per cell: overlap fraction per object class, mean normalized mark value,
    and an ``hash_dim``-wide hash of overlapping OCR strings. This is what
    the toy vision encoder sees in place of pixels.
    """
    rows, cols = scene.grid_shape
    p = scene.patch_size
    cls_idx = {c: i for i, c in enumerate(cls_vocab)}
    n_cls = len(cls_vocab)
    feats = np.zeros((rows * cols, n_cls + 1 + hash_dim))
    mark_vals = [o.value for o in scene.objects
                 if o.cls in MARK_CLASSES and o.value is not None]
    vmax = max(mark_vals) if mark_vals else 1.0
    for obj in scene.objects:
        b = obj.bbox
        # nominal 1px thickness so degenerate boxes still leave a trace
        x0, x1 = (b.x0, max(b.x1, b.x0 + 1.0))
        y0, y1 = (b.y0, max(b.y1, b.y0 + 1.0))
        text = " ".join(obj.ocr_texts)
        h = stub_embed(text, hash_dim, _OCR_HASH_SEED) if text else None
        for r in range(max(0, int(y0 // p)), min(rows, int(np.ceil(y1 / p)))):
            for c in range(max(0, int(x0 // p)), min(cols, int(np.ceil(x1 / p)))):
                ow = max(0.0, min(x1, (c + 1) * p) - max(x0, c * p))
                oh = max(0.0, min(y1, (r + 1) * p) - max(y0, r * p))
                frac = (ow * oh) / (p * p)
                if frac <= 0:
                    continue
                cell = r * cols + c
                feats[cell, cls_idx[obj.cls]] += frac
                if obj.cls in MARK_CLASSES and obj.value is not None:
                    feats[cell, n_cls] += frac * obj.value / vmax
                if h is not None:
                    feats[cell, n_cls + 1:] += frac * h
    np.clip(feats[:, :n_cls], 0.0, 1.0, out=feats[:, :n_cls])
    return feats


@dataclass
class BackboneConfig:
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 256
    patch_in_dim: int = 14
    n_patches: int = 64
    vocab_size: int = 0
    n_prompt_slots: int = 36
    max_text_len: int = 64


class ToyBackbone(nn.Module):
    """Patch-grid transformer encoder + causal text decoder with a soft
    prompt prefix of fixed width."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_in_dim, cfg.d_model)
        self.enc_pos = nn.Parameter(torch.zeros(cfg.n_patches, cfg.d_model))
        enc_layer = nn.TransformerEncoderLayer(
            cfg.d_model, cfg.n_heads, cfg.ffn_dim, dropout=0.0,
            activation="gelu", batch_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.n_enc_layers)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.dec_pos = nn.Parameter(
            torch.zeros(cfg.n_prompt_slots + cfg.max_text_len, cfg.d_model))
        dec_layer = nn.TransformerDecoderLayer(
            cfg.d_model, cfg.n_heads, cfg.ffn_dim, dropout=0.0,
            activation="gelu", batch_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.n_dec_layers)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self._reset_positions()

    def _reset_positions(self):
        nn.init.normal_(self.enc_pos, std=0.02)
        nn.init.normal_(self.dec_pos, std=0.02)

    def encode_patches(self, patch_feats: torch.Tensor) -> torch.Tensor:
        """(B, P, d_in) patch features -> (B, P, d_model) hidden states."""
        if patch_feats.shape[1] != self.cfg.n_patches:
            raise BackboneError(
                f"expected {self.cfg.n_patches} patches, got {patch_feats.shape[1]}")
        x = self.patch_proj(patch_feats) + self.enc_pos
        return self.encoder(x)

    def decode(self, prompt: torch.Tensor, token_ids: torch.Tensor,
               memory: torch.Tensor, pad_mask: torch.Tensor | None = None
               ) -> torch.Tensor:
        """Run the decoder over [prompt slots || token embeddings].

        Returns logits of shape (B, n_prompt_slots + T, vocab). Positions
        are shared across the concatenation; loss masking is the caller's
        job.
        """
        b, s, _ = prompt.shape
        if s != self.cfg.n_prompt_slots:
            raise BackboneError(
                f"prompt has {s} slots, expected {self.cfg.n_prompt_slots}")
        t = token_ids.shape[1]
        if t > self.cfg.max_text_len:
            raise BackboneError(
                f"text length {t} exceeds configured max {self.cfg.max_text_len}")
        length = s + t
        x = torch.cat([prompt, self.tok_emb(token_ids)], dim=1)
        x = x + self.dec_pos[:length]
        causal = torch.triu(
            torch.ones(length, length, dtype=torch.bool, device=x.device), 1)
        key_pad = None
        if pad_mask is not None:
            key_pad = torch.cat(
                [torch.zeros(b, s, dtype=torch.bool, device=x.device), pad_mask],
                dim=1)
        h = self.decoder(tgt=x, memory=memory, tgt_mask=causal,
                         tgt_key_padding_mask=key_pad)
        logits = self.lm_head(h)
        assert logits.shape[1] == self.cfg.n_prompt_slots + t
        return logits
