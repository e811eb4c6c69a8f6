"""Contrastive alignment losses over graph node representations.

InfoNCE over paired rows: each anchor's positive is its own partner, the
negatives are every other partner in the batch. The combined variant adds
intra-modality terms that contrast each graph against an edge-dropped copy
of itself.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .graphs import PairMap


class ContrastiveError(ValueError):
    pass


@dataclass
class SimilarityConfig:
    theta: str = "cosine"  # "cosine" | "cosine-with-projection"
    tau: float = 0.5
    symmetric: bool = True
    projection: torch.nn.Module | None = None
    # When set, the cross-modal term contrasts against the augmented textual
    # representations instead of the originals.
    inter_uses_augmented: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ContrastiveError(f"tau must be > 0, got {self.tau}")
        if self.theta not in ("cosine", "cosine-with-projection"):
            raise ContrastiveError(f"unknown similarity {self.theta!r}")
        if self.theta == "cosine-with-projection" and self.projection is None:
            raise ContrastiveError("projection head required for "
                                   "cosine-with-projection")


@dataclass
class ContrastiveBatch:
    h_v: torch.Tensor
    h_t: torch.Tensor
    pairs: PairMap
    h_v_aug: torch.Tensor | None = None
    h_t_aug: torch.Tensor | None = None


def _embed(x: torch.Tensor, cfg: SimilarityConfig) -> torch.Tensor:
    if cfg.theta == "cosine-with-projection":
        x = cfg.projection(x)
    return F.normalize(x, dim=-1)


def info_nce(anchors: torch.Tensor, positives: torch.Tensor,
             cfg: SimilarityConfig) -> torch.Tensor:
    """Temperature-scaled cross-entropy against in-batch negatives.

    Row i of ``positives`` is the positive for row i of ``anchors``; the
    other positive rows act as negatives. With ``cfg.symmetric`` the loss is
    averaged with the anchor/positive roles swapped.
    """
    m = anchors.shape[0]
    if m == 0:
        raise ContrastiveError("empty batch")
    if not (torch.isfinite(anchors).all() and torch.isfinite(positives).all()):
        raise ContrastiveError("non-finite inputs")
    z_u = _embed(anchors, cfg)
    z_v = _embed(positives, cfg)
    logits = z_u @ z_v.T / cfg.tau
    target = torch.arange(m, device=logits.device)
    loss = F.cross_entropy(logits, target)
    if cfg.symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
    return loss


def inter_modal_loss(batch: ContrastiveBatch, cfg: SimilarityConfig) -> torch.Tensor:
    """Cross-modal InfoNCE over the paired per-object rows (OCR nodes never
    enter the pair map)."""
    if len(batch.pairs) == 0:
        raise ContrastiveError("empty pair map")
    h_t = batch.h_t_aug if cfg.inter_uses_augmented else batch.h_t
    if h_t is None:
        raise ContrastiveError("augmented textual representations missing")
    u = batch.h_v[batch.pairs.visual_ids()]
    v = h_t[batch.pairs.textual_ids()]
    return info_nce(u, v, cfg)


def full_loss(batch: ContrastiveBatch, cfg: SimilarityConfig) -> torch.Tensor:
    """Intra-visual + intra-textual + cross-modal contrastive loss.

    The intra terms pair each node with the same node encoded from the
    edge-dropped graph (all nodes, OCR leaves included).
    """
    if batch.h_v_aug is None or batch.h_t_aug is None:
        raise ContrastiveError("full loss needs augmented representations")
    l_v = info_nce(batch.h_v, batch.h_v_aug, cfg)
    l_t = info_nce(batch.h_t, batch.h_t_aug, cfg)
    return l_v + l_t + inter_modal_loss(batch, cfg)
