"""Supervised / instance-level contrastive losses and the Stage I blend.

The blended objective is

    total = lam * L_contrastive + (1 - lam) * L_distill

where the contrastive slot is filled per training strategy: supervised
contrastive (supcon*), instance discrimination over two views (unsup*), or
plain cross-entropy through an auxiliary head (sup*). Strategies without a
"-distill" suffix drop the distillation term (effective lam of 1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import (
    BatchTooSmallError,
    ConfigError,
    NoPositivePairsError,
    ShapeMismatchError,
)
from .relational import (
    ArrayLike,
    EmbeddingMatrix,
    _check_relational_inputs,
    _is_torch,
    _tensor,
    _unit_rows_unchecked,
    distillation_loss,
)

STRATEGIES = ("sup", "sup-distill", "unsup", "unsup-distill", "supcon", "supcon-distill")


def validate_strategy(strategy: str) -> str:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return strategy


def strategy_uses_distillation(strategy: str) -> bool:
    return validate_strategy(strategy).endswith("-distill")


def strategy_uses_labels(strategy: str) -> bool:
    return validate_strategy(strategy).startswith(("sup", "supcon"))


@dataclass(frozen=True)
class LabeledBatch:
    """Student embeddings of a minibatch plus their class labels."""

    embeddings: EmbeddingMatrix
    labels: tuple

    def __post_init__(self):
        emb = self.embeddings
        if not isinstance(emb, EmbeddingMatrix):
            emb = EmbeddingMatrix(emb)
            object.__setattr__(self, "embeddings", emb)
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) != emb.n_samples:
            raise ShapeMismatchError(
                f"{len(labels)} labels for {emb.n_samples} embedding rows"
            )

    @property
    def n_samples(self) -> int:
        return self.embeddings.n_samples


@dataclass
class SupConResult:
    """Supervised contrastive loss with anchor bookkeeping."""

    value: Union[float, torch.Tensor]
    anchors_used: int
    anchors_skipped: int

    def __float__(self):
        return float(self.value)


def _supcon_core(z: torch.Tensor, labels: Sequence, tau: float, reduction: str):
    """Shared math for supcon and the instance-discrimination variant.

    ``z`` holds raw (unnormalized) embeddings; normalization happens here.
    Returns (loss tensor, anchors_used, anchors_skipped).
    """
    n = int(z.shape[0])
    _check_relational_inputs(n, tau)
    zh = _unit_rows_unchecked(z)
    logits = (zh @ zh.T) / tau
    eye = torch.eye(n, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    log_prob = torch.log_softmax(logits, dim=1)

    lab = np.asarray(labels)
    pos_mask = torch.as_tensor(lab[:, None] == lab[None, :]) & ~eye
    pos_counts = pos_mask.sum(dim=1)
    used = pos_counts > 0
    anchors_used = int(used.sum())
    if anchors_used == 0:
        raise NoPositivePairsError("every anchor has an empty positive set")

    masked_log_prob = torch.where(pos_mask, log_prob, torch.zeros((), dtype=log_prob.dtype))
    per_anchor = -masked_log_prob.sum(dim=1) / pos_counts.clamp(min=1)
    total = per_anchor[used].sum()
    if reduction == "mean_anchors":
        total = total / anchors_used
    return total, anchors_used, n - anchors_used


def supcon_loss(
    batch: Union[LabeledBatch, ArrayLike],
    tau: float = 0.1,
    labels: Optional[Sequence] = None,
    reduction: str = "mean_anchors",
) -> SupConResult:
    """Supervised contrastive loss over a labeled batch.

    Per anchor l with non-empty positive set P(l):

        -1/|P(l)| * sum_{p in P(l)} log( exp(z_l.z_p / tau)
                                         / sum_{a != l} exp(z_l.z_a / tau) )

    Embeddings are l2-normalized internally. Anchors whose class appears
    only once in the batch are skipped and counted. The default reduction
    averages over the anchors actually used; ``"sum_anchors"`` keeps the
    plain sum.
    """
    if reduction not in ("sum_anchors", "mean_anchors"):
        raise ValueError(f"reduction must be 'sum_anchors' or 'mean_anchors', got {reduction!r}")
    if isinstance(batch, LabeledBatch):
        z, labels = _tensor(batch.embeddings), batch.labels
        torch_in = _is_torch(batch.embeddings)
    else:
        if labels is None:
            raise ConfigError("labels are required when batch is a raw embedding array")
        z = _tensor(batch)
        torch_in = _is_torch(batch)
    if len(labels) != int(z.shape[0]):
        raise ShapeMismatchError(f"{len(labels)} labels for {int(z.shape[0])} rows")
    total, used, skipped = _supcon_core(z, labels, tau, reduction)
    return SupConResult(total if torch_in else float(total), used, skipped)


def unsup_contrastive_loss(
    view_a: ArrayLike,
    view_b: ArrayLike,
    tau: float = 0.1,
    reduction: str = "mean_anchors",
) -> Union[float, torch.Tensor]:
    """Instance-discrimination loss over two aligned augmented views.

    The 2N stacked embeddings get instance ids as labels (row i of each view
    shares id i), and the supervised contrastive machinery does the rest:
    each anchor's sole positive is its paired view, the denominator runs
    over all other 2N - 1 samples.
    """
    a, b = _tensor(view_a), _tensor(view_b)
    if a.shape[0] != b.shape[0] or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"views must share shape, got {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    if int(a.shape[0]) < 2:
        raise BatchTooSmallError(f"need N >= 2 pairs, got N = {int(a.shape[0])}")
    n = int(a.shape[0])
    stacked = torch.cat([a, b], dim=0)
    ids = list(range(n)) * 2
    total, _, _ = _supcon_core(stacked, ids, tau, reduction)
    torch_in = _is_torch(view_a) or _is_torch(view_b)
    return total if torch_in else float(total)


@dataclass
class LossBreakdown:
    """Blended Stage I objective with its components and anchor counts.

    ``supcon_component`` holds whichever contrastive/supervised term the
    strategy uses (supervised contrastive, instance discrimination, or
    cross-entropy); ``lam`` is the effective blend weight, forced to 1 for
    strategies without distillation.
    """

    total: Union[float, torch.Tensor]
    supcon_component: Union[float, torch.Tensor]
    distill_component: Union[float, torch.Tensor]
    lam: float
    anchors_used: int
    anchors_skipped: int

    def __float__(self):
        return float(self.total)


def _cross_entropy(logits: torch.Tensor, labels: Sequence) -> torch.Tensor:
    lab = np.asarray(labels)
    if not np.issubdtype(lab.dtype, np.integer):
        raise ConfigError(
            "sup strategies need integer class-index labels aligned with the head's output columns"
        )
    if int(logits.shape[0]) != len(lab):
        raise ShapeMismatchError(f"{int(logits.shape[0])} logit rows for {len(lab)} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= int(logits.shape[1])):
        raise ShapeMismatchError(
            f"class index out of range for {int(logits.shape[1])} logit columns"
        )
    return torch.nn.functional.cross_entropy(logits, torch.as_tensor(lab, dtype=torch.long))


def total_stage1_loss(
    batch: Union[LabeledBatch, ArrayLike],
    teacher_views: Optional[Sequence[ArrayLike]] = None,
    lam: float = 0.75,
    tau: float = 0.1,
    strategy: str = "supcon-distill",
    *,
    labels: Optional[Sequence] = None,
    paired_view: Optional[ArrayLike] = None,
    class_logits: Optional[torch.Tensor] = None,
    reduction: str = "mean_anchors",
) -> LossBreakdown:
    """Training objective for one minibatch under any of the six strategies.

    Required side inputs per strategy: ``teacher_views`` for *-distill,
    labels for sup*/supcon*, ``paired_view`` (second augmented view) for
    unsup*, ``class_logits`` for sup*. A supcon term whose batch has no
    positive pair degrades to 0 inside blended strategies (all anchors
    counted as skipped) and raises for pure supcon.
    """
    validate_strategy(strategy)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if isinstance(batch, LabeledBatch):
        z, batch_labels = batch.embeddings, batch.labels
    else:
        z, batch_labels = batch, labels
    zt = _tensor(z)
    n = int(zt.shape[0])
    torch_in = _is_torch(z)

    with_distill = strategy_uses_distillation(strategy)
    if with_distill and not teacher_views:
        raise ConfigError(f"strategy {strategy!r} requires teacher_views")
    if strategy_uses_labels(strategy) and batch_labels is None:
        raise ConfigError(f"strategy {strategy!r} requires labels")

    anchors_used, anchors_skipped = n, 0
    zero = torch.zeros((), dtype=zt.dtype)
    if strategy.startswith("supcon"):
        try:
            sup = supcon_loss(z, tau=tau, labels=batch_labels, reduction=reduction)
            contrastive, anchors_used, anchors_skipped = sup.value, sup.anchors_used, sup.anchors_skipped
            contrastive = contrastive if torch_in else torch.as_tensor(contrastive, dtype=zt.dtype)
        except NoPositivePairsError:
            if not with_distill:
                raise
            contrastive, anchors_used, anchors_skipped = zero, 0, n
    elif strategy.startswith("unsup"):
        if paired_view is None:
            raise ConfigError(f"strategy {strategy!r} requires paired_view (second augmented view)")
        val = unsup_contrastive_loss(z, paired_view, tau=tau, reduction=reduction)
        contrastive = val if isinstance(val, torch.Tensor) else torch.as_tensor(val, dtype=zt.dtype)
    else:  # sup / sup-distill
        if class_logits is None:
            raise ConfigError(f"strategy {strategy!r} requires class_logits from the auxiliary head")
        contrastive = _cross_entropy(_tensor(class_logits), batch_labels)

    if with_distill:
        dist = distillation_loss(z, teacher_views, tau=tau, reduction=reduction)
        distill = dist.total if isinstance(dist.total, torch.Tensor) else torch.as_tensor(dist.total, dtype=zt.dtype)
        eff_lam = float(lam)
    else:
        distill = zero
        eff_lam = 1.0

    total = eff_lam * contrastive + (1.0 - eff_lam) * distill
    if torch_in:
        return LossBreakdown(total, contrastive, distill, eff_lam, anchors_used, anchors_skipped)
    return LossBreakdown(
        float(total), float(contrastive), float(distill), eff_lam, anchors_used, anchors_skipped
    )
